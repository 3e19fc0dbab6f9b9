#include "sunet/metrics.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "sunet/image.hpp"
#include "sunet/pipeline.hpp"

namespace sunet {

namespace {

struct Planes {
  std::int64_t h = 0, w = 0, c = 0;
};

Planes image_geometry(const Tensor<float>& a, const Tensor<float>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + " shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const Shape& s = a.shape();
  if (s.size() == 3) return {s[0], s[1], s[2]};
  if (s.size() == 4 && s[0] == 1) return {s[1], s[2], s[3]};
  throw ShapeError(std::string(op) + " expects [H,W,C] or [1,H,W,C], got " + to_string(s));
}

constexpr int kWin = 11;

std::array<double, kWin> gaussian_window() {
  std::array<double, kWin> g{};
  double sum = 0;
  for (int i = 0; i < kWin; ++i) sum += g[i] = std::exp(-0.5 * std::pow((i - kWin / 2) / 1.5, 2));
  for (auto& v : g) v /= sum;
  return g;
}

// Valid-region separable Gaussian filter of an h x w plane.
std::vector<double> blur(const std::vector<double>& x, std::int64_t h, std::int64_t w) {
  static const auto g = gaussian_window();
  const std::int64_t ow = w - kWin + 1, oh = h - kWin + 1;
  std::vector<double> rows(static_cast<std::size_t>(h * ow)), out(static_cast<std::size_t>(oh * ow));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x0 = 0; x0 < ow; ++x0) {
      double s = 0;
      for (int k = 0; k < kWin; ++k) s += g[k] * x[y * w + x0 + k];
      rows[y * ow + x0] = s;
    }
  for (std::int64_t y0 = 0; y0 < oh; ++y0)
    for (std::int64_t x0 = 0; x0 < ow; ++x0) {
      double s = 0;
      for (int k = 0; k < kWin; ++k) s += g[k] * rows[(y0 + k) * ow + x0];
      out[y0 * ow + x0] = s;
    }
  return out;
}

double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, std::int64_t h, std::int64_t w) {
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto ma = blur(a, h, w), mb = blur(b, h, w), saa = blur(aa, h, w), sbb = blur(bb, h, w), sab = blur(ab, h, w);
  double total = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const double va = saa[i] - ma[i] * ma[i], vb = sbb[i] - mb[i] * mb[i], cov = sab[i] - ma[i] * mb[i];
    total += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(ma.size());
}

std::vector<double> plane(const Tensor<float>& t, const Planes& g, std::int64_t ch) {
  std::vector<double> out(static_cast<std::size_t>(g.h * g.w));
  const auto d = t.data();
  for (std::int64_t i = 0; i < g.h * g.w; ++i) out[i] = d[i * g.c + ch];
  return out;
}

std::vector<double> luma(const Tensor<float>& t, const Planes& g) {
  if (g.c != 3) throw ShapeError("luminance SSIM needs 3 channels, got " + std::to_string(g.c));
  std::vector<double> out(static_cast<std::size_t>(g.h * g.w));
  const auto d = t.data();
  for (std::int64_t i = 0; i < g.h * g.w; ++i) out[i] = 0.299 * d[3 * i] + 0.587 * d[3 * i + 1] + 0.114 * d[3 * i + 2];
  return out;
}

std::string format_db(double v) {
  if (std::isinf(v)) return "inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

nlohmann::json number_or_inf(double v) { return std::isinf(v) ? nlohmann::json("inf") : nlohmann::json(v); }

double read_number(const nlohmann::json& j) {
  if (j.is_string() && j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
  return j.get<double>();
}

}  // namespace

double psnr(const Tensor<float>& a, const Tensor<float>& b) {
  image_geometry(a, b, "psnr");
  const auto da = a.data(), db = b.data();
  double se = 0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = static_cast<double>(da[i]) - db[i];
    se += d * d;
  }
  if (se == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(da.size()) / se);
}

double ssim(const Tensor<float>& a, const Tensor<float>& b, SsimMode mode) {
  const Planes g = image_geometry(a, b, "ssim");
  if (g.h < kWin || g.w < kWin)
    throw ShapeError("ssim needs images of at least 11x11, got " + std::to_string(g.h) + "x" + std::to_string(g.w));
  if (mode == SsimMode::Luminance) return ssim_plane(luma(a, g), luma(b, g), g.h, g.w);
  double total = 0;
  for (std::int64_t ch = 0; ch < g.c; ++ch) total += ssim_plane(plane(a, g, ch), plane(b, g, ch), g.h, g.w);
  return total / static_cast<double>(g.c);
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os << "dataset: " << dataset << "  model: " << model << '\n';
  os << std::left << std::setw(8) << "sigma" << std::right << std::setw(12) << "PSNR(dB)" << std::setw(10) << "SSIM"
     << std::setw(8) << "images" << '\n';
  for (const auto& e : entries) {
    std::ostringstream sig, ss;
    sig << e.sigma;
    ss << std::fixed << std::setprecision(4) << e.ssim;
    os << std::left << std::setw(8) << sig.str() << std::right << std::setw(12) << format_db(e.psnr) << std::setw(10)
       << ss.str() << std::setw(8) << e.count << '\n';
  }
  return os.str();
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : entries)
    rows.push_back({{"sigma", e.sigma}, {"psnr", number_or_inf(e.psnr)}, {"ssim", e.ssim}, {"count", e.count}});
  return {{"dataset", dataset}, {"model", model}, {"entries", rows}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.model = j.at("model").get<std::string>();
  for (const auto& e : j.at("entries"))
    r.entries.push_back({e.at("sigma").get<double>(), read_number(e.at("psnr")), e.at("ssim").get<double>(),
                         e.at("count").get<std::int64_t>()});
  return r;
}

void EvalReport::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << std::setprecision(17) << to_json().dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write report " + path.string());
}

EvalReport EvalReport::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report " + path.string());
  return from_json(nlohmann::json::parse(in));
}

Tensor<float> identity_denoiser(const Tensor<float>& noisy) { return noisy; }

std::uint64_t eval_noise_seed(std::uint64_t seed, const std::string& relpath, double sigma) {
  return derive_seed(seed, {fnv1a(relpath), std::bit_cast<std::uint64_t>(sigma)});
}

EvalReport evaluate_dataset(const Denoiser& denoiser, const std::filesystem::path& dir,
                            const std::vector<double>& sigmas, std::uint64_t seed, const std::string& model_name,
                            SsimMode mode) {
  if (sigmas.empty()) throw std::invalid_argument("evaluation needs at least one sigma");
  std::vector<std::filesystem::path> files;
  try {
    files = list_pngs(dir);
  } catch (const ImageError& e) {
    throw DatasetError(e.what());
  }
  std::vector<EvalEntry> acc(sigmas.size());
  for (std::size_t s = 0; s < sigmas.size(); ++s) acc[s].sigma = sigmas[s];
  for (const auto& f : files) {
    Tensor<float> clean;
    try {
      clean = load_png(f);
    } catch (const ImageError& e) {
      std::fprintf(stderr, "warning: skipping unreadable image: %s\n", e.what());
      continue;
    }
    const std::string rel = std::filesystem::relative(f, dir).generic_string();
    for (std::size_t s = 0; s < sigmas.size(); ++s) {
      const auto noisy = add_awgn(clean, sigmas[s], eval_noise_seed(seed, rel, sigmas[s]));
      auto out = denoiser(noisy);
      if (out.shape() != clean.shape())
        throw ShapeError("denoiser changed the shape of " + rel + ": " + to_string(out.shape()));
      for (auto& v : out.data()) v = std::clamp(v, 0.0f, 1.0f);
      acc[s].psnr += psnr(out, clean);
      acc[s].ssim += ssim(out, clean, mode);
      ++acc[s].count;
    }
  }
  if (acc.front().count == 0) throw DatasetError("no decodable PNG images under " + dir.string());
  for (auto& e : acc) {
    e.psnr /= static_cast<double>(e.count);
    e.ssim /= static_cast<double>(e.count);
  }
  const auto name = std::filesystem::path(dir).lexically_normal();
  EvalReport r{name.has_filename() ? name.filename().string() : name.parent_path().filename().string(), model_name,
               acc};
  return r;
}

}  // namespace sunet
