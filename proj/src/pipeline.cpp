#include "sunet/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "sunet/config.hpp"
#include "sunet/image.hpp"
#include "sunet/ops.hpp"

namespace sunet {

using nlohmann::json;

void TrainConfig::validate() const {
  if (patch_size_px < 1) throw std::invalid_argument("train_patch must be positive");
  if (patches_per_image < 1) throw std::invalid_argument("patches_per_image must be positive");
  if (!(0.0 <= sigma_min && sigma_min <= sigma_max && sigma_max <= 100.0))
    throw std::invalid_argument("sigma range must satisfy 0 <= sigma_min <= sigma_max <= 100");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (steps < 0) throw std::invalid_argument("steps must be non-negative");
  if (lr < 0) throw std::invalid_argument("lr must be non-negative");
  if (!(0 <= lr_min && lr_min <= lr)) throw std::invalid_argument("lr_min must be in [0, lr]");
  if (!(0 <= beta1 && beta1 < 1 && 0 <= beta2 && beta2 < 1)) throw std::invalid_argument("Adam betas must be in [0,1)");
  if (eps <= 0) throw std::invalid_argument("eps must be positive");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be non-negative");
}

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> ids) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  for (auto id : ids) h = mix(h ^ mix(id));
  return h;
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
Tensor<T> add_awgn(const Tensor<T>& clean, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0)) throw std::invalid_argument("noise sigma must be non-negative");
  Tensor<T> out = clean;
  if (sigma == 0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const double s = sigma / 255.0;
  for (auto& v : out.data()) v = static_cast<T>(std::clamp(static_cast<double>(v) + g(rng) * s, 0.0, 1.0));
  return out;
}

std::pair<std::int64_t, std::int64_t> crop_offset(std::int64_t height, std::int64_t width, std::int64_t size,
                                                  std::uint64_t seed) {
  if (size < 1 || height < size || width < size)
    throw DatasetError("cannot crop " + std::to_string(size) + "x" + std::to_string(size) + " from a " +
                       std::to_string(height) + "x" + std::to_string(width) + " image");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> dy(0, height - size), dx(0, width - size);
  const std::int64_t top = dy(rng);
  return {top, dx(rng)};
}

template <typename T>
Tensor<T> random_crop(const Tensor<T>& image, std::int64_t size, std::uint64_t seed) {
  if (image.rank() != 3) throw ShapeError("random_crop expects [H,W,C], got " + to_string(image.shape()));
  const std::int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const auto [top, left] = crop_offset(h, w, size, seed);
  Tensor<T> out = Tensor<T>::zeros({size, size, c});
  auto src = image.data();
  auto dst = out.data();
  for (std::int64_t y = 0; y < size; ++y)
    std::copy_n(src.begin() + ((top + y) * w + left) * c, size * c, dst.begin() + y * size * c);
  return out;
}

template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("l1_loss shapes differ: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  return mean(abs(sub(pred, target)));
}

template <typename T>
void Adam<T>::step(const ParameterList<T>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& p : params.items()) {
    Var<T> v = p.var;
    auto& [m, s] = moments_[p.name];
    const auto n = static_cast<std::size_t>(v.value().size());
    if (m.empty()) {
      m.assign(n, 0.0);
      s.assign(n, 0.0);
    }
    if (!v.has_grad()) continue;  // moments stay, as with an all-zero gradient except for decay
    const auto g = v.node().grad.data();
    auto w = v.mutable_value().data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g[i];
      m[i] = beta1_ * m[i] + (1 - beta1_) * gi;
      s[i] = beta2_ * s[i] + (1 - beta2_) * gi * gi;
      const double update = lr_ * (m[i] / c1) / (std::sqrt(s[i] / c2) + eps_);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
    }
  }
}

namespace {

template <typename T>
Tensor<T> stack(const std::vector<ImagePair>& batch, bool noisy) {
  const Shape& s = batch.front().clean.shape();
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(numel(s)) * batch.size());
  for (const auto& pair : batch) {
    const auto& img = noisy ? pair.noisy : pair.clean;
    if (img.shape() != s) throw ShapeError("training batch mixes patch shapes");
    for (auto v : img.data()) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>({static_cast<std::int64_t>(batch.size()), s[0], s[1], s[2]}, std::move(data));
}

}  // namespace

template <typename T>
double train_step(const SunetModel<T>& model, const std::vector<ImagePair>& batch, Adam<T>& opt) {
  if (batch.empty()) throw std::invalid_argument("train_step needs a non-empty batch");
  const Var<T> noisy = constant(stack<T>(batch, true));
  const Var<T> clean = constant(stack<T>(batch, false));
  model.parameters().zero_grad();
  Tape tape;
  Var<T> loss;
  {
    TapeScope scope(tape);
    loss = l1_loss(model.forward(noisy), clean);
  }
  const double value = static_cast<double>(loss.value()[0]);
  if (!std::isfinite(value)) {
    tape.clear();
    throw NonFiniteLossError("training loss became non-finite (" + std::to_string(value) + ")");
  }
  backward(tape, loss);
  opt.step(model.parameters());
  return value;
}

double scheduled_lr(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.steps <= 1) return cfg.lr;
  const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
  return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + std::cos(M_PI * progress));
}

ImagePair make_training_pair(const Tensor<float>& image, const TrainConfig& cfg, std::uint64_t patch_seed) {
  ImagePair pair;
  pair.clean = random_crop(image, cfg.patch_size_px, derive_seed(patch_seed, {0}));
  std::mt19937_64 rng(derive_seed(patch_seed, {1}));
  pair.sigma = std::uniform_real_distribution<double>(cfg.sigma_min, cfg.sigma_max)(rng);
  pair.noisy = add_awgn(pair.clean, pair.sigma, derive_seed(patch_seed, {2}));
  return pair;
}

template <typename T>
TrainResult train_loop(const SunetModel<T>& model, const std::vector<Tensor<float>>& images, const TrainConfig& cfg,
                       const TrainOutputs& out) {
  cfg.validate();
  if (images.empty()) throw DatasetError("training set is empty");
  for (const auto& img : images) {
    if (img.rank() != 3 || img.dim(2) != 3) throw DatasetError("training images must be [H,W,3]");
    if (img.dim(0) < cfg.patch_size_px || img.dim(1) < cfg.patch_size_px)
      throw DatasetError("training image " + std::to_string(img.dim(0)) + "x" + std::to_string(img.dim(1)) +
                         " is smaller than the " + std::to_string(cfg.patch_size_px) + " px patch");
  }
  const std::int64_t m = model.config().required_multiple();
  if (cfg.patch_size_px % m != 0)
    throw std::invalid_argument("train_patch " + std::to_string(cfg.patch_size_px) + " must be a multiple of " +
                                std::to_string(m));

  std::ofstream log;
  if (out.loss_log) {
    if (out.loss_log->has_parent_path()) std::filesystem::create_directories(out.loss_log->parent_path());
    log.open(*out.loss_log);
    if (!log) throw DatasetError("cannot write loss log " + out.loss_log->string());
  }

  Adam<T> opt(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  TrainResult result;
  const std::int64_t epoch_len = static_cast<std::int64_t>(images.size()) * cfg.patches_per_image;
  std::vector<std::int64_t> order(static_cast<std::size_t>(epoch_len));
  std::int64_t cursor = epoch_len, epoch = -1;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<ImagePair> batch;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == epoch_len) {
        ++epoch;
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::int64_t patch = order[static_cast<std::size_t>(cursor++)];
      const auto& img = images[static_cast<std::size_t>(patch / cfg.patches_per_image)];
      batch.push_back(make_training_pair(
          img, cfg, derive_seed(cfg.seed, {2, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(patch)})));
    }
    opt.set_lr(scheduled_lr(cfg, step));
    const double loss = train_step(model, batch, opt);
    result.losses.push_back(loss);
    if (log) log << step << '\t' << loss << '\n';
    if (out.checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(model, *out.checkpoint, {step + 1, cfg.seed});
  }
  if (out.checkpoint) save_checkpoint(model, *out.checkpoint, {cfg.steps, cfg.seed});
  return result;
}

template <typename T>
TrainResult train_loop(const SunetModel<T>& model, const std::filesystem::path& dir, const TrainConfig& cfg,
                       const TrainOutputs& out) {
  std::vector<std::filesystem::path> files;
  try {
    files = list_pngs(dir);
  } catch (const ImageError& e) {
    throw DatasetError(std::string("dataset directory unusable: ") + e.what());
  }
  std::vector<Tensor<float>> images;
  for (const auto& f : files) {
    try {
      images.push_back(load_png(f));
    } catch (const ImageError& e) {
      std::fprintf(stderr, "warning: skipping unreadable image: %s\n", e.what());
    }
  }
  if (images.empty()) throw DatasetError("no decodable PNG images under " + dir.string());
  return train_loop(model, images, cfg, out);
}

double head_mean(const std::vector<double>& v, std::size_t window) {
  const std::size_t n = std::min(window, v.size());
  if (n == 0) return 0.0;
  return std::accumulate(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n), 0.0) / static_cast<double>(n);
}

double tail_mean(const std::vector<double>& v, std::size_t window) {
  const std::size_t n = std::min(window, v.size());
  if (n == 0) return 0.0;
  return std::accumulate(v.end() - static_cast<std::ptrdiff_t>(n), v.end(), 0.0) / static_cast<double>(n);
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[4] = {'S', 'U', 'N', 'T'};

template <typename U>
void put_le(std::string& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const std::string& buf, std::size_t pos) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  return v;
}

struct RawCheckpoint {
  json manifest;
  std::string bytes;
  std::size_t payload_start = 0;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
  using K = CheckpointError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(K::Io, "cannot open checkpoint " + path.string());
  RawCheckpoint raw;
  raw.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  const std::string& b = raw.bytes;
  if (b.size() < 4 || !std::equal(kMagic, kMagic + 4, b.begin()))
    throw CheckpointError(K::BadMagic, path.string() + " is not a checkpoint (bad magic bytes)");
  if (b.size() < 16) throw CheckpointError(K::PayloadMismatch, path.string() + ": truncated header");
  const auto version = get_le<std::uint32_t>(b, 4);
  if (version != kCheckpointVersion)
    throw CheckpointError(K::UnsupportedVersion, "checkpoint version " + std::to_string(version) + " is not supported");
  const auto len = get_le<std::uint64_t>(b, 8);
  if (len > b.size() - 16) throw CheckpointError(K::PayloadMismatch, path.string() + ": truncated manifest");
  try {
    raw.manifest = json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception& e) {
    throw CheckpointError(K::BadManifest, path.string() + ": unreadable manifest: " + e.what());
  }
  raw.payload_start = 16 + static_cast<std::size_t>(len);
  return raw;
}

SunetConfig manifest_config(const json& manifest) {
  try {
    return sunet_config_from_json(manifest.at("config"));
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointError::Kind::BadManifest, std::string("checkpoint config invalid: ") + e.what());
  }
}

template <typename T>
CheckpointMeta restore(const SunetModel<T>& model, const RawCheckpoint& raw) {
  using K = CheckpointError::Kind;
  const json& m = raw.manifest;
  const std::size_t payload = raw.bytes.size() - raw.payload_start;
  CheckpointMeta meta;
  std::vector<std::tuple<std::string, Shape, std::uint64_t>> records;
  std::uint64_t declared = 0;
  try {
    meta.step = m.at("step").get<std::int64_t>();
    meta.seed = m.at("seed").get<std::uint64_t>();
    declared = m.at("payload_bytes").get<std::uint64_t>();
    for (const auto& t : m.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "float32") throw CheckpointError(K::BadManifest, "unsupported dtype");
      records.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>(), t.at("offset").get<std::uint64_t>());
    }
  } catch (const json::exception& e) {
    throw CheckpointError(K::BadManifest, std::string("checkpoint manifest incomplete: ") + e.what());
  }
  if (declared != payload)
    throw CheckpointError(K::PayloadMismatch, "checkpoint payload has " + std::to_string(payload) + " bytes, manifest declares " +
                                                  std::to_string(declared));
  const auto& params = model.parameters();
  if (records.size() != params.size())
    throw CheckpointError(K::PayloadMismatch, "checkpoint holds " + std::to_string(records.size()) + " tensors, model has " +
                                                  std::to_string(params.size()));
  // Validate everything before touching the model.
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& [name, shape, offset] = records[i];
    const auto& p = params[i];
    if (name != p.name || shape != p.var.shape())
      throw CheckpointError(K::PayloadMismatch, "checkpoint tensor " + name + " " + to_string(shape) +
                                                    " does not match parameter " + p.name + " " + to_string(p.var.shape()));
    if (offset + 4 * static_cast<std::uint64_t>(numel(shape)) > payload)
      throw CheckpointError(K::PayloadMismatch, "checkpoint tensor " + name + " extends past the payload");
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto offset = std::get<2>(records[i]);
    Var<T> v = params[i].var;
    auto dst = v.mutable_value().data();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      const auto bits = get_le<std::uint32_t>(raw.bytes, raw.payload_start + offset + 4 * k);
      dst[k] = static_cast<T>(std::bit_cast<float>(bits));
    }
  }
  return meta;
}

}  // namespace

template <typename T>
void save_checkpoint(const SunetModel<T>& model, const std::filesystem::path& path, const CheckpointMeta& meta) {
  using K = CheckpointError::Kind;
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& p : model.parameters().items()) {
    tensors.push_back({{"name", p.name}, {"shape", p.var.shape()}, {"dtype", "float32"}, {"offset", offset}});
    offset += 4 * static_cast<std::uint64_t>(p.var.value().size());
  }
  const json manifest = {{"config", to_json(model.config())},
                         {"precision", sizeof(T) == 4 ? "f32" : "f64"},
                         {"step", meta.step},
                         {"seed", meta.seed},
                         {"param_count", model.count_params()},
                         {"payload_bytes", offset},
                         {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::string buf(kMagic, 4);
  put_le<std::uint32_t>(buf, kCheckpointVersion);
  put_le<std::uint64_t>(buf, text.size());
  buf += text;
  buf.reserve(buf.size() + offset);
  for (const auto& p : model.parameters().items())
    for (auto v : p.var.value().data()) put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));

  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out || !out.write(buf.data(), static_cast<std::streamsize>(buf.size())))
      throw CheckpointError(K::Io, "cannot write checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(K::Io, "cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const RawCheckpoint raw = read_raw(path);
  LoadedCheckpoint<T> out{SunetModel<T>(manifest_config(raw.manifest)), {}};
  out.meta = restore(out.model, raw);
  return out;
}

template <typename T>
CheckpointMeta load_into(const SunetModel<T>& model, const std::filesystem::path& path) {
  const RawCheckpoint raw = read_raw(path);
  if (!(manifest_config(raw.manifest) == model.config()))
    throw CheckpointError(CheckpointError::Kind::ConfigMismatch,
                          "checkpoint config " + raw.manifest.at("config").dump() + " differs from the model's " +
                              to_json(model.config()).dump());
  return restore(model, raw);
}

SunetConfig read_checkpoint_config(const std::filesystem::path& path) { return manifest_config(read_raw(path).manifest); }

#define SUNET_INSTANTIATE_PIPELINE(T)                                                                               \
  template Tensor<T> add_awgn<T>(const Tensor<T>&, double, std::uint64_t);                                          \
  template Tensor<T> random_crop<T>(const Tensor<T>&, std::int64_t, std::uint64_t);                                 \
  template Var<T> l1_loss<T>(const Var<T>&, const Var<T>&);                                                         \
  template class Adam<T>;                                                                                           \
  template double train_step<T>(const SunetModel<T>&, const std::vector<ImagePair>&, Adam<T>&);                     \
  template TrainResult train_loop<T>(const SunetModel<T>&, const std::vector<Tensor<float>>&, const TrainConfig&,   \
                                     const TrainOutputs&);                                                          \
  template TrainResult train_loop<T>(const SunetModel<T>&, const std::filesystem::path&, const TrainConfig&,        \
                                     const TrainOutputs&);                                                          \
  template void save_checkpoint<T>(const SunetModel<T>&, const std::filesystem::path&, const CheckpointMeta&);      \
  template LoadedCheckpoint<T> load_checkpoint<T>(const std::filesystem::path&);                                    \
  template CheckpointMeta load_into<T>(const SunetModel<T>&, const std::filesystem::path&);

SUNET_INSTANTIATE_PIPELINE(float)
SUNET_INSTANTIATE_PIPELINE(double)

}  // namespace sunet
