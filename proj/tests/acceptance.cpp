// Acceptance harness: one PASS / FAIL / SKIP line per criterion.
//   acceptance            run every criterion
//   acceptance 2 5        run the listed ones
// Exit status: 0 all selected passed, 1 any failed, 77 nothing failed but some skipped.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "sunet/image.hpp"
#include "sunet/metrics.hpp"
#include "sunet/model.hpp"
#include "sunet/pipeline.hpp"
#include "sunet/resample.hpp"

using namespace sunet;
using namespace sunet::testing;
namespace fs = std::filesystem;

namespace {

enum class Status { Pass, Fail, Skip };

struct Verdict {
  Status status;
  std::string detail;
};

std::string fmt(double v, int digits = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

// ---- 1: noisy baseline on the benchmark sets ----

struct Reference {
  const char* name;
  const char* env;
  double psnr[3];
  double ssim[3];
};

constexpr Reference kReferences[] = {
    {"CBSD68", "SUNET_CBSD68_DIR", {24.87, 20.57, 15.03}, {0.711, 0.535, 0.307}},
    {"Kodak24", "SUNET_KODAK24_DIR", {28.27, 18.97, 14.91}, {0.796, 0.412, 0.256}},
};

Verdict noisy_baseline() {
  bool failed = false, skipped = false;
  std::string detail;
  for (const auto& ref : kReferences) {
    const char* dir = std::getenv(ref.env);
    if (!dir || !*dir) {
      skipped = true;
      detail += std::string(ref.name) + ": set " + ref.env + " to run; ";
      continue;
    }
    const auto report = evaluate_dataset(identity_denoiser, dir, {10, 30, 50}, 0, "noisy-baseline");
    std::cerr << report.table();
    detail += std::string(ref.name) + " ";
    for (int i = 0; i < 3; ++i) {
      const auto& e = report.entries[static_cast<std::size_t>(i)];
      const bool ok = std::abs(e.psnr - ref.psnr[i]) <= 0.3 && std::abs(e.ssim - ref.ssim[i]) <= 0.03;
      failed = failed || !ok;
      detail += "s" + fmt(e.sigma, 0) + " " + fmt(e.psnr) + "dB/" + fmt(e.ssim, 3) + " (ref " + fmt(ref.psnr[i]) +
                "/" + fmt(ref.ssim[i], 3) + (ok ? ") " : " OUT) ");
    }
    detail += "; ";
  }
  return {failed ? Status::Fail : skipped ? Status::Skip : Status::Pass,
          "noisy baseline: " + detail + "tolerance +-0.3 dB / +-0.03"};
}

// ---- 2, 3: model size ----

Verdict parameter_count() {
  const auto n = build_model<float>(SunetConfig{}).count_params();
  return {n >= 90'000'000 && n <= 110'000'000 ? Status::Pass : Status::Fail,
          "parameter count " + std::to_string(n) + " in [90e6, 110e6]"};
}

Verdict flop_estimate() {
  const SunetConfig def;
  const auto flops = estimate_flops(def, 256, 256), macs = estimate_macs(def, 256, 256);
  const bool ok = flops >= 15'000'000'000 && flops <= 60'000'000'000;
  return {ok ? Status::Pass : Status::Fail, "FLOPs @256x256 = " + fmt(flops / 1e9) +
                                                "G counted as 2*MAC (MACs = " + fmt(macs / 1e9) +
                                                "G), bound [15G, 60G]"};
}

// ---- 4: toy training ----

Tensor<float> smooth_image(std::int64_t h, std::int64_t w, int seed) {
  Tensor<float> t = Tensor<float>::zeros({h, w, 3});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        t.at({y, x, c}) = static_cast<float>(0.5 + 0.3 * std::sin(0.11 * (seed + 1) * y + 0.07 * x + 2 * c) +
                                             0.1 * std::cos(0.05 * x * (c + 1) - 0.09 * y));
  return t;
}

Verdict toy_training() {
  std::vector<Tensor<float>> images;
  for (int i = 0; i < 4; ++i) images.push_back(smooth_image(64, 64, i));
  TrainConfig cfg;
  cfg.patch_size_px = 32;
  cfg.patches_per_image = 50;
  cfg.sigma_min = cfg.sigma_max = 30;
  cfg.batch_size = 4;
  cfg.steps = 200;
  cfg.lr = 2e-2;
  const auto model = build_model<float>(SunetConfig::toy());
  const auto result = train_loop(model, images, cfg);
  const double head = head_mean(result.losses, 20), tail = tail_mean(result.losses, 20);
  const double drop = 1 - tail / head;

  // Score 16 held-fixed noisy crops of the training images.
  double noisy = 0, denoised = 0;
  for (std::uint64_t i = 0; i < 4; ++i)
    for (std::uint64_t k = 0; k < 4; ++k) {
      const auto pair = make_training_pair(images[i], cfg, derive_seed(777, {i, k}));
      auto out = model.forward_padded(pair.noisy.reshape({1, 32, 32, 3})).reshape({32, 32, 3});
      for (auto& v : out.data()) v = std::clamp(v, 0.0f, 1.0f);
      noisy += psnr(pair.noisy, pair.clean) / 16;
      denoised += psnr(out, pair.clean) / 16;
    }
  const bool ok = drop >= 0.5 && denoised - noisy >= 0.5;
  return {ok ? Status::Pass : Status::Fail, "toy training 200 steps: smoothed L1 " + fmt(head, 4) + " -> " +
                                                fmt(tail, 4) + " (drop " + fmt(100 * drop, 1) +
                                                "%, need >= 50%); patch PSNR noisy " + fmt(noisy) + " dB -> " +
                                                fmt(denoised) + " dB (gain " + fmt(denoised - noisy) +
                                                " dB, need >= 0.5)"};
}

// ---- 5: gradient suite ----

void randomize(ParameterList<double>& params, std::uint64_t seed) {
  for (const auto& item : params.items()) {
    Var<double> v = item.var;
    v.mutable_value() = random_tensor(v.shape(), ++seed, -0.5, 0.5);
  }
}

// Inputs kept away from |x| = 0 so no difference step crosses the kink.
Tensor<double> off_zero(Shape shape, std::uint64_t seed) {
  auto t = random_tensor(std::move(shape), seed, 0.1, 1.0);
  std::mt19937_64 rng(seed);
  for (auto& v : t.data())
    if (rng() & 1) v = -v;
  return t;
}

Verdict gradient_suite() {
  using Op = std::function<Var<double>(const std::vector<Var<double>>&)>;
  struct Check {
    std::string name;
    Op op;
    std::vector<Tensor<double>> inputs;
    double step;
  };
  auto r = [](Shape s, std::uint64_t seed) { return random_tensor(std::move(s), seed); };
  std::vector<Check> checks;
  auto add_check = [&](std::string name, Op op, std::vector<Tensor<double>> in, double step = 1e-6) {
    checks.push_back({std::move(name), std::move(op), std::move(in), step});
  };

  add_check("add", [](const auto& v) { return add(v[0], v[1]); }, {r({2, 3}, 1), r({3}, 2)});
  add_check("sub", [](const auto& v) { return sub(v[0], v[1]); }, {r({2, 3}, 3), r({2, 1}, 4)});
  add_check("mul", [](const auto& v) { return mul(v[0], v[1]); }, {r({2, 3}, 5), r({1, 3}, 6)});
  add_check("scale", [](const auto& v) { return scale(v[0], 2.5); }, {r({4}, 7)});
  add_check("abs", [](const auto& v) { return abs(v[0]); }, {off_zero({5}, 8)});
  add_check("sum", [](const auto& v) { return sum(v[0]); }, {r({2, 3}, 9)});
  add_check("mean", [](const auto& v) { return mean(v[0]); }, {r({2, 3}, 10)});
  add_check("reshape", [](const auto& v) { return reshape(v[0], {3, 2}); }, {r({2, 3}, 11)});
  add_check("permute", [](const auto& v) { return permute(v[0], {2, 0, 1}); }, {r({2, 3, 4}, 12)});
  add_check("narrow", [](const auto& v) { return narrow(v[0], 1, 1, 2); }, {r({2, 4}, 13)});
  add_check("concat", [](const auto& v) { return concat<double>({v[0], v[1]}, 1); }, {r({2, 2}, 14), r({2, 3}, 15)});
  add_check("roll", [](const auto& v) { return roll(v[0], {{0, 1}, {1, -2}}); }, {r({3, 4}, 16)});
  add_check("index_select", [](const auto& v) { return index_select(v[0], {2, 0, 2}); }, {r({3, 2}, 17)});
  add_check("matmul", [](const auto& v) { return matmul(v[0], v[1]); }, {r({2, 3, 4}, 18), r({2, 4, 2}, 19)});
  add_check("linear", [](const auto& v) { return linear(v[0], LinearParams<double>{v[1], v[2]}); },
            {r({3, 4}, 20), r({4, 2}, 21), r({2}, 22)});
  add_check("conv2d", [](const auto& v) { return conv2d(v[0], ConvParams<double>{v[1], v[2]}); },
            {r({1, 4, 5, 2}, 23), r({3, 3, 2, 3}, 24), r({3}, 25)});
  add_check("layer_norm", [](const auto& v) { return layer_norm(v[0], NormParams<double>{v[1], v[2]}); },
            {r({3, 5}, 26), r({5}, 27), r({5}, 28)});
  add_check("gelu", [](const auto& v) { return gelu(v[0]); }, {r({6}, 29)});
  add_check("softmax", [](const auto& v) { return softmax(v[0], -1); }, {r({2, 5}, 30)});
  add_check("bilinear_upsample", [](const auto& v) { return bilinear_upsample(v[0], 2); }, {r({1, 3, 2, 2}, 31)});
  add_check("pixel_shuffle", [](const auto& v) { return pixel_shuffle(v[0], 2); }, {r({1, 2, 3, 8}, 32)});
  add_check("pixel_unshuffle", [](const auto& v) { return pixel_unshuffle(v[0], 2); }, {r({1, 4, 2, 3}, 33)});
  add_check("window_partition", [](const auto& v) { return window_partition(v[0], 2); }, {r({1, 4, 4, 2}, 34)});
  add_check("window_reverse", [](const auto& v) { return window_reverse(v[0], 2, 4, 4); }, {r({4, 4, 2}, 35)});
  add_check("cyclic_shift", [](const auto& v) { return cyclic_shift(v[0], -1, 1); }, {r({1, 4, 4, 2}, 36)});
  add_check("l1_loss", [](const auto& v) { return l1_loss(v[0], v[1]); }, {off_zero({2, 4}, 37), Tensor<double>::zeros({2, 4})});

  ParameterList<double> params;
  ParamInit init(40);
  const StlConfig shifted{.dim = 4, .heads = 2, .window = 2, .shift = 1, .mlp_ratio = 2};
  auto stl = make_stl_params(params, "stl", shifted, init);
  const StbConfig block{.dim = 4, .depth = 2, .heads = 2, .window = 2, .mlp_ratio = 2};
  auto stb = make_stb_params(params, "stb", block, init);
  auto merge = make_patch_merge(params, "merge", 2, init);
  auto up = make_dual_upsample(params, "up", 4, 2, init);
  randomize(params, 41);
  const auto mask = build_shift_mask<double>(4, 4, 2, 1);
  add_check(
      "window_attention(masked)",
      [&](const auto& v) {
        auto p = stl.attn;
        p.qkv.weight = v[1];
        p.rel_bias = v[2];
        p.proj.weight = v[3];
        return window_attention<double>(v[0], p, 2, mask);
      },
      {r({4, 4, 4}, 42), stl.attn.qkv.weight.value(), stl.attn.rel_bias.value(), stl.attn.proj.weight.value()},
      1e-5);
  add_check(
      "stl_forward(shifted)",
      [&](const auto& v) {
        auto p = stl;
        p.norm1.gamma = v[1];
        p.fc1.weight = v[2];
        p.fc2.weight = v[3];
        return stl_forward(v[0], shifted, p, 4, 4);
      },
      {r({1, 16, 4}, 43), stl.norm1.gamma.value(), stl.fc1.weight.value(), stl.fc2.weight.value()}, 1e-5);
  add_check(
      "stb_forward",
      [&](const auto& v) { return stb_forward<double>(v[0], block, stb, 4, 4); }, {r({1, 16, 4}, 44)}, 1e-5);
  add_check(
      "patch_embed",
      [](const auto& v) { return patch_embed(v[0], 2, LinearParams<double>{v[1], v[2]}); },
      {r({1, 4, 4, 2}, 45), r({8, 3}, 46), r({3}, 47)});
  add_check(
      "patch_merge",
      [&](const auto& v) {
        auto p = merge;
        p.reduce.weight = v[1];
        return patch_merge(v[0], p);
      },
      {r({1, 4, 4, 2}, 48), merge.reduce.weight.value()}, 1e-5);
  add_check(
      "dual_upsample",
      [&](const auto& v) {
        auto p = up;
        p.bilinear_proj.kernel = v[1];
        p.subpixel_expand.kernel = v[2];
        p.fuse.weight = v[3];
        return dual_upsample(v[0], p);
      },
      {r({1, 2, 3, 4}, 49), up.bilinear_proj.kernel.value(), up.subpixel_expand.kernel.value(),
       up.fuse.weight.value()},
      1e-5);

  double worst = 0;
  std::string worst_name;
  for (const auto& c : checks) {
    const double e = grad_check(c.op, c.inputs, c.step);
    if (!(e < 1e-5)) std::cerr << "  gradient check " << c.name << ": " << e << '\n';
    if (!(e <= worst)) {
      worst = e;
      worst_name = c.name;
    }
  }

  // Full toy network, L1 loss, a sampled 1% of all parameters.
  const auto m = build_model<double>(SunetConfig::toy());
  const auto x = random_tensor({1, 16, 16, 3}, 50, 0, 1);
  Tensor<double> target;
  {
    NoGradScope no_grad;
    target = m.forward(constant(x)).value();
  }
  std::mt19937_64 rng(51);
  for (auto& v : target.data()) v += (rng() & 1) ? 1e-2 : -1e-2;
  std::vector<Var<double>> leaves;
  for (const auto& p : m.parameters().items()) leaves.push_back(p.var);
  std::vector<Coordinate> coords;
  for (std::size_t l = 0; l < leaves.size(); ++l)
    for (std::int64_t i = 0; i < leaves[l].value().size(); ++i) coords.push_back({l, i});
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(coords.size() / 100);
  const double e2e = grad_check_coordinates(
      [&] { return l1_loss(m.forward(constant(x)), constant(target)); }, leaves, coords, 3e-5);

  const bool ok = worst < 1e-5 && e2e < 1e-4;
  return {ok ? Status::Pass : Status::Fail, "gradient suite: " + std::to_string(checks.size()) +
                                                " ops, worst relative error " + sci(worst) + " (" + worst_name +
                                                ", need < 1e-5); end-to-end " + std::to_string(coords.size()) +
                                                " sampled parameters " + sci(e2e) + " (need < 1e-4)"};
}

// ---- 6: shifted windows vs region-restricted attention ----

Verdict shifted_window_oracle() {
  double worst = 0;
  int cases = 0;
  for (std::int64_t w : {2, 4})
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const std::int64_t heads = 2, c = 6;
      ParameterList<double> params;
      const StlConfig cfg{.dim = c, .heads = heads, .window = w, .shift = w / 2, .mlp_ratio = 2};
      auto p = random_stl(params, cfg, 60 + seed);
      const auto x = random_tensor({1, 8, 8, c}, 70 + seed + 10 * static_cast<std::uint64_t>(w));
      worst = std::max(worst, max_abs_diff(shifted_window_attention(x, p.attn, heads, w, w / 2),
                                           region_attention(x, p.attn, heads, static_cast<int>(w),
                                                            static_cast<int>(w / 2))));
      ++cases;
    }
  return {worst < 1e-5 ? Status::Pass : Status::Fail,
          "shifted-window attention vs region brute force on 8x8, w in {2,4}, s = w/2, " + std::to_string(cases) +
              " cases: max |diff| " + sci(worst) + " (need < 1e-5)"};
}

// ---- 7: structural invariants ----

Verdict structural_invariants() {
  std::vector<std::string> broken;
  std::mt19937_64 rng(80);

  for (std::int64_t w : {1, 2, 4}) {
    const auto x = random_tensor({2, 4 * w, 2 * w, 3}, 81 + static_cast<std::uint64_t>(w));
    if (!(window_reverse(window_partition(constant(x), w), w, 4 * w, 2 * w).value() == x))
      broken.push_back("window_reverse o window_partition");
  }

  const auto ps_in = random_tensor({1, 3, 2, 12}, 85);
  const auto shuffled = pixel_shuffle(constant(ps_in), 2).value();
  if (shuffled.shape() != Shape{1, 6, 4, 3} || sorted_values(shuffled) != sorted_values(ps_in) ||
      !(pixel_unshuffle(constant(shuffled), 2).value() == ps_in))
    broken.push_back("pixel_shuffle bijection");

  int configs = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::int64_t w = std::int64_t{1} << (rng() % 3);
    const std::int64_t heads = 1 + static_cast<std::int64_t>(rng() % 3);
    const std::int64_t dim = heads * (1 + static_cast<std::int64_t>(rng() % 3));
    const std::int64_t H = w * (1 + static_cast<std::int64_t>(rng() % 3));
    const std::int64_t W = w * (1 + static_cast<std::int64_t>(rng() % 3));
    ParameterList<double> params;
    ParamInit init(static_cast<std::uint64_t>(trial));
    const StlConfig lcfg{.dim = dim, .heads = heads, .window = w, .shift = (trial % 2) ? w / 2 : 0, .mlp_ratio = 2};
    const StbConfig bcfg{.dim = dim, .depth = 2, .heads = heads, .window = w, .mlp_ratio = 2};
    auto lp = make_stl_params(params, "l", lcfg, init);
    auto bp = make_stb_params(params, "b", bcfg, init);
    const auto x = constant(random_tensor({1, H * W, dim}, 90 + static_cast<std::uint64_t>(trial)));
    if (stl_forward(x, lcfg, lp, H, W).shape() != x.shape() || stb_forward<double>(x, bcfg, bp, H, W).shape() != x.shape())
      broken.push_back("STL/STB shape (trial " + std::to_string(trial) + ")");
    ++configs;
  }

  const auto model = build_model<float>(SunetConfig::toy());
  for (const auto& [h, w] : {std::pair<std::int64_t, std::int64_t>{32, 48}, {321, 481}, {768, 512}}) {
    const auto x = random_tensor<float>({1, h, w, 3}, 100, 0, 1);
    const auto y = model.forward_padded(x);
    if (y.shape() != x.shape() || !y.all_finite())
      broken.push_back("forward shape " + std::to_string(h) + "x" + std::to_string(w));
  }

  std::string detail = "structural invariants: partition/reverse identity, pixel_shuffle bijection, " +
                       std::to_string(configs) + " random STL/STB configs, forward 32x48 / 321x481 / 768x512";
  for (const auto& b : broken) detail += "; broken: " + b;
  return {broken.empty() ? Status::Pass : Status::Fail, detail};
}

// ---- 8: persistence ----

Verdict persistence() {
  using K = CheckpointError::Kind;
  const fs::path dir = fs::temp_directory_path() / "sunet_acceptance_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  SunetConfig cfg = SunetConfig::toy();
  cfg.seed = 3;
  const auto model = build_model<float>(cfg);
  const auto x = constant(random_tensor<float>({1, 32, 32, 3}, 110, 0, 1));
  NoGradScope no_grad;
  const auto before = model.forward(x).value();
  save_checkpoint(model, dir / "m.sunet", {7, 3});
  const auto loaded = load_checkpoint<float>(dir / "m.sunet");
  const bool identical = loaded.model.forward(x).value() == before;

  std::ifstream in(dir / "m.sunet", std::ios::binary);
  const std::string good{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  auto kind_of = [&](const std::string& bytes) -> std::optional<K> {
    {
      std::ofstream out(dir / "bad.sunet", std::ios::binary | std::ios::trunc);
      out << bytes;
    }
    try {
      load_checkpoint<float>(dir / "bad.sunet");
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    return std::nullopt;
  };
  auto patched = [&](std::size_t at, char c) {
    std::string b = good;
    b[at] = c;
    return b;
  };
  int kinds_ok = 0;
  kinds_ok += kind_of(patched(0, 'Z')) == K::BadMagic;
  kinds_ok += kind_of(patched(4, 9)) == K::UnsupportedVersion;
  kinds_ok += kind_of(patched(16, '!')) == K::BadManifest;
  kinds_ok += kind_of(good.substr(0, good.size() - 4)) == K::PayloadMismatch;
  try {
    SunetConfig other = cfg;
    other.window = 2;
    load_into(build_model<float>(other), dir / "m.sunet");
  } catch (const CheckpointError& e) {
    kinds_ok += e.kind() == K::ConfigMismatch;
  }
  try {
    load_checkpoint<float>(dir / "absent.sunet");
  } catch (const CheckpointError& e) {
    kinds_ok += e.kind() == K::Io;
  }
  return {identical && kinds_ok == 6 ? Status::Pass : Status::Fail,
          std::string("persistence: reloaded forward ") + (identical ? "bit-identical" : "DIFFERS") + "; " +
              std::to_string(kinds_ok) + "/6 corruption cases report the expected error kind"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::function<Verdict()>> criteria = {
      {1, noisy_baseline}, {2, parameter_count},       {3, flop_estimate},         {4, toy_training},
      {5, gradient_suite}, {6, shifted_window_oracle}, {7, structural_invariants}, {8, persistence},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  if (selected.empty())
    for (const auto& [id, _] : criteria) selected.push_back(id);

  bool failed = false, skipped = false;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << id << '\n';
      return 2;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = it->second();
    } catch (const std::exception& e) {
      v = {Status::Fail, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const char* tag = v.status == Status::Pass ? "PASS" : v.status == Status::Fail ? "FAIL" : "SKIP";
    std::cout << "[" << tag << "] " << id << " " << v.detail << " [" << fmt(secs, 1) << " s]" << std::endl;
    failed = failed || v.status == Status::Fail;
    skipped = skipped || v.status == Status::Skip;
  }
  return failed ? 1 : skipped ? 77 : 0;
}
