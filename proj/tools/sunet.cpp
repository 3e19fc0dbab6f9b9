#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "sunet/config.hpp"
#include "sunet/image.hpp"
#include "sunet/metrics.hpp"
#include "sunet/model.hpp"
#include "sunet/pipeline.hpp"

using namespace sunet;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kDataset = 3, kNonFinite = 4, kCheckpoint = 5 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> precision;
  bool print_config = false;

  std::optional<std::string> dataset;
  std::optional<std::int64_t> steps;
  std::string checkpoint;
  std::string input;
  bool noisy_baseline = false;
  std::vector<double> sigmas{10, 30, 50};
  std::string ssim_mode = "rgb";
  std::string report;
};

RunConfig resolve(const Options& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config.empty()) j = to_json(load_run_config(o.config));
  if (o.seed) j["seed"] = *o.seed;
  if (o.out) j["out"] = *o.out;
  if (o.precision) j["precision"] = *o.precision;
  if (o.dataset) j["dataset"] = *o.dataset;
  if (o.steps) j["steps"] = *o.steps;
  return run_config_from_json(j);
}

template <typename T>
Tensor<T> cast(const Tensor<float>& x) {
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    std::vector<T> v(x.data().begin(), x.data().end());
    return Tensor<T>(x.shape(), std::move(v));
  }
}

template <typename T>
Tensor<float> to_float(const Tensor<T>& x) {
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    std::vector<float> v(x.data().begin(), x.data().end());
    return Tensor<float>(x.shape(), std::move(v));
  }
}

template <typename T>
Denoiser model_denoiser(const SunetModel<T>& model) {
  return [&model](const Tensor<float>& noisy) {
    const Shape& s = noisy.shape();
    auto out = to_float(model.forward_padded(cast<T>(noisy).reshape({1, s[0], s[1], s[2]})));
    for (auto& v : out.data()) v = std::clamp(v, 0.0f, 1.0f);
    return out.reshape(s);
  };
}

template <typename T>
int train(const RunConfig& rc) {
  if (rc.dataset.empty()) throw ConfigError("no dataset directory given (set \"dataset\" or pass --dataset)");
  if (!fs::is_directory(rc.dataset)) throw DatasetError("dataset directory not found: " + rc.dataset);
  const fs::path out = rc.out;
  fs::create_directories(out);
  std::ofstream(out / "config.json") << to_json(rc).dump(2) << '\n';
  const SunetModel<T> model(rc.model);
  const TrainOutputs outputs{out / "loss.tsv", out / "checkpoint.sunet"};
  const auto result = train_loop(model, fs::path(rc.dataset), rc.train, outputs);
  std::cout << "steps: " << result.losses.size() << '\n';
  if (!result.losses.empty()) {
    const std::size_t w = std::max<std::size_t>(1, result.losses.size() / 10);
    std::cout << "loss (first " << w << " steps): " << head_mean(result.losses, w) << '\n'
              << "loss (last " << w << " steps): " << tail_mean(result.losses, w) << '\n';
  }
  std::cout << "checkpoint: " << (out / "checkpoint.sunet").string() << '\n'
            << "loss log: " << (out / "loss.tsv").string() << '\n';
  return kOk;
}

template <typename T>
int denoise(const RunConfig& rc, const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("denoise needs --checkpoint");
  const auto loaded = load_checkpoint<T>(o.checkpoint);
  const auto run = model_denoiser(loaded.model);
  const fs::path in = o.input, out = rc.out;
  std::vector<std::pair<fs::path, fs::path>> jobs;  // source, destination
  if (fs::is_directory(in)) {
    for (const auto& f : list_pngs(in)) jobs.emplace_back(f, out / fs::relative(f, in));
  } else if (fs::exists(in)) {
    jobs.emplace_back(in, out / in.filename());
  } else {
    throw DatasetError("input not found: " + o.input);
  }
  int done = 0;
  for (const auto& [src, dst] : jobs) {
    try {
      const auto noisy = load_png(src);
      fs::create_directories(dst.parent_path());
      save_png(dst, run(noisy));
      std::cout << src.string() << " -> " << dst.string() << '\n';
      ++done;
    } catch (const ImageError& e) {
      std::cerr << "warning: skipping " << e.what() << '\n';
    }
  }
  if (done == 0) throw DatasetError("no input image could be denoised under " + o.input);
  return kOk;
}

template <typename T>
int eval(const RunConfig& rc, const Options& o) {
  if (rc.dataset.empty()) throw ConfigError("no dataset directory given (set \"dataset\" or pass --dataset)");
  if (o.noisy_baseline == !o.checkpoint.empty())
    throw ConfigError("eval needs exactly one of --checkpoint or --noisy-baseline");
  if (o.ssim_mode != "rgb" && o.ssim_mode != "luminance")
    throw ConfigError("--ssim must be rgb or luminance, got \"" + o.ssim_mode + "\"");
  const SsimMode mode = o.ssim_mode == "rgb" ? SsimMode::RgbMean : SsimMode::Luminance;
  EvalReport report;
  if (o.noisy_baseline) {
    report = evaluate_dataset(identity_denoiser, rc.dataset, o.sigmas, rc.model.seed, "noisy-baseline", mode);
  } else {
    const auto loaded = load_checkpoint<T>(o.checkpoint);
    report = evaluate_dataset(model_denoiser(loaded.model), rc.dataset, o.sigmas, rc.model.seed, o.checkpoint, mode);
  }
  std::cout << report.table();
  const fs::path path = o.report.empty() ? fs::path(rc.out) / "eval.json" : fs::path(o.report);
  report.save(path);
  std::cout << "report: " << path.string() << '\n';
  return kOk;
}

std::string grouped(std::int64_t n) {
  std::string s = std::to_string(n), out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i > 0 && (s.size() - i) % 3 == 0) out += ',';
    out += s[i];
  }
  return out;
}

int info(const RunConfig& rc, const Options& o) {
  const SunetConfig cfg = o.checkpoint.empty() ? rc.model : read_checkpoint_config(o.checkpoint);
  const SunetModel<float> model(cfg);
  const std::int64_t macs = estimate_macs(cfg, 256, 256), flops = estimate_flops(cfg, 256, 256);
  std::cout << "config: " << to_json(cfg).dump() << '\n'
            << "parameters: " << grouped(model.count_params()) << '\n'
            << "input size multiple: " << cfg.required_multiple() << '\n'
            << "MACs @256x256: " << grouped(macs) << " (" << std::fixed << std::setprecision(2) << macs / 1e9
            << " G multiply-accumulates)\n"
            << "FLOPs @256x256: " << grouped(flops) << " (" << flops / 1e9
            << " G; convention: FLOPs = 2·MAC, one multiply plus one add per multiply-accumulate)\n\n";
  std::cout << std::left << std::setw(16) << "stage" << std::right << std::setw(8) << "height" << std::setw(8)
            << "width" << std::setw(10) << "channels" << '\n';
  for (const auto& s : stage_shapes(cfg, 256, 256))
    std::cout << std::left << std::setw(16) << s.name << std::right << std::setw(8) << s.height << std::setw(8)
              << s.width << std::setw(10) << s.channels << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SUNet: Swin-Transformer UNet image denoiser"};
  app.fallthrough();
  app.require_subcommand(0, 1);
  Options o;
  app.add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Seed for initialisation, data stream and evaluation noise");
  app.add_option("--out", o.out, "Output directory");
  app.add_option("--precision", o.precision, "Arithmetic precision: f32 or f64");
  app.add_flag("--print-config", o.print_config, "Print the fully resolved configuration and exit");

  auto* train_cmd = app.add_subcommand("train", "Train on a directory of clean PNG images");
  train_cmd->add_option("--dataset", o.dataset, "Directory of clean training PNGs");
  train_cmd->add_option("--steps", o.steps, "Number of optimisation steps");

  auto* denoise_cmd = app.add_subcommand("denoise", "Denoise a PNG or a directory of PNGs into --out");
  denoise_cmd->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
  denoise_cmd->add_option("input", o.input, "Noisy PNG file or directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Report mean PSNR / SSIM over a clean PNG dataset");
  eval_cmd->add_option("--dataset", o.dataset, "Directory of clean PNGs");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Trained checkpoint to evaluate");
  eval_cmd->add_flag("--noisy-baseline", o.noisy_baseline, "Score the noisy input itself");
  eval_cmd->add_option("--sigma", o.sigmas, "Noise levels on the 0-255 scale")->delimiter(',')->capture_default_str();
  eval_cmd->add_option("--ssim", o.ssim_mode, "SSIM convention: rgb or luminance")->capture_default_str();
  eval_cmd->add_option("--report", o.report, "JSON report path (default <out>/eval.json)");

  auto* info_cmd = app.add_subcommand("info", "Parameter count, FLOP estimate and stage shapes");
  info_cmd->add_option("--checkpoint", o.checkpoint, "Read the configuration from a checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    const RunConfig rc = resolve(o);
    if (o.print_config) {
      std::cout << to_json(rc).dump(2) << '\n';
      return kOk;
    }
    const bool f64 = rc.precision == "f64";
    if (train_cmd->parsed()) return f64 ? train<double>(rc) : train<float>(rc);
    if (denoise_cmd->parsed()) return f64 ? denoise<double>(rc, o) : denoise<float>(rc, o);
    if (eval_cmd->parsed()) return f64 ? eval<double>(rc, o) : eval<float>(rc, o);
    if (info_cmd->parsed()) return info(rc, o);
    std::cerr << app.help();
    return kConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DatasetError& e) {
    std::cerr << "dataset error: " << e.what() << '\n';
    return kDataset;
  } catch (const NonFiniteLossError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kNonFinite;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
