#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sunet/tensor.hpp"

namespace sunet {

/// 10 log10(1 / MSE) over all pixels and channels of [H,W,C] or [1,H,W,C]
/// images in [0,1]; +inf when identical. Throws ShapeError on mismatch.
double psnr(const Tensor<float>& a, const Tensor<float>& b);

enum class SsimMode {
  RgbMean,    // per-channel SSIM averaged over channels
  Luminance,  // SSIM of Y = 0.299 R + 0.587 G + 0.114 B
};

/// SSIM with an 11x11 Gaussian window (std 1.5), K1 = 0.01, K2 = 0.03, range 1,
/// averaged over the valid window positions. Throws ShapeError on mismatch or
/// when either spatial extent is below 11.
double ssim(const Tensor<float>& a, const Tensor<float>& b, SsimMode mode = SsimMode::RgbMean);

struct EvalEntry {
  double sigma = 0.0;
  double psnr = 0.0;  // mean over images, dB
  double ssim = 0.0;
  std::int64_t count = 0;
  friend bool operator==(const EvalEntry&, const EvalEntry&) = default;
};

struct EvalReport {
  std::string dataset;
  std::string model;  // checkpoint path or "noisy-baseline"
  std::vector<EvalEntry> entries;

  /// Aligned plain-text table, one row per sigma.
  std::string table() const;
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static EvalReport load(const std::filesystem::path& path);
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Maps a noisy [H,W,3] image to its estimate of the clean one.
using Denoiser = std::function<Tensor<float>(const Tensor<float>&)>;

Tensor<float> identity_denoiser(const Tensor<float>& noisy);

/// Noise seed for one (image, sigma) pair; independent of file order.
std::uint64_t eval_noise_seed(std::uint64_t seed, const std::string& relpath, double sigma);

/// Corrupts every PNG under `dir` at each sigma, denoises, clips to [0,1] and
/// averages per-image PSNR / SSIM. Unreadable files are skipped with a warning
/// on stderr; DatasetError if no image could be evaluated.
EvalReport evaluate_dataset(const Denoiser& denoiser, const std::filesystem::path& dir,
                            const std::vector<double>& sigmas, std::uint64_t seed, const std::string& model_name,
                            SsimMode mode = SsimMode::RgbMean);

}  // namespace sunet
