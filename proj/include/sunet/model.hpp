#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "sunet/resample.hpp"
#include "sunet/swin.hpp"

namespace sunet {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Architecture hyperparameters. `depths` lists one entry per resolution
/// level of the token pyramid; the last entry is the bottleneck block.
struct SunetConfig {
  std::int64_t base_channels = 96;
  std::int64_t patch_size = 4;
  std::int64_t window = 8;
  std::vector<std::int64_t> depths{8, 8, 8, 8};
  std::vector<std::int64_t> heads{3, 6, 12, 24};
  double mlp_ratio = 4.0;
  std::uint64_t seed = 0;

  /// Small configuration used for tests and desk-scale training.
  static SunetConfig toy();

  std::int64_t num_merges() const { return static_cast<std::int64_t>(depths.size()) - 1; }
  std::int64_t stage_channels(std::int64_t stage) const { return base_channels << stage; }
  /// H and W passed to forward must be multiples of this.
  std::int64_t required_multiple() const;
  /// Throws ConfigError naming the violated constraint.
  void validate() const;

  friend bool operator==(const SunetConfig&, const SunetConfig&) = default;
};

struct StageShape {
  std::string name;
  std::int64_t height, width, channels;
};

/// Feature-map geometry at every stage for an H x W input.
std::vector<StageShape> stage_shapes(const SunetConfig& cfg, std::int64_t height, std::int64_t width);

/// Multiply-accumulates of a same-padded k x k convolution over an H x W map.
inline std::int64_t conv_macs(std::int64_t height, std::int64_t width, std::int64_t kernel, std::int64_t in,
                              std::int64_t out) {
  return height * width * kernel * kernel * in * out;
}

/// Multiply-accumulates of one forward pass, summed analytically over every
/// matmul, convolution, and attention product.
std::int64_t estimate_macs(const SunetConfig& cfg, std::int64_t height, std::int64_t width);

/// Floating-point operations counted as 2 x multiply-accumulates.
inline std::int64_t estimate_flops(const SunetConfig& cfg, std::int64_t height, std::int64_t width) {
  return 2 * estimate_macs(cfg, height, width);
}

template <typename T>
class SunetModel {
 public:
  /// Builds every parameter from cfg.seed; throws ConfigError on an invalid config.
  explicit SunetModel(SunetConfig cfg);

  const SunetConfig& config() const { return cfg_; }
  const ParameterList<T>& parameters() const { return params_; }
  std::int64_t count_params() const { return params_.scalar_count(); }

  /// [B,H,W,3] -> [B,H,W,3]. H and W must be multiples of
  /// config().required_multiple().
  Var<T> forward(const Var<T>& noisy) const;

  /// Reflection-pads to the next valid size, runs forward without recording,
  /// and crops back to the input extent.
  Tensor<T> forward_padded(const Tensor<T>& noisy) const;

 private:
  struct Level {
    StbConfig block_cfg;
    std::vector<StlParams<T>> block;
  };
  struct EncoderLevel : Level {
    PatchMergeParams<T> merge;
  };
  struct DecoderLevel : Level {
    DualUpsampleParams<T> upsample;
    LinearParams<T> skip_fuse;
  };

  SunetConfig cfg_;
  ParameterList<T> params_;
  ConvParams<T> shallow_;
  LinearParams<T> embed_;
  std::vector<EncoderLevel> encoder_;
  Level bottleneck_;
  std::vector<DecoderLevel> decoder_;  // decoder_[i] restores resolution level i
  std::vector<DualUpsampleParams<T>> expand_;
  ConvParams<T> reconstruct_;
};

template <typename T>
SunetModel<T> build_model(const SunetConfig& cfg) {
  return SunetModel<T>(cfg);
}

template <typename T>
std::int64_t count_params(const SunetModel<T>& m) {
  return m.count_params();
}

/// Mirror-pads the bottom and right of an [B,H,W,C] tensor (edge pixel not repeated).
template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, std::int64_t pad_bottom, std::int64_t pad_right);

/// Top-left [B,height,width,C] window of x.
template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::int64_t height, std::int64_t width);

extern template class SunetModel<float>;
extern template class SunetModel<double>;

}  // namespace sunet
