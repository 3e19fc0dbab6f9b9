#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sunet/model.hpp"

namespace sunet {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::int64_t patch_size_px = 256;
  std::int64_t patches_per_image = 100;
  double sigma_min = 5.0;  // 0-255 scale
  double sigma_max = 50.0;
  std::int64_t batch_size = 4;
  std::int64_t steps = 1000;
  double lr = 2e-4;
  double lr_min = 1e-6;  // cosine-annealed from lr down to lr_min over `steps`
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t checkpoint_every = 0;  // 0: only at the end
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Mixes a base seed with stream identifiers (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> ids);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull);

/// y = clip(x + g * sigma / 255, 0, 1), g ~ N(0,1) i.i.d. from `seed`.
template <typename T>
Tensor<T> add_awgn(const Tensor<T>& clean, double sigma, std::uint64_t seed);

/// size x size window of an [H,W,C] image at a seeded uniform offset.
template <typename T>
Tensor<T> random_crop(const Tensor<T>& image, std::int64_t size, std::uint64_t seed);

/// Offset random_crop uses for the given geometry and seed: {top, left}.
std::pair<std::int64_t, std::int64_t> crop_offset(std::int64_t height, std::int64_t width, std::int64_t size,
                                                  std::uint64_t seed);

/// mean |pred - target|.
template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& target);

struct ImagePair {
  Tensor<float> clean;  // [H,W,3]
  Tensor<float> noisy;
  double sigma = 0.0;
};

/// Adam with bias correction.
template <typename T>
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Applies one update from the parameters' accumulated gradients.
  void step(const ParameterList<T>& params);
  std::int64_t steps_taken() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

/// Forward, L1 loss, backward, one Adam update. Returns the pre-update loss;
/// throws NonFiniteLossError (parameters untouched) if it is NaN or infinite.
template <typename T>
double train_step(const SunetModel<T>& model, const std::vector<ImagePair>& batch, Adam<T>& opt);

struct TrainOutputs {
  std::optional<std::filesystem::path> loss_log;    // "step\tloss" per line
  std::optional<std::filesystem::path> checkpoint;  // rewritten every checkpoint_every steps and at the end
};

struct TrainResult {
  std::vector<double> losses;
};

/// Seeded training over in-memory clean images ([H,W,3] in [0,1]). Each epoch
/// visits patches_per_image crops of every image in shuffled order; every
/// patch gets its own sigma ~ U[sigma_min, sigma_max] and noise seed.
template <typename T>
TrainResult train_loop(const SunetModel<T>& model, const std::vector<Tensor<float>>& images, const TrainConfig& cfg,
                       const TrainOutputs& out = {});

/// Loads every PNG under `dir` and trains on them.
template <typename T>
TrainResult train_loop(const SunetModel<T>& model, const std::filesystem::path& dir, const TrainConfig& cfg,
                       const TrainOutputs& out = {});

/// Learning rate at `step` (0-based): cosine annealing from cfg.lr to cfg.lr_min.
double scheduled_lr(const TrainConfig& cfg, std::int64_t step);

/// The ImagePair for one patch of the training stream.
ImagePair make_training_pair(const Tensor<float>& image, const TrainConfig& cfg, std::uint64_t patch_seed);

/// Mean of the first / last `window` entries.
double head_mean(const std::vector<double>& v, std::size_t window);
double tail_mean(const std::vector<double>& v, std::size_t window);

// ---- checkpoints ----

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, UnsupportedVersion, BadManifest, PayloadMismatch, ConfigMismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

/// Writes magic "SUNT", u32 version, u64 manifest length, JSON manifest, then
/// the float32 little-endian payload. Written to a temporary and renamed.
template <typename T>
void save_checkpoint(const SunetModel<T>& model, const std::filesystem::path& path, const CheckpointMeta& meta = {});

template <typename T>
struct LoadedCheckpoint {
  SunetModel<T> model;
  CheckpointMeta meta;
};

/// Rebuilds the model recorded in the checkpoint and restores its parameters.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Restores parameters into an existing model; ConfigMismatch if its config differs.
template <typename T>
CheckpointMeta load_into(const SunetModel<T>& model, const std::filesystem::path& path);

/// Only the configuration stored in a checkpoint.
SunetConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace sunet
