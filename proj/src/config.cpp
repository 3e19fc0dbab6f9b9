#include "sunet/config.hpp"

#include <fstream>
#include <set>

namespace sunet {

using nlohmann::json;

namespace {

template <typename V>
void read(const json& j, const char* key, V& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError("config key \"" + std::string(key) + "\" has the wrong type: " + j.at(key).dump());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key \"" + key + "\"");
}

const std::set<std::string> kModelKeys = {"base_channels", "patch_size", "window", "depths",
                                          "heads",         "mlp_ratio",  "seed"};

void read_model(const json& j, SunetConfig& c) {
  read(j, "base_channels", c.base_channels);
  read(j, "patch_size", c.patch_size);
  read(j, "window", c.window);
  read(j, "depths", c.depths);
  read(j, "heads", c.heads);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "seed", c.seed);
}

}  // namespace

json to_json(const SunetConfig& c) {
  return {{"base_channels", c.base_channels}, {"patch_size", c.patch_size}, {"window", c.window},
          {"depths", c.depths},               {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},
          {"seed", c.seed}};
}

SunetConfig sunet_config_from_json(const json& j) {
  reject_unknown(j, kModelKeys);
  SunetConfig c;
  read_model(j, c);
  c.validate();
  return c;
}

void RunConfig::validate() const {
  model.validate();
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (train.patch_size_px % model.required_multiple() != 0)
    throw ConfigError("train_patch " + std::to_string(train.patch_size_px) + " must be a multiple of " +
                      std::to_string(model.required_multiple()));
  if (precision != "f32" && precision != "f64")
    throw ConfigError("precision must be f32 or f64, got \"" + precision + "\"");
}

json to_json(const RunConfig& r) {
  json j = to_json(r.model);
  const TrainConfig& t = r.train;
  j["train_patch"] = t.patch_size_px;
  j["patches_per_image"] = t.patches_per_image;
  j["sigma_min"] = t.sigma_min;
  j["sigma_max"] = t.sigma_max;
  j["batch_size"] = t.batch_size;
  j["steps"] = t.steps;
  j["lr"] = t.lr;
  j["lr_min"] = t.lr_min;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["eps"] = t.eps;
  j["checkpoint_every"] = t.checkpoint_every;
  j["dataset"] = r.dataset;
  j["out"] = r.out;
  j["precision"] = r.precision;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  std::set<std::string> known = kModelKeys;
  known.insert({"preset", "train_patch", "patches_per_image", "sigma_min", "sigma_max", "batch_size", "steps", "lr", "lr_min",
                "beta1", "beta2", "eps", "checkpoint_every", "dataset", "out", "precision"});
  reject_unknown(j, known);
  RunConfig r;
  std::string preset = "default";
  read(j, "preset", preset);
  if (preset == "toy")
    r.model = SunetConfig::toy();
  else if (preset != "default")
    throw ConfigError("unknown preset \"" + preset + "\" (expected default or toy)");
  read_model(j, r.model);
  // One seed drives both initialisation and the data stream.
  r.train.seed = r.model.seed;
  TrainConfig& t = r.train;
  read(j, "train_patch", t.patch_size_px);
  read(j, "patches_per_image", t.patches_per_image);
  read(j, "sigma_min", t.sigma_min);
  read(j, "sigma_max", t.sigma_max);
  read(j, "batch_size", t.batch_size);
  read(j, "steps", t.steps);
  read(j, "lr", t.lr);
  read(j, "lr_min", t.lr_min);
  read(j, "beta1", t.beta1);
  read(j, "beta2", t.beta2);
  read(j, "eps", t.eps);
  read(j, "checkpoint_every", t.checkpoint_every);
  read(j, "dataset", r.dataset);
  read(j, "out", r.out);
  read(j, "precision", r.precision);
  r.validate();
  return r;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace sunet
