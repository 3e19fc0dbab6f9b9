#pragma once

#include <string>

#include <json.hpp>

#include "sunet/model.hpp"
#include "sunet/pipeline.hpp"

namespace sunet {

nlohmann::json to_json(const SunetConfig& cfg);
/// Throws ConfigError on unknown keys, wrong types or invalid values.
SunetConfig sunet_config_from_json(const nlohmann::json& j);

/// Everything one CLI invocation needs, read from a flat JSON object.
struct RunConfig {
  SunetConfig model;
  TrainConfig train;
  std::string dataset;
  std::string out = "runs/sunet";
  std::string precision = "f32";  // f32 | f64

  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// An optional "preset" key ("default" or "toy") selects the model base; every
/// other key overrides one field. Unknown keys are a ConfigError naming the key.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace sunet
