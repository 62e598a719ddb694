#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/monitor.hpp"
#include "core/synth.hpp"
#include "core/trainer.hpp"

namespace ccm {

struct EnergyConfig {
  std::string probe = "auto";  // auto | tdp-estimate | stub
  double carbon_intensity = 0.27;
  double sample_period_s = 1.0;
  double tdp_watts = 65.0;
  double stub_cpu_watts = 0.0;  // probe = stub only
  double stub_gpu_watts = 0.0;

  void validate() const;
  std::shared_ptr<PowerProbe> make_probe() const;
};

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  double explain_alpha = 0.4;
  std::optional<double> retrain_periodic_days;
};

/// Everything a CLI invocation can be configured with.
struct PipelineConfig {
  std::string data_root = "data";
  std::string run_store = "runstore";
  std::string artifacts = "artifacts";
  SynthConfig synth;
  int synth_count = 200;
  TrainConfig train;
  DriftConfig drift;
  EnergyConfig energy;
  ServeConfig serve;
  double promotion_threshold = 0.8;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static PipelineConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

/// Parses a nested key/value document: `[section.sub]` headers, `key = value`
/// lines, `#` or `;` comments. Values are read as JSON scalars or arrays
/// when possible and as bare strings otherwise. Throws ValidationError.
nlohmann::json parse_config_text(const std::string& text);

/// Applies `a.b.c=value` assignments in order.
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);

/// File (optional) then overrides; flags win.
PipelineConfig resolve_config(const std::optional<std::filesystem::path>& file,
                              const std::vector<std::string>& overrides);

}  // namespace ccm
