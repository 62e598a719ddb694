#include "core/config.hpp"

#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <spdlog/spdlog.h>

#include "core/errors.hpp"
#include "core/hash.hpp"
#include "core/runstore.hpp"

namespace ccm {
namespace {

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '.') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  for (const auto& p : parts) {
    if (p.empty()) throw ValidationError("config: empty component in key '" + path + "'");
  }
  return parts;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

nlohmann::json parse_value(const std::string& raw) {
  const std::string v = trim(raw);
  if (v.empty()) return "";
  try {
    return nlohmann::json::parse(v);
  } catch (const nlohmann::json::exception&) {
    if (v.size() >= 2 && v.front() == '\'' && v.back() == '\'') return v.substr(1, v.size() - 2);
    return v;
  }
}

void set_path(nlohmann::json& doc, const std::vector<std::string>& parts, nlohmann::json value,
              const std::string& full) {
  nlohmann::json* node = &doc;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    nlohmann::json& child = (*node)[parts[i]];
    if (child.is_null()) child = nlohmann::json::object();
    if (!child.is_object()) throw ValidationError("config: '" + full + "' descends into a value");
    node = &child;
  }
  (*node)[parts.back()] = std::move(value);
}

void check_known(const nlohmann::json& given, const nlohmann::json& schema, const std::string& where) {
  for (const auto& [k, v] : given.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!schema.contains(k)) throw ValidationError("config: unknown key '" + path + "'");
    if (v.is_object() && schema[k].is_object()) check_known(v, schema[k], path);
  }
}

void merge(nlohmann::json& base, const nlohmann::json& patch) {
  for (const auto& [k, v] : patch.items()) {
    if (v.is_object() && base.contains(k) && base[k].is_object()) {
      merge(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

}  // namespace

void EnergyConfig::validate() const {
  if (probe != "auto" && probe != "tdp-estimate" && probe != "stub") {
    throw ValidationError("config: energy.probe must be auto, tdp-estimate or stub");
  }
  if (!(carbon_intensity >= 0.0) || !(sample_period_s > 0.0) || !(tdp_watts >= 0.0) ||
      !(stub_cpu_watts >= 0.0) || !(stub_gpu_watts >= 0.0)) {
    throw ValidationError("config: energy values must be nonnegative (sample period positive)");
  }
}

std::shared_ptr<PowerProbe> EnergyConfig::make_probe() const {
  if (probe == "stub") return std::make_shared<ConstantProbe>(stub_cpu_watts, stub_gpu_watts);
  if (probe == "tdp-estimate") return std::make_shared<TdpEstimateProbe>(tdp_watts);
  return std::shared_ptr<PowerProbe>(default_probe(tdp_watts));
}

void PipelineConfig::validate() const {
  synth.validate();
  train.validate();
  drift.validate();
  energy.validate();
  if (synth_count < 1) throw ValidationError("config: synth_count must be >= 1");
  if (!(promotion_threshold >= 0.0 && promotion_threshold <= 1.0)) {
    throw ValidationError("config: promotion_threshold must be in [0,1]");
  }
  if (serve.port < 0 || serve.port > 65535) throw ValidationError("config: serve.port out of range");
  if (!(serve.explain_alpha >= 0.0 && serve.explain_alpha <= 1.0)) {
    throw ValidationError("config: serve.explain_alpha must be in [0,1]");
  }
}

nlohmann::json PipelineConfig::to_json() const {
  return {{"paths", {{"data_root", data_root}, {"run_store", run_store}, {"artifacts", artifacts}}},
          {"synth", synth.to_json()},
          {"synth_count", synth_count},
          {"train", train.to_json()},
          {"drift", drift.to_json()},
          {"energy",
           {{"probe", energy.probe},
            {"carbon_intensity", energy.carbon_intensity},
            {"sample_period_s", energy.sample_period_s},
            {"tdp_watts", energy.tdp_watts},
            {"stub_cpu_watts", energy.stub_cpu_watts},
            {"stub_gpu_watts", energy.stub_gpu_watts}}},
          {"serve",
           {{"host", serve.host},
            {"port", serve.port},
            {"explain_alpha", serve.explain_alpha},
            {"retrain_periodic_days",
             serve.retrain_periodic_days ? nlohmann::json(*serve.retrain_periodic_days) : nlohmann::json(nullptr)}}},
          {"promotion_threshold", promotion_threshold}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  nlohmann::json full = c.to_json();
  check_known(j, full, "");
  merge(full, j);
  try {
    const auto& p = full["paths"];
    c.data_root = p["data_root"].get<std::string>();
    c.run_store = p["run_store"].get<std::string>();
    c.artifacts = p["artifacts"].get<std::string>();
    c.synth = SynthConfig::from_json(full["synth"]);
    c.synth_count = full["synth_count"].get<int>();
    c.train = TrainConfig::from_json(full["train"]);
    c.drift = DriftConfig::from_json(full["drift"]);
    const auto& e = full["energy"];
    c.energy.probe = e["probe"].get<std::string>();
    c.energy.carbon_intensity = e["carbon_intensity"].get<double>();
    c.energy.sample_period_s = e["sample_period_s"].get<double>();
    c.energy.tdp_watts = e["tdp_watts"].get<double>();
    c.energy.stub_cpu_watts = e["stub_cpu_watts"].get<double>();
    c.energy.stub_gpu_watts = e["stub_gpu_watts"].get<double>();
    const auto& s = full["serve"];
    c.serve.host = s["host"].get<std::string>();
    c.serve.port = s["port"].get<int>();
    c.serve.explain_alpha = s["explain_alpha"].get<double>();
    if (!s["retrain_periodic_days"].is_null()) c.serve.retrain_periodic_days = s["retrain_periodic_days"].get<double>();
    c.promotion_threshold = full["promotion_threshold"].get<double>();
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("config: wrong value type: ") + ex.what());
  }
  c.validate();
  return c;
}

std::string PipelineConfig::hash() const { return json_hash(to_json()); }

nlohmann::json parse_config_text(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [name, node] : tree) {
    if (node.empty()) {  // key before any section
      set_path(doc, split_path(name), parse_value(node.data()), name);
      continue;
    }
    const auto section = split_path(name);
    for (const auto& [key, leaf] : node) {
      auto parts = section;
      for (auto& p : split_path(key)) parts.push_back(p);
      set_path(doc, parts, parse_value(leaf.data()), name + "." + key);
    }
  }
  return doc;
}

void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ValidationError("config: override '" + o + "' is not of the form key.path=value");
    }
    set_path(doc, split_path(trim(o.substr(0, eq))), parse_value(o.substr(eq + 1)), o);
  }
}

PipelineConfig resolve_config(const std::optional<std::filesystem::path>& file,
                              const std::vector<std::string>& overrides) {
  nlohmann::json doc = nlohmann::json::object();
  if (file) doc = parse_config_text(read_text_file(*file));
  apply_overrides(doc, overrides);
  return PipelineConfig::from_json(doc);
}

}  // namespace ccm
