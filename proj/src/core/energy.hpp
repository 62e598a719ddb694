#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

namespace ccm {

enum class ProbeKind { kMeasured, kTdpEstimate, kStub };

std::string to_string(ProbeKind kind);
ProbeKind parse_probe_kind(const std::string& s);

struct PowerReading {
  double cpu_watts = 0.0;
  double gpu_watts = 0.0;
};

/// Source of instantaneous power draw.
class PowerProbe {
 public:
  virtual ~PowerProbe() = default;
  virtual bool available() const = 0;
  virtual PowerReading read() = 0;
  virtual ProbeKind kind() const = 0;
};

class ConstantProbe : public PowerProbe {
 public:
  ConstantProbe(double cpu_watts, double gpu_watts) : reading_{cpu_watts, gpu_watts} {}
  bool available() const override { return true; }
  PowerReading read() override { return reading_; }
  ProbeKind kind() const override { return ProbeKind::kStub; }

 private:
  PowerReading reading_;
};

/// Package energy counters under /sys/class/powercap (Intel RAPL). No GPU
/// counter is read; gpu_watts is 0.
class RaplProbe : public PowerProbe {
 public:
  explicit RaplProbe(std::string root = "/sys/class/powercap");
  bool available() const override { return !zones_.empty(); }
  PowerReading read() override;
  ProbeKind kind() const override { return ProbeKind::kMeasured; }

 private:
  std::vector<std::string> zones_;
  double last_uj_ = 0.0;
  std::chrono::steady_clock::time_point last_t_;
  bool primed_ = false;
};

/// CPU power estimated as tdp_watts scaled by this process's share of all
/// cores over the interval since the previous reading.
class TdpEstimateProbe : public PowerProbe {
 public:
  explicit TdpEstimateProbe(double tdp_watts = 65.0);
  bool available() const override { return true; }
  PowerReading read() override;
  ProbeKind kind() const override { return ProbeKind::kTdpEstimate; }

 private:
  double tdp_watts_;
  double last_cpu_s_ = 0.0;
  std::chrono::steady_clock::time_point last_t_;
};

struct EmissionsReport {
  double cpu_kwh = 0.0;
  double gpu_kwh = 0.0;
  double co2_kg = 0.0;
  double carbon_intensity_kg_per_kwh = 0.0;
  double duration_s = 0.0;
  double sample_period_s = 1.0;
  ProbeKind probe_kind = ProbeKind::kStub;

  nlohmann::json to_json() const;
  static EmissionsReport from_json(const nlohmann::json& j);
  static std::string csv_header();
  std::string csv_row(const std::string& label) const;
};

/// co2 = (cpu_kwh + gpu_kwh) * intensity, the only place it is computed.
double co2_from_energy(double cpu_kwh, double gpu_kwh, double intensity);

/// Trapezoidal integration of timestamped power samples.
class EnergyIntegrator {
 public:
  void add(double t_s, const PowerReading& r);
  EmissionsReport report(double carbon_intensity, double sample_period_s, ProbeKind kind) const;

 private:
  std::vector<std::pair<double, PowerReading>> samples_;
};

using Clock = std::function<double()>;  // seconds
Clock steady_clock_seconds();

struct MeterOptions {
  double carbon_intensity = 0.27;  // kg CO2 per kWh
  double sample_period_s = 1.0;
  Clock clock;  // steady clock when empty
};

/// Samples a probe on a background thread from start() to stop(). A sample
/// is always taken at both ends, so short regions still integrate.
class EnergyMeter {
 public:
  EnergyMeter(PowerProbe& probe, MeterOptions options);
  ~EnergyMeter();
  EnergyMeter(const EnergyMeter&) = delete;
  EnergyMeter& operator=(const EnergyMeter&) = delete;

  void start();
  EmissionsReport stop();

 private:
  void sample();

  PowerProbe& probe_;
  MeterOptions options_;
  EnergyIntegrator integrator_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool running_ = false;
  std::thread sampler_;
};

/// Falls back to a TDP estimate (with a warning) when `preferred` is
/// unavailable.
std::unique_ptr<PowerProbe> resolve_probe(std::unique_ptr<PowerProbe> preferred,
                                          double tdp_watts = 65.0);
std::unique_ptr<PowerProbe> default_probe(double tdp_watts = 65.0);

template <typename Region>
auto meter(Region&& region, PowerProbe& probe, const MeterOptions& options) {
  EnergyMeter m(probe, options);
  m.start();
  if constexpr (std::is_void_v<std::invoke_result_t<Region>>) {
    std::forward<Region>(region)();
    return m.stop();
  } else {
    auto result = std::forward<Region>(region)();
    EmissionsReport report = m.stop();
    return std::make_pair(std::move(result), report);
  }
}

struct EmissionsRow {
  std::string label;
  int runs = 0;
  double cpu_kwh = 0.0;
  double gpu_kwh = 0.0;
  double co2_kg = 0.0;
  double ratio = 1.0;  // co2 relative to the lowest-emitting row
};

/// Per-label means in order of first appearance.
std::vector<EmissionsRow> compare(std::span<const std::pair<std::string, EmissionsReport>> reports);
std::string format_table(std::span<const EmissionsRow> rows);

}  // namespace ccm
