#include "core/energy.hpp"

#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include <spdlog/spdlog.h>

#include "core/errors.hpp"

namespace ccm {
namespace {

constexpr double kJoulesPerKwh = 3.6e6;

double process_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

}  // namespace

std::string to_string(ProbeKind kind) {
  switch (kind) {
    case ProbeKind::kMeasured: return "measured";
    case ProbeKind::kTdpEstimate: return "tdp-estimate";
    case ProbeKind::kStub: return "stub";
  }
  return "stub";
}

ProbeKind parse_probe_kind(const std::string& s) {
  if (s == "measured") return ProbeKind::kMeasured;
  if (s == "tdp-estimate") return ProbeKind::kTdpEstimate;
  if (s == "stub") return ProbeKind::kStub;
  throw ValidationError("energy: unknown probe kind '" + s + "'");
}

// ---------------------------------------------------------------------------

RaplProbe::RaplProbe(std::string root) {
  std::error_code ec;
  if (!std::filesystem::is_directory(root, ec)) return;
  for (const auto& e : std::filesystem::directory_iterator(root, ec)) {
    const auto name = e.path().filename().string();
    // top-level package zones only: intel-rapl:N
    if (name.rfind("intel-rapl:", 0) != 0 || name.find(':', 11) != std::string::npos) continue;
    const auto f = e.path() / "energy_uj";
    std::ifstream in(f);
    double v = 0;
    if (in >> v) zones_.push_back(f.string());
  }
}

PowerReading RaplProbe::read() {
  double total = 0.0;
  for (const auto& z : zones_) {
    std::ifstream in(z);
    double v = 0;
    in >> v;
    total += v;
  }
  const auto now = std::chrono::steady_clock::now();
  PowerReading r;
  if (primed_) {
    const double dt = std::chrono::duration<double>(now - last_t_).count();
    const double du = total - last_uj_;  // counter wrap shows up as negative
    if (dt > 0.0 && du >= 0.0) r.cpu_watts = du * 1e-6 / dt;
  }
  primed_ = true;
  last_uj_ = total;
  last_t_ = now;
  return r;
}

TdpEstimateProbe::TdpEstimateProbe(double tdp_watts)
    : tdp_watts_(tdp_watts), last_cpu_s_(process_cpu_seconds()),
      last_t_(std::chrono::steady_clock::now()) {}

PowerReading TdpEstimateProbe::read() {
  const double cpu = process_cpu_seconds();
  const auto now = std::chrono::steady_clock::now();
  const double wall = std::chrono::duration<double>(now - last_t_).count();
  const unsigned cores = std::max(1u, std::thread::hardware_concurrency());
  PowerReading r;
  if (wall > 0.0) {
    const double share = std::clamp((cpu - last_cpu_s_) / (wall * cores), 0.0, 1.0);
    r.cpu_watts = tdp_watts_ * share;
  }
  last_cpu_s_ = cpu;
  last_t_ = now;
  return r;
}

std::unique_ptr<PowerProbe> resolve_probe(std::unique_ptr<PowerProbe> preferred, double tdp_watts) {
  if (preferred && preferred->available()) return preferred;
  spdlog::warn("energy: power probe unavailable, falling back to a TDP estimate ({} W)", tdp_watts);
  return std::make_unique<TdpEstimateProbe>(tdp_watts);
}

std::unique_ptr<PowerProbe> default_probe(double tdp_watts) {
  return resolve_probe(std::make_unique<RaplProbe>(), tdp_watts);
}

// ---------------------------------------------------------------------------

double co2_from_energy(double cpu_kwh, double gpu_kwh, double intensity) {
  return (cpu_kwh + gpu_kwh) * intensity;
}

nlohmann::json EmissionsReport::to_json() const {
  return {{"cpu_kwh", cpu_kwh},
          {"gpu_kwh", gpu_kwh},
          {"co2_kg", co2_kg},
          {"carbon_intensity_kg_per_kwh", carbon_intensity_kg_per_kwh},
          {"duration_s", duration_s},
          {"sample_period_s", sample_period_s},
          {"probe_kind", to_string(probe_kind)}};
}

EmissionsReport EmissionsReport::from_json(const nlohmann::json& j) {
  EmissionsReport r;
  r.cpu_kwh = j.at("cpu_kwh").get<double>();
  r.gpu_kwh = j.at("gpu_kwh").get<double>();
  r.co2_kg = j.at("co2_kg").get<double>();
  r.carbon_intensity_kg_per_kwh = j.at("carbon_intensity_kg_per_kwh").get<double>();
  r.duration_s = j.value("duration_s", 0.0);
  r.sample_period_s = j.value("sample_period_s", 1.0);
  r.probe_kind = parse_probe_kind(j.value("probe_kind", "stub"));
  return r;
}

std::string EmissionsReport::csv_header() {
  return "label,cpu_kwh,gpu_kwh,co2_kg,carbon_intensity_kg_per_kwh,duration_s,sample_period_s,"
         "probe_kind";
}

std::string EmissionsReport::csv_row(const std::string& label) const {
  std::ostringstream os;
  os << std::setprecision(10) << label << ',' << cpu_kwh << ',' << gpu_kwh << ',' << co2_kg << ','
     << carbon_intensity_kg_per_kwh << ',' << duration_s << ',' << sample_period_s << ','
     << to_string(probe_kind);
  return os.str();
}

void EnergyIntegrator::add(double t_s, const PowerReading& r) { samples_.emplace_back(t_s, r); }

EmissionsReport EnergyIntegrator::report(double carbon_intensity, double sample_period_s,
                                         ProbeKind kind) const {
  EmissionsReport out;
  out.carbon_intensity_kg_per_kwh = carbon_intensity;
  out.sample_period_s = sample_period_s;
  out.probe_kind = kind;
  double cpu_j = 0.0, gpu_j = 0.0;
  for (std::size_t i = 1; i < samples_.size(); ++i) {
    const double dt = samples_[i].first - samples_[i - 1].first;
    if (dt <= 0.0) continue;
    cpu_j += 0.5 * dt * (samples_[i].second.cpu_watts + samples_[i - 1].second.cpu_watts);
    gpu_j += 0.5 * dt * (samples_[i].second.gpu_watts + samples_[i - 1].second.gpu_watts);
  }
  if (samples_.size() >= 2) out.duration_s = samples_.back().first - samples_.front().first;
  out.cpu_kwh = std::max(0.0, cpu_j) / kJoulesPerKwh;
  out.gpu_kwh = std::max(0.0, gpu_j) / kJoulesPerKwh;
  out.co2_kg = co2_from_energy(out.cpu_kwh, out.gpu_kwh, carbon_intensity);
  return out;
}

Clock steady_clock_seconds() {
  return [] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
  };
}

EnergyMeter::EnergyMeter(PowerProbe& probe, MeterOptions options)
    : probe_(probe), options_(std::move(options)) {
  if (!options_.clock) options_.clock = steady_clock_seconds();
  if (!(options_.sample_period_s > 0.0)) throw ValidationError("energy: sample period must be > 0");
  if (options_.carbon_intensity < 0.0) throw ValidationError("energy: negative carbon intensity");
}

EnergyMeter::~EnergyMeter() {
  {
    std::lock_guard lk(mu_);
    running_ = false;
  }
  cv_.notify_all();
  if (sampler_.joinable()) sampler_.join();
}

void EnergyMeter::sample() { integrator_.add(options_.clock(), probe_.read()); }

void EnergyMeter::start() {
  std::unique_lock lk(mu_);
  if (running_) return;
  running_ = true;
  sample();
  sampler_ = std::thread([this] {
    const auto period = std::chrono::duration<double>(options_.sample_period_s);
    std::unique_lock lock(mu_);
    while (running_) {
      if (cv_.wait_for(lock, period, [this] { return !running_; })) break;
      sample();
    }
  });
}

EmissionsReport EnergyMeter::stop() {
  {
    std::lock_guard lk(mu_);
    if (!running_) return integrator_.report(options_.carbon_intensity, options_.sample_period_s,
                                             probe_.kind());
    running_ = false;
  }
  cv_.notify_all();
  if (sampler_.joinable()) sampler_.join();
  std::lock_guard lk(mu_);
  sample();
  return integrator_.report(options_.carbon_intensity, options_.sample_period_s, probe_.kind());
}

// ---------------------------------------------------------------------------

std::vector<EmissionsRow> compare(std::span<const std::pair<std::string, EmissionsReport>> reports) {
  std::vector<EmissionsRow> rows;
  std::map<std::string, std::size_t> index;
  for (const auto& [label, r] : reports) {
    auto [it, inserted] = index.emplace(label, rows.size());
    if (inserted) rows.push_back(EmissionsRow{label});
    EmissionsRow& row = rows[it->second];
    ++row.runs;
    row.cpu_kwh += r.cpu_kwh;
    row.gpu_kwh += r.gpu_kwh;
    row.co2_kg += r.co2_kg;
  }
  double lowest = std::numeric_limits<double>::infinity();
  for (auto& row : rows) {
    row.cpu_kwh /= row.runs;
    row.gpu_kwh /= row.runs;
    row.co2_kg /= row.runs;
    lowest = std::min(lowest, row.co2_kg);
  }
  for (auto& row : rows) {
    if (lowest > 0.0) {
      row.ratio = row.co2_kg / lowest;
    } else {
      row.ratio = row.co2_kg == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    }
  }
  return rows;
}

std::string format_table(std::span<const EmissionsRow> rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "label" << std::right << std::setw(6) << "runs"
     << std::setw(14) << "co2_kg" << std::setw(14) << "cpu_kwh" << std::setw(14) << "gpu_kwh"
     << std::setw(10) << "ratio" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(12) << r.label << std::right << std::setw(6) << r.runs
       << std::setprecision(6) << std::setw(14) << r.co2_kg << std::setw(14) << r.cpu_kwh
       << std::setw(14) << r.gpu_kwh << std::setprecision(4) << std::setw(10) << r.ratio << '\n';
  }
  return os.str();
}

}  // namespace ccm
