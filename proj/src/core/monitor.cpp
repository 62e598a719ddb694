#include "core/monitor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "core/errors.hpp"

namespace ccm {

int Histogram::bin_of(double v) const {
  return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin());
}

std::vector<double> Histogram::counts_of(std::span<const double> values) const {
  std::vector<double> c(static_cast<std::size_t>(bins()), 0.0);
  for (double v : values) c[static_cast<std::size_t>(bin_of(v))] += 1.0;
  return c;
}

nlohmann::json Histogram::to_json() const { return {{"edges", edges}, {"mass", mass}}; }

Histogram Histogram::from_json(const nlohmann::json& j) {
  Histogram h;
  h.edges = j.at("edges").get<std::vector<double>>();
  h.mass = j.at("mass").get<std::vector<double>>();
  if (h.mass.size() != h.edges.size() + 1 || !std::is_sorted(h.edges.begin(), h.edges.end())) {
    throw ValidationError("histogram: need sorted edges and one more mass than edges");
  }
  return h;
}

Histogram quantile_histogram(std::vector<double> values, int bins, bool integer_valued) {
  if (bins < 1) throw ValidationError("histogram: bins must be >= 1");
  if (values.empty()) throw ValidationError("histogram: no reference values");
  std::sort(values.begin(), values.end());
  Histogram h;
  const std::size_t n = values.size();
  for (int k = 1; k < bins; ++k) {
    double e = values[std::min(n - 1, static_cast<std::size_t>(k) * n / static_cast<std::size_t>(bins))];
    if (integer_valued) e = std::round(e) - 0.5;
    if (e <= values.front()) continue;  // would leave the first bin empty
    if (h.edges.empty() || e > h.edges.back()) h.edges.push_back(e);
  }
  h.mass = normalized(h.counts_of(values));
  return h;
}

std::vector<double> normalized(std::span<const double> counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> m(counts.begin(), counts.end());
  if (total > 0.0) {
    for (double& v : m) v /= total;
  }
  return m;
}

double psi(std::span<const double> p, std::span<const double> q, double floor) {
  if (p.size() != q.size()) throw ValidationError("psi: histograms differ in bin count");
  double s = 0.0;
  for (std::size_t b = 0; b < p.size(); ++b) {
    const double pb = std::max(p[b], floor);
    const double qb = std::max(q[b], floor);
    s += (pb - qb) * std::log(pb / qb);
  }
  return s;
}

std::vector<double> gray_values(const cv::Mat& image, int stride) {
  CV_Assert(image.type() == CV_32FC3);
  std::vector<double> out;
  out.reserve(image.total() / static_cast<std::size_t>(std::max(1, stride)) + 1);
  std::size_t k = 0;
  for (int y = 0; y < image.rows; ++y) {
    const auto* row = image.ptr<cv::Vec3f>(y);
    for (int x = 0; x < image.cols; ++x, ++k) {
      if (k % static_cast<std::size_t>(stride) != 0) continue;
      out.push_back((static_cast<double>(row[x][0]) + row[x][1] + row[x][2]) / 3.0);
    }
  }
  return out;
}

std::vector<double> pooled_gray_values(const cv::Mat& image, int pool, int stride) {
  if (pool < 1) throw ValidationError("drift: pool_px must be >= 1");
  if (pool == 1 || image.rows < pool || image.cols < pool) return gray_values(image, stride);
  cv::Mat small;
  cv::resize(image, small, cv::Size(image.cols / pool, image.rows / pool), 0, 0, cv::INTER_AREA);
  return gray_values(small, stride);
}

nlohmann::json DriftReference::to_json() const {
  return {{"intensity", intensity.to_json()}, {"count", count.to_json()}, {"pool_px", pool_px}};
}

DriftReference DriftReference::from_json(const nlohmann::json& j) {
  return {Histogram::from_json(j.at("intensity")), Histogram::from_json(j.at("count")),
          j.value("pool_px", 1)};
}

DriftReference build_reference(std::span<const Sample> images, std::span<const int> counts,
                               int bins, int pool_px) {
  if (pool_px < 1) throw ValidationError("drift: pool_px must be >= 1");
  std::size_t pixels = 0;
  for (const auto& s : images) pixels += s.image.total() / static_cast<std::size_t>(pool_px * pool_px);
  // about a million reference pixels is plenty for decile edges
  const int stride = static_cast<int>(std::max<std::size_t>(1, pixels / 1000000));
  std::vector<double> gray;
  for (const auto& s : images) {
    auto g = pooled_gray_values(s.image, pool_px, stride);
    gray.insert(gray.end(), g.begin(), g.end());
  }
  std::vector<double> c(counts.begin(), counts.end());
  return {quantile_histogram(std::move(gray), bins), quantile_histogram(std::move(c), bins, true), pool_px};
}

void DriftConfig::validate() const {
  if (window_size < 1 || min_window < 1 || min_window > window_size) {
    throw ValidationError("drift: need 1 <= min_window <= window_size");
  }
  if (warn_psi < 0.0 || trigger_psi < 0.0 || trigger_windows < 1) {
    throw ValidationError("drift: thresholds must be >= 0 and trigger_windows >= 1");
  }
}

nlohmann::json DriftConfig::to_json() const {
  return {{"window_size", window_size},
          {"min_window", min_window},
          {"warn_psi", warn_psi},
          {"trigger_psi", trigger_psi},
          {"trigger_windows", trigger_windows}};
}

DriftConfig DriftConfig::from_json(const nlohmann::json& j) {
  DriftConfig c;
  c.window_size = j.value("window_size", c.window_size);
  c.min_window = j.value("min_window", c.min_window);
  c.warn_psi = j.value("warn_psi", c.warn_psi);
  c.trigger_psi = j.value("trigger_psi", c.trigger_psi);
  c.trigger_windows = j.value("trigger_windows", c.trigger_windows);
  c.validate();
  return c;
}

std::string to_string(DriftStatus s) {
  switch (s) {
    case DriftStatus::kOk: return "ok";
    case DriftStatus::kWarn: return "warn";
    case DriftStatus::kTrigger: return "trigger";
  }
  return "ok";
}

nlohmann::json DriftReport::to_json() const {
  return {{"window_id", window_id},   {"input_psi", input_psi},
          {"count_psi", count_psi},   {"status", to_string(status)},
          {"window_size", window_size}, {"deferred", deferred}};
}

DriftMonitor::DriftMonitor(DriftReference reference, DriftConfig cfg)
    : ref_(std::move(reference)), cfg_(cfg),
      intensity_counts_(static_cast<std::size_t>(ref_.intensity.bins()), 0.0),
      counts_(static_cast<std::size_t>(ref_.count.bins()), 0.0) {
  cfg_.validate();
}

std::optional<DriftReport> DriftMonitor::observe(const cv::Mat& image, int count) {
  const auto g = pooled_gray_values(image, ref_.pool_px);
  const auto c = ref_.intensity.counts_of(g);
  for (std::size_t b = 0; b < c.size(); ++b) intensity_counts_[b] += c[b];
  counts_[static_cast<std::size_t>(ref_.count.bin_of(count))] += 1.0;
  ++n_;
  if (n_ >= cfg_.window_size) return tick();
  return std::nullopt;
}

DriftReport DriftMonitor::tick() {
  if (n_ < cfg_.min_window) {
    DriftReport r;
    r.window_id = window_id_;
    r.window_size = n_;
    r.deferred = true;
    return r;
  }
  const auto pi = normalized(intensity_counts_);
  const auto pc = normalized(counts_);
  DriftReport r = evaluate(pi, pc, n_);
  std::fill(intensity_counts_.begin(), intensity_counts_.end(), 0.0);
  std::fill(counts_.begin(), counts_.end(), 0.0);
  n_ = 0;
  return r;
}

DriftReport DriftMonitor::evaluate(std::span<const double> input_mass,
                                   std::span<const double> count_mass, int window_size) {
  DriftReport r;
  r.window_id = window_id_++;
  r.window_size = window_size;
  r.input_psi = psi(input_mass, ref_.intensity.mass);
  r.count_psi = psi(count_mass, ref_.count.mass);
  const double worst = std::max(r.input_psi, r.count_psi);
  consecutive_ = worst > cfg_.trigger_psi ? consecutive_ + 1 : 0;
  if (consecutive_ >= cfg_.trigger_windows) {
    r.status = DriftStatus::kTrigger;
  } else if (worst > cfg_.warn_psi) {
    r.status = DriftStatus::kWarn;
  }
  if (r.status != DriftStatus::kOk) {
    spdlog::warn(R"({{"event":"drift","report":{}}})", r.to_json().dump());
  }
  last_ = r;
  return r;
}

}  // namespace ccm
