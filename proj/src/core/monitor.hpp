#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "core/dataset.hpp"

namespace ccm {

/// Bins are delimited by sorted interior edges: bin b holds
/// edges[b-1] <= v < edges[b]; values beyond the ends land in the end bins.
struct Histogram {
  std::vector<double> edges;
  std::vector<double> mass;  // reference mass per bin, sums to 1

  int bins() const { return static_cast<int>(edges.size()) + 1; }
  int bin_of(double v) const;
  /// Un-normalized counts of `values` per bin.
  std::vector<double> counts_of(std::span<const double> values) const;

  nlohmann::json to_json() const;
  static Histogram from_json(const nlohmann::json& j);
};

/// Up to `bins` bins with edges at reference quantiles (duplicates merged).
/// For integer-valued data the edges sit half-way between integers.
Histogram quantile_histogram(std::vector<double> values, int bins = 10,
                             bool integer_valued = false);

/// Population stability index sum_b (p_b - q_b) ln(p_b / q_b), each mass
/// floored at `floor`. Throws ValidationError on length mismatch.
double psi(std::span<const double> p, std::span<const double> q, double floor = 1e-4);

std::vector<double> normalized(std::span<const double> counts);

/// Mean of the RGB channels per pixel, sampled every `stride` pixels.
std::vector<double> gray_values(const cv::Mat& image, int stride = 1);

/// gray_values of the image after pool x pool area averaging. Pooling
/// suppresses sensor noise so a global gain change moves the histogram.
std::vector<double> pooled_gray_values(const cv::Mat& image, int pool, int stride = 1);

/// Reference distributions stored with a trained model.
struct DriftReference {
  Histogram intensity;  // pooled pixel intensity
  Histogram count;      // cells per image
  int pool_px = 4;

  nlohmann::json to_json() const;
  static DriftReference from_json(const nlohmann::json& j);
};

DriftReference build_reference(std::span<const Sample> images, std::span<const int> counts,
                               int bins = 10, int pool_px = 4);

struct DriftConfig {
  int window_size = 100;
  int min_window = 10;
  double warn_psi = 0.2;
  double trigger_psi = 0.25;
  int trigger_windows = 2;

  void validate() const;
  nlohmann::json to_json() const;
  static DriftConfig from_json(const nlohmann::json& j);
};

enum class DriftStatus { kOk, kWarn, kTrigger };
std::string to_string(DriftStatus s);

struct DriftReport {
  int window_id = 0;
  double input_psi = 0.0;
  double count_psi = 0.0;
  DriftStatus status = DriftStatus::kOk;
  int window_size = 0;
  bool deferred = false;  // fewer than min_window requests

  nlohmann::json to_json() const;
};

/// Request-count windows over a stream of predictions. Not thread-safe;
/// callers serialize access.
class DriftMonitor {
 public:
  DriftMonitor(DriftReference reference, DriftConfig cfg = {});

  /// Records one request; returns the report when this request closes a
  /// window.
  std::optional<DriftReport> observe(const cv::Mat& image, int count);
  /// Evaluates the open window now. Returns a deferred report, leaving the
  /// window open, below min_window requests.
  DriftReport tick();
  /// Scores one window given its bin masses; updates the consecutive-window
  /// state used for triggering.
  DriftReport evaluate(std::span<const double> input_mass, std::span<const double> count_mass,
                       int window_size);

  const DriftReference& reference() const { return ref_; }
  const DriftConfig& config() const { return cfg_; }
  int pending() const { return n_; }
  std::optional<DriftReport> last() const { return last_; }

 private:
  DriftReference ref_;
  DriftConfig cfg_;
  std::vector<double> intensity_counts_;
  std::vector<double> counts_;
  int n_ = 0;
  int window_id_ = 0;
  int consecutive_ = 0;
  std::optional<DriftReport> last_;
};

}  // namespace ccm
