#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "core/inference.hpp"
#include "core/monitor.hpp"
#include "core/network.hpp"
#include "core/postproc.hpp"
#include "core/runstore.hpp"

namespace ccm {

/// Row-major run lengths of a binary mask, alternating background and
/// foreground and starting with background (the first run may be 0).
struct RleMask {
  int height = 0;
  int width = 0;
  std::vector<int> runs;

  nlohmann::json to_json() const;
  static RleMask from_json(const nlohmann::json& j);
};

RleMask rle_encode(const cv::Mat& mask);
/// CV_8UC1 {0,1}. Throws ValidationError when the runs do not cover the
/// declared dimensions exactly.
cv::Mat rle_decode(const RleMask& rle);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
/// Throws ValidationError on malformed input.
std::vector<std::uint8_t> base64_decode(const std::string& text);

struct PredictResponse {
  int count = 0;
  RleMask mask;
  std::vector<Centroid> centroids;
  int model_version = 0;
  double latency_ms = 0.0;

  nlohmann::json to_json() const;
  static PredictResponse from_json(const nlohmann::json& j);
};

struct ServiceConfig {
  std::filesystem::path store_root;
  double promotion_threshold = 0.8;
  DriftConfig drift;
  TileOptions tiles;
  double explain_alpha = 0.4;
};

/// A loaded registry version. Immutable once published.
struct ModelSnapshot {
  int version = 0;
  std::string run_id;
  SegmentationNetwork net;
  PostprocConfig postproc;
  std::optional<DriftReference> reference;
};

struct HttpReply {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Transport-independent request handling. Each request re-reads the
/// registry and, when the active version changed, loads it and swaps the
/// snapshot; a request holds one snapshot from start to finish.
class InferenceService {
 public:
  explicit InferenceService(ServiceConfig cfg);

  /// Throws NoModelError when nothing is active.
  PredictResponse predict(const cv::Mat& image);
  /// PNG bytes of the overlay. Throws NoModelError / ValidationError.
  std::vector<unsigned char> explain(const cv::Mat& image, const std::string& layer);

  HttpReply handle_predict(const std::string& body);
  HttpReply handle_explain(const std::string& body);
  HttpReply handle_health();
  HttpReply handle_metrics();

  /// Scores the open monitoring window now (deferred below min_window).
  std::optional<DriftReport> monitor_tick();
  std::optional<DriftReport> last_drift() const;

  /// Currently served snapshot after checking the registry, or null.
  std::shared_ptr<const ModelSnapshot> current();

  RunStore& store() { return store_; }

 private:
  void record_prediction(const ModelSnapshot& model, const cv::Mat& image, int count,
                         double latency_ms);
  void handle_report(const DriftReport& r, int model_version);
  void append_log(const std::filesystem::path& path, const nlohmann::json& line);

  ServiceConfig cfg_;
  RunStore store_;
  std::chrono::steady_clock::time_point started_;

  std::mutex model_mu_;
  std::shared_ptr<const ModelSnapshot> model_;

  mutable std::mutex monitor_mu_;
  std::unique_ptr<DriftMonitor> monitor_;
  int monitor_version_ = 0;
  std::optional<DriftReport> last_report_;
  std::uint64_t windows_total_ = 0;

  std::mutex explain_mu_;
  std::mutex log_mu_;

  std::atomic<std::uint64_t> predict_total_{0};
  std::atomic<std::uint64_t> explain_total_{0};
  std::atomic<std::uint64_t> errors_total_{0};
  std::atomic<double> latency_sum_ms_{0.0};
};

/// Minimal HTTP front end for InferenceService.
class HttpServer {
 public:
  explicit HttpServer(InferenceService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Port 0 picks a free port. Returns the bound port; throws IoError.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ccm
