#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/energy.hpp"

namespace ccm {

enum class RunStatus { kRunning, kCompleted, kFailed };

std::string to_string(RunStatus s);
RunStatus parse_run_status(const std::string& s);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

/// Paths are relative to the store root.
struct ArtifactRefs {
  std::string weights_path;
  std::string weights_hash;
  std::string report_path;
};

struct RunRecord {
  std::string run_id;
  std::string created_at;   // ISO-8601 UTC
  std::string finished_at;  // empty while running
  nlohmann::json config;    // full TrainConfig snapshot
  std::string config_hash;
  std::string split_hash;
  std::uint64_t seed = 0;
  std::string loss;
  std::vector<EpochRecord> epoch_series;
  nlohmann::json final_metrics;  // EvalReport summary, null until evaluated
  std::optional<EmissionsReport> emissions;
  ArtifactRefs artifacts;
  RunStatus status = RunStatus::kRunning;
  nlohmann::json diagnostics = nlohmann::json::object();

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
  /// final_metrics.det_f1, if present.
  std::optional<double> det_f1() const;
};

struct RunFilter {
  std::optional<std::string> loss;
  std::optional<std::uint64_t> seed;
  std::optional<RunStatus> status;
  std::optional<double> min_det_f1;

  bool matches(const RunRecord& r) const;
};

struct RegistryEntry {
  int model_version = 0;
  std::string run_id;
  std::string promoted_at;
  std::string promotion_note;
  bool active = false;

  nlohmann::json to_json() const;
  static RegistryEntry from_json(const nlohmann::json& j);
};

struct RetrainPolicy {
  std::optional<double> periodic_days;
  bool honour_drift_flag = true;
};

struct RetrainDecision {
  bool due = false;
  std::string reason;  // "drift", "periodic", "no-completed-run" or "none"
};

using TimePoint = std::chrono::system_clock::time_point;

std::string format_timestamp(TimePoint t);
/// Throws ValidationError on malformed input.
TimePoint parse_timestamp(const std::string& s);

/// Directory-backed run store and model registry.
///
///   <root>/runs/<run_id>.json
///   <root>/registry.json
///   <root>/artifacts/<run_id>/weights.bin (+ weights.bin.json), report.json
///   <root>/drift.flag
///
/// Every write goes to a temporary file that is renamed into place while
/// holding an exclusive lock on <root>/.lock. Readers take no lock.
class RunStore {
 public:
  explicit RunStore(std::filesystem::path root, double promotion_threshold = 0.8);

  const std::filesystem::path& root() const { return root_; }
  double promotion_threshold() const { return promotion_threshold_; }
  std::filesystem::path artifacts_dir(const std::string& run_id) const;
  std::filesystem::path resolve(const std::string& relative) const { return root_ / relative; }

  /// Throws RefusedError when run_id is already present.
  std::string append(const RunRecord& record);
  /// Replaces a record whose stored status is still running. Throws
  /// RefusedError for completed or failed records.
  void update(const RunRecord& record);

  bool contains(const std::string& run_id) const;
  /// Throws NotFoundError.
  RunRecord get(const std::string& run_id) const;
  /// Ordered by created_at, then run_id.
  std::vector<RunRecord> query(const RunFilter& filter = {}) const;

  /// Throws CorruptionError when a referenced artifact is missing or its
  /// digest does not match.
  void verify_artifacts(const RunRecord& record) const;

  /// Throws RefusedError naming the reason (status, artifacts, or det_f1
  /// below the threshold).
  RegistryEntry promote(const std::string& run_id, const std::string& note = "");
  std::vector<RegistryEntry> registry() const;
  std::optional<RegistryEntry> active() const;

  std::filesystem::path drift_flag_path() const { return root_ / "drift.flag"; }
  void set_drift_flag(const nlohmann::json& details);
  void clear_drift_flag();
  bool drift_flag_set() const;

  RetrainDecision retrain_due(const RetrainPolicy& policy, TimePoint now) const;

 private:
  std::filesystem::path record_path(const std::string& run_id) const;

  std::filesystem::path root_;
  double promotion_threshold_;
};

/// Writes `text` to `path` via a sibling temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace ccm
