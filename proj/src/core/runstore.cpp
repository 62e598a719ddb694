#include "core/runstore.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "core/errors.hpp"
#include "core/hash.hpp"

namespace ccm {
namespace fs = std::filesystem;

namespace {

class StoreLock {
 public:
  explicit StoreLock(const fs::path& path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("runstore: cannot open lock " + path.string() + ": " + std::strerror(errno));
    while (::flock(fd_, LOCK_EX) != 0) {
      if (errno != EINTR) {
        ::close(fd_);
        throw IoError("runstore: cannot lock " + path.string());
      }
    }
  }
  ~StoreLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  StoreLock(const StoreLock&) = delete;
  StoreLock& operator=(const StoreLock&) = delete;

 private:
  int fd_ = -1;
};

void check_run_id(const std::string& id) {
  if (id.empty() || id.size() > 200) throw ValidationError("runstore: run_id must be 1-200 chars");
  for (char c : id) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    if (!ok) throw ValidationError("runstore: run_id '" + id + "' has characters outside [A-Za-z0-9._-]");
  }
  if (id.front() == '.') throw ValidationError("runstore: run_id may not start with '.'");
}

nlohmann::json parse_json_file(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_text_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("runstore: malformed JSON in " + p.string() + ": " + e.what());
  }
}

std::string file_digest(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw CorruptionError("runstore: missing artifact " + p.string());
  Sha256 h;
  std::vector<char> buf(1 << 16);
  while (f) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto n = static_cast<std::size_t>(f.gcount());
    h.update(std::span(reinterpret_cast<const std::uint8_t*>(buf.data()), n));
  }
  return h.hex_digest();
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& text) {
  static std::atomic<unsigned> counter{0};
  const fs::path tmp = path.string() + "." + std::to_string(::getpid()) + "." +
                       std::to_string(counter++) + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("cannot write " + tmp.string() + ": " + std::strerror(errno));
  std::size_t off = 0;
  while (off < text.size()) {
    const ssize_t n = ::write(fd, text.data() + off, text.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      fs::remove(tmp);
      throw IoError("short write to " + tmp.string());
    }
    off += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::string read_text_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::string format_timestamp(TimePoint t) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count();
  std::time_t secs = static_cast<std::time_t>(ms / 1000);
  long frac = static_cast<long>(ms % 1000);
  if (frac < 0) {
    frac += 1000;
    --secs;
  }
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03ldZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, frac);
  return buf;
}

TimePoint parse_timestamp(const std::string& s) {
  std::tm tm{};
  int ms = 0;
  const int n = std::sscanf(s.c_str(), "%d-%d-%dT%d:%d:%d.%dZ", &tm.tm_year, &tm.tm_mon,
                            &tm.tm_mday, &tm.tm_hour, &tm.tm_min, &tm.tm_sec, &ms);
  if (n < 6) throw ValidationError("bad timestamp '" + s + "'");
  tm.tm_year -= 1900;
  tm.tm_mon -= 1;
  const std::time_t secs = timegm(&tm);
  return TimePoint(std::chrono::seconds(secs)) + std::chrono::milliseconds(ms);
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::kRunning: return "running";
    case RunStatus::kCompleted: return "completed";
    case RunStatus::kFailed: return "failed";
  }
  return "running";
}

RunStatus parse_run_status(const std::string& s) {
  if (s == "running") return RunStatus::kRunning;
  if (s == "completed") return RunStatus::kCompleted;
  if (s == "failed") return RunStatus::kFailed;
  throw ValidationError("runstore: unknown status '" + s + "'");
}

// ---------------------------------------------------------------------------

nlohmann::json RunRecord::to_json() const {
  nlohmann::json series = nlohmann::json::array();
  for (const auto& e : epoch_series) {
    series.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr}});
  }
  return {{"run_id", run_id},
          {"created_at", created_at},
          {"finished_at", finished_at},
          {"config", config},
          {"config_hash", config_hash},
          {"split_hash", split_hash},
          {"seed", seed},
          {"loss", loss},
          {"epoch_series", series},
          {"final_metrics", final_metrics},
          {"emissions", emissions ? emissions->to_json() : nlohmann::json(nullptr)},
          {"artifacts",
           {{"weights_path", artifacts.weights_path},
            {"weights_hash", artifacts.weights_hash},
            {"report_path", artifacts.report_path}}},
          {"status", to_string(status)},
          {"diagnostics", diagnostics}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.created_at = j.at("created_at").get<std::string>();
  r.finished_at = j.value("finished_at", "");
  r.config = j.at("config");
  r.config_hash = j.at("config_hash").get<std::string>();
  r.split_hash = j.value("split_hash", "");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.loss = j.value("loss", "");
  for (const auto& e : j.at("epoch_series")) {
    // NaN is stored as null by the JSON writer
    auto num = [](const nlohmann::json& v) {
      return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
    };
    r.epoch_series.push_back({e.at("epoch").get<int>(), num(e.at("train_loss")),
                              num(e.at("val_loss")), num(e.at("lr"))});
  }
  r.final_metrics = j.value("final_metrics", nlohmann::json(nullptr));
  if (j.contains("emissions") && !j["emissions"].is_null()) {
    r.emissions = EmissionsReport::from_json(j["emissions"]);
  }
  const auto& a = j.at("artifacts");
  r.artifacts = {a.value("weights_path", ""), a.value("weights_hash", ""), a.value("report_path", "")};
  r.status = parse_run_status(j.at("status").get<std::string>());
  r.diagnostics = j.value("diagnostics", nlohmann::json::object());
  return r;
}

std::optional<double> RunRecord::det_f1() const {
  if (final_metrics.is_object() && final_metrics.contains("det_f1") &&
      final_metrics["det_f1"].is_number()) {
    return final_metrics["det_f1"].get<double>();
  }
  return std::nullopt;
}

bool RunFilter::matches(const RunRecord& r) const {
  if (loss && r.loss != *loss) return false;
  if (seed && r.seed != *seed) return false;
  if (status && r.status != *status) return false;
  if (min_det_f1) {
    const auto f = r.det_f1();
    if (!f || *f < *min_det_f1) return false;
  }
  return true;
}

nlohmann::json RegistryEntry::to_json() const {
  return {{"model_version", model_version},
          {"run_id", run_id},
          {"promoted_at", promoted_at},
          {"promotion_note", promotion_note},
          {"active", active}};
}

RegistryEntry RegistryEntry::from_json(const nlohmann::json& j) {
  return {j.at("model_version").get<int>(), j.at("run_id").get<std::string>(),
          j.value("promoted_at", ""), j.value("promotion_note", ""), j.value("active", false)};
}

// ---------------------------------------------------------------------------

RunStore::RunStore(fs::path root, double promotion_threshold)
    : root_(std::move(root)), promotion_threshold_(promotion_threshold) {
  if (!(promotion_threshold >= 0.0 && promotion_threshold <= 1.0)) {
    throw ValidationError("runstore: promotion threshold must be in [0,1]");
  }
  std::error_code ec;
  fs::create_directories(root_ / "runs", ec);
  fs::create_directories(root_ / "artifacts", ec);
  if (!fs::is_directory(root_ / "runs")) {
    throw IoError("runstore: cannot create " + (root_ / "runs").string());
  }
}

fs::path RunStore::record_path(const std::string& run_id) const {
  return root_ / "runs" / (run_id + ".json");
}

fs::path RunStore::artifacts_dir(const std::string& run_id) const {
  check_run_id(run_id);
  return root_ / "artifacts" / run_id;
}

std::string RunStore::append(const RunRecord& record) {
  check_run_id(record.run_id);
  StoreLock lock(root_ / ".lock");
  if (fs::exists(record_path(record.run_id))) {
    throw RefusedError("runstore: run_id '" + record.run_id + "' already exists");
  }
  write_file_atomic(record_path(record.run_id), record.to_json().dump(2) + "\n");
  return record.run_id;
}

void RunStore::update(const RunRecord& record) {
  check_run_id(record.run_id);
  StoreLock lock(root_ / ".lock");
  const RunRecord stored = get(record.run_id);
  if (stored.status != RunStatus::kRunning) {
    throw RefusedError("runstore: run '" + record.run_id + "' is " + to_string(stored.status) +
                       " and can no longer be modified");
  }
  write_file_atomic(record_path(record.run_id), record.to_json().dump(2) + "\n");
}

bool RunStore::contains(const std::string& run_id) const {
  return fs::exists(record_path(run_id));
}

RunRecord RunStore::get(const std::string& run_id) const {
  check_run_id(run_id);
  const auto p = record_path(run_id);
  if (!fs::exists(p)) throw NotFoundError("runstore: no run '" + run_id + "'");
  try {
    return RunRecord::from_json(parse_json_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("runstore: bad record " + p.string() + ": " + e.what());
  }
}

std::vector<RunRecord> RunStore::query(const RunFilter& filter) const {
  std::vector<RunRecord> out;
  for (const auto& e : fs::directory_iterator(root_ / "runs")) {
    if (!e.is_regular_file() || e.path().extension() != ".json") continue;
    RunRecord r;
    try {
      r = RunRecord::from_json(parse_json_file(e.path()));
    } catch (const std::exception& ex) {
      spdlog::warn("runstore: skipping unreadable record {}: {}", e.path().string(), ex.what());
      continue;
    }
    if (filter.matches(r)) out.push_back(std::move(r));
  }
  std::sort(out.begin(), out.end(), [](const RunRecord& a, const RunRecord& b) {
    return a.created_at != b.created_at ? a.created_at < b.created_at : a.run_id < b.run_id;
  });
  return out;
}

void RunStore::verify_artifacts(const RunRecord& record) const {
  const auto& a = record.artifacts;
  if (a.weights_path.empty()) throw CorruptionError("runstore: run '" + record.run_id + "' has no weights");
  const auto wp = resolve(a.weights_path);
  if (file_digest(wp) != a.weights_hash) {
    throw CorruptionError("runstore: weights digest mismatch for " + wp.string());
  }
  if (!a.report_path.empty() && !fs::exists(resolve(a.report_path))) {
    throw CorruptionError("runstore: missing report " + resolve(a.report_path).string());
  }
}

std::vector<RegistryEntry> RunStore::registry() const {
  const auto p = root_ / "registry.json";
  std::vector<RegistryEntry> out;
  if (!fs::exists(p)) return out;
  const auto doc = parse_json_file(p);
  for (const auto& e : doc.at("versions")) out.push_back(RegistryEntry::from_json(e));
  return out;
}

std::optional<RegistryEntry> RunStore::active() const {
  for (const auto& e : registry()) {
    if (e.active) return e;
  }
  return std::nullopt;
}

RegistryEntry RunStore::promote(const std::string& run_id, const std::string& note) {
  StoreLock lock(root_ / ".lock");
  const RunRecord r = get(run_id);
  if (r.status != RunStatus::kCompleted) {
    throw RefusedError("promote: run '" + run_id + "' is " + to_string(r.status) + ", not completed");
  }
  try {
    verify_artifacts(r);
  } catch (const CorruptionError& e) {
    throw RefusedError(std::string("promote: ") + e.what());
  }
  const auto f1 = r.det_f1();
  if (!f1) throw RefusedError("promote: run '" + run_id + "' has no det_f1 metric");
  if (*f1 < promotion_threshold_) {
    throw RefusedError("promote: det_f1 " + std::to_string(*f1) + " is below threshold " +
                       std::to_string(promotion_threshold_));
  }
  auto entries = registry();
  int next = 1;
  for (auto& e : entries) {
    next = std::max(next, e.model_version + 1);
    e.active = false;
  }
  RegistryEntry entry{next, run_id, format_timestamp(std::chrono::system_clock::now()), note, true};
  entries.push_back(entry);
  nlohmann::json doc = {{"versions", nlohmann::json::array()}};
  for (const auto& e : entries) doc["versions"].push_back(e.to_json());
  write_file_atomic(root_ / "registry.json", doc.dump(2) + "\n");
  // a new model starts a fresh monitoring baseline
  std::error_code ec;
  fs::remove(drift_flag_path(), ec);
  spdlog::info(R"({{"event":"promotion","model_version":{},"run_id":"{}","det_f1":{}}})", next,
               run_id, *f1);
  return entry;
}

void RunStore::set_drift_flag(const nlohmann::json& details) {
  StoreLock lock(root_ / ".lock");
  write_file_atomic(drift_flag_path(), details.dump() + "\n");
}

void RunStore::clear_drift_flag() {
  StoreLock lock(root_ / ".lock");
  std::error_code ec;
  fs::remove(drift_flag_path(), ec);
}

bool RunStore::drift_flag_set() const { return fs::exists(drift_flag_path()); }

RetrainDecision RunStore::retrain_due(const RetrainPolicy& policy, TimePoint now) const {
  if (policy.honour_drift_flag && drift_flag_set()) return {true, "drift"};
  if (policy.periodic_days) {
    std::optional<TimePoint> last;
    RunFilter completed;
    completed.status = RunStatus::kCompleted;
    for (const auto& r : query(completed)) {
      const auto t = parse_timestamp(r.finished_at.empty() ? r.created_at : r.finished_at);
      if (!last || t > *last) last = t;
    }
    if (!last) return {true, "no-completed-run"};
    const double age_days = std::chrono::duration<double>(now - *last).count() / 86400.0;
    if (age_days >= *policy.periodic_days) return {true, "periodic"};
  }
  return {false, "none"};
}

}  // namespace ccm
