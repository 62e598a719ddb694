#include "core/service.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "core/errors.hpp"
#include "core/explain.hpp"
#include "core/image_io.hpp"

namespace ccm {

// ---------------------------------------------------------------------------
// wire formats

nlohmann::json RleMask::to_json() const {
  return {{"height", height}, {"width", width}, {"runs", runs}};
}

RleMask RleMask::from_json(const nlohmann::json& j) {
  return {j.at("height").get<int>(), j.at("width").get<int>(), j.at("runs").get<std::vector<int>>()};
}

RleMask rle_encode(const cv::Mat& mask) {
  CV_Assert(mask.type() == CV_8UC1);
  RleMask r{mask.rows, mask.cols, {}};
  std::uint8_t cur = 0;
  int run = 0;
  for (int y = 0; y < mask.rows; ++y) {
    const auto* row = mask.ptr<std::uint8_t>(y);
    for (int x = 0; x < mask.cols; ++x) {
      const std::uint8_t v = row[x] != 0 ? 1 : 0;
      if (v != cur) {
        r.runs.push_back(run);
        run = 0;
        cur = v;
      }
      ++run;
    }
  }
  r.runs.push_back(run);
  return r;
}

cv::Mat rle_decode(const RleMask& rle) {
  if (rle.height < 0 || rle.width < 0) throw ValidationError("rle: negative dimensions");
  cv::Mat mask(rle.height, rle.width, CV_8UC1, cv::Scalar(0));
  const std::size_t total = mask.total();
  std::size_t pos = 0;
  std::uint8_t v = 0;
  auto* out = mask.ptr<std::uint8_t>();
  for (int run : rle.runs) {
    if (run < 0 || pos + static_cast<std::size_t>(run) > total) {
      throw ValidationError("rle: runs exceed the declared dimensions");
    }
    std::fill(out + pos, out + pos + run, v);
    pos += static_cast<std::size_t>(run);
    v ^= 1;
  }
  if (pos != total) throw ValidationError("rle: runs cover " + std::to_string(pos) + " of " + std::to_string(total) + " pixels");
  return mask;
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  std::string clean;
  clean.reserve(text.size());
  for (char c : text) {
    if (c != '\n' && c != '\r' && c != ' ' && c != '\t') clean.push_back(c);
  }
  if (clean.size() % 4 != 0) throw ValidationError("base64: length is not a multiple of 4");
  std::vector<std::uint8_t> out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) throw ValidationError("base64: invalid character");
  std::size_t pad = 0;
  if (!clean.empty() && clean.back() == '=') ++pad;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

nlohmann::json PredictResponse::to_json() const {
  nlohmann::json c = nlohmann::json::array();
  for (const auto& p : centroids) c.push_back({p.row, p.col});
  return {{"count", count},
          {"mask", mask.to_json()},
          {"centroids", c},
          {"model_version", model_version},
          {"latency_ms", latency_ms}};
}

PredictResponse PredictResponse::from_json(const nlohmann::json& j) {
  PredictResponse r;
  r.count = j.at("count").get<int>();
  r.mask = RleMask::from_json(j.at("mask"));
  for (const auto& p : j.at("centroids")) r.centroids.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  r.model_version = j.at("model_version").get<int>();
  r.latency_ms = j.value("latency_ms", 0.0);
  return r;
}

// ---------------------------------------------------------------------------
// service

namespace {

double since_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

HttpReply json_reply(int status, const nlohmann::json& body) {
  return {status, "application/json", body.dump()};
}

HttpReply error_reply(int status, const std::string& kind, const std::string& message) {
  return json_reply(status, {{"error", kind}, {"message", message}});
}

cv::Mat decode_payload(const nlohmann::json& req) {
  if (!req.is_object() || !req.contains("image") || !req["image"].is_string()) {
    throw ValidationError("payload must be a JSON object with a base64 PNG in \"image\"");
  }
  const auto bytes = base64_decode(req["image"].get<std::string>());
  try {
    return decode_image(bytes);
  } catch (const IoError& e) {
    throw ValidationError(std::string("undecodable image: ") + e.what());
  }
}

}  // namespace

InferenceService::InferenceService(ServiceConfig cfg)
    : cfg_(std::move(cfg)), store_(cfg_.store_root, cfg_.promotion_threshold),
      started_(std::chrono::steady_clock::now()) {
  cfg_.drift.validate();
  std::filesystem::create_directories(cfg_.store_root / "logs");
}

std::shared_ptr<const ModelSnapshot> InferenceService::current() {
  const auto active = store_.active();
  std::lock_guard lk(model_mu_);
  if (!active) {
    model_.reset();
    return nullptr;
  }
  if (model_ && model_->version == active->model_version) return model_;

  const RunRecord rec = store_.get(active->run_id);
  const auto weights = store_.resolve(rec.artifacts.weights_path);
  auto snap = std::make_shared<ModelSnapshot>(ModelSnapshot{
      active->model_version, active->run_id, load_network(weights), PostprocConfig{}, std::nullopt});
  if (snap->net.weights_hash() != rec.artifacts.weights_hash) {
    throw CorruptionError("service: weights of run " + rec.run_id + " do not match its record");
  }
  if (rec.config.contains("postproc")) snap->postproc = PostprocConfig::from_json(rec.config["postproc"]);
  const auto side = read_sidecar(weights);
  if (!side.reference.is_null()) snap->reference = DriftReference::from_json(side.reference);
  model_ = snap;
  spdlog::info(R"({{"event":"model_swap","model_version":{},"run_id":"{}"}})", snap->version, snap->run_id);
  return model_;
}

PredictResponse InferenceService::predict(const cv::Mat& image) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto model = current();
  if (!model) throw NoModelError("no active model version in the registry");
  const cv::Mat logits = predict_logits(model->net, image, cfg_.tiles);
  const CountResult cr = count_cells(logits, model->postproc);
  PredictResponse r;
  r.count = cr.count;
  r.mask = rle_encode(cr.mask);
  r.centroids = cr.centroids;
  r.model_version = model->version;
  r.latency_ms = since_ms(t0);
  record_prediction(*model, image, r.count, r.latency_ms);
  return r;
}

std::vector<unsigned char> InferenceService::explain(const cv::Mat& image, const std::string& layer) {
  const auto model = current();
  if (!model) throw NoModelError("no active model version in the registry");
  std::lock_guard lk(explain_mu_);  // bounds memory held by gradient buffers
  const Heatmap h = grad_cam(model->net, image, layer.empty() ? kDefaultCamLayer : layer);
  ++explain_total_;
  return render_png(overlay(image, h.values, cfg_.explain_alpha));
}

void InferenceService::record_prediction(const ModelSnapshot& model, const cv::Mat& image,
                                         int count, double latency_ms) {
  ++predict_total_;
  latency_sum_ms_.fetch_add(latency_ms);
  cv::Scalar mean, sd;
  cv::meanStdDev(image.reshape(1), mean, sd);
  append_log(cfg_.store_root / "logs" / "requests.jsonl",
             {{"ts", format_timestamp(std::chrono::system_clock::now())},
              {"endpoint", "predict"},
              {"model_version", model.version},
              {"latency_ms", latency_ms},
              {"count", count},
              {"input", {{"height", image.rows}, {"width", image.cols}, {"mean", mean[0]}, {"std", sd[0]}}}});
  std::optional<DriftReport> report;
  {
    std::lock_guard lk(monitor_mu_);
    if (monitor_version_ != model.version) {
      monitor_.reset();
      monitor_version_ = model.version;
      if (model.reference) monitor_ = std::make_unique<DriftMonitor>(*model.reference, cfg_.drift);
    }
    if (monitor_) report = monitor_->observe(image, count);
  }
  if (report) handle_report(*report, model.version);
}

std::optional<DriftReport> InferenceService::monitor_tick() {
  std::optional<DriftReport> report;
  int version = 0;
  {
    std::lock_guard lk(monitor_mu_);
    if (!monitor_) return std::nullopt;
    report = monitor_->tick();
    version = monitor_version_;
  }
  if (!report->deferred) handle_report(*report, version);
  return report;
}

std::optional<DriftReport> InferenceService::last_drift() const {
  std::lock_guard lk(monitor_mu_);
  return last_report_;
}

void InferenceService::handle_report(const DriftReport& r, int model_version) {
  {
    std::lock_guard lk(monitor_mu_);
    last_report_ = r;
    ++windows_total_;
  }
  nlohmann::json line = r.to_json();
  line["ts"] = format_timestamp(std::chrono::system_clock::now());
  line["model_version"] = model_version;
  append_log(cfg_.store_root / "logs" / "drift.jsonl", line);
  if (r.status == DriftStatus::kTrigger) store_.set_drift_flag(line);
}

void InferenceService::append_log(const std::filesystem::path& path, const nlohmann::json& line) {
  std::lock_guard lk(log_mu_);
  std::ofstream f(path, std::ios::app);
  if (f) f << line.dump() << '\n';
}

HttpReply InferenceService::handle_predict(const std::string& body) {
  try {
    const auto req = nlohmann::json::parse(body);
    return json_reply(200, predict(decode_payload(req)).to_json());
  } catch (const nlohmann::json::exception& e) {
    ++errors_total_;
    return error_reply(400, "bad_request", std::string("malformed JSON: ") + e.what());
  } catch (const ValidationError& e) {
    ++errors_total_;
    return error_reply(400, "bad_request", e.what());
  } catch (const NoModelError& e) {
    ++errors_total_;
    return error_reply(503, "no_model", e.what());
  } catch (const std::exception& e) {
    ++errors_total_;
    return error_reply(500, "internal", e.what());
  }
}

HttpReply InferenceService::handle_explain(const std::string& body) {
  try {
    const auto req = nlohmann::json::parse(body);
    const std::string layer = req.is_object() ? req.value("layer", "") : "";
    const auto png = explain(decode_payload(req), layer);
    return {200, "image/png", std::string(png.begin(), png.end())};
  } catch (const nlohmann::json::exception& e) {
    ++errors_total_;
    return error_reply(400, "bad_request", std::string("malformed JSON: ") + e.what());
  } catch (const ValidationError& e) {
    ++errors_total_;
    return error_reply(400, "bad_request", e.what());
  } catch (const NoModelError& e) {
    ++errors_total_;
    return error_reply(503, "no_model", e.what());
  } catch (const std::exception& e) {
    ++errors_total_;
    return error_reply(500, "internal", e.what());
  }
}

HttpReply InferenceService::handle_health() {
  const double uptime = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  std::shared_ptr<const ModelSnapshot> model;
  std::string problem;
  try {
    model = current();
  } catch (const std::exception& e) {
    problem = e.what();
  }
  nlohmann::json j = {{"status", model ? "ok" : "degraded"},
                      {"model_version", model ? nlohmann::json(model->version) : nlohmann::json(nullptr)},
                      {"uptime_s", uptime}};
  if (!problem.empty()) j["error"] = problem;
  return json_reply(200, j);
}

HttpReply InferenceService::handle_metrics() {
  std::ostringstream os;
  const auto n = predict_total_.load();
  os << "predict_requests_total " << n << '\n'
     << "explain_requests_total " << explain_total_.load() << '\n'
     << "request_errors_total " << errors_total_.load() << '\n'
     << "predict_latency_ms_mean " << (n > 0 ? latency_sum_ms_.load() / static_cast<double>(n) : 0.0) << '\n'
     << "uptime_s " << std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count() << '\n';
  {
    std::lock_guard lk(monitor_mu_);
    os << "model_version " << monitor_version_ << '\n'
       << "drift_windows_total " << windows_total_ << '\n'
       << "drift_pending_requests " << (monitor_ ? monitor_->pending() : 0) << '\n';
    if (last_report_) {
      os << "drift_input_psi " << last_report_->input_psi << '\n'
         << "drift_count_psi " << last_report_->count_psi << '\n'
         << "drift_status " << to_string(last_report_->status) << '\n';
    }
  }
  os << "drift_flag " << (store_.drift_flag_set() ? 1 : 0) << '\n';
  return {200, "text/plain", os.str()};
}

}  // namespace ccm
