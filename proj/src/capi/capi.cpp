#include "ccmlops/ccmlops.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include <opencv2/core.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "core/config.hpp"
#include "core/energy.hpp"
#include "core/errors.hpp"
#include "core/explain.hpp"
#include "core/hash.hpp"
#include "core/image_io.hpp"
#include "core/inference.hpp"
#include "core/runstore.hpp"
#include "core/service.hpp"
#include "core/synth.hpp"
#include "core/trainer.hpp"

struct ccm_store {
  ccm::RunStore store;
};

struct ccm_network {
  ccm::SegmentationNetwork net;
};

struct ccm_server {
  std::unique_ptr<ccm::InferenceService> service;
  std::unique_ptr<ccm::HttpServer> http;
};

namespace {

using nlohmann::json;

thread_local std::string g_last_error;

// Logs go to stderr so that stdout stays machine-readable.
const bool g_logger_ready = [] {
  auto logger = spdlog::stderr_color_mt("ccmlops");
  spdlog::set_default_logger(logger);
  return true;
}();

template <typename F>
ccm_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return CCM_OK;
  } catch (const ccm::ShapeError& e) {
    g_last_error = e.what();
    return CCM_ERR_SHAPE;
  } catch (const ccm::ValidationError& e) {
    g_last_error = e.what();
    return CCM_ERR_INVALID_ARGUMENT;
  } catch (const ccm::IoError& e) {
    g_last_error = e.what();
    return CCM_ERR_IO;
  } catch (const ccm::CorruptionError& e) {
    g_last_error = e.what();
    return CCM_ERR_CORRUPT;
  } catch (const ccm::NotFoundError& e) {
    g_last_error = e.what();
    return CCM_ERR_NOT_FOUND;
  } catch (const ccm::RefusedError& e) {
    g_last_error = e.what();
    return CCM_ERR_REFUSED;
  } catch (const ccm::NoModelError& e) {
    g_last_error = e.what();
    return CCM_ERR_NO_MODEL;
  } catch (const json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return CCM_ERR_INVALID_ARGUMENT;
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return CCM_ERR_INVALID_ARGUMENT;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CCM_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return CCM_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put(char** out, const json& j) {
  if (out != nullptr) *out = dup_string(j.dump());
}

void require(const void* p, const char* what) {
  if (p == nullptr) throw ccm::ValidationError(std::string(what) + " must not be NULL");
}

ccm::PipelineConfig config_from(const char* config_json) {
  if (config_json == nullptr || *config_json == '\0') return ccm::PipelineConfig::from_json(json::object());
  return ccm::PipelineConfig::from_json(json::parse(config_json));
}

std::vector<ccm::Sample> load_nonempty(const std::string& root) {
  auto samples = ccm::load_dataset(root);
  if (samples.empty()) {
    throw ccm::ValidationError("no samples under '" + root + "'; generate data with synth first");
  }
  return samples;
}

ccm::TrainOptions train_options(const ccm::PipelineConfig& cfg, ccm::RunStore* store) {
  ccm::TrainOptions o;
  o.store = store;
  o.probe = cfg.energy.make_probe();
  o.meter.carbon_intensity = cfg.energy.carbon_intensity;
  o.meter.sample_period_s = cfg.energy.sample_period_s;
  return o;
}

json config_block(const ccm::PipelineConfig& cfg) {
  return {{"config", cfg.to_json()}, {"config_hash", cfg.hash()}};
}

}  // namespace

extern "C" {

const char* ccm_version(void) { return "0.3.0"; }

const char* ccm_last_error(void) { return g_last_error.c_str(); }

const char* ccm_status_name(ccm_status status) {
  switch (status) {
    case CCM_OK: return "ok";
    case CCM_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case CCM_ERR_SHAPE: return "shape";
    case CCM_ERR_IO: return "io";
    case CCM_ERR_CORRUPT: return "corrupt";
    case CCM_ERR_NOT_FOUND: return "not_found";
    case CCM_ERR_REFUSED: return "refused";
    case CCM_ERR_NO_MODEL: return "no_model";
    case CCM_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

void ccm_free_string(char* s) { std::free(s); }

ccm_status ccm_set_log_level(const char* level) {
  return guarded([&] {
    require(level, "level");
    const auto lvl = spdlog::level::from_str(level);
    if (lvl == spdlog::level::off && std::strcmp(level, "off") != 0) {
      throw ccm::ValidationError(std::string("unknown log level '") + level + "'");
    }
    spdlog::set_level(lvl);
  });
}

ccm_status ccm_config_resolve(const char* path_or_null, const char* const* overrides,
                              size_t n_overrides, char** out_json) {
  return guarded([&] {
    std::vector<std::string> ov;
    for (size_t i = 0; i < n_overrides; ++i) {
      require(overrides[i], "override");
      ov.emplace_back(overrides[i]);
    }
    std::optional<std::filesystem::path> file;
    if (path_or_null != nullptr && *path_or_null != '\0') file = path_or_null;
    put(out_json, config_block(ccm::resolve_config(file, ov)));
  });
}

ccm_status ccm_synth(const char* config_json, const char* out_dir, int count, char** out_json) {
  return guarded([&] {
    require(out_dir, "out_dir");
    const auto cfg = config_from(config_json);
    const int n = count > 0 ? count : cfg.synth_count;
    const auto samples = ccm::generate(cfg.synth, n);
    ccm::write_synthetic(samples, cfg.synth, out_dir);
    ccm::write_file_atomic(std::filesystem::path(out_dir) / "pipeline_config.json",
                           config_block(cfg).dump(2) + "\n");
    int cells = 0;
    for (const auto& s : samples) cells += s.true_count;
    put(out_json, {{"out_dir", out_dir}, {"images", n}, {"total_cells", cells}, {"config_hash", cfg.hash()}});
  });
}

ccm_status ccm_split(const char* config_json, const char* data_root, const char* out_path,
                     char** out_json) {
  return guarded([&] {
    require(data_root, "data_root");
    require(out_path, "out_path");
    const auto cfg = config_from(config_json);
    const auto samples = load_nonempty(data_root);
    const auto split = ccm::make_split(samples, cfg.train.train_fraction, cfg.train.seed);
    json j = split.to_json();
    j["config_hash"] = cfg.hash();
    j["config"] = cfg.to_json();
    const std::filesystem::path p(out_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    ccm::write_file_atomic(p, j.dump(2) + "\n");
    put(out_json, {{"out", out_path},
                   {"n_train", split.train_ids.size()},
                   {"n_val", split.val_ids.size()},
                   {"split_hash", split.split_hash},
                   {"config_hash", cfg.hash()}});
  });
}

ccm_status ccm_train(const char* config_json, char** out_json) {
  return guarded([&] {
    const auto cfg = config_from(config_json);
    const auto data = load_nonempty(cfg.data_root);
    ccm::RunStore store(cfg.run_store, cfg.promotion_threshold);
    const auto rec = ccm::train(data, cfg.train, train_options(cfg, &store));
    put(out_json, rec.to_json());
  });
}

ccm_status ccm_ablate(const char* config_json, const uint64_t* seeds, size_t n_seeds,
                      const char* const* losses, size_t n_losses, int jobs, char** out_json) {
  return guarded([&] {
    if (n_seeds > 0) require(seeds, "seeds");
    if (n_losses > 0) require(losses, "losses");
    const auto cfg = config_from(config_json);
    std::vector<std::uint64_t> s(seeds, seeds + n_seeds);
    std::vector<ccm::LossKind> l;
    for (size_t i = 0; i < n_losses; ++i) {
      require(losses[i], "loss name");
      l.push_back(ccm::parse_loss_kind(losses[i]));
    }
    const auto data = load_nonempty(cfg.data_root);
    ccm::RunStore store(cfg.run_store, cfg.promotion_threshold);
    const auto result = ccm::ablation(data, s, l, cfg.train, train_options(cfg, &store), jobs);
    json j = result.summary_json();
    j["table"] = ccm::format_summary(result.summary);
    j["config_hash"] = cfg.hash();
    json artifact = j;
    artifact["config"] = cfg.to_json();
    std::string ts = ccm::format_timestamp(std::chrono::system_clock::now());
    for (char& c : ts) {
      if (c == ':' || c == '.') c = '-';
    }
    const auto dir = store.root() / "ablations";
    std::filesystem::create_directories(dir);
    ccm::write_file_atomic(dir / ("ablation-" + ts + ".json"), artifact.dump(2) + "\n");
    j["summary_path"] = (dir / ("ablation-" + ts + ".json")).string();
    put(out_json, j);
  });
}

ccm_status ccm_evaluate(const char* config_json, const char* weights_path, const char* data_root,
                        const char* split_path_or_null, char** out_json) {
  return guarded([&] {
    require(weights_path, "weights_path");
    require(data_root, "data_root");
    const auto cfg = config_from(config_json);
    const auto net = ccm::load_network(weights_path);
    auto samples = load_nonempty(data_root);
    if (split_path_or_null != nullptr && *split_path_or_null != '\0') {
      const auto split = ccm::load_split(split_path_or_null);
      std::vector<ccm::Sample> val;
      for (auto& s : samples) {
        if (std::binary_search(split.val_ids.begin(), split.val_ids.end(), s.image_id)) val.push_back(std::move(s));
      }
      samples = std::move(val);
    }
    const auto report = ccm::evaluate(ccm::NetworkSegmenter(net), samples, cfg.train.postproc, cfg.train.metrics);
    json j = report.to_json();
    j["weights_hash"] = net.weights_hash();
    j["config_hash"] = cfg.hash();
    j["config"] = cfg.to_json();
    put(out_json, j);
  });
}

ccm_status ccm_emissions_report(const char* store_root, char** out_json) {
  return guarded([&] {
    require(store_root, "store_root");
    ccm::RunStore store(store_root);
    json runs = json::array();
    std::vector<std::pair<std::string, ccm::EmissionsReport>> reports;
    std::string csv = ccm::EmissionsReport::csv_header() + ",run_id\n";
    for (const auto& r : store.query()) {
      if (!r.emissions) continue;
      runs.push_back({{"run_id", r.run_id}, {"loss", r.loss}, {"seed", r.seed},
                      {"status", ccm::to_string(r.status)}, {"emissions", r.emissions->to_json()}});
      if (r.status == ccm::RunStatus::kCompleted) reports.emplace_back(r.loss, *r.emissions);
      csv += r.emissions->csv_row(r.loss) + "," + r.run_id + "\n";
    }
    const auto rows = ccm::compare(reports);
    json cmp = json::array();
    for (const auto& row : rows) {
      cmp.push_back({{"label", row.label}, {"runs", row.runs}, {"cpu_kwh", row.cpu_kwh},
                     {"gpu_kwh", row.gpu_kwh}, {"co2_kg", row.co2_kg}, {"ratio", row.ratio}});
    }
    put(out_json, {{"runs", runs}, {"compare", cmp}, {"table", ccm::format_table(rows)}, {"csv", csv}});
  });
}

ccm_status ccm_network_load(const char* weights_path, ccm_network** out) {
  return guarded([&] {
    require(weights_path, "weights_path");
    require(out, "out");
    *out = new ccm_network{ccm::load_network(weights_path)};
  });
}

void ccm_network_free(ccm_network* net) { delete net; }

ccm_status ccm_network_info(const ccm_network* net, char** out_json) {
  return guarded([&] {
    require(net, "net");
    put(out_json, {{"config", net->net.config().to_json()},
                   {"config_hash", net->net.config_hash()},
                   {"weights_hash", net->net.weights_hash()},
                   {"layers", net->net.layer_names()},
                   {"parameters", net->net.parameter_count()}});
  });
}

ccm_status ccm_network_predict(const ccm_network* net, const char* image_path,
                               const char* postproc_json, char** out_json) {
  return guarded([&] {
    require(net, "net");
    require(image_path, "image_path");
    ccm::PostprocConfig pp;
    if (postproc_json != nullptr && *postproc_json != '\0') {
      pp = ccm::PostprocConfig::from_json(json::parse(postproc_json));
    }
    const cv::Mat image = ccm::read_image(image_path);
    const auto cr = ccm::count_cells(ccm::predict_logits(net->net, image), pp);
    ccm::PredictResponse r;
    r.count = cr.count;
    r.mask = ccm::rle_encode(cr.mask);
    r.centroids = cr.centroids;
    put(out_json, r.to_json());
  });
}

ccm_status ccm_network_explain(const ccm_network* net, const char* image_path, const char* layer,
                               double alpha, const char* out_png, char** out_json) {
  return guarded([&] {
    require(net, "net");
    require(image_path, "image_path");
    require(out_png, "out_png");
    const cv::Mat image = ccm::read_image(image_path);
    const std::string l = layer != nullptr && *layer != '\0' ? layer : ccm::kDefaultCamLayer;
    const auto heat = ccm::grad_cam(net->net, image, l);
    ccm::write_render(ccm::overlay(image, heat.values, alpha), out_png);
    json j = {{"out", out_png},
              {"layer", heat.target_layer},
              {"target", heat.target},
              {"all_zero", heat.all_zero},
              {"alpha", alpha},
              {"image", image_path},
              {"weights_hash", net->net.weights_hash()}};
    ccm::write_file_atomic(std::string(out_png) + ".json", j.dump(2) + "\n");
    put(out_json, j);
  });
}

ccm_status ccm_store_open(const char* root, double promotion_threshold, ccm_store** out) {
  return guarded([&] {
    require(root, "root");
    require(out, "out");
    *out = new ccm_store{ccm::RunStore(root, promotion_threshold)};
  });
}

void ccm_store_close(ccm_store* store) { delete store; }

ccm_status ccm_store_query(const ccm_store* store, const char* filter_json, char** out_json) {
  return guarded([&] {
    require(store, "store");
    ccm::RunFilter f;
    if (filter_json != nullptr && *filter_json != '\0') {
      const auto j = json::parse(filter_json);
      if (j.contains("loss")) f.loss = j["loss"].get<std::string>();
      if (j.contains("seed")) f.seed = j["seed"].get<std::uint64_t>();
      if (j.contains("status")) f.status = ccm::parse_run_status(j["status"].get<std::string>());
      if (j.contains("min_det_f1")) f.min_det_f1 = j["min_det_f1"].get<double>();
    }
    json runs = json::array();
    for (const auto& r : store->store.query(f)) runs.push_back(r.to_json());
    put(out_json, runs);
  });
}

ccm_status ccm_store_get(const ccm_store* store, const char* run_id, char** out_json) {
  return guarded([&] {
    require(store, "store");
    require(run_id, "run_id");
    put(out_json, store->store.get(run_id).to_json());
  });
}

ccm_status ccm_store_append(ccm_store* store, const char* record_json) {
  return guarded([&] {
    require(store, "store");
    require(record_json, "record_json");
    store->store.append(ccm::RunRecord::from_json(json::parse(record_json)));
  });
}

ccm_status ccm_store_promote(ccm_store* store, const char* run_id, const char* note,
                             char** out_json) {
  return guarded([&] {
    require(store, "store");
    require(run_id, "run_id");
    put(out_json, store->store.promote(run_id, note != nullptr ? note : "").to_json());
  });
}

ccm_status ccm_store_registry(const ccm_store* store, char** out_json) {
  return guarded([&] {
    require(store, "store");
    json j = json::array();
    for (const auto& e : store->store.registry()) j.push_back(e.to_json());
    put(out_json, j);
  });
}

ccm_status ccm_store_active(const ccm_store* store, char** out_json) {
  return guarded([&] {
    require(store, "store");
    const auto a = store->store.active();
    put(out_json, a ? a->to_json() : json(nullptr));
  });
}

ccm_status ccm_store_retrain_due(const ccm_store* store, const char* policy_json,
                                 double now_unix_s, char** out_json) {
  return guarded([&] {
    require(store, "store");
    ccm::RetrainPolicy p;
    if (policy_json != nullptr && *policy_json != '\0') {
      const auto j = json::parse(policy_json);
      if (j.contains("periodic_days") && !j["periodic_days"].is_null()) p.periodic_days = j["periodic_days"].get<double>();
      p.honour_drift_flag = j.value("honour_drift_flag", true);
    }
    const auto now = now_unix_s > 0.0
                         ? ccm::TimePoint(std::chrono::duration_cast<ccm::TimePoint::duration>(
                               std::chrono::duration<double>(now_unix_s)))
                         : std::chrono::system_clock::now();
    const auto d = store->store.retrain_due(p, now);
    put(out_json, {{"due", d.due}, {"reason", d.reason}});
  });
}

ccm_status ccm_server_create(const char* service_json, ccm_server** out) {
  return guarded([&] {
    require(service_json, "service_json");
    require(out, "out");
    const auto j = json::parse(service_json);
    ccm::ServiceConfig c;
    c.store_root = j.at("store_root").get<std::string>();
    c.promotion_threshold = j.value("promotion_threshold", c.promotion_threshold);
    if (j.contains("drift")) c.drift = ccm::DriftConfig::from_json(j["drift"]);
    c.explain_alpha = j.value("explain_alpha", c.explain_alpha);
    auto s = std::make_unique<ccm_server>();
    s->service = std::make_unique<ccm::InferenceService>(c);
    s->http = std::make_unique<ccm::HttpServer>(*s->service);
    *out = s.release();
  });
}

ccm_status ccm_server_bind(ccm_server* server, const char* host, int port, int* bound_port) {
  return guarded([&] {
    require(server, "server");
    const int p = server->http->bind(host != nullptr ? host : "127.0.0.1", port);
    if (bound_port != nullptr) *bound_port = p;
  });
}

ccm_status ccm_server_run(ccm_server* server) {
  return guarded([&] {
    require(server, "server");
    server->http->run();
  });
}

ccm_status ccm_server_stop(ccm_server* server) {
  return guarded([&] {
    require(server, "server");
    server->http->stop();
  });
}

ccm_status ccm_server_monitor_tick(ccm_server* server, char** out_json) {
  return guarded([&] {
    require(server, "server");
    const auto r = server->service->monitor_tick();
    put(out_json, r ? r->to_json() : json(nullptr));
  });
}

void ccm_server_destroy(ccm_server* server) { delete server; }

}  // extern "C"
