// Drives the pipeline end to end through the C interface only.
#include <ccmlops/ccmlops.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int failures = 0;

void check(bool ok, const std::string& what) {
  if (!ok) {
    ++failures;
    std::fprintf(stderr, "FAILED: %s (%s)\n", what.c_str(), ccm_last_error());
  }
}

json take(char* s) {
  json j = s ? json::parse(s) : json();
  ccm_free_string(s);
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "ccm_capi";
  fs::remove_all(root);
  fs::create_directories(root);
  ccm_set_log_level("warn");

  json cfg = {{"paths", {{"data_root", (root / "data").string()}, {"run_store", (root / "store").string()}}},
              {"synth", {{"image_height", 48}, {"image_width", 48}, {"mean_count", 3.0}, {"radius_min", 4.0},
                         {"radius_max", 7.0}, {"seed", 3}}},
              {"train", {{"network", {{"base_width", 4}, {"depth", 2}, {"residual_blocks_per_scale", 1}}},
                         {"augment", {{"crop_height", 32}, {"crop_width", 32}}},
                         {"lr", 0.001},
                         {"batch_size", 4},
                         {"max_epochs", 2},
                         {"warmup_epochs_before_es", 1},
                         {"es_patience", 1}}},
              {"energy", {{"probe", "stub"}, {"stub_cpu_watts", 50.0}, {"sample_period_s", 0.05}}},
              {"promotion_threshold", 0.0}};
  const std::string cs = cfg.dump();

  char* out = nullptr;
  check(ccm_synth(cs.c_str(), (root / "data").c_str(), 12, &out) == CCM_OK, "synth");
  ccm_free_string(out);
  check(ccm_split(cs.c_str(), (root / "data").c_str(), (root / "split.json").c_str(), &out) == CCM_OK,
        "split");
  const json split = take(out);
  check(split.contains("config_hash"), "split carries config hash");

  check(ccm_train(cs.c_str(), &out) == CCM_OK, "train");
  const json rec = take(out);
  check(rec.value("status", "") == "completed", "run completed");
  const std::string run_id = rec.value("run_id", "");
  const fs::path weights = root / "store" / rec["artifacts"]["weights_path"].get<std::string>();

  check(ccm_evaluate(cs.c_str(), weights.c_str(), (root / "data").c_str(), (root / "split.json").c_str(),
                     &out) == CCM_OK,
        "evaluate");
  const json ev = take(out);
  check(ev["aggregate"].contains("det_f1"), "evaluation report");

  ccm_network* net = nullptr;
  check(ccm_network_load(weights.c_str(), &net) == CCM_OK, "load");
  check(ccm_network_info(net, &out) == CCM_OK, "info");
  const json info = take(out);
  check(info["parameters"].get<long>() > 0, "parameter count");
  fs::path image;
  for (const auto& e : fs::directory_iterator(root / "data" / "images")) image = e.path();
  check(ccm_network_predict(net, image.c_str(), nullptr, &out) == CCM_OK, "predict");
  const json pred = take(out);
  check(pred.contains("count") && pred.contains("mask"), "predict fields");
  check(ccm_network_explain(net, image.c_str(), "", 0.4, (root / "cam.png").c_str(), &out) == CCM_OK,
        "explain");
  ccm_free_string(out);
  check(fs::exists(root / "cam.png"), "explain png written");
  check(ccm_network_explain(net, image.c_str(), "nope", 0.4, (root / "x.png").c_str(), &out) ==
            CCM_ERR_INVALID_ARGUMENT,
        "unknown layer rejected");
  ccm_network_free(net);

  ccm_store* store = nullptr;
  check(ccm_store_open((root / "store").c_str(), 0.0, &store) == CCM_OK, "open store");
  check(ccm_store_query(store, R"({"loss": "dice"})", &out) == CCM_OK, "query");
  check(take(out).size() == 1, "one dice run");
  check(ccm_store_get(store, "missing", &out) == CCM_ERR_NOT_FOUND, "missing run");
  check(ccm_store_active(store, &out) == CCM_OK && take(out).is_null(), "nothing active");
  check(ccm_store_promote(store, run_id.c_str(), "first", &out) == CCM_OK, "promote");
  check(take(out)["model_version"] == 1, "version 1");
  check(ccm_store_retrain_due(store, nullptr, 0, &out) == CCM_OK, "retrain due");
  check(take(out)["due"] == false, "not due");
  check(ccm_store_append(store, rec.dump().c_str()) == CCM_ERR_REFUSED, "duplicate refused");

  check(ccm_emissions_report((root / "store").c_str(), &out) == CCM_OK, "emissions report");
  const json em = take(out);
  check(em["runs"].size() == 1 && em["runs"][0]["emissions"]["cpu_kwh"].get<double>() > 0.0, "energy recorded");

  ccm_server* server = nullptr;
  const json svc = {{"store_root", (root / "store").string()}};
  check(ccm_server_create(svc.dump().c_str(), &server) == CCM_OK, "server create");
  int port = 0;
  check(ccm_server_bind(server, "127.0.0.1", 0, &port) == CCM_OK && port > 0, "bind");
  std::thread t([&] { ccm_server_run(server); });
  check(ccm_server_stop(server) == CCM_OK, "stop");
  t.join();
  check(ccm_server_monitor_tick(server, &out) == CCM_OK, "tick");
  ccm_free_string(out);
  ccm_server_destroy(server);
  ccm_store_close(store);

  std::printf("%s\n", failures == 0 ? "capi ok" : "capi failures");
  return failures == 0 ? 0 : 1;
}
