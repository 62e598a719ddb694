// Command-line front end. Talks to the library only through ccmlops.h.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <pthread.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "ccmlops/ccmlops.h"

namespace {

using nlohmann::json;

struct Failure {
  ccm_status status;
  std::string message;
};

// Owns a library-allocated string.
struct OutString {
  char* p = nullptr;
  ~OutString() { ccm_free_string(p); }
  json parse() const { return p != nullptr ? json::parse(p) : json(nullptr); }
};

void check(ccm_status s) {
  if (s != CCM_OK) throw Failure{s, ccm_last_error()};
}

std::vector<const char*> c_strings(const std::vector<std::string>& v) {
  std::vector<const char*> out;
  for (const auto& s : v) out.push_back(s.c_str());
  return out;
}

struct Globals {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string log_level = "info";
};

struct Resolved {
  json config;
  std::string hash;
  std::string text;  // serialized config for the C API
};

Resolved resolve(const Globals& g, std::vector<std::string> extra = {}) {
  std::vector<std::string> all = g.overrides;
  all.insert(all.end(), extra.begin(), extra.end());
  const auto ptrs = c_strings(all);
  OutString out;
  check(ccm_config_resolve(g.config_file.empty() ? nullptr : g.config_file.c_str(), ptrs.data(),
                           ptrs.size(), &out.p));
  const json j = out.parse();
  Resolved r{j.at("config"), j.at("config_hash").get<std::string>(), ""};
  r.text = r.config.dump();
  std::cout << "config_hash " << r.hash << "\n";
  return r;
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string path_of(const Resolved& r, const char* key) {
  return r.config.at("paths").at(key).get<std::string>();
}

std::atomic<ccm_server*> g_server{nullptr};

// Waits for SIGINT/SIGTERM (blocked in every thread) and stops the server.
void signal_watcher(std::atomic<bool>* done) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  timespec timeout{0, 200'000'000};
  while (!done->load()) {
    if (sigtimedwait(&set, nullptr, &timeout) > 0) {
      if (auto* s = g_server.load()) ccm_server_stop(s);
      return;
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cell-counting segmentation pipeline: data, training, evaluation, serving."};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config_file, "Config file (nested key/value document)")
      ->check(CLI::ExistingFile);
  app.add_option("--set", g.overrides, "Override, e.g. --set train.max_epochs=40 (repeatable)")
      ->allow_extra_args(false);
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  std::string synth_out;
  int synth_count = 0;
  synth->add_option("--out", synth_out, "Output directory (default paths.data_root)");
  synth->add_option("--count", synth_count, "Number of images (default synth_count)");

  // split
  auto* split = app.add_subcommand("split", "Write a seeded train/validation split");
  std::string split_data, split_out;
  std::optional<std::uint64_t> split_seed;
  split->add_option("--data", split_data, "Dataset directory (default paths.data_root)");
  split->add_option("--out", split_out, "Split file (default <data>/split.json)");
  split->add_option("--seed", split_seed, "Split seed (default train.seed)");

  // train
  auto* train = app.add_subcommand("train", "Train one model and record the run");
  std::optional<std::uint64_t> train_seed;
  std::string train_loss;
  train->add_option("--seed", train_seed, "Seed for split, init and augmentation");
  train->add_option("--loss", train_loss, "dice|focal");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train every loss x seed combination");
  std::string ablate_seeds = "1,2,3", ablate_losses = "dice,focal";
  int ablate_jobs = 1;
  ablate->add_option("--seeds", ablate_seeds, "Comma-separated seeds")->capture_default_str();
  ablate->add_option("--losses", ablate_losses, "Comma-separated losses")->capture_default_str();
  ablate->add_option("--jobs", ablate_jobs, "Parallel runs")->check(CLI::PositiveNumber)->capture_default_str();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate saved weights on a dataset");
  std::string eval_weights, eval_data, eval_split;
  evaluate->add_option("--weights", eval_weights, "Weights file")->required();
  evaluate->add_option("--data", eval_data, "Dataset directory (default paths.data_root)");
  evaluate->add_option("--split", eval_split, "Restrict to the validation ids of this split file");

  // explain
  auto* explain = app.add_subcommand("explain", "Render a Grad-CAM overlay");
  std::string ex_weights, ex_image, ex_layer, ex_out = "explain.png";
  std::optional<double> ex_alpha;
  explain->add_option("--weights", ex_weights, "Weights file")->required();
  explain->add_option("--image", ex_image, "Input image")->required();
  explain->add_option("--layer", ex_layer, "Target layer (default dec0)");
  explain->add_option("--alpha", ex_alpha, "Overlay opacity (default serve.explain_alpha)");
  explain->add_option("--out", ex_out, "Output PNG")->capture_default_str();

  // emissions-report
  auto* emissions = app.add_subcommand("emissions-report", "Energy and CO2 per run and per loss");
  std::string em_runs, em_csv;
  emissions->add_option("--runs", em_runs, "Run store (default paths.run_store)");
  emissions->add_option("--csv", em_csv, "Also write per-run CSV here");

  // registry
  auto* registry = app.add_subcommand("registry", "Model registry");
  registry->require_subcommand(1);
  std::string reg_store;
  registry->add_option("--store", reg_store, "Run store (default paths.run_store)");
  auto* reg_list = registry->add_subcommand("list", "List runs and registry entries");
  std::string list_loss, list_status;
  reg_list->add_option("--loss", list_loss);
  reg_list->add_option("--status", list_status);
  auto* reg_promote = registry->add_subcommand("promote", "Promote a completed run");
  std::string promote_id, promote_note;
  reg_promote->add_option("run_id", promote_id)->required();
  reg_promote->add_option("--note", promote_note);
  auto* reg_active = registry->add_subcommand("active", "Show the active model");
  auto* reg_due = registry->add_subcommand("retrain-due", "Whether retraining is due");
  std::optional<double> due_days;
  reg_due->add_option("--periodic-days", due_days, "Periodic retraining interval");

  // serve
  auto* serve = app.add_subcommand("serve", "Serve the active model over HTTP");
  std::string serve_store, serve_host;
  std::optional<int> serve_port;
  double tick_seconds = 60.0;
  serve->add_option("--store", serve_store, "Run store (default paths.run_store)");
  serve->add_option("--host", serve_host, "Bind address (default serve.host)");
  serve->add_option("--port", serve_port, "Port, 0 for any (default serve.port)");
  serve->add_option("--tick-seconds", tick_seconds, "Drift monitor tick period")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    check(ccm_set_log_level(g.log_level.c_str()));

    if (synth->parsed()) {
      const auto r = resolve(g);
      const std::string out_dir = synth_out.empty() ? path_of(r, "data_root") : synth_out;
      OutString out;
      check(ccm_synth(r.text.c_str(), out_dir.c_str(), synth_count, &out.p));
      print(out.parse());
    } else if (split->parsed()) {
      std::vector<std::string> extra;
      if (split_seed) extra.push_back("train.seed=" + std::to_string(*split_seed));
      const auto r = resolve(g, extra);
      const std::string data = split_data.empty() ? path_of(r, "data_root") : split_data;
      const std::string out_path = split_out.empty() ? data + "/split.json" : split_out;
      OutString out;
      check(ccm_split(r.text.c_str(), data.c_str(), out_path.c_str(), &out.p));
      print(out.parse());
    } else if (train->parsed()) {
      std::vector<std::string> extra;
      if (train_seed) extra.push_back("train.seed=" + std::to_string(*train_seed));
      if (!train_loss.empty()) extra.push_back("train.loss.kind=" + train_loss);
      const auto r = resolve(g, extra);
      OutString out;
      check(ccm_train(r.text.c_str(), &out.p));
      const json rec = out.parse();
      print({{"run_id", rec.at("run_id")},
             {"status", rec.at("status")},
             {"epochs", rec.at("epoch_series").size()},
             {"final_metrics", rec.at("final_metrics")},
             {"emissions", rec.at("emissions")},
             {"artifacts", rec.at("artifacts")},
             {"diagnostics", rec.at("diagnostics")}});
      if (rec.at("status") != "completed") return 1;
    } else if (ablate->parsed()) {
      const auto r = resolve(g);
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_list(ablate_seeds)) {
        try {
          seeds.push_back(std::stoull(s));
        } catch (const std::exception&) {
          std::cerr << "--seeds: '" << s << "' is not an unsigned integer\n";
          return 2;
        }
      }
      const auto losses = split_list(ablate_losses);
      const auto loss_ptrs = c_strings(losses);
      OutString out;
      check(ccm_ablate(r.text.c_str(), seeds.data(), seeds.size(), loss_ptrs.data(),
                       loss_ptrs.size(), ablate_jobs, &out.p));
      const json j = out.parse();
      for (const auto& run : j.at("runs")) {
        std::cout << "run " << run.at("run_id").get<std::string>() << " "
                  << run.at("status").get<std::string>() << "\n";
      }
      std::cout << j.at("table").get<std::string>();
      std::cout << "summary " << j.at("summary_path").get<std::string>() << "\n";
    } else if (evaluate->parsed()) {
      const auto r = resolve(g);
      const std::string data = eval_data.empty() ? path_of(r, "data_root") : eval_data;
      OutString out;
      check(ccm_evaluate(r.text.c_str(), eval_weights.c_str(), data.c_str(),
                         eval_split.empty() ? nullptr : eval_split.c_str(), &out.p));
      json j = out.parse();
      j.erase("per_image");
      j.erase("config");
      print(j);
    } else if (explain->parsed()) {
      const auto r = resolve(g);
      const double alpha = ex_alpha ? *ex_alpha : r.config.at("serve").at("explain_alpha").get<double>();
      ccm_network* net = nullptr;
      check(ccm_network_load(ex_weights.c_str(), &net));
      std::unique_ptr<ccm_network, decltype(&ccm_network_free)> guard(net, ccm_network_free);
      OutString out;
      check(ccm_network_explain(net, ex_image.c_str(), ex_layer.c_str(), alpha, ex_out.c_str(), &out.p));
      print(out.parse());
    } else if (emissions->parsed()) {
      const auto r = resolve(g);
      const std::string root = em_runs.empty() ? path_of(r, "run_store") : em_runs;
      OutString out;
      check(ccm_emissions_report(root.c_str(), &out.p));
      const json j = out.parse();
      for (const auto& run : j.at("runs")) {
        const auto& e = run.at("emissions");
        std::printf("%-40s %-6s %-9s cpu_kwh=%.6g gpu_kwh=%.6g co2_kg=%.6g probe=%s\n",
                    run.at("run_id").get<std::string>().c_str(), run.at("loss").get<std::string>().c_str(),
                    run.at("status").get<std::string>().c_str(), e.at("cpu_kwh").get<double>(),
                    e.at("gpu_kwh").get<double>(), e.at("co2_kg").get<double>(),
                    e.at("probe").get<std::string>().c_str());
      }
      std::fflush(stdout);
      std::cout << j.at("table").get<std::string>();
      if (!em_csv.empty()) {
        std::ofstream f(em_csv);
        f << j.at("csv").get<std::string>();
        if (!f) throw Failure{CCM_ERR_IO, "cannot write " + em_csv};
      }
    } else if (registry->parsed()) {
      const auto r = resolve(g);
      const std::string root = reg_store.empty() ? path_of(r, "run_store") : reg_store;
      ccm_store* store = nullptr;
      check(ccm_store_open(root.c_str(), r.config.at("promotion_threshold").get<double>(), &store));
      std::unique_ptr<ccm_store, decltype(&ccm_store_close)> guard(store, ccm_store_close);
      if (reg_list->parsed()) {
        json filter = json::object();
        if (!list_loss.empty()) filter["loss"] = list_loss;
        if (!list_status.empty()) filter["status"] = list_status;
        const std::string ftext = filter.dump();
        OutString runs, reg;
        check(ccm_store_query(store, ftext.c_str(), &runs.p));
        check(ccm_store_registry(store, &reg.p));
        for (const auto& run : runs.parse()) {
          const auto& m = run.at("final_metrics");
          const double f1 = m.is_object() && m.contains("det_f1") && m["det_f1"].is_number()
                                ? m["det_f1"].get<double>()
                                : -1.0;
          std::printf("%-40s %-6s seed=%-4llu %-9s det_f1=%s\n", run.at("run_id").get<std::string>().c_str(),
                      run.at("loss").get<std::string>().c_str(),
                      static_cast<unsigned long long>(run.at("seed").get<std::uint64_t>()),
                      run.at("status").get<std::string>().c_str(),
                      f1 < 0 ? "-" : std::to_string(f1).c_str());
        }
        for (const auto& e : reg.parse()) {
          std::printf("model v%d %s%s\n", e.at("model_version").get<int>(),
                      e.at("run_id").get<std::string>().c_str(), e.at("active").get<bool>() ? " (active)" : "");
        }
      } else if (reg_promote->parsed()) {
        OutString out;
        check(ccm_store_promote(store, promote_id.c_str(), promote_note.c_str(), &out.p));
        print(out.parse());
      } else if (reg_active->parsed()) {
        OutString out;
        check(ccm_store_active(store, &out.p));
        print(out.parse());
      } else if (reg_due->parsed()) {
        json policy = json::object();
        if (due_days) {
          policy["periodic_days"] = *due_days;
        } else if (!r.config.at("serve").at("retrain_periodic_days").is_null()) {
          policy["periodic_days"] = r.config["serve"]["retrain_periodic_days"];
        }
        const std::string ptext = policy.dump();
        OutString out;
        check(ccm_store_retrain_due(store, ptext.c_str(), 0.0, &out.p));
        print(out.parse());
      }
    } else if (serve->parsed()) {
      const auto r = resolve(g);
      json svc = {{"store_root", serve_store.empty() ? path_of(r, "run_store") : serve_store},
                  {"promotion_threshold", r.config.at("promotion_threshold")},
                  {"drift", r.config.at("drift")},
                  {"explain_alpha", r.config.at("serve").at("explain_alpha")}};
      const std::string host = serve_host.empty() ? r.config["serve"]["host"].get<std::string>() : serve_host;
      const int port = serve_port ? *serve_port : r.config["serve"]["port"].get<int>();

      sigset_t set;
      sigemptyset(&set);
      sigaddset(&set, SIGINT);
      sigaddset(&set, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &set, nullptr);

      ccm_server* server = nullptr;
      const std::string stext = svc.dump();
      check(ccm_server_create(stext.c_str(), &server));
      std::unique_ptr<ccm_server, decltype(&ccm_server_destroy)> guard(server, ccm_server_destroy);
      int bound = 0;
      check(ccm_server_bind(server, host.c_str(), port, &bound));
      std::cout << "listening " << host << ":" << bound << std::endl;
      g_server = server;

      std::atomic<bool> done{false};
      std::thread watcher(signal_watcher, &done);
      std::thread ticker([&] {
        auto next = std::chrono::steady_clock::now();
        while (!done.load()) {
          std::this_thread::sleep_for(std::chrono::milliseconds(200));
          if (std::chrono::steady_clock::now() < next) continue;
          next = std::chrono::steady_clock::now() + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                        std::chrono::duration<double>(tick_seconds));
          OutString out;
          ccm_server_monitor_tick(server, &out.p);
        }
      });
      const ccm_status st = ccm_server_run(server);
      const std::string err = st != CCM_OK ? ccm_last_error() : "";
      done = true;
      watcher.join();
      ticker.join();
      g_server = nullptr;
      if (st != CCM_OK) throw Failure{st, err};
    }
  } catch (const Failure& f) {
    std::cerr << json{{"error", ccm_status_name(f.status)}, {"message", f.message}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
