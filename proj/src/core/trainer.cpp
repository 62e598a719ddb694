#include "core/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "core/errors.hpp"
#include "core/hash.hpp"
#include "core/image_io.hpp"
#include "core/monitor.hpp"

namespace ccm {
namespace {

nlohmann::json lr_find_json(const LrFindConfig& c) {
  return {{"lr_min", c.lr_min}, {"lr_max", c.lr_max}, {"steps", c.steps}};
}

}  // namespace

// ---------------------------------------------------------------------------
// config

void TrainConfig::validate() const {
  network.validate();
  loss.validate();
  augment.validate();
  postproc.validate();
  if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (max_epochs < 1) throw ValidationError("train: max_epochs must be >= 1");
  if (warmup_epochs_before_es < 0) throw ValidationError("train: warmup_epochs_before_es must be >= 0");
  if (es_patience < 1) throw ValidationError("train: es_patience must be >= 1");
  if (!(es_min_delta >= 0.0)) throw ValidationError("train: es_min_delta must be >= 0");
  if (steps_per_epoch < 0) throw ValidationError("train: steps_per_epoch must be >= 0");
  if (lr && !(*lr > 0.0 && std::isfinite(*lr))) throw ValidationError("train: lr must be > 0");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ValidationError("train: train_fraction must be in (0,1)");
  }
  if (!(lr_find.lr_min > 0.0 && lr_find.lr_min < lr_find.lr_max) || lr_find.steps < 3) {
    throw ValidationError("train: lr_find needs 0 < lr_min < lr_max and steps >= 3");
  }
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 &&
        adam_eps > 0.0)) {
    throw ValidationError("train: adam betas must be in [0,1) and eps > 0");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"network", network.to_json()},
          {"loss", loss.to_json()},
          {"augment", augment.to_json()},
          {"postproc", postproc.to_json()},
          {"metrics", metrics.to_json()},
          {"lr_find", lr_find_json(lr_find)},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"warmup_epochs_before_es", warmup_epochs_before_es},
          {"es_patience", es_patience},
          {"es_min_delta", es_min_delta},
          {"es_metric", "val_loss"},
          {"steps_per_epoch", steps_per_epoch},
          {"lr", lr ? nlohmann::json(*lr) : nlohmann::json("auto")},
          {"seed", seed},
          {"train_fraction", train_fraction},
          {"optimizer", {{"name", "adam"}, {"beta1", adam_beta1}, {"beta2", adam_beta2}, {"eps", adam_eps}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("network")) c.network = NetworkConfig::from_json(j["network"]);
  if (j.contains("loss")) c.loss = LossConfig::from_json(j["loss"]);
  if (j.contains("augment")) c.augment = AugmentConfig::from_json(j["augment"]);
  if (j.contains("postproc")) c.postproc = PostprocConfig::from_json(j["postproc"]);
  if (j.contains("metrics")) c.metrics = MetricsConfig::from_json(j["metrics"]);
  if (j.contains("lr_find")) {
    const auto& f = j["lr_find"];
    c.lr_find.lr_min = f.value("lr_min", c.lr_find.lr_min);
    c.lr_find.lr_max = f.value("lr_max", c.lr_find.lr_max);
    c.lr_find.steps = f.value("steps", c.lr_find.steps);
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.warmup_epochs_before_es = j.value("warmup_epochs_before_es", c.warmup_epochs_before_es);
  c.es_patience = j.value("es_patience", c.es_patience);
  c.es_min_delta = j.value("es_min_delta", c.es_min_delta);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  if (j.contains("lr")) {
    const auto& lr = j["lr"];
    if (lr.is_number()) {
      c.lr = lr.get<double>();
    } else if (!(lr.is_string() && lr.get<std::string>() == "auto") && !lr.is_null()) {
      throw ValidationError("train: lr must be a number or \"auto\"");
    }
  }
  c.seed = j.value("seed", c.seed);
  c.train_fraction = j.value("train_fraction", c.train_fraction);
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    if (o.value("name", "adam") != "adam") throw ValidationError("train: only the adam optimizer is supported");
    c.adam_beta1 = o.value("beta1", c.adam_beta1);
    c.adam_beta2 = o.value("beta2", c.adam_beta2);
    c.adam_eps = o.value("eps", c.adam_eps);
  }
  c.validate();
  return c;
}

std::string TrainConfig::hash() const { return json_hash(to_json()); }

// ---------------------------------------------------------------------------
// epoch loop

LoopResult run_training_loop(TrainingTarget& target, const EarlyStopping& es, double lr,
                             const std::function<void(const EpochRecord&)>& on_epoch) {
  LoopResult res;
  res.best_val_loss = std::numeric_limits<double>::infinity();
  double es_best = std::numeric_limits<double>::infinity();
  int wait = 0;
  std::vector<std::uint8_t> best_state;
  const int steps = std::max(1, target.steps_per_epoch());

  for (int epoch = 1; epoch <= es.max_epochs; ++epoch) {
    double train_loss = 0.0;
    for (int s = 0; s < steps; ++s) train_loss += target.train_step(lr);
    train_loss /= steps;
    const double val_loss = target.validate();
    const EpochRecord rec{epoch, train_loss, val_loss, lr};
    res.series.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (!std::isfinite(val_loss)) {
      res.diverged = true;
      res.stop_reason = "diverged";
      res.stopped_epoch = epoch;
      break;
    }
    if (val_loss < res.best_val_loss) {
      res.best_val_loss = val_loss;
      res.best_epoch = epoch;
      best_state = target.snapshot();
    }
    if (es_best - val_loss >= es.min_delta) {
      es_best = val_loss;
      wait = 0;
    } else if (epoch > es.warmup_epochs) {
      ++wait;
    }
    if (wait >= es.patience) {
      res.stop_reason = "early-stopping";
      res.stopped_epoch = epoch;
      break;
    }
  }
  if (res.stopped_epoch == 0) {
    res.stop_reason = "max-epochs";
    res.stopped_epoch = es.max_epochs;
  }
  if (!best_state.empty()) target.restore(best_state);
  return res;
}

// ---------------------------------------------------------------------------
// LR range test

double lr_at_step(const LrFindConfig& cfg, int i) {
  if (cfg.steps < 2) return cfg.lr_min;
  return cfg.lr_min * std::pow(cfg.lr_max / cfg.lr_min,
                               static_cast<double>(i) / static_cast<double>(cfg.steps - 1));
}

nlohmann::json LrFindResult::to_json() const {
  return {{"suggested_lr", suggested_lr},
          {"lrs", lrs},
          {"smoothed_losses", smoothed_losses},
          {"fell_back", fell_back},
          {"aborted_early", aborted_early}};
}

LrFindResult lr_find(TrainingTarget& target, const LrFindConfig& cfg) {
  if (!(cfg.lr_min > 0.0 && cfg.lr_min < cfg.lr_max) || cfg.steps < 3) {
    throw ValidationError("lr_find: need 0 < lr_min < lr_max and steps >= 3");
  }
  constexpr double kBeta = 0.98;
  const auto state = target.snapshot();
  LrFindResult res;
  double avg = 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < cfg.steps; ++i) {
    const double lr = lr_at_step(cfg, i);
    const double loss = target.train_step(lr);
    if (!std::isfinite(loss)) {
      if (i == 0) {
        target.restore(state);
        throw ValidationError(
            "lr_find: loss is not finite at the first step; check input scaling and "
            "normalization");
      }
      res.aborted_early = true;
      break;
    }
    avg = kBeta * avg + (1.0 - kBeta) * loss;
    const double smoothed = avg / (1.0 - std::pow(kBeta, i + 1));
    if (i > 0 && smoothed > 4.0 * best) {
      res.aborted_early = true;
      break;
    }
    best = std::min(best, smoothed);
    res.lrs.push_back(lr);
    res.smoothed_losses.push_back(smoothed);
  }
  target.restore(state);

  // d(loss)/d(log lr) over a window of +-k points. The first tenth of the
  // ramp is skipped: there the smoothed loss still mostly reflects minibatch
  // noise.
  const std::size_t n = res.lrs.size();
  const std::size_t k = std::max<std::size_t>(1, n / 20);
  const std::size_t first = n >= 20 ? n / 10 : 0;
  double steepest = 0.0;
  std::size_t at = 0;
  double scale = 1.0;
  for (double v : res.smoothed_losses) scale = std::max(scale, std::abs(v));
  for (std::size_t i = first; n >= 2 && i < n; ++i) {
    const std::size_t lo = i >= first + k ? i - k : first;
    const std::size_t hi = std::min(n - 1, i + k);
    if (hi == lo) continue;
    const double slope = (res.smoothed_losses[hi] - res.smoothed_losses[lo]) /
                         (std::log(res.lrs[hi]) - std::log(res.lrs[lo]));
    if (slope < steepest) {
      steepest = slope;
      at = i;
    }
  }
  if (steepest < -1e-9 * scale) {
    res.suggested_lr = res.lrs[at] / 10.0;
  } else {
    res.fell_back = true;
    res.suggested_lr = cfg.lr_min * 100.0;
    spdlog::warn("lr_find: loss never decreased along the ramp; using lr_min * 100 = {}",
                 res.suggested_lr);
  }
  res.suggested_lr = std::clamp(res.suggested_lr, cfg.lr_min, cfg.lr_max);
  return res;
}

// ---------------------------------------------------------------------------
// optimizer

Adam::Adam(const std::vector<Param>& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    m_.emplace_back(p.trainable ? p.value.size() : 0, 0.0f);
    v_.emplace_back(p.trainable ? p.value.size() : 0, 0.0f);
  }
}

void Adam::reset() {
  t_ = 0;
  for (auto& m : m_) std::fill(m.begin(), m.end(), 0.0f);
  for (auto& v : v_) std::fill(v.begin(), v.end(), 0.0f);
}

void Adam::step(std::vector<Param>& params, const Gradients& grads, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float step = static_cast<float>(lr / c1);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(eps_);
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].trainable) continue;
    float* w = params[k].value.data();
    const float* g = grads[k].data();
    float* m = m_[k].data();
    float* v = v_[k].data();
    const std::size_t n = params[k].value.size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      w[i] -= step * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// network target

NetworkTarget::NetworkTarget(SegmentationNetwork& net, const TrainConfig& cfg,
                             std::vector<Sample> train, std::vector<Sample> val,
                             std::uint64_t data_seed)
    : net_(net), cfg_(cfg), train_(std::move(train)), val_(std::move(val)),
      adam_(net.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps), rng_(data_seed) {
  if (train_.empty()) throw ValidationError("train: empty training split");
  if (val_.empty()) throw ValidationError("train: empty validation split");
  const int m = net.config().size_multiple();
  int min_h = train_.front().height(), min_w = train_.front().width();
  for (const auto& s : train_) {
    min_h = std::min(min_h, s.height());
    min_w = std::min(min_w, s.width());
  }
  crop_h_ = std::min(cfg.augment.crop_height, min_h) / m * m;
  crop_w_ = std::min(cfg.augment.crop_width, min_w) / m * m;
  if (crop_h_ < m || crop_w_ < m) {
    throw ValidationError("train: training images are smaller than the network's size multiple " +
                          std::to_string(m));
  }
  if (crop_h_ != cfg.augment.crop_height || crop_w_ != cfg.augment.crop_width) {
    spdlog::info("train: crops reduced to {}x{} to fit the training images", crop_h_, crop_w_);
  }
  const int n = static_cast<int>(train_.size());
  steps_ = cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch : (n + cfg.batch_size - 1) / cfg.batch_size;
  order_.resize(train_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  pos_ = order_.size();
}

std::vector<Sample> NetworkTarget::next_batch() {
  std::vector<Sample> batch;
  batch.reserve(static_cast<std::size_t>(cfg_.batch_size));
  for (int k = 0; k < cfg_.batch_size; ++k) {
    if (pos_ == order_.size()) {
      shuffle(order_, rng_);
      pos_ = 0;
    }
    const Sample& s = train_[order_[pos_++]];
    batch.push_back(random_crop(augment(s, cfg_.augment, rng_), crop_h_, crop_w_, rng_));
  }
  return batch;
}

double NetworkTarget::train_step(double lr) {
  const auto batch = next_batch();
  std::vector<cv::Mat> images;
  std::vector<std::uint8_t> target;
  target.reserve(batch.size() * static_cast<std::size_t>(crop_h_) * crop_w_);
  for (const auto& s : batch) {
    images.push_back(s.image);
    for (int y = 0; y < s.mask.rows; ++y) {
      const auto* row = s.mask.ptr<std::uint8_t>(y);
      target.insert(target.end(), row, row + s.mask.cols);
    }
  }
  Tape tape(Mode::kTrain);
  const Tensor logits = net_.forward(to_tensor(images), tape);
  Tensor grad(logits.n(), logits.c(), logits.h(), logits.w());
  const double loss = loss_from_logits(cfg_.loss, logits.values(), target, grad.values());
  if (!std::isfinite(loss)) return loss;
  Gradients grads = net_.zero_gradients();
  net_.backward(tape, grad, &grads);
  net_.commit_batch_stats(tape);
  adam_.step(net_.params(), grads, lr);
  return loss;
}

double NetworkTarget::validate() {
  std::vector<float> logits;
  std::vector<std::uint8_t> target;
  for (const auto& s : val_) {
    const cv::Mat l = predict_logits(net_, s.image);
    for (int y = 0; y < l.rows; ++y) {
      const auto* lr = l.ptr<float>(y);
      logits.insert(logits.end(), lr, lr + l.cols);
      const auto* mr = s.mask.ptr<std::uint8_t>(y);
      target.insert(target.end(), mr, mr + s.mask.cols);
    }
  }
  return loss_from_logits(cfg_.loss, logits, target);
}

std::vector<std::uint8_t> NetworkTarget::snapshot() const { return net_.serialize(); }

void NetworkTarget::restore(const std::vector<std::uint8_t>& state) {
  net_.deserialize(state);
  adam_.reset();
}

// ---------------------------------------------------------------------------
// one run

std::string make_run_id(const TrainConfig& cfg) {
  std::string ts = format_timestamp(std::chrono::system_clock::now());
  ts.erase(std::remove_if(ts.begin(), ts.end(), [](char c) { return c == '-' || c == ':' || c == '.'; }),
           ts.end());
  std::random_device rd;
  char tag[8];
  std::snprintf(tag, sizeof tag, "%04x", rd() & 0xffffu);
  return to_string(cfg.loss.kind) + "-s" + std::to_string(cfg.seed) + "-" + cfg.hash().substr(0, 8) +
         "-" + ts + "-" + tag;
}

namespace {

std::vector<Sample> select(const std::vector<Sample>& data, const std::vector<std::string>& ids) {
  std::vector<Sample> out;
  out.reserve(ids.size());
  std::size_t j = 0;
  // both sides are sorted by image_id
  std::vector<const Sample*> sorted;
  for (const auto& s : data) sorted.push_back(&s);
  std::sort(sorted.begin(), sorted.end(),
            [](const Sample* a, const Sample* b) { return a->image_id < b->image_id; });
  for (const auto& id : ids) {
    while (j < sorted.size() && sorted[j]->image_id < id) ++j;
    if (j == sorted.size() || sorted[j]->image_id != id) throw NotFoundError("train: no sample '" + id + "'");
    out.push_back(*sorted[j]);
  }
  return out;
}

std::vector<int> true_counts(std::span<const Sample> samples, const PostprocConfig& pp) {
  std::vector<int> out;
  for (const auto& s : samples) {
    out.push_back(filter_small(connected_components(s.mask, pp.connectivity), pp.min_area_px).count);
  }
  return out;
}

}  // namespace

RunRecord train(const std::vector<Sample>& data, const TrainConfig& cfg, const TrainOptions& opts,
                SegmentationNetwork* trained) {
  cfg.validate();
  const SplitSpec split = make_split(data, cfg.train_fraction, cfg.seed);

  RunRecord rec;
  rec.run_id = opts.run_id.empty() ? make_run_id(cfg) : opts.run_id;
  rec.created_at = format_timestamp(std::chrono::system_clock::now());
  rec.config = cfg.to_json();
  rec.config_hash = cfg.hash();
  rec.split_hash = split.split_hash;
  rec.seed = cfg.seed;
  rec.loss = to_string(cfg.loss.kind);
  rec.diagnostics["split"] = split.to_json();
  if (opts.store != nullptr) opts.store->append(rec);

  std::shared_ptr<PowerProbe> probe = opts.probe;
  if (!probe) probe = default_probe();
  EnergyMeter meter(*probe, opts.meter);
  meter.start();

  auto persist = [&] {
    if (opts.store != nullptr) opts.store->update(rec);
  };

  SegmentationNetwork net = SegmentationNetwork::build(cfg.network, derive_seed(cfg.seed, 1));
  try {
    const auto train_set = select(data, split.train_ids);
    const auto val_set = select(data, split.val_ids);
    NetworkTarget target(net, cfg, train_set, val_set, derive_seed(cfg.seed, 2));

    double lr = 0.0;
    if (cfg.lr) {
      lr = *cfg.lr;
    } else {
      const LrFindResult f = lr_find(target, cfg.lr_find);
      lr = f.suggested_lr;
      rec.diagnostics["lr_find"] = f.to_json();
      spdlog::info("train {}: LR range test suggests {:.3g}", rec.run_id, lr);
    }
    rec.diagnostics["lr"] = lr;
    rec.diagnostics["crop"] = {target.crop_height(), target.crop_width()};

    const EarlyStopping es{cfg.max_epochs, cfg.warmup_epochs_before_es, cfg.es_patience, cfg.es_min_delta};
    const LoopResult loop = run_training_loop(target, es, lr, [&](const EpochRecord& e) {
      rec.epoch_series.push_back(e);
      persist();
      if (opts.on_epoch) opts.on_epoch(e);
    });
    rec.diagnostics["stopped_epoch"] = loop.stopped_epoch;
    rec.diagnostics["best_epoch"] = loop.best_epoch;
    rec.diagnostics["best_val_loss"] = loop.best_val_loss;
    rec.diagnostics["stop_reason"] = loop.stop_reason;

    if (loop.diverged) {
      rec.status = RunStatus::kFailed;
      rec.diagnostics["error"] = "validation loss became non-finite at epoch " +
                                 std::to_string(loop.stopped_epoch) + " (lr " +
                                 std::to_string(lr) + "); consider a smaller learning rate";
      spdlog::error("train {}: diverged at epoch {}", rec.run_id, loop.stopped_epoch);
    } else {
      const EvalReport report =
          evaluate(NetworkSegmenter(net, opts.tiles), val_set, cfg.postproc, cfg.metrics);
      rec.final_metrics = report.summary_json();
      if (opts.store != nullptr) {
        const auto counts = true_counts(train_set, cfg.postproc);
        const DriftReference ref = build_reference(train_set, counts);
        const auto dir = opts.store->artifacts_dir(rec.run_id);
        std::filesystem::create_directories(dir);
        save_network(net, dir / "weights.bin", rec.run_id, ref.to_json());
        nlohmann::json rj = report.to_json();
        rj["run_id"] = rec.run_id;
        rj["config"] = rec.config;
        rj["config_hash"] = rec.config_hash;
        write_file_atomic(dir / "report.json", rj.dump(2) + "\n");
        const std::string rel = "artifacts/" + rec.run_id + "/";
        rec.artifacts = {rel + "weights.bin", net.weights_hash(), rel + "report.json"};
      } else {
        rec.artifacts.weights_hash = net.weights_hash();
      }
      rec.status = RunStatus::kCompleted;
    }
  } catch (const std::exception& e) {
    rec.status = RunStatus::kFailed;
    rec.diagnostics["error"] = e.what();
    spdlog::error("train {}: {}", rec.run_id, e.what());
  }
  rec.emissions = meter.stop();
  rec.finished_at = format_timestamp(std::chrono::system_clock::now());
  persist();
  if (trained != nullptr) *trained = std::move(net);
  return rec;
}

// ---------------------------------------------------------------------------
// ablation

AblationResult ablation(const std::vector<Sample>& data, const std::vector<std::uint64_t>& seeds,
                        const std::vector<LossKind>& losses, const TrainConfig& base,
                        const TrainOptions& opts, int jobs) {
  if (seeds.empty() || losses.empty()) throw ValidationError("ablate: need at least one seed and one loss");
  base.validate();
  std::vector<TrainConfig> cfgs;
  for (LossKind l : losses) {
    for (std::uint64_t s : seeds) {
      TrainConfig c = base;
      c.loss.kind = l;
      c.seed = s;
      cfgs.push_back(c);
    }
  }
  AblationResult result;
  result.runs.resize(cfgs.size());
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t k;
      {
        std::lock_guard lk(mu);
        if (next == cfgs.size()) return;
        k = next++;
      }
      TrainOptions o = opts;
      o.run_id.clear();
      spdlog::info("ablate: run {}/{} loss={} seed={}", k + 1, cfgs.size(),
                   to_string(cfgs[k].loss.kind), cfgs[k].seed);
      result.runs[k] = train(data, cfgs[k], o);
    }
  };
  const int n_threads = std::clamp(jobs, 1, static_cast<int>(cfgs.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  result.summary = summarize(result.runs);
  return result;
}

std::vector<AblationRow> summarize(const std::vector<RunRecord>& runs) {
  static const char* kMetrics[] = {"seg_f1", "det_f1", "mpe_signed", "mape"};
  std::vector<AblationRow> rows;
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  for (const auto& r : runs) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AblationRow& x) { return x.loss == r.loss; });
    if (it == rows.end()) {
      rows.emplace_back();
      rows.back().loss = r.loss;
      it = rows.end() - 1;
    }
    ++it->runs;
    if (r.status != RunStatus::kCompleted) {
      ++it->failed;
      spdlog::warn("ablate: run {} ({}) is {} and is left out of the summary", r.run_id, r.loss,
                   to_string(r.status));
      continue;
    }
    auto& v = values[r.loss];
    for (const char* m : kMetrics) {
      if (r.final_metrics.contains(m) && r.final_metrics[m].is_number()) {
        v[m].push_back(r.final_metrics[m].get<double>());
      }
    }
    if (r.emissions) {
      v["cpu_kwh"].push_back(r.emissions->cpu_kwh);
      v["gpu_kwh"].push_back(r.emissions->gpu_kwh);
      v["co2_kg"].push_back(r.emissions->co2_kg);
    }
    if (r.diagnostics.contains("stopped_epoch")) {
      v["epochs"].push_back(r.diagnostics["stopped_epoch"].get<double>());
    }
  }
  for (auto& row : rows) {
    for (const auto& [name, xs] : values[row.loss]) {
      MetricStat st;
      st.n = static_cast<int>(xs.size());
      for (double x : xs) st.mean += x;
      st.mean /= st.n;
      if (st.n > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - st.mean) * (x - st.mean);
        st.std = std::sqrt(ss / (st.n - 1));
      }
      row.metrics[name] = st;
    }
  }
  return rows;
}

nlohmann::json AblationResult::summary_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : summary) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [k, st] : r.metrics) m[k] = {{"mean", st.mean}, {"std", st.std}, {"n", st.n}};
    rows.push_back({{"loss", r.loss}, {"runs", r.runs}, {"failed", r.failed}, {"metrics", m}});
  }
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& r : runs) ids.push_back({{"run_id", r.run_id}, {"loss", r.loss}, {"seed", r.seed}, {"status", to_string(r.status)}});
  return {{"summary", rows}, {"runs", ids}};
}

std::string format_summary(const std::vector<AblationRow>& rows) {
  static const char* kColumns[] = {"seg_f1", "det_f1", "mpe_signed", "mape", "co2_kg", "epochs"};
  std::ostringstream os;
  os << "loss    runs failed";
  for (const char* c : kColumns) os << "  " << std::string(22 - std::string(c).size(), ' ') << c;
  os << '\n';
  for (const auto& r : rows) {
    char head[32];
    std::snprintf(head, sizeof head, "%-7s %4d %6d", r.loss.c_str(), r.runs, r.failed);
    os << head;
    for (const char* c : kColumns) {
      char cell[40];
      auto it = r.metrics.find(c);
      if (it == r.metrics.end()) {
        std::snprintf(cell, sizeof cell, "  %22s", "-");
      } else {
        std::snprintf(cell, sizeof cell, "  %10.4g +- %8.3g", it->second.mean, it->second.std);
      }
      os << cell;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace ccm
