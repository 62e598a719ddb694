#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/dataset.hpp"
#include "core/energy.hpp"
#include "core/inference.hpp"
#include "core/losses.hpp"
#include "core/metrics.hpp"
#include "core/network.hpp"
#include "core/postproc.hpp"
#include "core/runstore.hpp"

namespace ccm {

struct LrFindConfig {
  double lr_min = 1e-7;
  double lr_max = 10.0;
  int steps = 100;
};

struct TrainConfig {
  NetworkConfig network;
  LossConfig loss;
  AugmentConfig augment;
  PostprocConfig postproc;
  MetricsConfig metrics;
  LrFindConfig lr_find;
  int batch_size = 8;
  int max_epochs = 400;
  int warmup_epochs_before_es = 100;
  int es_patience = 50;
  double es_min_delta = 1e-5;
  int steps_per_epoch = 0;    // 0: one pass over the training split
  std::optional<double> lr;   // empty: chosen by the LR range test
  std::uint64_t seed = 0;     // also seeds the split
  double train_fraction = 0.75;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

/// Something the epoch loop can drive. Implemented by the network trainer
/// and by scripted stubs in tests.
class TrainingTarget {
 public:
  virtual ~TrainingTarget() = default;
  virtual int steps_per_epoch() const = 0;
  /// One optimizer update on the next minibatch; returns its loss.
  virtual double train_step(double lr) = 0;
  virtual double validate() = 0;
  virtual std::vector<std::uint8_t> snapshot() const = 0;
  virtual void restore(const std::vector<std::uint8_t>& state) = 0;
};

struct EarlyStopping {
  int max_epochs = 400;
  int warmup_epochs = 100;
  int patience = 50;
  double min_delta = 1e-5;
};

struct LoopResult {
  std::vector<EpochRecord> series;
  int stopped_epoch = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool diverged = false;
  std::string stop_reason;  // "early-stopping", "max-epochs" or "diverged"
};

/// Epochs are 1-based. The patience counter only runs once the warmup
/// epochs are over; a plateau from epoch 1 therefore stops at exactly
/// warmup + patience. The weights with the lowest validation loss are
/// restored before returning.
LoopResult run_training_loop(TrainingTarget& target, const EarlyStopping& es, double lr,
                             const std::function<void(const EpochRecord&)>& on_epoch = {});

struct LrFindResult {
  double suggested_lr = 0.0;
  std::vector<double> lrs;
  std::vector<double> smoothed_losses;
  bool fell_back = false;
  bool aborted_early = false;

  nlohmann::json to_json() const;
};

/// lr_i = lr_min * (lr_max / lr_min)^(i / (steps - 1)).
double lr_at_step(const LrFindConfig& cfg, int i);

/// Geometric LR ramp with bias-corrected exponential smoothing (beta 0.98).
/// Returns the LR of steepest descent divided by 10, clamped to
/// [lr_min, lr_max], or lr_min * 100 when the loss never decreases. The
/// target's state is restored afterwards. Throws ValidationError when the
/// first loss is not finite.
LrFindResult lr_find(TrainingTarget& target, const LrFindConfig& cfg);

class Adam {
 public:
  Adam(const std::vector<Param>& params, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step(std::vector<Param>& params, const Gradients& grads, double lr);
  void reset();

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Trains a SegmentationNetwork on augmented random crops; validates on
/// whole images.
class NetworkTarget : public TrainingTarget {
 public:
  NetworkTarget(SegmentationNetwork& net, const TrainConfig& cfg, std::vector<Sample> train,
                std::vector<Sample> val, std::uint64_t data_seed);

  int steps_per_epoch() const override { return steps_; }
  double train_step(double lr) override;
  double validate() override;
  std::vector<std::uint8_t> snapshot() const override;
  void restore(const std::vector<std::uint8_t>& state) override;

  int crop_height() const { return crop_h_; }
  int crop_width() const { return crop_w_; }

 private:
  std::vector<Sample> next_batch();

  SegmentationNetwork& net_;
  const TrainConfig& cfg_;
  std::vector<Sample> train_;
  std::vector<Sample> val_;
  Adam adam_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  int steps_ = 1;
  int crop_h_ = 0, crop_w_ = 0;
};

struct TrainOptions {
  RunStore* store = nullptr;  // artifacts and the record are persisted when set
  std::string run_id;         // generated when empty
  std::shared_ptr<PowerProbe> probe;  // default_probe() when null
  MeterOptions meter;
  TileOptions tiles;
  std::function<void(const EpochRecord&)> on_epoch;
};

std::string make_run_id(const TrainConfig& cfg);

/// Full protocol for one configuration: split by seed, optional LR range
/// test, epoch loop with early stopping, evaluation on the validation
/// split, artifacts and record persistence, all under the energy meter.
/// Divergence yields a failed record rather than an exception.
RunRecord train(const std::vector<Sample>& data, const TrainConfig& cfg, const TrainOptions& opts,
                SegmentationNetwork* trained = nullptr);

struct MetricStat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single run
  int n = 0;
};

struct AblationRow {
  std::string loss;
  int runs = 0;
  int failed = 0;
  std::map<std::string, MetricStat> metrics;
};

struct AblationResult {
  std::vector<RunRecord> runs;
  std::vector<AblationRow> summary;

  nlohmann::json summary_json() const;
};

/// Every (loss, seed) pair with all other settings taken from `base`; the
/// same seeds are used for each loss. Failed runs are reported and left out
/// of the aggregates.
AblationResult ablation(const std::vector<Sample>& data, const std::vector<std::uint64_t>& seeds,
                        const std::vector<LossKind>& losses, const TrainConfig& base,
                        const TrainOptions& opts, int jobs = 1);

std::vector<AblationRow> summarize(const std::vector<RunRecord>& runs);
std::string format_summary(const std::vector<AblationRow>& rows);

}  // namespace ccm
