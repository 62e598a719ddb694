#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "core/dataset.hpp"
#include "core/postproc.hpp"

namespace ccm {

struct MetricsConfig {
  double iou_thr = 0.4;       // segmentation TP needs IoU strictly above this
  double dist_thr_px = 40.0;  // detection TP needs centre distance strictly below this

  nlohmann::json to_json() const;
  static MetricsConfig from_json(const nlohmann::json& j);
};

/// Pairs hold 0-based indices into the predicted and true object lists.
struct MatchResult {
  std::vector<std::pair<int, int>> pairs;
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

/// A candidate pairing between prediction `pred` and truth `truth`.
/// `quality` in [0,1] breaks ties between maximum-cardinality matchings.
struct Edge {
  int pred;
  int truth;
  double quality;
};

/// Maximum-cardinality one-to-one matching; among those, maximum total
/// quality.
MatchResult max_cardinality_matching(int n_pred, int n_truth, std::span<const Edge> edges);

/// Throws ShapeError when the label maps differ in size.
MatchResult match_segmentation(const LabeledObjects& pred, const LabeledObjects& truth,
                               double iou_thr = 0.4);

/// Ties are broken towards the smaller total distance.
MatchResult match_detection(std::span<const Centroid> pred, std::span<const Centroid> truth,
                            double dist_thr_px = 40.0);

/// 2 tp / (2 tp + fp + fn); 1 when there is nothing to find and nothing found.
double f1(int tp, int fp, int fn);

struct CountPair {
  int pred_count = 0;
  int true_count = 0;
};

struct CountingError {
  bool defined = false;  // false when every image has true_count == 0
  double mpe_signed = 0.0;
  double mape = 0.0;
  int n_included = 0;
  int n_excluded_zero_truth = 0;
};

CountingError counting_error(std::span<const CountPair> counts);

/// Anything that maps an image (CV_32FC3) to a logit map (CV_32FC1).
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual cv::Mat predict_logits(const cv::Mat& image) const = 0;
};

struct ImageEval {
  std::string image_id;
  double seg_f1 = 0.0;
  double det_f1 = 0.0;
  int pred_count = 0;
  int true_count = 0;
  std::optional<double> pct_error;
  int seg_tp = 0, seg_fp = 0, seg_fn = 0;
  int det_tp = 0, det_fp = 0, det_fn = 0;
  std::string error;  // non-empty when this image failed
};

struct EvalReport {
  std::vector<ImageEval> images;
  int seg_tp = 0, seg_fp = 0, seg_fn = 0;
  int det_tp = 0, det_fp = 0, det_fn = 0;
  double seg_f1 = 0.0;
  double det_f1 = 0.0;
  CountingError counting;
  MetricsConfig thresholds;
  PostprocConfig postproc;
  std::vector<std::string> notes;
  int failed_images = 0;

  nlohmann::json to_json() const;
  /// Aggregate fields only, as stored in run records.
  nlohmann::json summary_json() const;
  std::string per_image_csv() const;
};

/// Truth objects are the connected components of each ground-truth mask.
/// A failing image is recorded in the report and does not abort the batch.
EvalReport evaluate(const Segmenter& model, std::span<const Sample> samples,
                    const PostprocConfig& postproc = {}, const MetricsConfig& metrics = {});

}  // namespace ccm
