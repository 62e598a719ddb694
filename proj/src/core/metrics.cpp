#include "core/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>

#include <spdlog/spdlog.h>

#include "core/errors.hpp"

namespace ccm {
namespace {

// Rectangular assignment (rows <= cols) minimizing total cost; returns the
// column assigned to each row. Shortest augmenting path formulation with
// potentials, O(rows^2 cols).
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const int m = n == 0 ? 0 : static_cast<int>(cost[0].size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  }
  return row_to_col;
}

}  // namespace

nlohmann::json MetricsConfig::to_json() const {
  return {{"iou_thr", iou_thr}, {"dist_thr_px", dist_thr_px}};
}

MetricsConfig MetricsConfig::from_json(const nlohmann::json& j) {
  MetricsConfig c;
  c.iou_thr = j.value("iou_thr", c.iou_thr);
  c.dist_thr_px = j.value("dist_thr_px", c.dist_thr_px);
  return c;
}

MatchResult max_cardinality_matching(int n_pred, int n_truth, std::span<const Edge> edges) {
  MatchResult r;
  if (!edges.empty()) {
    // Only objects with at least one admissible partner take part.
    std::vector<int> pred_idx, truth_idx;
    std::unordered_map<int, int> pred_row, truth_col;
    for (const auto& e : edges) {
      if (!pred_row.contains(e.pred)) {
        pred_row[e.pred] = static_cast<int>(pred_idx.size());
        pred_idx.push_back(e.pred);
      }
      if (!truth_col.contains(e.truth)) {
        truth_col[e.truth] = static_cast<int>(truth_idx.size());
        truth_idx.push_back(e.truth);
      }
    }
    const bool transpose = pred_idx.size() > truth_idx.size();
    const std::size_t rows = transpose ? truth_idx.size() : pred_idx.size();
    const std::size_t cols = transpose ? pred_idx.size() : truth_idx.size();
    // Each admissible pair is worth `big` plus its quality, and `big`
    // exceeds the largest possible total quality, so more pairs always win.
    const double big = static_cast<double>(rows) + 1.0;
    std::vector<std::vector<double>> cost(rows, std::vector<double>(cols, 0.0));
    for (const auto& e : edges) {
      const int pr = pred_row[e.pred], tc = truth_col[e.truth];
      double& c = transpose ? cost[tc][pr] : cost[pr][tc];
      c = std::min(c, -(big + std::clamp(e.quality, 0.0, 1.0)));
    }
    const auto assign = hungarian(cost);
    for (std::size_t i = 0; i < rows; ++i) {
      const int j = assign[i];
      if (j < 0 || cost[i][j] >= 0.0) continue;  // assigned to a non-edge
      const int pred = transpose ? pred_idx[j] : pred_idx[i];
      const int truth = transpose ? truth_idx[i] : truth_idx[j];
      r.pairs.emplace_back(pred, truth);
    }
    std::sort(r.pairs.begin(), r.pairs.end());
  }
  r.tp = static_cast<int>(r.pairs.size());
  r.fp = n_pred - r.tp;
  r.fn = n_truth - r.tp;
  return r;
}

MatchResult match_segmentation(const LabeledObjects& pred, const LabeledObjects& truth,
                               double iou_thr) {
  if (pred.label_map.size() != truth.label_map.size()) {
    throw ShapeError("match_segmentation: label maps differ in size");
  }
  std::unordered_map<std::int64_t, int> inter;
  const std::int64_t stride = static_cast<std::int64_t>(truth.count) + 1;
  for (int y = 0; y < pred.label_map.rows; ++y) {
    const int* pr = pred.label_map.ptr<int>(y);
    const int* tr = truth.label_map.ptr<int>(y);
    for (int x = 0; x < pred.label_map.cols; ++x) {
      if (pr[x] != 0 && tr[x] != 0) ++inter[static_cast<std::int64_t>(pr[x]) * stride + tr[x]];
    }
  }
  std::vector<Edge> edges;
  for (const auto& [key, count] : inter) {
    const int pl = static_cast<int>(key / stride);
    const int tl = static_cast<int>(key % stride);
    const int uni = pred.objects[pl - 1].area + truth.objects[tl - 1].area - count;
    const double iou = static_cast<double>(count) / static_cast<double>(uni);
    if (iou > iou_thr) edges.push_back({pl - 1, tl - 1, iou});
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.pred, a.truth) < std::tie(b.pred, b.truth);
  });
  return max_cardinality_matching(pred.count, truth.count, edges);
}

MatchResult match_detection(std::span<const Centroid> pred, std::span<const Centroid> truth,
                            double dist_thr_px) {
  std::vector<Edge> edges;
  const double thr2 = dist_thr_px * dist_thr_px;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (std::size_t j = 0; j < truth.size(); ++j) {
      const double dy = pred[i].row - truth[j].row;
      const double dx = pred[i].col - truth[j].col;
      const double d2 = dy * dy + dx * dx;
      if (d2 < thr2) {
        edges.push_back({static_cast<int>(i), static_cast<int>(j),
                         1.0 - std::sqrt(d2) / dist_thr_px});
      }
    }
  }
  return max_cardinality_matching(static_cast<int>(pred.size()), static_cast<int>(truth.size()),
                                  edges);
}

double f1(int tp, int fp, int fn) {
  const int den = 2 * tp + fp + fn;
  if (den == 0) return 1.0;
  return 2.0 * tp / den;
}

CountingError counting_error(std::span<const CountPair> counts) {
  CountingError e;
  double sum = 0.0, sum_abs = 0.0;
  for (const auto& c : counts) {
    if (c.true_count <= 0) {
      ++e.n_excluded_zero_truth;
      continue;
    }
    const double pct =
        100.0 * static_cast<double>(c.pred_count - c.true_count) / static_cast<double>(c.true_count);
    sum += pct;
    sum_abs += std::abs(pct);
    ++e.n_included;
  }
  if (e.n_included == 0) {
    if (!counts.empty()) spdlog::warn("counting_error: every image has zero true cells; undefined");
    return e;
  }
  e.defined = true;
  e.mpe_signed = sum / e.n_included;
  e.mape = sum_abs / e.n_included;
  return e;
}

// ---------------------------------------------------------------------------

EvalReport evaluate(const Segmenter& model, std::span<const Sample> samples,
                    const PostprocConfig& postproc, const MetricsConfig& metrics) {
  postproc.validate();
  EvalReport report;
  report.thresholds = metrics;
  report.postproc = postproc;
  std::vector<CountPair> counts;
  bool empty_vs_empty = false;
  for (const auto& s : samples) {
    ImageEval ie;
    ie.image_id = s.image_id;
    try {
      s.validate();
      const cv::Mat logits = model.predict_logits(s.image);
      if (logits.size() != s.mask.size()) throw ShapeError("evaluate: logit map size differs");
      const CountResult pred = count_cells(logits, postproc);
      const LabeledObjects truth = connected_components(s.mask, postproc.connectivity);
      std::vector<Centroid> truth_centroids;
      for (const auto& o : truth.objects) truth_centroids.push_back(o.centroid);

      const MatchResult seg = match_segmentation(pred.objects, truth, metrics.iou_thr);
      const MatchResult det = match_detection(pred.centroids, truth_centroids, metrics.dist_thr_px);
      ie.seg_tp = seg.tp, ie.seg_fp = seg.fp, ie.seg_fn = seg.fn;
      ie.det_tp = det.tp, ie.det_fp = det.fp, ie.det_fn = det.fn;
      ie.seg_f1 = f1(seg.tp, seg.fp, seg.fn);
      ie.det_f1 = f1(det.tp, det.fp, det.fn);
      ie.pred_count = pred.count;
      ie.true_count = truth.count;
      if (truth.count > 0) {
        ie.pct_error = 100.0 * (pred.count - truth.count) / static_cast<double>(truth.count);
      }
      if (pred.count == 0 && truth.count == 0) empty_vs_empty = true;
      counts.push_back({ie.pred_count, ie.true_count});
      report.seg_tp += seg.tp, report.seg_fp += seg.fp, report.seg_fn += seg.fn;
      report.det_tp += det.tp, report.det_fp += det.fp, report.det_fn += det.fn;
    } catch (const std::exception& e) {
      ie.error = e.what();
      ++report.failed_images;
      spdlog::warn("evaluate: image {} failed: {}", s.image_id, e.what());
    }
    report.images.push_back(std::move(ie));
  }
  report.seg_f1 = f1(report.seg_tp, report.seg_fp, report.seg_fn);
  report.det_f1 = f1(report.det_tp, report.det_fp, report.det_fn);
  report.counting = counting_error(counts);
  if (empty_vs_empty) {
    report.notes.push_back("per-image F1 of an image with no true and no predicted cells is 1");
  }
  if (!report.counting.defined) {
    report.notes.push_back("counting error undefined: no image has a nonzero true count");
  }
  return report;
}

nlohmann::json EvalReport::summary_json() const {
  nlohmann::json counting_json = {{"n_included", counting.n_included},
                                  {"n_excluded_zero_truth", counting.n_excluded_zero_truth}};
  counting_json["mpe_signed"] = counting.defined ? nlohmann::json(counting.mpe_signed) : nullptr;
  counting_json["mape"] = counting.defined ? nlohmann::json(counting.mape) : nullptr;
  return {{"seg_f1", seg_f1},
          {"det_f1", det_f1},
          {"mpe_signed", counting_json["mpe_signed"]},
          {"mape", counting_json["mape"]},
          {"counting", counting_json},
          {"segmentation", {{"tp", seg_tp}, {"fp", seg_fp}, {"fn", seg_fn}}},
          {"detection", {{"tp", det_tp}, {"fp", det_fp}, {"fn", det_fn}}},
          {"n_images", images.size()},
          {"failed_images", failed_images},
          {"thresholds", thresholds.to_json()},
          {"postproc", postproc.to_json()}};
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = {{"aggregate", summary_json()}, {"notes", notes}};
  nlohmann::json per = nlohmann::json::array();
  for (const auto& ie : images) {
    nlohmann::json row = {{"image_id", ie.image_id},
                          {"seg_f1", ie.seg_f1},
                          {"det_f1", ie.det_f1},
                          {"pred_count", ie.pred_count},
                          {"true_count", ie.true_count},
                          {"pct_error", ie.pct_error ? nlohmann::json(*ie.pct_error) : nullptr},
                          {"segmentation", {{"tp", ie.seg_tp}, {"fp", ie.seg_fp}, {"fn", ie.seg_fn}}},
                          {"detection", {{"tp", ie.det_tp}, {"fp", ie.det_fp}, {"fn", ie.det_fn}}}};
    if (!ie.error.empty()) row["error"] = ie.error;
    per.push_back(row);
  }
  j["images"] = per;
  return j;
}

std::string EvalReport::per_image_csv() const {
  std::ostringstream os;
  os << "image_id,seg_f1,det_f1,pred_count,true_count,pct_error,error\n";
  for (const auto& ie : images) {
    os << ie.image_id << ',' << ie.seg_f1 << ',' << ie.det_f1 << ',' << ie.pred_count << ','
       << ie.true_count << ',';
    if (ie.pct_error) os << *ie.pct_error;
    os << ',' << (ie.error.empty() ? "" : "\"" + ie.error + "\"") << '\n';
  }
  return os.str();
}

}  // namespace ccm
