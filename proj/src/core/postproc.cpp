#include "core/postproc.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

#include "core/errors.hpp"

namespace ccm {

void PostprocConfig::validate() const {
  if (!(threshold_prob > 0.0 && threshold_prob < 1.0)) {
    throw ValidationError("postproc: threshold_prob must lie in (0,1)");
  }
  if (connectivity != 4 && connectivity != 8) {
    throw ValidationError("postproc: connectivity must be 4 or 8");
  }
  if (min_area_px < 0) throw ValidationError("postproc: min_area_px must be >= 0");
}

nlohmann::json PostprocConfig::to_json() const {
  return {{"threshold_prob", threshold_prob},
          {"connectivity", connectivity},
          {"min_area_px", min_area_px}};
}

PostprocConfig PostprocConfig::from_json(const nlohmann::json& j) {
  PostprocConfig c;
  c.threshold_prob = j.value("threshold_prob", c.threshold_prob);
  c.connectivity = j.value("connectivity", c.connectivity);
  c.min_area_px = j.value("min_area_px", c.min_area_px);
  c.validate();
  return c;
}

cv::Mat binarize(const cv::Mat& logits, double threshold_prob) {
  CV_Assert(logits.type() == CV_32FC1);
  cv::Mat mask(logits.size(), CV_8UC1);
  for (int y = 0; y < logits.rows; ++y) {
    const float* src = logits.ptr<float>(y);
    auto* dst = mask.ptr<std::uint8_t>(y);
    for (int x = 0; x < logits.cols; ++x) {
      const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(src[x])));
      dst[x] = p > threshold_prob ? 1 : 0;
    }
  }
  return mask;
}

LabeledObjects connected_components(const cv::Mat& mask, int connectivity) {
  CV_Assert(mask.type() == CV_8UC1);
  if (connectivity != 4 && connectivity != 8) {
    throw ValidationError("connected_components: connectivity must be 4 or 8");
  }
  static constexpr int kDy[8] = {-1, 1, 0, 0, -1, -1, 1, 1};
  static constexpr int kDx[8] = {0, 0, -1, 1, -1, 1, -1, 1};
  const int h = mask.rows, w = mask.cols;
  LabeledObjects out;
  out.connectivity = connectivity;
  out.label_map = cv::Mat::zeros(h, w, CV_32SC1);
  std::vector<cv::Point> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask.at<std::uint8_t>(y, x) == 0 || out.label_map.at<int>(y, x) != 0) continue;
      const int label = ++out.count;
      double sum_r = 0.0, sum_c = 0.0;
      int area = 0;
      out.label_map.at<int>(y, x) = label;
      stack.assign(1, {x, y});
      while (!stack.empty()) {
        const cv::Point p = stack.back();
        stack.pop_back();
        ++area;
        sum_r += p.y;
        sum_c += p.x;
        for (int k = 0; k < connectivity; ++k) {
          const int ny = p.y + kDy[k], nx = p.x + kDx[k];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (mask.at<std::uint8_t>(ny, nx) == 0) continue;
          int& l = out.label_map.at<int>(ny, nx);
          if (l != 0) continue;
          l = label;
          stack.push_back({nx, ny});
        }
      }
      ObjectStats s;
      s.label = label;
      s.area = area;
      s.centroid = {sum_r / area, sum_c / area};
      s.equivalent_diameter = std::sqrt(4.0 * area / std::numbers::pi);
      out.objects.push_back(s);
    }
  }
  return out;
}

LabeledObjects filter_small(const LabeledObjects& objects, int min_area_px) {
  LabeledObjects out;
  out.connectivity = objects.connectivity;
  std::vector<int> remap(objects.objects.size() + 1, 0);
  for (const auto& o : objects.objects) {
    if (o.area < min_area_px) continue;
    ObjectStats kept = o;
    kept.label = ++out.count;
    remap[o.label] = kept.label;
    out.objects.push_back(kept);
  }
  out.label_map = cv::Mat::zeros(objects.label_map.size(), CV_32SC1);
  for (int y = 0; y < objects.label_map.rows; ++y) {
    const int* src = objects.label_map.ptr<int>(y);
    int* dst = out.label_map.ptr<int>(y);
    for (int x = 0; x < objects.label_map.cols; ++x) dst[x] = remap[src[x]];
  }
  return out;
}

CountResult count_cells(const cv::Mat& logits, const PostprocConfig& cfg) {
  cfg.validate();
  CountResult r;
  r.mask = binarize(logits, cfg.threshold_prob);
  r.objects = filter_small(connected_components(r.mask, cfg.connectivity), cfg.min_area_px);
  r.count = r.objects.count;
  for (const auto& o : r.objects.objects) r.centroids.push_back(o.centroid);
  return r;
}

cv::Mat logits_plane(const Tensor& logits, int b) {
  cv::Mat out(logits.h(), logits.w(), CV_32FC1);
  std::memcpy(out.ptr<float>(0), logits.plane(b, 0), logits.plane_size() * sizeof(float));
  return out;
}

}  // namespace ccm
