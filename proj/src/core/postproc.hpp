#pragma once

#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "core/synth.hpp"
#include "core/tensor.hpp"

namespace ccm {

struct PostprocConfig {
  double threshold_prob = 0.5;
  int connectivity = 8;  // 4 or 8
  int min_area_px = 20;

  void validate() const;
  nlohmann::json to_json() const;
  static PostprocConfig from_json(const nlohmann::json& j);
};

struct ObjectStats {
  int label = 0;  // 1-based, matches label_map
  int area = 0;
  Centroid centroid;
  double equivalent_diameter = 0.0;
};

struct LabeledObjects {
  cv::Mat label_map;  // CV_32SC1, 0 = background
  int count = 0;
  std::vector<ObjectStats> objects;  // objects[k].label == k + 1
  int connectivity = 8;
};

/// sigmoid(logit) > threshold_prob, as CV_8UC1 {0,1}. `logits` is CV_32FC1.
cv::Mat binarize(const cv::Mat& logits, double threshold_prob = 0.5);

/// Labels are assigned in raster order of each component's first pixel.
LabeledObjects connected_components(const cv::Mat& mask, int connectivity = 8);

/// Drops components smaller than min_area_px and relabels densely,
/// preserving the original label order.
LabeledObjects filter_small(const LabeledObjects& objects, int min_area_px = 20);

struct CountResult {
  int count = 0;
  std::vector<Centroid> centroids;
  cv::Mat mask;  // binarized logits before area filtering
  LabeledObjects objects;
};

/// binarize -> connected_components -> filter_small.
CountResult count_cells(const cv::Mat& logits, const PostprocConfig& cfg = {});

/// Extracts item `b`, channel 0 of a logit tensor as CV_32FC1.
cv::Mat logits_plane(const Tensor& logits, int b = 0);

}  // namespace ccm
