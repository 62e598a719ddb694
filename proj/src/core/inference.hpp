#pragma once

#include <cstddef>

#include <opencv2/core.hpp>

#include "core/metrics.hpp"
#include "core/network.hpp"

namespace ccm {

struct TileOptions {
  int tile = 512;     // rounded up to the network's size multiple
  int overlap = 32;   // context discarded at each interior tile edge
  std::size_t max_direct_pixels = 1024 * 1024;
};

/// Pads the bottom and right edges up to the next multiple (reflecting,
/// or replicating when the image is too small to reflect).
cv::Mat pad_to_multiple(const cv::Mat& image, int multiple);

/// Full-resolution logits (CV_32FC1) for an image of any size. Images are
/// reflect-padded to the network's size multiple; large images are tiled
/// and each output pixel is taken from the tile in which it is most
/// central.
cv::Mat predict_logits(const SegmentationNetwork& net, const cv::Mat& image,
                       const TileOptions& options = {});

class NetworkSegmenter : public Segmenter {
 public:
  explicit NetworkSegmenter(const SegmentationNetwork& net, TileOptions options = {})
      : net_(net), options_(options) {}
  cv::Mat predict_logits(const cv::Mat& image) const override {
    return ccm::predict_logits(net_, image, options_);
  }

 private:
  const SegmentationNetwork& net_;
  TileOptions options_;
};

}  // namespace ccm
