#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "core/network.hpp"

namespace ccm {

/// Scalar whose gradient drives Grad-CAM.
struct CamTarget {
  enum class Kind { kMeanForeground, kPixel };
  Kind kind = Kind::kMeanForeground;
  int row = 0;  // kPixel only, input coordinates
  int col = 0;
  double scale = 1.0;  // positive multiplier on the scalar; the map is invariant to it

  std::string describe() const;
};

struct Heatmap {
  cv::Mat values;  // CV_32FC1, input dims, [0,1]
  std::string target_layer;
  std::string target;
  bool all_zero = false;  // no gradient or no positive evidence
};

inline constexpr const char* kDefaultCamLayer = "dec0";

/// Gradient-weighted class activation map. Throws ValidationError naming
/// the valid layers when `layer` is unknown.
Heatmap grad_cam(const SegmentationNetwork& net, const cv::Mat& image,
                 const std::string& layer = kDefaultCamLayer, const CamTarget& target = {});

/// Map from already computed activations A and gradients G (both C x h x w
/// planes of one item), upsampled bilinearly to out_h x out_w.
cv::Mat cam_from_activations(const Tensor& activations, const Tensor& gradients, int out_h,
                             int out_w, bool* all_zero = nullptr);

/// JET colouring of a [0,1] map, RGB CV_32FC3 in [0,1].
cv::Mat colorize(const cv::Mat& heatmap);

/// (1 - alpha) * image + alpha * colorize(heatmap), CV_32FC3. Throws
/// ShapeError when the dimensions differ.
cv::Mat overlay(const cv::Mat& image, const cv::Mat& heatmap, double alpha = 0.4);

/// Panels side by side, all of the first panel's height.
cv::Mat side_by_side(const std::vector<cv::Mat>& panels);

/// 8-bit RGB PNG bytes of a CV_32FC3 rendering.
std::vector<unsigned char> render_png(const cv::Mat& rgb);
void write_render(const cv::Mat& rgb, const std::filesystem::path& path);

}  // namespace ccm
