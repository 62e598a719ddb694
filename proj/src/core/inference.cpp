#include "core/inference.hpp"

#include <algorithm>
#include <vector>

#include <opencv2/core.hpp>

#include "core/image_io.hpp"
#include "core/postproc.hpp"

namespace ccm {
namespace {

int round_up(int v, int m) { return (v + m - 1) / m * m; }

cv::Mat pad_to(const cv::Mat& image, int h, int w) {
  if (image.rows == h && image.cols == w) return image;
  cv::Mat out;
  const int border = std::max(h - image.rows, w - image.cols);
  // REFLECT_101 cannot extend past the image size; fall back to replicate.
  const int mode = border < std::min(image.rows, image.cols) ? cv::BORDER_REFLECT_101
                                                             : cv::BORDER_REPLICATE;
  cv::copyMakeBorder(image, out, 0, h - image.rows, 0, w - image.cols, mode);
  return out;
}

cv::Mat forward_one(const SegmentationNetwork& net, const cv::Mat& image) {
  return logits_plane(net.forward(to_tensor(image)));
}

// Tile origins covering [0, extent) and the boundaries between tiles at the
// midpoint of each overlap.
void plan_axis(int extent, int tile, int step, std::vector<int>& starts, std::vector<int>& bounds) {
  starts.clear();
  for (int s = 0;; s += step) {
    if (s + tile >= extent) {
      starts.push_back(extent - tile);
      break;
    }
    starts.push_back(s);
  }
  bounds.assign(1, 0);
  for (std::size_t i = 0; i + 1 < starts.size(); ++i) {
    bounds.push_back((starts[i] + tile + starts[i + 1]) / 2);
  }
  bounds.push_back(extent);
}

}  // namespace

cv::Mat pad_to_multiple(const cv::Mat& image, int multiple) {
  return pad_to(image, round_up(image.rows, multiple), round_up(image.cols, multiple));
}

cv::Mat predict_logits(const SegmentationNetwork& net, const cv::Mat& image,
                       const TileOptions& options) {
  CV_Assert(image.type() == CV_32FC3);
  const int m = net.config().size_multiple();
  const int h = image.rows, w = image.cols;
  if (static_cast<std::size_t>(h) * w <= options.max_direct_pixels) {
    const cv::Mat padded = pad_to(image, round_up(h, m), round_up(w, m));
    return forward_one(net, padded)(cv::Rect(0, 0, w, h)).clone();
  }
  const int tile = round_up(std::max(options.tile, 2 * options.overlap + m), m);
  const int ph = std::max(round_up(h, m), tile);
  const int pw = std::max(round_up(w, m), tile);
  const cv::Mat padded = pad_to(image, ph, pw);
  const int step = std::max(m, tile - 2 * options.overlap);
  std::vector<int> ys, yb, xs, xb;
  plan_axis(ph, tile, step, ys, yb);
  plan_axis(pw, tile, step, xs, xb);
  cv::Mat out(ph, pw, CV_32FC1);
  for (std::size_t i = 0; i < ys.size(); ++i) {
    for (std::size_t j = 0; j < xs.size(); ++j) {
      const cv::Mat logits = forward_one(net, padded(cv::Rect(xs[j], ys[i], tile, tile)).clone());
      const cv::Rect keep(xb[j], yb[i], xb[j + 1] - xb[j], yb[i + 1] - yb[i]);
      logits(cv::Rect(keep.x - xs[j], keep.y - ys[i], keep.width, keep.height)).copyTo(out(keep));
    }
  }
  return out(cv::Rect(0, 0, w, h)).clone();
}

}  // namespace ccm
