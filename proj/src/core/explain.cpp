#include "core/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "core/errors.hpp"
#include "core/image_io.hpp"
#include "core/inference.hpp"

namespace ccm {

std::string CamTarget::describe() const {
  if (kind == Kind::kPixel) {
    return "logit at pixel (" + std::to_string(row) + "," + std::to_string(col) + ")";
  }
  return "mean foreground logit";
}

cv::Mat cam_from_activations(const Tensor& activations, const Tensor& gradients, int out_h,
                             int out_w, bool* all_zero) {
  if (!activations.same_shape(gradients) || activations.n() < 1) {
    throw ShapeError("grad_cam: activations " + activations.shape_str() + " vs gradients " +
                     gradients.shape_str());
  }
  const int c = activations.c();
  const std::size_t plane = activations.plane_size();
  std::vector<double> weights(static_cast<std::size_t>(c));
  for (int k = 0; k < c; ++k) {
    const float* g = gradients.plane(0, k);
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += g[i];
    weights[static_cast<std::size_t>(k)] = s / static_cast<double>(plane);
  }
  cv::Mat cam(activations.h(), activations.w(), CV_64FC1, cv::Scalar(0.0));
  auto* out = cam.ptr<double>();
  for (int k = 0; k < c; ++k) {
    const double w = weights[static_cast<std::size_t>(k)];
    if (w == 0.0) continue;
    const float* a = activations.plane(0, k);
    for (std::size_t i = 0; i < plane; ++i) out[i] += w * a[i];
  }
  for (std::size_t i = 0; i < plane; ++i) out[i] = std::max(0.0, out[i]);
  cv::Mat up;
  cv::resize(cam, up, cv::Size(out_w, out_h), 0, 0, cv::INTER_LINEAR);
  double lo = 0.0, hi = 0.0;
  cv::minMaxLoc(up, &lo, &hi);
  cv::Mat result(out_h, out_w, CV_32FC1, cv::Scalar(0.0f));
  const bool zero = !(hi > 0.0);
  if (all_zero != nullptr) *all_zero = zero;
  if (zero) return result;
  if (hi == lo) {
    result.setTo(1.0f);
    return result;
  }
  up.convertTo(result, CV_32FC1, 1.0 / (hi - lo), -lo / (hi - lo));
  return result;
}

Heatmap grad_cam(const SegmentationNetwork& net, const cv::Mat& image, const std::string& layer,
                 const CamTarget& target) {
  const auto names = net.layer_names();
  if (std::find(names.begin(), names.end(), layer) == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw ValidationError("grad_cam: unknown layer '" + layer + "'; valid layers: " + valid);
  }
  if (image.empty() || image.type() != CV_32FC3) {
    throw ValidationError("grad_cam: expected a non-empty RGB float image");
  }
  if (!(target.scale > 0.0)) throw ValidationError("grad_cam: target scale must be positive");
  const int h = image.rows, w = image.cols;
  if (target.kind == CamTarget::Kind::kPixel &&
      (target.row < 0 || target.row >= h || target.col < 0 || target.col >= w)) {
    throw ValidationError("grad_cam: target pixel outside the image");
  }

  const cv::Mat padded = pad_to_multiple(image, net.config().size_multiple());
  Tape tape(Mode::kEval, true);
  const Tensor logits = net.forward(to_tensor(padded), tape);

  Heatmap out;
  out.target_layer = layer;
  out.target = target.describe();

  // d(target)/d(logit). The map is normalized at the end, so the seed is
  // scaled to unit maximum; positive rescaling of the target then leaves
  // every intermediate value unchanged.
  Tensor seed(logits.n(), logits.c(), logits.h(), logits.w());
  if (target.kind == CamTarget::Kind::kPixel) {
    seed.at(0, 0, target.row, target.col) = static_cast<float>(target.scale);
  } else {
    int fg = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) fg += logits.at(0, 0, y, x) > 0.0f ? 1 : 0;
    }
    const float g = static_cast<float>(target.scale / std::max(fg, 1));
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (logits.at(0, 0, y, x) > 0.0f) seed.at(0, 0, y, x) = g;
      }
    }
  }
  float peak = 0.0f;
  for (float v : seed.values()) peak = std::max(peak, std::abs(v));
  if (peak == 0.0f) {
    spdlog::warn("grad_cam: target has no gradient (no predicted foreground); heatmap is zero");
    out.values = cv::Mat(h, w, CV_32FC1, cv::Scalar(0.0f));
    out.all_zero = true;
    return out;
  }
  for (float& v : seed.values()) v /= peak;

  std::map<std::string, Tensor> tap_grads;
  net.backward(tape, seed, nullptr, &tap_grads);
  const cv::Mat full = cam_from_activations(tape.taps.at(layer), tap_grads.at(layer), padded.rows,
                                            padded.cols, &out.all_zero);
  if (full.rows == h && full.cols == w) {
    out.values = full;
  } else {
    // renormalize over the visible region
    cv::Mat visible = full(cv::Rect(0, 0, w, h)).clone();
    double lo = 0.0, hi = 0.0;
    cv::minMaxLoc(visible, &lo, &hi);
    if (hi > lo) {
      visible.convertTo(out.values, CV_32FC1, 1.0 / (hi - lo), -lo / (hi - lo));
    } else {
      out.values = cv::Mat(h, w, CV_32FC1, cv::Scalar(hi > 0.0 ? 1.0f : 0.0f));
      out.all_zero = !(hi > 0.0);
    }
  }
  if (out.all_zero) spdlog::warn("grad_cam: no positive evidence at layer {}; heatmap is zero", layer);
  return out;
}

cv::Mat colorize(const cv::Mat& heatmap) {
  CV_Assert(heatmap.type() == CV_32FC1);
  cv::Mat u8;
  heatmap.convertTo(u8, CV_8UC1, 255.0);
  cv::Mat bgr, rgb, out;
  cv::applyColorMap(u8, bgr, cv::COLORMAP_JET);
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  rgb.convertTo(out, CV_32FC3, 1.0 / 255.0);
  return out;
}

cv::Mat overlay(const cv::Mat& image, const cv::Mat& heatmap, double alpha) {
  if (image.type() != CV_32FC3 || heatmap.type() != CV_32FC1) {
    throw ValidationError("overlay: expected an RGB float image and a float heatmap");
  }
  if (image.size() != heatmap.size()) {
    throw ShapeError("overlay: image " + std::to_string(image.rows) + "x" + std::to_string(image.cols) +
                     " vs heatmap " + std::to_string(heatmap.rows) + "x" + std::to_string(heatmap.cols));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("overlay: alpha must be in [0,1]");
  const cv::Mat color = colorize(heatmap);
  const float a = static_cast<float>(alpha);
  const float b = 1.0f - a;
  cv::Mat out(image.size(), CV_32FC3);
  for (int y = 0; y < image.rows; ++y) {
    const auto* src = image.ptr<float>(y);
    const auto* col = color.ptr<float>(y);
    auto* dst = out.ptr<float>(y);
    for (int x = 0; x < image.cols * 3; ++x) dst[x] = b * src[x] + a * col[x];
  }
  return out;
}

cv::Mat side_by_side(const std::vector<cv::Mat>& panels) {
  if (panels.empty()) throw ValidationError("side_by_side: no panels");
  for (const auto& p : panels) {
    if (p.rows != panels.front().rows || p.type() != panels.front().type()) {
      throw ShapeError("side_by_side: panels must share height and type");
    }
  }
  cv::Mat out;
  cv::hconcat(panels, out);
  return out;
}

std::vector<unsigned char> render_png(const cv::Mat& rgb) {
  CV_Assert(rgb.type() == CV_32FC3);
  cv::Mat bgr, u8;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  bgr.convertTo(u8, CV_8UC3, 255.0);
  std::vector<unsigned char> out;
  if (!cv::imencode(".png", u8, out)) throw IoError("png: encode failed");
  return out;
}

void write_render(const cv::Mat& rgb, const std::filesystem::path& path) {
  const auto bytes = render_png(rgb);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace ccm
