#include "core/image_io.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "core/errors.hpp"

namespace ccm {
namespace {

template <typename T>
cv::Mat scale_to_unit(const cv::Mat& raw, float full_scale) {
  cv::Mat out(raw.rows, raw.cols, CV_32FC(raw.channels()));
  const int n = raw.cols * raw.channels();
  for (int y = 0; y < raw.rows; ++y) {
    const T* src = raw.ptr<T>(y);
    float* dst = out.ptr<float>(y);
    for (int i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]) / full_scale;
  }
  return out;
}

}  // namespace

cv::Mat normalize_image(const cv::Mat& raw) {
  if (raw.empty()) throw IoError("image: empty");
  cv::Mat scaled;
  switch (raw.depth()) {
    case CV_8U: scaled = scale_to_unit<std::uint8_t>(raw, 255.0f); break;
    case CV_16U: scaled = scale_to_unit<std::uint16_t>(raw, 65535.0f); break;
    case CV_32F:
      scaled = raw.clone();
      cv::min(cv::max(scaled, 0.0), 1.0, scaled);
      break;
    default: throw IoError("image: unsupported bit depth");
  }
  cv::Mat rgb;
  switch (scaled.channels()) {
    case 1: cv::cvtColor(scaled, rgb, cv::COLOR_GRAY2RGB); break;
    case 3: cv::cvtColor(scaled, rgb, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(scaled, rgb, cv::COLOR_BGRA2RGB); break;
    default: throw IoError("image: unsupported channel count");
  }
  return rgb;
}

cv::Mat read_image(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw IoError("image: cannot decode " + path.string());
  return normalize_image(raw);
}

cv::Mat decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw IoError("image: empty payload");
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat raw = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw IoError("image: payload is not a decodable image");
  return normalize_image(raw);
}

cv::Mat read_mask(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (raw.empty()) throw IoError("mask: cannot decode " + path.string());
  if (raw.channels() > 1) {
    std::vector<cv::Mat> planes;
    cv::split(raw, planes);
    cv::Mat any = planes[0] != 0;
    for (std::size_t i = 1; i < planes.size(); ++i) any |= (planes[i] != 0);
    raw = any;
  }
  cv::Mat mask = raw != 0;  // 0 / 255
  mask /= 255;
  return mask;
}

void write_image(const std::filesystem::path& path, const cv::Mat& image) {
  CV_Assert(image.type() == CV_32FC3);
  cv::Mat bgr;
  cv::cvtColor(image, bgr, cv::COLOR_RGB2BGR);
  cv::Mat u16(bgr.rows, bgr.cols, CV_16UC3);
  for (int y = 0; y < bgr.rows; ++y) {
    const float* src = bgr.ptr<float>(y);
    auto* dst = u16.ptr<std::uint16_t>(y);
    for (int i = 0; i < bgr.cols * 3; ++i) {
      dst[i] = static_cast<std::uint16_t>(std::lround(std::clamp(src[i], 0.0f, 1.0f) * 65535.0f));
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), u16)) throw IoError("image: cannot write " + path.string());
}

void write_mask(const std::filesystem::path& path, const cv::Mat& mask) {
  CV_Assert(mask.type() == CV_8UC1);
  cv::Mat out = mask != 0;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), out)) throw IoError("mask: cannot write " + path.string());
}

std::vector<std::uint8_t> encode_png(const cv::Mat& image) {
  std::vector<std::uint8_t> out;
  cv::Mat to_write = image;
  if (image.type() == CV_32FC3) {
    cv::Mat bgr;
    cv::cvtColor(image, bgr, cv::COLOR_RGB2BGR);
    bgr.convertTo(to_write, CV_16UC3, 65535.0);
  }
  if (!cv::imencode(".png", to_write, out)) throw IoError("png: encode failed");
  return out;
}

Tensor to_tensor(std::span<const cv::Mat> images) {
  if (images.empty()) return {};
  const int h = images[0].rows;
  const int w = images[0].cols;
  Tensor t(static_cast<int>(images.size()), 3, h, w);
  for (int b = 0; b < t.n(); ++b) {
    const cv::Mat& img = images[b];
    if (img.rows != h || img.cols != w || img.type() != CV_32FC3) {
      throw std::invalid_argument("to_tensor: images must share size and be CV_32FC3");
    }
    float* r = t.plane(b, 0);
    float* g = t.plane(b, 1);
    float* bl = t.plane(b, 2);
    for (int y = 0; y < h; ++y) {
      const float* src = img.ptr<float>(y);
      const std::size_t off = static_cast<std::size_t>(y) * w;
      for (int x = 0; x < w; ++x) {
        r[off + x] = src[3 * x];
        g[off + x] = src[3 * x + 1];
        bl[off + x] = src[3 * x + 2];
      }
    }
  }
  return t;
}

Tensor to_tensor(const cv::Mat& image) { return to_tensor(std::span<const cv::Mat>(&image, 1)); }

}  // namespace ccm
