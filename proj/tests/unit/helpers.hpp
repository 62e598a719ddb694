#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include <opencv2/core.hpp>

#include "core/metrics.hpp"
#include "core/postproc.hpp"

namespace test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> n{0};
    path_ = std::filesystem::temp_directory_path() /
            ("ccm_test_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

/// LabeledObjects straight from a painted label map (labels 1..count).
inline ccm::LabeledObjects objects_from_labels(const cv::Mat& labels, int count) {
  ccm::LabeledObjects lo;
  lo.label_map = labels.clone();
  lo.count = count;
  lo.objects.resize(count);
  for (int k = 0; k < count; ++k) lo.objects[k].label = k + 1;
  for (int y = 0; y < labels.rows; ++y) {
    for (int x = 0; x < labels.cols; ++x) {
      const int l = labels.at<int>(y, x);
      if (l > 0) ++lo.objects[l - 1].area;
    }
  }
  return lo;
}

/// Returns +-10 logits reproducing each sample's ground truth; the sample is
/// recognised by its pixel buffer.
class OracleSegmenter : public ccm::Segmenter {
 public:
  explicit OracleSegmenter(const std::vector<ccm::Sample>& samples) : samples_(samples) {}
  cv::Mat predict_logits(const cv::Mat& image) const override {
    for (const auto& s : samples_) {
      if (s.image.data == image.data) {
        cv::Mat l;
        s.mask.convertTo(l, CV_32F, 20.0, -10.0);
        return l;
      }
    }
    return cv::Mat(image.size(), CV_32FC1, cv::Scalar(-10.0f));
  }

 private:
  const std::vector<ccm::Sample>& samples_;
};

/// Every pixel background.
class BackgroundSegmenter : public ccm::Segmenter {
 public:
  cv::Mat predict_logits(const cv::Mat& image) const override {
    return cv::Mat(image.size(), CV_32FC1, cv::Scalar(-10.0f));
  }
};

}  // namespace test
