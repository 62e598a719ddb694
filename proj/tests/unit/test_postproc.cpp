#include <cmath>
#include <random>

#include <doctest.h>

#include "core/postproc.hpp"
#include "core/synth.hpp"

using namespace ccm;

namespace {

cv::Mat grid(std::initializer_list<int> v, int rows, int cols) {
  cv::Mat m(rows, cols, CV_8UC1);
  int i = 0;
  for (int x : v) m.data[i++] = static_cast<std::uint8_t>(x);
  return m;
}

}  // namespace

TEST_CASE("binarize boundary and oracle") {
  cv::Mat zero(3, 3, CV_32FC1, cv::Scalar(0.0f));
  CHECK(cv::countNonZero(binarize(zero)) == 0);
  cv::Mat big(3, 3, CV_32FC1, cv::Scalar(30.0f));
  CHECK(cv::countNonZero(binarize(big)) == 9);

  std::mt19937_64 rng(31);
  std::normal_distribution<float> n(0.0f, 3.0f);
  cv::Mat z(17, 13, CV_32FC1);
  for (int i = 0; i < z.rows * z.cols; ++i) z.ptr<float>()[i] = n(rng);
  for (double thr : {0.3, 0.5, 0.8}) {
    const cv::Mat b = binarize(z, thr);
    for (int i = 0; i < z.rows * z.cols; ++i) {
      const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(z.ptr<float>()[i])));
      CHECK(b.data[i] == (p > thr ? 1 : 0));
    }
  }
}

TEST_CASE("diagonal neighbours: one component in 8-connectivity, two in 4") {
  const cv::Mat m = grid({1, 0, 0,
                          0, 1, 0,
                          0, 0, 0}, 3, 3);
  CHECK(connected_components(m, 8).count == 1);
  CHECK(connected_components(m, 4).count == 2);
  CHECK(connected_components(cv::Mat::zeros(4, 4, CV_8UC1), 8).count == 0);
}

TEST_CASE("components are labelled in raster order with centroids") {
  const cv::Mat m = grid({0, 0, 1, 1,
                          1, 0, 1, 1,
                          1, 0, 0, 0}, 3, 4);
  const auto lo = connected_components(m, 8);
  REQUIRE(lo.count == 2);
  CHECK(lo.objects[0].area == 4);
  CHECK(lo.objects[0].centroid.row == doctest::Approx(0.5));
  CHECK(lo.objects[0].centroid.col == doctest::Approx(2.5));
  CHECK(lo.objects[1].area == 2);
  CHECK(lo.label_map.at<int>(1, 0) == 2);
}

TEST_CASE("area filter") {
  cv::Mat m(40, 80, CV_8UC1, cv::Scalar(0));
  m(cv::Rect(0, 0, 5, 1)).setTo(1);    // 5
  m(cv::Rect(10, 0, 5, 6)).setTo(1);   // 30
  m(cv::Rect(20, 0, 19, 1)).setTo(1);  // 19
  m(cv::Rect(50, 0, 4, 5)).setTo(1);   // 20
  const auto lo = connected_components(m, 8);
  REQUIRE(lo.count == 4);
  const auto kept = filter_small(lo, 20);
  CHECK(kept.count == 2);
  CHECK(kept.objects[0].area == 30);
  CHECK(kept.objects[1].area == 20);
  CHECK(cv::countNonZero(kept.label_map == 2) == 20);
  CHECK(filter_small(lo, 0).count == 4);

  cv::Mat one(10, 10, CV_8UC1, cv::Scalar(0));
  one(cv::Rect(0, 0, 5, 1)).setTo(1);
  CHECK(filter_small(connected_components(one, 8), 20).count == 0);
}

TEST_CASE("counting the ground truth of non-overlapping synthetic images") {
  SynthConfig sc;
  sc.non_overlapping = true;
  sc.seed = 5;
  for (const auto& s : generate(sc, 50)) {
    cv::Mat logits;
    s.sample.mask.convertTo(logits, CV_32F, 20.0, -10.0);
    CHECK(count_cells(logits).count == s.true_count);
  }
}

TEST_CASE("postproc config validation") {
  PostprocConfig c;
  c.connectivity = 6;
  CHECK_THROWS(c.validate());
  c = PostprocConfig{};
  c.threshold_prob = 1.0;
  CHECK_THROWS(c.validate());
}
