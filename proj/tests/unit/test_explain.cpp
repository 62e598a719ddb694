#include <doctest.h>

#include <opencv2/imgcodecs.hpp>

#include "core/errors.hpp"
#include "core/explain.hpp"
#include "core/network.hpp"

using namespace ccm;

namespace {

SegmentationNetwork small_net(std::uint64_t seed) {
  NetworkConfig c;
  c.base_width = 4;
  c.depth = 2;
  c.residual_blocks_per_scale = 1;
  return SegmentationNetwork::build(c, seed);
}

cv::Mat noise(int h, int w, std::uint64_t seed) {
  cv::Mat m(h, w, CV_32FC3);
  cv::RNG rng(seed);
  rng.fill(m, cv::RNG::UNIFORM, 0.0, 1.0);
  return m;
}

}  // namespace

TEST_CASE("uniform channel weights reduce to the normalized activation") {
  Tensor a(1, 3, 2, 2), g(1, 3, 2, 2, 0.5f);
  const float v[4] = {-1.0f, 0.5f, 1.0f, 2.0f};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) a.plane(0, c)[i] = v[i];
  bool zero = true;
  const cv::Mat m = cam_from_activations(a, g, 2, 2, &zero);
  CHECK_FALSE(zero);
  // relu -> {0, 0.5, 1, 2}, min-max -> {0, .25, .5, 1}
  CHECK(m.at<float>(0, 0) == doctest::Approx(0.0));
  CHECK(m.at<float>(0, 1) == doctest::Approx(0.25));
  CHECK(m.at<float>(1, 0) == doctest::Approx(0.5));
  CHECK(m.at<float>(1, 1) == doctest::Approx(1.0));

  Tensor g0(1, 3, 2, 2, 0.0f);
  const cv::Mat z = cam_from_activations(a, g0, 4, 4, &zero);
  CHECK(zero);
  CHECK(cv::countNonZero(z) == 0);
  CHECK(z.rows == 4);
}

TEST_CASE("heatmap dimensions, range and scale invariance") {
  const auto net = small_net(2);
  const cv::Mat img = noise(30, 45, 1);
  CamTarget t;
  const auto h = grad_cam(net, img, "dec0", t);
  CHECK(h.values.rows == 30);
  CHECK(h.values.cols == 45);
  double lo, hi;
  cv::minMaxLoc(h.values, &lo, &hi);
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);
  for (double s : {3.0, 1e-3, 1e4}) {
    CamTarget ts = t;
    ts.scale = s;
    const auto hs = grad_cam(net, img, "dec0", ts);
    CHECK(cv::norm(hs.values, h.values, cv::NORM_INF) == 0.0);
  }
  for (const auto& layer : net.layer_names()) {
    const auto hl = grad_cam(net, img, layer);
    CHECK(hl.values.size() == img.size());
  }
  CamTarget px;
  px.kind = CamTarget::Kind::kPixel;
  px.row = 10;
  px.col = 20;
  CHECK(grad_cam(net, img, "enc1", px).values.size() == img.size());
}

TEST_CASE("unknown layer lists the valid ones") {
  const auto net = small_net(3);
  try {
    grad_cam(net, noise(8, 8, 2), "conv99");
    FAIL("expected error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("dec0") != std::string::npos);
  }
}

TEST_CASE("overlay blending") {
  const cv::Mat img = noise(6, 7, 4);
  cv::Mat heat(6, 7, CV_32FC1);
  cv::randu(heat, 0.0f, 1.0f);
  const cv::Mat o0 = overlay(img, heat, 0.0);
  CHECK(cv::norm(o0, img, cv::NORM_INF) == 0.0);
  const cv::Mat o1 = overlay(img, heat, 1.0);
  CHECK(cv::norm(o1, colorize(heat), cv::NORM_INF) == 0.0);
  CHECK_THROWS_AS(overlay(img, cv::Mat(5, 7, CV_32FC1, cv::Scalar(0)), 0.5), ShapeError);

  const cv::Mat trip = side_by_side({img, o0, o1});
  CHECK(trip.cols == 21);
  CHECK(trip.rows == 6);
  const auto png = render_png(trip);
  const cv::Mat decoded = cv::imdecode(png, cv::IMREAD_COLOR);
  CHECK(decoded.cols == 21);
}
