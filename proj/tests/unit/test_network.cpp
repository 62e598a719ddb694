#include <cmath>
#include <fstream>
#include <random>

#include <doctest.h>

#include "core/errors.hpp"
#include "core/image_io.hpp"
#include "core/inference.hpp"
#include "core/network.hpp"
#include "helpers.hpp"

using namespace ccm;

namespace {

NetworkConfig tiny() {
  NetworkConfig c;
  c.base_width = 4;
  c.depth = 2;
  c.residual_blocks_per_scale = 1;
  return c;
}

Tensor random_images(int n, int h, int w, std::uint64_t seed) {
  Tensor t(n, 3, h, w);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("build is deterministic and validated") {
  const auto a = SegmentationNetwork::build(NetworkConfig{}, 0);
  const auto b = SegmentationNetwork::build(NetworkConfig{}, 0);
  CHECK(a.weights_hash() == b.weights_hash());
  CHECK(SegmentationNetwork::build(NetworkConfig{}, 1).weights_hash() != a.weights_hash());
  // Golden value for the default configuration.
  CHECK(a.parameter_count() == 4415025u);
  NetworkConfig bad;
  bad.depth = 0;
  CHECK_THROWS_AS(SegmentationNetwork::build(bad, 0), ValidationError);
}

TEST_CASE("forward shapes and finiteness") {
  const auto net = SegmentationNetwork::build(NetworkConfig{}, 3);
  const Tensor y = net.forward(random_images(2, 256, 256, 1));
  CHECK(y.n() == 2);
  CHECK(y.c() == 1);
  CHECK(y.h() == 256);
  CHECK(y.w() == 256);
  const Tensor z = net.forward(Tensor(1, 3, 64, 64, 0.0f));
  for (float v : z.values()) REQUIRE(std::isfinite(v));
  CHECK_THROWS_AS(net.forward(Tensor(1, 3, 60, 64)), ShapeError);
}

TEST_CASE("input gradient and parameter gradient match finite differences") {
  const auto net = SegmentationNetwork::build(tiny(), 5);
  const Tensor x = random_images(1, 8, 8, 2);
  Tape tape(Mode::kEval);
  const Tensor y = net.forward(x, tape);
  // Scalar objective: weighted sum of logits.
  Tensor w(y.n(), y.c(), y.h(), y.w());
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (auto& v : w.values()) v = u(rng);
  const auto objective = [&](const Tensor& in) {
    const Tensor out = net.forward(in);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(out.data()[i]) * w.data()[i];
    return s;
  };
  Gradients grads = net.zero_gradients();
  const Tensor gx = net.backward(tape, w, &grads);
  for (int idx : {0, 17, 63, 100, 191}) {
    Tensor p = x, m = x;
    p.data()[idx] += 1e-2f;
    m.data()[idx] -= 1e-2f;
    const double fd = (objective(p) - objective(m)) / 2e-2;
    CHECK(gx.data()[idx] == doctest::Approx(fd).epsilon(2e-2).scale(1e-2));
  }
  auto probe = SegmentationNetwork::build(tiny(), 5);
  int checked = 0;
  for (std::size_t pi = 0; pi < probe.params().size() && checked < 6; ++pi) {
    if (!probe.params()[pi].trainable) continue;
    auto& v = probe.params()[pi].value;
    const float keep = v.data()[0];
    v.data()[0] = keep + 2e-3f;
    double plus = 0.0, minus = 0.0;
    {
      const Tensor out = probe.forward(x);
      for (std::size_t i = 0; i < out.size(); ++i) plus += static_cast<double>(out.data()[i]) * w.data()[i];
    }
    v.data()[0] = keep - 2e-3f;
    {
      const Tensor out = probe.forward(x);
      for (std::size_t i = 0; i < out.size(); ++i) minus += static_cast<double>(out.data()[i]) * w.data()[i];
    }
    v.data()[0] = keep;
    CHECK(grads[pi].data()[0] == doctest::Approx((plus - minus) / 4e-3).epsilon(2e-2).scale(1e-2));
    pi += probe.params().size() / 7;
    ++checked;
  }
}

TEST_CASE("save and load") {
  test::TempDir dir;
  const auto net = SegmentationNetwork::build(tiny(), 7);
  save_network(net, dir / "w.bin", "run-x");
  const auto back = load_network(dir / "w.bin");
  CHECK(back.weights_hash() == net.weights_hash());
  CHECK(back.config_hash() == net.config_hash());
  CHECK(read_sidecar(dir / "w.bin").training_run_id == "run-x");

  NetworkConfig other = tiny();
  other.base_width = 8;
  CHECK_THROWS_AS(load_network(dir / "w.bin", other), ValidationError);

  const auto size = std::filesystem::file_size(dir / "w.bin");
  std::filesystem::resize_file(dir / "w.bin", size / 2);
  CHECK_THROWS_AS(load_network(dir / "w.bin"), CorruptionError);
}

TEST_CASE("tiled inference agrees with direct inference") {
  const auto net = SegmentationNetwork::build(tiny(), 11);
  cv::Mat img(70, 90, CV_32FC3);
  cv::randu(img, 0.0f, 1.0f);
  const cv::Mat direct = predict_logits(net, img);
  CHECK(direct.rows == 70);
  CHECK(direct.cols == 90);
  TileOptions t;
  t.tile = 32;
  t.overlap = 8;
  t.max_direct_pixels = 0;
  const cv::Mat tiled = predict_logits(net, img, t);
  CHECK(tiled.size() == direct.size());
  CHECK(pad_to_multiple(img, 4).size() == cv::Size(92, 72));
}

TEST_CASE("layer names") {
  const auto net = SegmentationNetwork::build(tiny(), 0);
  const auto names = net.layer_names();
  CHECK(std::find(names.begin(), names.end(), "dec0") != names.end());
  CHECK(std::find(names.begin(), names.end(), "enc2") != names.end());
}
