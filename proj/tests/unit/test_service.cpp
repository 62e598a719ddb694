#include <random>
#include <thread>

#include <doctest.h>
#include <httplib.h>

#include "core/errors.hpp"
#include "core/image_io.hpp"
#include "core/inference.hpp"
#include "core/service.hpp"
#include "core/synth.hpp"
#include "core/trainer.hpp"
#include "helpers.hpp"

using namespace ccm;
using nlohmann::json;

namespace {

/// Registers a completed run whose weights come from `seed`.
std::string add_model(RunStore& store, const std::string& id, std::uint64_t seed) {
  RunRecord r;
  r.run_id = id;
  r.created_at = format_timestamp(std::chrono::system_clock::now());
  r.loss = "dice";
  TrainConfig tc;
  tc.network.base_width = 4;
  tc.network.depth = 2;
  tc.network.residual_blocks_per_scale = 1;
  r.config = tc.to_json();
  store.append(r);
  const auto net = SegmentationNetwork::build(tc.network, seed);
  const auto dir = store.artifacts_dir(id);
  std::filesystem::create_directories(dir);
  save_network(net, dir / "weights.bin", id);
  r.artifacts.weights_path = "artifacts/" + id + "/weights.bin";
  r.artifacts.weights_hash = net.weights_hash();
  r.final_metrics = {{"det_f1", 0.95}};
  r.status = RunStatus::kCompleted;
  store.update(r);
  return id;
}

std::string predict_body(const cv::Mat& img) {
  const auto png = encode_png(img);
  return json{{"image", base64_encode(std::vector<std::uint8_t>(png.begin(), png.end()))}}.dump();
}

}  // namespace

TEST_CASE("RLE round trips") {
  std::mt19937_64 rng(1);
  std::bernoulli_distribution b(0.3);
  for (int t = 0; t < 50; ++t) {
    cv::Mat m(1 + t % 7, 1 + t % 11, CV_8UC1);
    for (int i = 0; i < m.rows * m.cols; ++i) m.data[i] = b(rng);
    const auto rle = rle_encode(m);
    CHECK(cv::countNonZero(rle_decode(rle) != m) == 0);
    CHECK(cv::countNonZero(rle_decode(RleMask::from_json(rle.to_json())) != m) == 0);
  }
  cv::Mat fg(2, 2, CV_8UC1, cv::Scalar(1));
  CHECK(rle_encode(fg).runs == std::vector<int>{0, 4});
  RleMask bad{2, 2, {1, 1}};
  CHECK_THROWS_AS(rle_decode(bad), ValidationError);
}

TEST_CASE("base64") {
  const std::string s = "foobar";
  CHECK(base64_encode({s.begin(), s.end()}) == "Zm9vYmFy");
  const std::string f = "fo";
  CHECK(base64_encode({f.begin(), f.end()}) == "Zm8=");
  const auto back = base64_decode("Zm8=");
  CHECK(std::string(back.begin(), back.end()) == "fo");
  CHECK(base64_decode("").empty());
  CHECK_THROWS_AS(base64_decode("Zm8"), ValidationError);
  CHECK_THROWS_AS(base64_decode("Z!!="), ValidationError);
}

TEST_CASE("service without a model") {
  test::TempDir dir;
  ServiceConfig cfg;
  cfg.store_root = dir.path();
  InferenceService svc(cfg);
  CHECK_THROWS_AS(svc.predict(cv::Mat(8, 8, CV_32FC3, cv::Scalar(0, 0, 0))), NoModelError);
  CHECK(svc.handle_predict(predict_body(cv::Mat(8, 8, CV_32FC3, cv::Scalar(0, 0, 0)))).status == 503);
  const auto h = json::parse(svc.handle_health().body);
  CHECK(h["status"] == "degraded");
  CHECK(svc.handle_predict("{not json").status == 400);
  CHECK(svc.handle_predict(R"({"image": "@@@"})").status == 400);
}

TEST_CASE("service matches offline inference and follows promotions") {
  test::TempDir dir;
  RunStore store(dir.path());
  add_model(store, "m1", 1);
  add_model(store, "m2", 2);
  store.promote("m1");

  ServiceConfig cfg;
  cfg.store_root = dir.path();
  InferenceService svc(cfg);
  SynthConfig sc;
  sc.image_height = 40;
  sc.image_width = 52;
  const auto samples = generate(sc, 3);
  const auto net = load_network(dir / "artifacts/m1/weights.bin");
  for (const auto& s : samples) {
    const cv::Mat img = decode_image(encode_png(s.sample.image));
    const auto reply = svc.handle_predict(predict_body(s.sample.image));
    REQUIRE(reply.status == 200);
    const auto r = PredictResponse::from_json(json::parse(reply.body));
    const auto offline = count_cells(predict_logits(net, img));
    CHECK(r.count == offline.count);
    CHECK(cv::countNonZero(rle_decode(r.mask) != offline.mask) == 0);
    CHECK(r.model_version == 1);
  }
  store.promote("m2");
  CHECK(json::parse(svc.handle_health().body)["model_version"] == 2);
  const auto r2 = PredictResponse::from_json(json::parse(svc.handle_predict(predict_body(samples[0].sample.image)).body));
  CHECK(r2.model_version == 2);
  CHECK(svc.handle_metrics().body.find("predict_requests_total") != std::string::npos);

  const auto ex = svc.handle_explain(json{{"image", json::parse(predict_body(samples[0].sample.image))["image"]},
                                          {"layer", "dec0"}}
                                         .dump());
  CHECK(ex.status == 200);
  CHECK(ex.content_type == "image/png");
  CHECK(svc.handle_explain(json{{"image", json::parse(predict_body(samples[0].sample.image))["image"]},
                                {"layer", "nope"}}
                               .dump())
            .status == 400);
}

TEST_CASE("HTTP front end") {
  test::TempDir dir;
  RunStore store(dir.path());
  add_model(store, "h1", 4);
  store.promote("h1");
  ServiceConfig cfg;
  cfg.store_root = dir.path();
  InferenceService svc(cfg);
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread t([&] { server.run(); });
  httplib::Client cli("127.0.0.1", port);
  auto health = cli.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["model_version"] == 1);
  auto pred = cli.Post("/predict", predict_body(cv::Mat(32, 32, CV_32FC3, cv::Scalar(0.1, 0.1, 0.1))),
                       "application/json");
  REQUIRE(pred);
  CHECK(pred->status == 200);
  auto bad = cli.Post("/predict", "nope", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  auto missing = cli.Get("/nothing");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  server.stop();
  t.join();
}
