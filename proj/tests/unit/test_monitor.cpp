#include <cmath>

#include <doctest.h>

#include "core/errors.hpp"
#include "core/monitor.hpp"
#include "core/synth.hpp"

using namespace ccm;

TEST_CASE("PSI arithmetic") {
  const std::vector<double> q = {0.5, 0.5}, p = {0.9, 0.1};
  const double expected = 0.4 * std::log(1.8) + (-0.4) * std::log(0.2);
  CHECK(psi(p, q) == doctest::Approx(expected));
  CHECK(psi(p, q) == doctest::Approx(0.879).epsilon(1e-3));
  CHECK(psi(q, q) == 0.0);
  const std::vector<double> z = {1.0, 0.0};
  CHECK(std::isfinite(psi(z, q)));
  const std::vector<double> three = {0.2, 0.3, 0.5};
  CHECK_THROWS_AS(psi(three, q), ValidationError);
}

TEST_CASE("quantile histograms") {
  std::vector<double> v;
  for (int i = 0; i < 1000; ++i) v.push_back(i / 1000.0);
  const auto h = quantile_histogram(v, 10);
  CHECK(h.bins() == 10);
  for (double m : h.mass) CHECK(m == doctest::Approx(0.1).epsilon(0.02));
  CHECK(h.bin_of(-5.0) == 0);
  CHECK(h.bin_of(5.0) == 9);

  const std::vector<double> counts = {3, 3, 3, 4, 4, 5, 7, 7, 7, 7};
  const auto hc = quantile_histogram(counts, 10, true);
  for (double e : hc.edges) CHECK(e - std::floor(e) == doctest::Approx(0.5));
  double total = 0.0;
  for (double m : hc.mass) total += m;
  CHECK(total == doctest::Approx(1.0));
  const auto back = Histogram::from_json(hc.to_json());
  CHECK(back.edges == hc.edges);
}

TEST_CASE("window evaluation states") {
  DriftReference ref;
  ref.intensity = {{0.5}, {0.5, 0.5}};
  ref.count = {{0.5}, {0.5, 0.5}};
  DriftMonitor m(ref);
  const std::vector<double> same = {0.5, 0.5}, shifted = {0.9, 0.1};
  CHECK(m.evaluate(same, same, 100).status == DriftStatus::kOk);
  CHECK(m.evaluate(shifted, same, 100).status == DriftStatus::kWarn);
  CHECK(m.evaluate(shifted, same, 100).status == DriftStatus::kTrigger);
  CHECK(m.evaluate(same, same, 100).status == DriftStatus::kOk);
  // Between warn and trigger thresholds: warn, never trigger.
  const std::vector<double> mild = {0.72, 0.28};
  const double s = psi(mild, same);
  REQUIRE(s > 0.2);
  REQUIRE(s < 0.25);
  CHECK(m.evaluate(mild, same, 100).status == DriftStatus::kWarn);
  CHECK(m.evaluate(mild, same, 100).status == DriftStatus::kWarn);
}

TEST_CASE("synthetic windows: in distribution and brightened") {
  SynthConfig sc;
  sc.non_overlapping = true;
  sc.seed = 10;
  const auto train = generate(sc, 150);
  std::vector<Sample> imgs;
  std::vector<int> counts;
  for (const auto& s : train) {
    imgs.push_back(s.sample);
    counts.push_back(s.true_count);
  }
  const auto ref = build_reference(imgs, counts);
  DriftConfig cfg;

  sc.seed = 11;
  const auto fresh = generate(sc, 200);
  DriftMonitor ok(ref, cfg);
  for (const auto& s : fresh) {
    if (auto r = ok.observe(s.sample.image, s.true_count)) {
      CHECK(r->input_psi < 0.05);
      CHECK(r->status == DriftStatus::kOk);
    }
  }

  DriftMonitor shift(ref, cfg);
  std::optional<DriftReport> last;
  int windows = 0;
  for (const auto& s : fresh) {
    cv::Mat bright = cv::min(s.sample.image * 1.5, 1.0);
    if (auto r = shift.observe(bright, s.true_count)) {
      last = r;
      ++windows;
    }
  }
  REQUIRE(windows == 2);
  CHECK(last->status == DriftStatus::kTrigger);
  CHECK(last->input_psi > 1.0);
}

TEST_CASE("short windows are deferred") {
  DriftReference ref;
  ref.intensity = {{0.5}, {0.5, 0.5}};
  ref.count = {{0.5}, {0.5, 0.5}};
  DriftMonitor m(ref);
  cv::Mat img(4, 4, CV_32FC3, cv::Scalar(0.2, 0.2, 0.2));
  for (int i = 0; i < 5; ++i) CHECK_FALSE(m.observe(img, 1).has_value());
  const auto r = m.tick();
  CHECK(r.deferred);
  CHECK(m.pending() == 5);
  for (int i = 0; i < 5; ++i) m.observe(img, 1);
  const auto r2 = m.tick();
  CHECK_FALSE(r2.deferred);
  CHECK(m.pending() == 0);
}
