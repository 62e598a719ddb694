#include <atomic>
#include <thread>

#include <doctest.h>

#include "core/energy.hpp"
#include "helpers.hpp"

using namespace ccm;

namespace {

/// Clock the test advances by hand.
struct ManualClock {
  std::atomic<double> now{0.0};
  Clock fn() {
    return [this] { return now.load(); };
  }
};

}  // namespace

TEST_CASE("100 W for 36 s is 0.001 kWh") {
  ConstantProbe probe(100.0, 0.0);
  ManualClock clock;
  MeterOptions o;
  o.sample_period_s = 0.01;
  o.clock = clock.fn();
  EnergyMeter m(probe, o);
  m.start();
  std::this_thread::sleep_for(std::chrono::milliseconds(30));
  clock.now = 36.0;
  const auto r = m.stop();
  CHECK(r.cpu_kwh == doctest::Approx(0.001).epsilon(1e-3));
  CHECK(r.gpu_kwh == 0.0);
  CHECK(r.duration_s == doctest::Approx(36.0));
  CHECK(r.co2_kg == doctest::Approx(0.001 * 0.27));
  CHECK(r.probe_kind == ProbeKind::kStub);
}

TEST_CASE("zero-duration region") {
  ConstantProbe probe(100.0, 50.0);
  ManualClock clock;
  MeterOptions o;
  o.clock = clock.fn();
  const auto r = meter([] {}, probe, o);
  CHECK(r.cpu_kwh == 0.0);
  CHECK(r.gpu_kwh == 0.0);
  CHECK(r.co2_kg == 0.0);
}

TEST_CASE("meter returns the region's value") {
  ConstantProbe probe(1.0, 0.0);
  auto [v, r] = meter([] { return 7; }, probe, MeterOptions{});
  CHECK(v == 7);
  CHECK(r.cpu_kwh >= 0.0);
}

TEST_CASE("trapezoidal integration") {
  EnergyIntegrator in;
  in.add(0.0, {0.0, 0.0});
  in.add(10.0, {100.0, 20.0});
  in.add(20.0, {100.0, 20.0});
  const auto r = in.report(0.5, 1.0, ProbeKind::kMeasured);
  // 500 J + 1000 J CPU, 100 J + 200 J GPU.
  CHECK(r.cpu_kwh == doctest::Approx(1500.0 / 3.6e6));
  CHECK(r.gpu_kwh == doctest::Approx(300.0 / 3.6e6));
  CHECK(r.co2_kg == doctest::Approx(1800.0 / 3.6e6 * 0.5));
}

TEST_CASE("published table reconstruction") {
  const double dice = co2_from_energy(0.23, 0.49, 0.268);
  const double focal = co2_from_energy(0.11, 0.24, 0.274);
  CHECK(dice == doctest::Approx(0.193).epsilon(0.01));
  CHECK(focal == doctest::Approx(0.096).epsilon(0.01));
  CHECK(dice == doctest::Approx(0.19296));
  CHECK(focal == doctest::Approx(0.0959));

  EmissionsReport d, f;
  d.cpu_kwh = 0.23, d.gpu_kwh = 0.49, d.co2_kg = dice;
  f.cpu_kwh = 0.11, f.gpu_kwh = 0.24, f.co2_kg = focal;
  const std::vector<std::pair<std::string, EmissionsReport>> reports = {{"dice", d}, {"focal", f}};
  const auto rows = compare(reports);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].label == "dice");
  CHECK(rows[0].ratio == doctest::Approx(2.01).epsilon(0.005));
  CHECK(rows[1].ratio == 1.0);
  CHECK(format_table(rows).find("dice") != std::string::npos);
}

TEST_CASE("comparison edge cases") {
  EmissionsReport a;
  a.cpu_kwh = 1.0, a.co2_kg = 0.3;
  const std::vector<std::pair<std::string, EmissionsReport>> same = {{"x", a}, {"y", a}, {"x", a}};
  const auto rows = compare(same);
  CHECK(rows.size() == 2);
  CHECK(rows[0].runs == 2);
  CHECK(rows[0].ratio == 1.0);
  CHECK(rows[1].ratio == 1.0);
  CHECK(compare({}).empty());
}

TEST_CASE("report serialization") {
  EmissionsReport r;
  r.cpu_kwh = 0.5;
  r.probe_kind = ProbeKind::kTdpEstimate;
  const auto back = EmissionsReport::from_json(r.to_json());
  CHECK(back.cpu_kwh == 0.5);
  CHECK(back.probe_kind == ProbeKind::kTdpEstimate);
  CHECK(EmissionsReport::csv_header().find("co2_kg") != std::string::npos);
  CHECK_THROWS(parse_probe_kind("solar"));
}

TEST_CASE("unavailable probe falls back to a TDP estimate") {
  class Missing : public PowerProbe {
   public:
    bool available() const override { return false; }
    PowerReading read() override { return {}; }
    ProbeKind kind() const override { return ProbeKind::kMeasured; }
  };
  const auto p = resolve_probe(std::make_unique<Missing>());
  CHECK(p->kind() == ProbeKind::kTdpEstimate);
  test::TempDir empty;
  CHECK_FALSE(RaplProbe(empty.path().string()).available());
}
