#include "core/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <spdlog/spdlog.h>

#include "core/errors.hpp"
#include "core/random.hpp"

namespace ccm {
namespace {

struct Blob {
  double cy, cx;
  double a, b;  // semi-axes at half maximum
  double theta;
  double peak;
};

// Counts unit-rate exponential arrivals before `mean`; exact and free of the
// underflow in the product-of-uniforms form.
int poisson(Rng& rng, double mean) {
  int k = 0;
  double t = -std::log1p(-uniform01(rng));
  while (t < mean) {
    ++k;
    t += -std::log1p(-uniform01(rng));
  }
  return k;
}

double gaussian(Rng& rng) {
  // Box-Muller; one draw per call keeps the stream layout simple.
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SynthSample render(const SynthConfig& cfg, Rng& rng, int index) {
  const int h = cfg.image_height;
  const int w = cfg.image_width;
  const int wanted = poisson(rng, cfg.mean_count);
  std::vector<Blob> blobs;
  const double sep2 = cfg.min_separation() * cfg.min_separation();
  for (int i = 0; i < wanted; ++i) {
    Blob bl{};
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      bl.cy = uniform(rng, 0.0, h - 1.0);
      bl.cx = uniform(rng, 0.0, w - 1.0);
      placed = !cfg.non_overlapping ||
               std::none_of(blobs.begin(), blobs.end(), [&](const Blob& o) {
                 const double dy = o.cy - bl.cy, dx = o.cx - bl.cx;
                 return dy * dy + dx * dx < sep2;
               });
    }
    if (!placed) {
      spdlog::warn("synth: image {} has room for only {} of {} cells", index, blobs.size(), wanted);
      break;
    }
    bl.a = uniform(rng, cfg.radius_min, cfg.radius_max);
    bl.b = uniform(rng, cfg.radius_min, cfg.radius_max);
    bl.theta = uniform(rng, 0.0, std::numbers::pi);
    bl.peak = uniform(rng, cfg.intensity_min, cfg.intensity_max);
    blobs.push_back(bl);
  }

  cv::Mat signal(h, w, CV_64FC1, cv::Scalar(0.0));
  cv::Mat mask(h, w, CV_8UC1, cv::Scalar(0));
  for (const auto& bl : blobs) {
    const double reach = 4.0 * std::max(bl.a, bl.b);
    const int y0 = std::max(0, static_cast<int>(std::floor(bl.cy - reach)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(bl.cy + reach)));
    const int x0 = std::max(0, static_cast<int>(std::floor(bl.cx - reach)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(bl.cx + reach)));
    const double ct = std::cos(bl.theta), st = std::sin(bl.theta);
    for (int y = y0; y <= y1; ++y) {
      auto* srow = signal.ptr<double>(y);
      auto* mrow = mask.ptr<std::uint8_t>(y);
      for (int x = x0; x <= x1; ++x) {
        const double dy = y - bl.cy, dx = x - bl.cx;
        const double u = (dx * ct + dy * st) / bl.a;
        const double v = (-dx * st + dy * ct) / bl.b;
        const double q = u * u + v * v;
        srow[x] += bl.peak * std::exp2(-q);
        if (q < 1.0) mrow[x] = 1;  // strictly above half maximum
      }
    }
  }

  static constexpr double kTint[3] = {1.0, 0.9, 0.25};  // yellow
  cv::Mat image(h, w, CV_32FC3);
  for (int y = 0; y < h; ++y) {
    const auto* srow = signal.ptr<double>(y);
    auto* irow = image.ptr<float>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = (cfg.background + srow[x]) * kTint[c] +
                         cfg.background_noise_sigma * gaussian(rng);
        irow[3 * x + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }

  SynthSample out;
  std::ostringstream id;
  id << "synth_" << std::setw(5) << std::setfill('0') << index;
  out.sample.image_id = id.str();
  out.sample.image = image;
  out.sample.mask = mask;
  out.sample.source_path = "synthetic";
  out.true_count = static_cast<int>(blobs.size());
  for (const auto& bl : blobs) out.true_centroids.push_back({bl.cy, bl.cx});
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  if (image_height < 1 || image_width < 1) throw ValidationError("synth: image size must be >= 1");
  if (mean_count < 0.0) throw ValidationError("synth: mean_count must be >= 0");
  if (radius_min < 2.0) throw ValidationError("synth: radius_min must be >= 2 px");
  if (radius_max < radius_min) throw ValidationError("synth: radius_max < radius_min");
  if (!(intensity_min >= 0.0 && intensity_min <= intensity_max && intensity_max <= 1.0)) {
    throw ValidationError("synth: intensity range must lie in [0,1]");
  }
  if (background_noise_sigma < 0.0) throw ValidationError("synth: noise sigma must be >= 0");
}

nlohmann::json SynthConfig::to_json() const {
  return {{"image_height", image_height},
          {"image_width", image_width},
          {"mean_count", mean_count},
          {"radius_min", radius_min},
          {"radius_max", radius_max},
          {"intensity_min", intensity_min},
          {"intensity_max", intensity_max},
          {"background", background},
          {"background_noise_sigma", background_noise_sigma},
          {"non_overlapping", non_overlapping},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.image_height = j.value("image_height", c.image_height);
  c.image_width = j.value("image_width", c.image_width);
  c.mean_count = j.value("mean_count", c.mean_count);
  c.radius_min = j.value("radius_min", c.radius_min);
  c.radius_max = j.value("radius_max", c.radius_max);
  c.intensity_min = j.value("intensity_min", c.intensity_min);
  c.intensity_max = j.value("intensity_max", c.intensity_max);
  c.background = j.value("background", c.background);
  c.background_noise_sigma = j.value("background_noise_sigma", c.background_noise_sigma);
  c.non_overlapping = j.value("non_overlapping", c.non_overlapping);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<SynthSample> generate(const SynthConfig& cfg, int n) {
  cfg.validate();
  if (n < 1) throw ValidationError("synth: n must be >= 1");
  std::vector<SynthSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    // Per-image streams make image i independent of how many came before.
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    out.push_back(render(cfg, rng, i));
  }
  return out;
}

void write_synthetic(const std::vector<SynthSample>& samples, const SynthConfig& cfg,
                     const std::filesystem::path& out) {
  std::vector<Sample> plain;
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : samples) {
    plain.push_back(s.sample);
    nlohmann::json centroids = nlohmann::json::array();
    for (const auto& c : s.true_centroids) centroids.push_back({c.row, c.col});
    images.push_back({{"image_id", s.sample.image_id},
                      {"true_count", s.true_count},
                      {"centroids", centroids}});
  }
  save_dataset(plain, out);
  std::ofstream f(out / "truth.json", std::ios::trunc);
  if (!f) throw IoError("synth: cannot write truth.json in " + out.string());
  f << nlohmann::json{{"config", cfg.to_json()}, {"images", images}}.dump(2) << '\n';
}

}  // namespace ccm
