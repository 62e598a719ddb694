#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "core/dataset.hpp"

namespace ccm {

struct SynthConfig {
  int image_height = 256;
  int image_width = 256;
  double mean_count = 12.0;  // Poisson mean of cells per image
  double radius_min = 8.0;   // half-max semi-axis bounds, pixels
  double radius_max = 25.0;
  double intensity_min = 0.4;
  double intensity_max = 1.0;
  double background = 0.05;
  double background_noise_sigma = 0.03;
  bool non_overlapping = false;
  std::uint64_t seed = 0;

  void validate() const;
  /// Centre spacing enforced in non-overlapping mode.
  double min_separation() const { return 2.0 * radius_max + 2.0; }
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

struct Centroid {
  double row = 0.0;
  double col = 0.0;
};

struct SynthSample {
  Sample sample;
  int true_count = 0;
  std::vector<Centroid> true_centroids;
};

/// Elliptical Gaussian "cells" on a dark noisy background, rendered in the
/// yellow of the tracer (red and green high, blue low). The mask is the
/// union of the regions where each noiseless blob exceeds half its peak.
std::vector<SynthSample> generate(const SynthConfig& cfg, int n);

/// Writes images/, ground_truths/ and truth.json under `out`.
void write_synthetic(const std::vector<SynthSample>& samples, const SynthConfig& cfg,
                     const std::filesystem::path& out);

}  // namespace ccm
