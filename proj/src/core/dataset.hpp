#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "core/random.hpp"

namespace ccm {

struct Sample {
  std::string image_id;
  cv::Mat image;  // CV_32FC3, RGB, [0,1]
  cv::Mat mask;   // CV_8UC1, {0,1}
  std::string source_path;
  std::optional<std::string> animal_id;

  int height() const { return image.rows; }
  int width() const { return image.cols; }
  /// Throws ShapeError / ValidationError when the invariants do not hold.
  void validate() const;
};

struct SplitSpec {
  double train_fraction = 0.75;
  std::uint64_t seed = 0;
  std::vector<std::string> train_ids;  // sorted
  std::vector<std::string> val_ids;    // sorted
  std::string split_hash;

  nlohmann::json to_json() const;
  static SplitSpec from_json(const nlohmann::json& j);
};

struct AugmentConfig {
  int crop_height = 512;
  int crop_width = 512;
  double max_rotation_deg = 30.0;
  double zoom_min = 1.0;
  double zoom_max = 1.3;
  double brightness = 0.2;  // multiplicative factor drawn from [1-b, 1+b]
  double contrast = 0.1;    // factor about the image mean drawn from [1-c, 1+c]
  bool enable_warp = false;

  /// Rejects enable_warp = true and out-of-range bounds.
  void validate() const;
  nlohmann::json to_json() const;
  static AugmentConfig from_json(const nlohmann::json& j);
};

/// One draw of the augmentation pipeline.
struct AugmentParams {
  double rotation_deg = 0.0;  // counter-clockwise
  double zoom = 1.0;
  double brightness = 1.0;
  double contrast = 1.0;

  bool is_identity() const {
    return rotation_deg == 0.0 && zoom == 1.0 && brightness == 1.0 && contrast == 1.0;
  }
};

/// Pairs `<root>/images/<stem>.*` with `<root>/ground_truths/<stem>.png`,
/// ordered by image_id. Throws IoError naming an orphan image or a pair
/// whose dimensions disagree.
std::vector<Sample> load_dataset(const std::filesystem::path& root);

/// Writes the layout read by load_dataset().
void save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& root);

/// Shuffled partition with floor(fraction * N) training ids.
SplitSpec make_split(const std::vector<std::string>& ids, double fraction, std::uint64_t seed);
SplitSpec make_split(const std::vector<Sample>& samples, double fraction, std::uint64_t seed);

void save_split(const SplitSpec& split, const std::filesystem::path& path);
SplitSpec load_split(const std::filesystem::path& path);

/// Same window for image and mask; origin uniform over valid positions.
Sample random_crop(const Sample& sample, int height, int width, Rng& rng);
Sample crop(const Sample& sample, int y0, int x0, int height, int width);

AugmentParams sample_augment(const AugmentConfig& cfg, Rng& rng);

/// Rotation and zoom about the image centre are applied to image (bilinear)
/// and mask (nearest) alike, photometric changes to the image only.
Sample apply_augment(const Sample& sample, const AugmentParams& params);
Sample augment(const Sample& sample, const AugmentConfig& cfg, Rng& rng);

}  // namespace ccm
