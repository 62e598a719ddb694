#include "core/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "core/errors.hpp"
#include "core/hash.hpp"
#include "core/image_io.hpp"

namespace fs = std::filesystem;

namespace ccm {
namespace {

const std::set<std::string> kImageExtensions = {".png", ".tif", ".tiff", ".jpg", ".jpeg"};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::map<std::string, fs::path> list_by_stem(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (!kImageExtensions.contains(lower(entry.path().extension().string()))) continue;
    const std::string stem = entry.path().stem().string();
    if (out.contains(stem)) {
      throw IoError("dataset: two files share the stem '" + stem + "' in " + dir.string());
    }
    out.emplace(stem, entry.path());
  }
  return out;
}

}  // namespace

void Sample::validate() const {
  if (image.empty() || mask.empty()) throw ValidationError("sample " + image_id + ": empty data");
  if (image.type() != CV_32FC3) throw ValidationError("sample " + image_id + ": image not CV_32FC3");
  if (mask.type() != CV_8UC1) throw ValidationError("sample " + image_id + ": mask not CV_8UC1");
  if (image.size() != mask.size()) {
    throw ShapeError("sample " + image_id + ": image and mask dimensions differ");
  }
}

// ---------------------------------------------------------------------------

std::vector<Sample> load_dataset(const fs::path& root) {
  const fs::path images_dir = root / "images";
  const fs::path masks_dir = root / "ground_truths";
  if (!fs::is_directory(images_dir)) {
    spdlog::warn("dataset: {} has no images/ directory; returning no samples", root.string());
    return {};
  }
  const auto images = list_by_stem(images_dir);
  if (images.empty()) {
    spdlog::warn("dataset: {} contains no images", images_dir.string());
    return {};
  }
  const auto masks = fs::is_directory(masks_dir) ? list_by_stem(masks_dir)
                                                 : std::map<std::string, fs::path>{};
  std::vector<Sample> samples;
  samples.reserve(images.size());
  for (const auto& [stem, image_path] : images) {
    const auto it = masks.find(stem);
    if (it == masks.end()) {
      throw IoError("dataset: no ground truth for image " + image_path.string() + " (expected " +
                    (masks_dir / (stem + ".png")).string() + ")");
    }
    Sample s;
    s.image_id = stem;
    s.source_path = image_path.string();
    s.image = read_image(image_path);
    s.mask = read_mask(it->second);
    if (s.image.size() != s.mask.size()) {
      throw IoError("dataset: dimension mismatch between " + image_path.string() + " (" +
                    std::to_string(s.image.rows) + "x" + std::to_string(s.image.cols) + ") and " +
                    it->second.string() + " (" + std::to_string(s.mask.rows) + "x" +
                    std::to_string(s.mask.cols) + ")");
    }
    samples.push_back(std::move(s));
  }
  for (const auto& [stem, path] : masks) {
    if (!images.contains(stem)) spdlog::warn("dataset: ground truth {} has no image", path.string());
  }
  return samples;
}

void save_dataset(const std::vector<Sample>& samples, const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "ground_truths");
  for (const auto& s : samples) {
    s.validate();
    write_image(root / "images" / (s.image_id + ".png"), s.image);
    write_mask(root / "ground_truths" / (s.image_id + ".png"), s.mask);
  }
}

// ---------------------------------------------------------------------------

nlohmann::json SplitSpec::to_json() const {
  return {{"fraction", train_fraction},
          {"seed", seed},
          {"train_ids", train_ids},
          {"val_ids", val_ids},
          {"split_hash", split_hash}};
}

SplitSpec SplitSpec::from_json(const nlohmann::json& j) {
  SplitSpec s;
  s.train_fraction = j.at("fraction").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.train_ids = j.at("train_ids").get<std::vector<std::string>>();
  s.val_ids = j.at("val_ids").get<std::vector<std::string>>();
  s.split_hash = j.at("split_hash").get<std::string>();
  return s;
}

SplitSpec make_split(const std::vector<std::string>& ids, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ValidationError("split: fraction must lie in (0,1), got " + std::to_string(fraction));
  }
  if (ids.size() < 2) throw ValidationError("split: need at least 2 samples");
  std::vector<std::string> order = ids;
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end()) {
    throw ValidationError("split: duplicate image ids");
  }
  Rng rng(seed);
  shuffle(order, rng);
  // The epsilon keeps products such as 0.29 * 100 from flooring to 28.
  const auto n_train = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(order.size()) + 1e-9));
  SplitSpec s;
  s.train_fraction = fraction;
  s.seed = seed;
  s.train_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(s.train_ids.begin(), s.train_ids.end());
  std::sort(s.val_ids.begin(), s.val_ids.end());
  s.split_hash = json_hash({{"train_ids", s.train_ids}, {"val_ids", s.val_ids}});
  return s;
}

SplitSpec make_split(const std::vector<Sample>& samples, double fraction, std::uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(samples.size());
  for (const auto& s : samples) ids.push_back(s.image_id);
  return make_split(ids, fraction, seed);
}

void save_split(const SplitSpec& split, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("split: cannot write " + path.string());
  f << split.to_json().dump(2) << '\n';
}

SplitSpec load_split(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("split: cannot read " + path.string());
  try {
    return SplitSpec::from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("split: malformed " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

void AugmentConfig::validate() const {
  if (enable_warp) {
    throw ValidationError("augment: warping distorts cell morphology and cannot be enabled");
  }
  if (crop_height < 1 || crop_width < 1) throw ValidationError("augment: crop size must be >= 1");
  if (max_rotation_deg < 0.0 || max_rotation_deg > 180.0) {
    throw ValidationError("augment: max_rotation_deg must lie in [0,180]");
  }
  if (!(zoom_min > 0.0 && zoom_min <= zoom_max)) {
    throw ValidationError("augment: zoom range must satisfy 0 < min <= max");
  }
  if (brightness < 0.0 || brightness >= 1.0 || contrast < 0.0 || contrast >= 1.0) {
    throw ValidationError("augment: lighting bounds must lie in [0,1)");
  }
}

nlohmann::json AugmentConfig::to_json() const {
  return {{"crop_height", crop_height},   {"crop_width", crop_width},
          {"max_rotation_deg", max_rotation_deg}, {"zoom_min", zoom_min},
          {"zoom_max", zoom_max},         {"brightness", brightness},
          {"contrast", contrast},         {"enable_warp", enable_warp}};
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j) {
  AugmentConfig c;
  c.crop_height = j.value("crop_height", c.crop_height);
  c.crop_width = j.value("crop_width", c.crop_width);
  c.max_rotation_deg = j.value("max_rotation_deg", c.max_rotation_deg);
  c.zoom_min = j.value("zoom_min", c.zoom_min);
  c.zoom_max = j.value("zoom_max", c.zoom_max);
  c.brightness = j.value("brightness", c.brightness);
  c.contrast = j.value("contrast", c.contrast);
  c.enable_warp = j.value("enable_warp", c.enable_warp);
  c.validate();
  return c;
}

Sample crop(const Sample& sample, int y0, int x0, int height, int width) {
  if (height > sample.height() || width > sample.width() || height < 1 || width < 1) {
    throw ValidationError("crop: " + std::to_string(height) + "x" + std::to_string(width) +
                          " does not fit image " + std::to_string(sample.height()) + "x" +
                          std::to_string(sample.width()));
  }
  if (y0 < 0 || x0 < 0 || y0 + height > sample.height() || x0 + width > sample.width()) {
    throw ValidationError("crop: window outside image");
  }
  const cv::Rect roi(x0, y0, width, height);
  Sample out = sample;
  out.image = sample.image(roi).clone();
  out.mask = sample.mask(roi).clone();
  return out;
}

Sample random_crop(const Sample& sample, int height, int width, Rng& rng) {
  if (height > sample.height() || width > sample.width()) {
    throw ValidationError("random_crop: " + std::to_string(height) + "x" + std::to_string(width) +
                          " exceeds image " + std::to_string(sample.height()) + "x" +
                          std::to_string(sample.width()));
  }
  const int y0 = static_cast<int>(uniform_int(rng, 0, sample.height() - height));
  const int x0 = static_cast<int>(uniform_int(rng, 0, sample.width() - width));
  return crop(sample, y0, x0, height, width);
}

AugmentParams sample_augment(const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  AugmentParams p;
  p.rotation_deg = uniform(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg);
  p.zoom = uniform(rng, cfg.zoom_min, cfg.zoom_max);
  p.brightness = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
  p.contrast = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
  return p;
}

Sample apply_augment(const Sample& sample, const AugmentParams& params) {
  sample.validate();
  Sample out = sample;
  // fresh buffers: the warps below must not write into the caller's pixels
  out.image = cv::Mat();
  out.mask = cv::Mat();
  if (params.is_identity()) {
    out.image = sample.image.clone();
    out.mask = sample.mask.clone();
    return out;
  }
  if (params.rotation_deg != 0.0 || params.zoom != 1.0) {
    const cv::Point2f centre(static_cast<float>(sample.width() - 1) / 2.0f,
                             static_cast<float>(sample.height() - 1) / 2.0f);
    const cv::Mat m = cv::getRotationMatrix2D(centre, params.rotation_deg, params.zoom);
    cv::warpAffine(sample.image, out.image, m, sample.image.size(), cv::INTER_LINEAR,
                   cv::BORDER_REFLECT_101);
    cv::warpAffine(sample.mask, out.mask, m, sample.mask.size(), cv::INTER_NEAREST,
                   cv::BORDER_REFLECT_101);
  } else {
    out.image = sample.image.clone();
    out.mask = sample.mask.clone();
  }
  if (params.brightness != 1.0 || params.contrast != 1.0) {
    const cv::Scalar mu = cv::mean(out.image);
    const double m = (mu[0] + mu[1] + mu[2]) / 3.0;
    out.image.convertTo(out.image, CV_32FC3, params.contrast * params.brightness,
                        m * (1.0 - params.contrast) * params.brightness);
  }
  cv::min(cv::max(out.image, 0.0), 1.0, out.image);
  return out;
}

Sample augment(const Sample& sample, const AugmentConfig& cfg, Rng& rng) {
  return apply_augment(sample, sample_augment(cfg, rng));
}

}  // namespace ccm
