#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <opencv2/core.hpp>

#include "core/tensor.hpp"

namespace ccm {

// Images are CV_32FC3 in RGB order with intensities in [0,1]; masks are
// CV_8UC1 holding 0 or 1.

/// 8- and 16-bit inputs are divided by their full-scale value; grayscale is
/// replicated to three channels. Throws IoError.
cv::Mat read_image(const std::filesystem::path& path);
cv::Mat decode_image(std::span<const std::uint8_t> bytes);
cv::Mat normalize_image(const cv::Mat& raw);

/// Any nonzero pixel becomes foreground.
cv::Mat read_mask(const std::filesystem::path& path);

/// 16-bit PNG; reloading with read_image() is bit-exact for any image that
/// itself came from an 8- or 16-bit file.
void write_image(const std::filesystem::path& path, const cv::Mat& image);
void write_mask(const std::filesystem::path& path, const cv::Mat& mask);
std::vector<std::uint8_t> encode_png(const cv::Mat& image);

/// Stacks equally sized images into an (N, 3, H, W) tensor.
Tensor to_tensor(std::span<const cv::Mat> images);
Tensor to_tensor(const cv::Mat& image);

}  // namespace ccm
