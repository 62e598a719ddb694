#pragma once

#include <cstdint>
#include <span>
#include <string>

#include <json.hpp>

namespace ccm {

enum class LossKind { kDice, kFocal };

std::string to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& name);

struct LossConfig {
  LossKind kind = LossKind::kDice;
  double dice_smooth = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

/// Probabilities are clipped to [kProbClip, 1 - kProbClip] before any log.
inline constexpr double kProbClip = 1e-7;

// Both losses reduce over every element passed in (the whole batch). When
// `grad` is non-empty it receives dL/dprob for each element.

/// 1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)
double dice_loss(std::span<const double> probs, std::span<const std::uint8_t> target, double eps,
                 std::span<double> grad = {});

/// mean over pixels of -alpha (1 - p_t)^gamma log(p_t)
double focal_loss(std::span<const double> probs, std::span<const std::uint8_t> target,
                  double alpha, double gamma, std::span<double> grad = {});

double compute_loss(const LossConfig& cfg, std::span<const double> probs,
                    std::span<const std::uint8_t> target, std::span<double> grad = {});

/// Loss evaluated on logits; `grad_logits` (optional) receives dL/dlogit.
double loss_from_logits(const LossConfig& cfg, std::span<const float> logits,
                        std::span<const std::uint8_t> target, std::span<float> grad_logits = {});

}  // namespace ccm
