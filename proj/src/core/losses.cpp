#include "core/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "core/errors.hpp"

namespace ccm {
namespace {

void check_shapes(std::size_t probs, std::size_t target, std::size_t grad) {
  if (probs != target) {
    throw ShapeError("loss: " + std::to_string(probs) + " probabilities vs " +
                     std::to_string(target) + " targets");
  }
  if (grad != 0 && grad != probs) throw ShapeError("loss: gradient buffer has the wrong size");
  if (probs == 0) throw ShapeError("loss: empty input");
}

}  // namespace

std::string to_string(LossKind kind) { return kind == LossKind::kDice ? "dice" : "focal"; }

LossKind parse_loss_kind(const std::string& name) {
  if (name == "dice") return LossKind::kDice;
  if (name == "focal") return LossKind::kFocal;
  throw ValidationError("loss: unknown kind '" + name + "' (expected dice or focal)");
}

void LossConfig::validate() const {
  if (!(dice_smooth > 0.0)) throw ValidationError("loss: dice_smooth must be > 0");
  if (!(focal_alpha > 0.0 && focal_alpha <= 1.0)) {
    throw ValidationError("loss: focal_alpha must lie in (0,1]");
  }
  if (!(focal_gamma >= 0.0)) throw ValidationError("loss: focal_gamma must be >= 0");
}

nlohmann::json LossConfig::to_json() const {
  return {{"kind", to_string(kind)},
          {"dice_smooth", dice_smooth},
          {"focal_alpha", focal_alpha},
          {"focal_gamma", focal_gamma}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  c.kind = parse_loss_kind(j.value("kind", to_string(c.kind)));
  c.dice_smooth = j.value("dice_smooth", c.dice_smooth);
  c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
  c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
  c.validate();
  return c;
}

double dice_loss(std::span<const double> probs, std::span<const std::uint8_t> target, double eps,
                 std::span<double> grad) {
  check_shapes(probs.size(), target.size(), grad.size());
  double inter = 0.0, sum_p = 0.0, sum_g = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double g = target[i] ? 1.0 : 0.0;
    inter += probs[i] * g;
    sum_p += probs[i];
    sum_g += g;
  }
  const double num = 2.0 * inter + eps;
  const double den = sum_p + sum_g + eps;
  if (!grad.empty()) {
    // d/dp_i [1 - num/den] = -(2 g_i den - num) / den^2
    const double inv_den2 = 1.0 / (den * den);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const double g = target[i] ? 1.0 : 0.0;
      grad[i] = -(2.0 * g * den - num) * inv_den2;
    }
  }
  return 1.0 - num / den;
}

double focal_loss(std::span<const double> probs, std::span<const std::uint8_t> target,
                  double alpha, double gamma, std::span<double> grad) {
  check_shapes(probs.size(), target.size(), grad.size());
  const double inv_n = 1.0 / static_cast<double>(probs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double raw = probs[i];
    const double p = std::clamp(raw, kProbClip, 1.0 - kProbClip);
    const bool positive = target[i] != 0;
    const double pt = positive ? p : 1.0 - p;
    const double q = 1.0 - pt;
    const double log_pt = std::log(pt);
    const double mod = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    total += -alpha * mod * log_pt;
    if (!grad.empty()) {
      const bool clipped = raw < kProbClip || raw > 1.0 - kProbClip;
      if (clipped) {
        grad[i] = 0.0;
        continue;
      }
      // d/dpt [-alpha q^gamma log pt] = alpha (gamma q^(gamma-1) log pt - q^gamma / pt)
      const double dmod = gamma == 0.0 ? 0.0 : gamma * std::pow(q, gamma - 1.0);
      const double dpt = alpha * (dmod * log_pt - mod / pt);
      grad[i] = (positive ? dpt : -dpt) * inv_n;
    }
  }
  return total * inv_n;
}

double compute_loss(const LossConfig& cfg, std::span<const double> probs,
                    std::span<const std::uint8_t> target, std::span<double> grad) {
  switch (cfg.kind) {
    case LossKind::kDice: return dice_loss(probs, target, cfg.dice_smooth, grad);
    case LossKind::kFocal:
      return focal_loss(probs, target, cfg.focal_alpha, cfg.focal_gamma, grad);
  }
  throw ValidationError("loss: unhandled kind");
}

double loss_from_logits(const LossConfig& cfg, std::span<const float> logits,
                        std::span<const std::uint8_t> target, std::span<float> grad_logits) {
  std::vector<double> probs(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
  }
  if (grad_logits.empty()) return compute_loss(cfg, probs, target);
  if (grad_logits.size() != logits.size()) throw ShapeError("loss: gradient buffer size");
  std::vector<double> gp(logits.size());
  const double value = compute_loss(cfg, probs, target, gp);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    grad_logits[i] = static_cast<float>(gp[i] * probs[i] * (1.0 - probs[i]));
  }
  return value;
}

}  // namespace ccm
