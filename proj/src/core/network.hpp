#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/tensor.hpp"

namespace ccm {

struct NetworkConfig {
  int in_channels = 3;
  int base_width = 16;
  int depth = 4;
  int residual_blocks_per_scale = 2;
  int out_channels = 1;

  /// Throws ValidationError.
  void validate() const;
  /// Input height and width must be multiples of this.
  int size_multiple() const { return 1 << depth; }
  nlohmann::json to_json() const;
  static NetworkConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct Param {
  std::string name;
  Tensor value;
  bool trainable = true;  // false for normalization running statistics
};

enum class Mode { kTrain, kEval };

/// Saved activations from one forward pass, consumed in reverse by backward().
struct Tape {
  explicit Tape(Mode m = Mode::kTrain, bool keep_taps = false) : mode(m), keep_taps(keep_taps) {}

  struct StatUpdate {
    int mean_param;
    int var_param;
    std::vector<float> batch_mean;
    std::vector<float> batch_var;  // unbiased
  };

  Mode mode;
  bool keep_taps;
  std::vector<Tensor> stack;
  std::vector<StatUpdate> stat_updates;
  std::map<std::string, Tensor> taps;
};

using Gradients = std::vector<Tensor>;

/// Residual U-Net producing one logit per pixel.
///
/// Encoder scale l has base_width * 2^l channels; scales are joined by
/// stride-2 convolutions going down and nearest-neighbour upsampling going
/// up, with concatenated skip connections. Every block is a pre-activation
/// residual unit (norm, relu, conv, norm, relu, conv, plus identity).
class SegmentationNetwork {
 public:
  /// Throws ValidationError on an invalid config.
  static SegmentationNetwork build(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }

  /// Evaluation-mode inference. Throws ShapeError unless H and W are
  /// multiples of config().size_multiple().
  Tensor forward(const Tensor& images) const;
  Tensor forward(const Tensor& images, Tape& tape) const;

  /// Accumulates parameter gradients into `grads` (when non-null) and
  /// returns the gradient with respect to the input images. When
  /// `tap_grads` is non-null, gradients at every named layer are stored.
  Tensor backward(Tape& tape, const Tensor& grad_logits, Gradients* grads,
                  std::map<std::string, Tensor>* tap_grads = nullptr) const;

  /// Folds the batch statistics recorded in a training tape into the
  /// running normalization statistics.
  void commit_batch_stats(const Tape& tape, float momentum = 0.1f);

  Gradients zero_gradients() const;
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::size_t parameter_count() const;

  /// Activations addressable by Grad-CAM, shallowest first.
  std::vector<std::string> layer_names() const;

  std::string weights_hash() const;
  std::string config_hash() const { return config_.hash(); }

  /// Serialized parameter blob; weights_hash() is its digest.
  std::vector<std::uint8_t> serialize() const;
  /// Inverse of serialize() for a network of the same config. Throws
  /// CorruptionError on any layout mismatch.
  void deserialize(const std::vector<std::uint8_t>& blob);

 private:
  struct Conv {
    int in = 0, out = 0, k = 1, stride = 1, pad = 0;
    int weight = -1, bias = -1;
  };
  struct NormAct {
    int channels = 0;
    int gamma = -1, beta = -1, mean = -1, var = -1;
  };
  struct ResBlock {
    NormAct na1;
    Conv conv1;
    NormAct na2;
    Conv conv2;
  };

  SegmentationNetwork() = default;

  Conv add_conv(const std::string& name, int in, int out, int k, int stride);
  NormAct add_norm_act(const std::string& name, int channels);
  int add_param(std::string name, Tensor value, bool trainable);

  Tensor conv_forward(const Conv& c, const Tensor& x, Tape* tape) const;
  Tensor conv_backward(const Conv& c, const Tensor& gy, Tape& tape, Gradients* grads) const;
  Tensor norm_act_forward(const NormAct& na, const Tensor& x, Tape* tape) const;
  Tensor norm_act_backward(const NormAct& na, const Tensor& gy, Tape& tape, Gradients* grads) const;
  Tensor blocks_forward(const std::vector<ResBlock>& blocks, Tensor x, Tape* tape) const;
  Tensor blocks_backward(const std::vector<ResBlock>& blocks, Tensor gy, Tape& tape,
                         Gradients* grads) const;
  Tensor run_forward(const Tensor& images, Tape* tape) const;

  NetworkConfig config_;
  std::vector<Param> params_;

  Conv stem_;
  std::vector<std::vector<ResBlock>> enc_blocks_;  // depth + 1 scales
  std::vector<Conv> down_;                         // down_[l] feeds scale l + 1
  std::vector<Conv> up_;                           // up_[l]: scale l + 1 -> l widths
  std::vector<Conv> fuse_;                         // concat (2 c_l) -> c_l
  std::vector<std::vector<ResBlock>> dec_blocks_;  // scales 0..depth-1
  NormAct out_norm_;
  Conv head_;
};

/// Sidecar metadata written next to a weight blob as `<path>.json`.
struct WeightsSidecar {
  NetworkConfig config;
  std::string config_hash;
  std::string weights_hash;
  std::string training_run_id;
  nlohmann::json reference;  // drift-monitoring reference histograms, may be null
};

void save_network(const SegmentationNetwork& net, const std::filesystem::path& path,
                  const std::string& training_run_id = "",
                  const nlohmann::json& reference = nullptr);

/// Throws CorruptionError when the blob is truncated or its digest does not
/// match the sidecar, and ValidationError when `expected` disagrees with the
/// stored config.
SegmentationNetwork load_network(const std::filesystem::path& path,
                                 const std::optional<NetworkConfig>& expected = std::nullopt);

WeightsSidecar read_sidecar(const std::filesystem::path& weights_path);

std::filesystem::path sidecar_path(const std::filesystem::path& weights_path);

}  // namespace ccm
