#include "core/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <Eigen/Core>

#include "core/errors.hpp"
#include "core/hash.hpp"

namespace ccm {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr float kNormEps = 1e-5f;
constexpr std::uint32_t kBlobVersion = 1;
constexpr char kBlobMagic[4] = {'C', 'C', 'M', 'W'};

int out_dim(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

void im2col(const float* x, int channels, int h, int w, int k, int stride, int pad, int ho, int wo,
            float* col) {
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    const float* xp = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * out_plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          float* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0f);
            continue;
          }
          const float* src = xp + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int shift = kx - pad;
            const int lo = std::max(0, -shift);
            const int hi = std::min(wo, w - shift);
            std::fill(dst, dst + lo, 0.0f);
            if (hi > lo) std::memcpy(dst + lo, src + lo + shift, sizeof(float) * (hi - lo));
            std::fill(dst + std::max(hi, lo), dst + wo, 0.0f);
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im(const float* col, int channels, int h, int w, int k, int stride, int pad, int ho,
            int wo, float* x) {
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    float* xp = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * out_plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const float* src = row + static_cast<std::size_t>(oy) * wo;
          float* dst = xp + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

FloatBuffer& scratch() {
  thread_local FloatBuffer buf;
  return buf;
}

Tensor pop(Tape& tape) {
  if (tape.stack.empty()) throw std::logic_error("backward: tape exhausted");
  Tensor t = std::move(tape.stack.back());
  tape.stack.pop_back();
  return t;
}

Tensor upsample2x(const Tensor& x) {
  Tensor y(x.n(), x.c(), x.h() * 2, x.w() * 2);
  for (int b = 0; b < x.n(); ++b) {
    for (int c = 0; c < x.c(); ++c) {
      const float* src = x.plane(b, c);
      float* dst = y.plane(b, c);
      const int w2 = y.w();
      for (int yy = 0; yy < x.h(); ++yy) {
        float* r0 = dst + static_cast<std::size_t>(2 * yy) * w2;
        float* r1 = r0 + w2;
        for (int xx = 0; xx < x.w(); ++xx) {
          const float v = src[static_cast<std::size_t>(yy) * x.w() + xx];
          r0[2 * xx] = r0[2 * xx + 1] = v;
          r1[2 * xx] = r1[2 * xx + 1] = v;
        }
      }
    }
  }
  return y;
}

Tensor upsample2x_backward(const Tensor& gy) {
  Tensor gx(gy.n(), gy.c(), gy.h() / 2, gy.w() / 2);
  for (int b = 0; b < gy.n(); ++b) {
    for (int c = 0; c < gy.c(); ++c) {
      const float* src = gy.plane(b, c);
      float* dst = gx.plane(b, c);
      const int w2 = gy.w();
      for (int yy = 0; yy < gx.h(); ++yy) {
        const float* r0 = src + static_cast<std::size_t>(2 * yy) * w2;
        const float* r1 = r0 + w2;
        for (int xx = 0; xx < gx.w(); ++xx) {
          dst[static_cast<std::size_t>(yy) * gx.w() + xx] =
              r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1];
        }
      }
    }
  }
  return gx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Tensor y(a.n(), a.c() + b.c(), a.h(), a.w());
  const std::size_t pa = a.c() * a.plane_size();
  const std::size_t pb = b.c() * b.plane_size();
  for (int i = 0; i < a.n(); ++i) {
    std::memcpy(y.item(i), a.item(i), pa * sizeof(float));
    std::memcpy(y.item(i) + pa, b.item(i), pb * sizeof(float));
  }
  return y;
}

void split_channels(const Tensor& g, int first, Tensor& a, Tensor& b) {
  a = Tensor(g.n(), first, g.h(), g.w());
  b = Tensor(g.n(), g.c() - first, g.h(), g.w());
  const std::size_t pa = a.c() * a.plane_size();
  const std::size_t pb = b.c() * b.plane_size();
  for (int i = 0; i < g.n(); ++i) {
    std::memcpy(a.item(i), g.item(i), pa * sizeof(float));
    std::memcpy(b.item(i), g.item(i) + pa, pb * sizeof(float));
  }
}

void add_inplace(Tensor& y, const Tensor& x) {
  float* yd = y.data();
  const float* xd = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) yd[i] += xd[i];
}

}  // namespace

// --------------------------------------------------------------------------
// NetworkConfig

void NetworkConfig::validate() const {
  if (in_channels < 1) throw ValidationError("network: in_channels must be >= 1");
  if (depth < 1) throw ValidationError("network: depth must be >= 1");
  if (depth > 8) throw ValidationError("network: depth must be <= 8");
  if (base_width < 4) throw ValidationError("network: base_width must be >= 4");
  if (residual_blocks_per_scale < 1) {
    throw ValidationError("network: residual_blocks_per_scale must be >= 1");
  }
  if (out_channels != 1) throw ValidationError("network: out_channels must be 1");
}

nlohmann::json NetworkConfig::to_json() const {
  return {{"in_channels", in_channels},
          {"base_width", base_width},
          {"depth", depth},
          {"residual_blocks_per_scale", residual_blocks_per_scale},
          {"out_channels", out_channels}};
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.base_width = j.value("base_width", c.base_width);
  c.depth = j.value("depth", c.depth);
  c.residual_blocks_per_scale = j.value("residual_blocks_per_scale", c.residual_blocks_per_scale);
  c.out_channels = j.value("out_channels", c.out_channels);
  return c;
}

std::string NetworkConfig::hash() const { return json_hash(to_json()); }

// --------------------------------------------------------------------------
// construction

int SegmentationNetwork::add_param(std::string name, Tensor value, bool trainable) {
  params_.push_back(Param{std::move(name), std::move(value), trainable});
  return static_cast<int>(params_.size()) - 1;
}

SegmentationNetwork::Conv SegmentationNetwork::add_conv(const std::string& name, int in, int out,
                                                        int k, int stride) {
  Conv c;
  c.in = in;
  c.out = out;
  c.k = k;
  c.stride = stride;
  c.pad = k / 2;
  c.weight = add_param(name + ".weight", Tensor(out, in, k, k), true);
  c.bias = add_param(name + ".bias", Tensor(1, 1, 1, out), true);
  return c;
}

SegmentationNetwork::NormAct SegmentationNetwork::add_norm_act(const std::string& name,
                                                               int channels) {
  NormAct na;
  na.channels = channels;
  na.gamma = add_param(name + ".gamma", Tensor(1, 1, 1, channels, 1.0f), true);
  na.beta = add_param(name + ".beta", Tensor(1, 1, 1, channels, 0.0f), true);
  na.mean = add_param(name + ".running_mean", Tensor(1, 1, 1, channels, 0.0f), false);
  na.var = add_param(name + ".running_var", Tensor(1, 1, 1, channels, 1.0f), false);
  return na;
}

SegmentationNetwork SegmentationNetwork::build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  SegmentationNetwork net;
  net.config_ = config;
  const int depth = config.depth;
  const int blocks = config.residual_blocks_per_scale;
  auto width = [&](int level) { return config.base_width << level; };

  auto make_blocks = [&](const std::string& prefix, int channels) {
    std::vector<ResBlock> out;
    for (int b = 0; b < blocks; ++b) {
      const std::string p = prefix + ".block" + std::to_string(b);
      ResBlock rb;
      rb.na1 = net.add_norm_act(p + ".norm1", channels);
      rb.conv1 = net.add_conv(p + ".conv1", channels, channels, 3, 1);
      rb.na2 = net.add_norm_act(p + ".norm2", channels);
      rb.conv2 = net.add_conv(p + ".conv2", channels, channels, 3, 1);
      out.push_back(rb);
    }
    return out;
  };

  net.stem_ = net.add_conv("stem", config.in_channels, width(0), 3, 1);
  net.enc_blocks_.push_back(make_blocks("enc0", width(0)));
  for (int l = 1; l <= depth; ++l) {
    net.down_.push_back(net.add_conv("down" + std::to_string(l), width(l - 1), width(l), 3, 2));
    net.enc_blocks_.push_back(make_blocks("enc" + std::to_string(l), width(l)));
  }
  net.up_.resize(depth);
  net.fuse_.resize(depth);
  net.dec_blocks_.resize(depth);
  for (int l = depth - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    net.up_[l] = net.add_conv(p + ".up", width(l + 1), width(l), 1, 1);
    net.fuse_[l] = net.add_conv(p + ".fuse", 2 * width(l), width(l), 1, 1);
    net.dec_blocks_[l] = make_blocks(p, width(l));
  }
  net.out_norm_ = net.add_norm_act("out_norm", width(0));
  net.head_ = net.add_conv("head", width(0), config.out_channels, 1, 1);

  std::mt19937_64 rng(seed);
  for (auto& p : net.params_) {
    const bool is_conv_weight = p.name.size() > 7 && p.name.ends_with(".weight");
    if (!is_conv_weight) continue;
    const int fan_in = p.value.c() * p.value.h() * p.value.w();
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (float& v : p.value.values()) v = dist(rng);
  }
  // Foreground prior of 10% so the first epochs are not dominated by the
  // background class.
  net.params_[net.head_.bias].value.fill(std::log(0.1f / 0.9f));
  return net;
}

std::size_t SegmentationNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

std::vector<std::string> SegmentationNetwork::layer_names() const {
  std::vector<std::string> names;
  for (int l = 0; l <= config_.depth; ++l) names.push_back("enc" + std::to_string(l));
  for (int l = config_.depth - 1; l >= 0; --l) names.push_back("dec" + std::to_string(l));
  return names;
}

Gradients SegmentationNetwork::zero_gradients() const {
  Gradients g;
  g.reserve(params_.size());
  for (const auto& p : params_) {
    g.emplace_back(p.value.n(), p.value.c(), p.value.h(), p.value.w());
  }
  return g;
}

// --------------------------------------------------------------------------
// primitive layers

Tensor SegmentationNetwork::conv_forward(const Conv& c, const Tensor& x, Tape* tape) const {
  if (x.c() != c.in) {
    throw ShapeError("conv: expected " + std::to_string(c.in) + " channels, got " + x.shape_str());
  }
  const int ho = out_dim(x.h(), c.k, c.stride, c.pad);
  const int wo = out_dim(x.w(), c.k, c.stride, c.pad);
  Tensor y(x.n(), c.out, ho, wo);
  const Tensor& weight = params_[c.weight].value;
  const float* bias = params_[c.bias].value.data();
  const int kk = c.in * c.k * c.k;
  ConstMap wm(weight.data(), c.out, kk);
  const bool pointwise = c.k == 1 && c.stride == 1;
  auto& col = scratch();
  if (!pointwise) col.resize(static_cast<std::size_t>(kk) * ho * wo);
  for (int b = 0; b < x.n(); ++b) {
    MutMap ym(y.item(b), c.out, static_cast<Eigen::Index>(ho) * wo);
    if (pointwise) {
      ym.noalias() = wm * ConstMap(x.item(b), c.in, static_cast<Eigen::Index>(ho) * wo);
    } else {
      im2col(x.item(b), c.in, x.h(), x.w(), c.k, c.stride, c.pad, ho, wo, col.data());
      ym.noalias() = wm * ConstMap(col.data(), kk, static_cast<Eigen::Index>(ho) * wo);
    }
    for (int o = 0; o < c.out; ++o) ym.row(o).array() += bias[o];
  }
  if (tape != nullptr) tape->stack.push_back(x);
  return y;
}

Tensor SegmentationNetwork::conv_backward(const Conv& c, const Tensor& gy, Tape& tape,
                                          Gradients* grads) const {
  Tensor x = pop(tape);
  const int ho = gy.h();
  const int wo = gy.w();
  const Eigen::Index hw = static_cast<Eigen::Index>(ho) * wo;
  const int kk = c.in * c.k * c.k;
  const Tensor& weight = params_[c.weight].value;
  ConstMap wm(weight.data(), c.out, kk);
  Tensor gx(x.n(), x.c(), x.h(), x.w());
  const bool pointwise = c.k == 1 && c.stride == 1;
  FloatBuffer col;
  FloatBuffer gcol;
  if (!pointwise) {
    col.resize(static_cast<std::size_t>(kk) * hw);
    gcol.resize(static_cast<std::size_t>(kk) * hw);
  }
  for (int b = 0; b < x.n(); ++b) {
    ConstMap gym(gy.item(b), c.out, hw);
    if (pointwise) {
      MutMap(gx.item(b), c.in, hw).noalias() = wm.transpose() * gym;
      if (grads != nullptr) {
        MutMap(((*grads)[c.weight]).data(), c.out, kk).noalias() +=
            gym * ConstMap(x.item(b), c.in, hw).transpose();
      }
    } else {
      MutMap gcm(gcol.data(), kk, hw);
      gcm.noalias() = wm.transpose() * gym;
      col2im(gcol.data(), c.in, x.h(), x.w(), c.k, c.stride, c.pad, ho, wo, gx.item(b));
      if (grads != nullptr) {
        im2col(x.item(b), c.in, x.h(), x.w(), c.k, c.stride, c.pad, ho, wo, col.data());
        MutMap(((*grads)[c.weight]).data(), c.out, kk).noalias() +=
            gym * ConstMap(col.data(), kk, hw).transpose();
      }
    }
    if (grads != nullptr) {
      float* gb = (*grads)[c.bias].data();
      for (int o = 0; o < c.out; ++o) gb[o] += gym.row(o).sum();
    }
  }
  return gx;
}

Tensor SegmentationNetwork::norm_act_forward(const NormAct& na, const Tensor& x, Tape* tape) const {
  const int channels = na.channels;
  const float* gamma = params_[na.gamma].value.data();
  const float* beta = params_[na.beta].value.data();
  std::vector<float> mean(channels), invstd(channels);
  const bool training = tape != nullptr && tape->mode == Mode::kTrain;
  const std::size_t plane = x.plane_size();
  if (training) {
    const double count = static_cast<double>(x.n()) * plane;
    std::vector<float> var_unbiased(channels);
    for (int c = 0; c < channels; ++c) {
      double s = 0.0, ss = 0.0;
      for (int b = 0; b < x.n(); ++b) {
        const float* p = x.plane(b, c);
        for (std::size_t i = 0; i < plane; ++i) {
          s += p[i];
          ss += static_cast<double>(p[i]) * p[i];
        }
      }
      const double m = s / count;
      const double v = std::max(0.0, ss / count - m * m);
      mean[c] = static_cast<float>(m);
      invstd[c] = static_cast<float>(1.0 / std::sqrt(v + kNormEps));
      var_unbiased[c] = static_cast<float>(count > 1 ? v * count / (count - 1) : v);
    }
    tape->stat_updates.push_back({na.mean, na.var, mean, var_unbiased});
  } else {
    const float* rm = params_[na.mean].value.data();
    const float* rv = params_[na.var].value.data();
    for (int c = 0; c < channels; ++c) {
      mean[c] = rm[c];
      invstd[c] = 1.0f / std::sqrt(rv[c] + kNormEps);
    }
  }
  Tensor y(x.n(), x.c(), x.h(), x.w());
  for (int b = 0; b < x.n(); ++b) {
    for (int c = 0; c < channels; ++c) {
      const float scale = gamma[c] * invstd[c];
      const float shift = beta[c] - mean[c] * scale;
      const float* src = x.plane(b, c);
      float* dst = y.plane(b, c);
      for (std::size_t i = 0; i < plane; ++i) dst[i] = std::max(0.0f, src[i] * scale + shift);
    }
  }
  if (tape != nullptr) {
    tape->stack.push_back(x);
    Tensor stats(1, 1, 2, channels);
    std::copy(mean.begin(), mean.end(), stats.data());
    std::copy(invstd.begin(), invstd.end(), stats.data() + channels);
    tape->stack.push_back(std::move(stats));
  }
  return y;
}

Tensor SegmentationNetwork::norm_act_backward(const NormAct& na, const Tensor& gy, Tape& tape,
                                              Gradients* grads) const {
  const Tensor stats = pop(tape);
  const Tensor x = pop(tape);
  const int channels = na.channels;
  const float* mean = stats.data();
  const float* invstd = stats.data() + channels;
  const float* gamma = params_[na.gamma].value.data();
  const float* beta = params_[na.beta].value.data();
  const std::size_t plane = x.plane_size();
  const double count = static_cast<double>(x.n()) * plane;
  const bool training = tape.mode == Mode::kTrain;
  Tensor gx(x.n(), x.c(), x.h(), x.w());
  for (int c = 0; c < channels; ++c) {
    // gradient through the relu, then sums needed by the normalization
    double sum_g = 0.0, sum_gx = 0.0;
    for (int b = 0; b < x.n(); ++b) {
      const float* xp = x.plane(b, c);
      const float* gp = gy.plane(b, c);
      float* out = gx.plane(b, c);
      for (std::size_t i = 0; i < plane; ++i) {
        const float xhat = (xp[i] - mean[c]) * invstd[c];
        const float g = (gamma[c] * xhat + beta[c] > 0.0f) ? gp[i] : 0.0f;
        out[i] = g;  // stash relu-masked gradient
        sum_g += g;
        sum_gx += static_cast<double>(g) * xhat;
      }
    }
    if (grads != nullptr) {
      (*grads)[na.gamma].data()[c] += static_cast<float>(sum_gx);
      (*grads)[na.beta].data()[c] += static_cast<float>(sum_g);
    }
    const float k = gamma[c] * invstd[c];
    if (training) {
      const float mean_g = static_cast<float>(sum_g / count);
      const float mean_gx = static_cast<float>(sum_gx / count);
      for (int b = 0; b < x.n(); ++b) {
        const float* xp = x.plane(b, c);
        float* out = gx.plane(b, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const float xhat = (xp[i] - mean[c]) * invstd[c];
          out[i] = k * (out[i] - mean_g - xhat * mean_gx);
        }
      }
    } else {
      for (int b = 0; b < x.n(); ++b) {
        float* out = gx.plane(b, c);
        for (std::size_t i = 0; i < plane; ++i) out[i] *= k;
      }
    }
  }
  return gx;
}

Tensor SegmentationNetwork::blocks_forward(const std::vector<ResBlock>& blocks, Tensor x,
                                           Tape* tape) const {
  for (const auto& rb : blocks) {
    Tensor h = norm_act_forward(rb.na1, x, tape);
    h = conv_forward(rb.conv1, h, tape);
    h = norm_act_forward(rb.na2, h, tape);
    h = conv_forward(rb.conv2, h, tape);
    add_inplace(h, x);
    x = std::move(h);
  }
  return x;
}

Tensor SegmentationNetwork::blocks_backward(const std::vector<ResBlock>& blocks, Tensor gy,
                                            Tape& tape, Gradients* grads) const {
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
    Tensor g = conv_backward(it->conv2, gy, tape, grads);
    g = norm_act_backward(it->na2, g, tape, grads);
    g = conv_backward(it->conv1, g, tape, grads);
    g = norm_act_backward(it->na1, g, tape, grads);
    add_inplace(g, gy);
    gy = std::move(g);
  }
  return gy;
}

// --------------------------------------------------------------------------
// whole network

Tensor SegmentationNetwork::run_forward(const Tensor& images, Tape* tape) const {
  if (images.c() != config_.in_channels) {
    throw ShapeError("forward: expected " + std::to_string(config_.in_channels) +
                     " input channels, got " + images.shape_str());
  }
  const int m = config_.size_multiple();
  if (images.h() % m != 0 || images.w() % m != 0 || images.h() == 0 || images.w() == 0) {
    throw ShapeError("forward: input " + std::to_string(images.h()) + "x" +
                     std::to_string(images.w()) + " is not a multiple of " + std::to_string(m));
  }
  const int depth = config_.depth;
  auto tap = [&](const std::string& name, const Tensor& t) {
    if (tape != nullptr && tape->keep_taps) tape->taps[name] = t;
  };

  std::vector<Tensor> skips(depth + 1);
  Tensor h = conv_forward(stem_, images, tape);
  h = blocks_forward(enc_blocks_[0], std::move(h), tape);
  tap("enc0", h);
  skips[0] = h;
  for (int l = 1; l <= depth; ++l) {
    h = conv_forward(down_[l - 1], skips[l - 1], tape);
    h = blocks_forward(enc_blocks_[l], std::move(h), tape);
    tap("enc" + std::to_string(l), h);
    skips[l] = h;
  }
  for (int l = depth - 1; l >= 0; --l) {
    // 1x1 conv commutes with nearest upsampling; run it at the coarse scale.
    Tensor u = upsample2x(conv_forward(up_[l], h, tape));
    h = conv_forward(fuse_[l], concat_channels(u, skips[l]), tape);
    h = blocks_forward(dec_blocks_[l], std::move(h), tape);
    if (l > 0) tap("dec" + std::to_string(l), h);
  }
  h = norm_act_forward(out_norm_, h, tape);
  tap("dec0", h);
  return conv_forward(head_, h, tape);
}

Tensor SegmentationNetwork::forward(const Tensor& images) const {
  return run_forward(images, nullptr);
}

Tensor SegmentationNetwork::forward(const Tensor& images, Tape& tape) const {
  return run_forward(images, &tape);
}

Tensor SegmentationNetwork::backward(Tape& tape, const Tensor& grad_logits, Gradients* grads,
                                     std::map<std::string, Tensor>* tap_grads) const {
  const int depth = config_.depth;
  auto record = [&](const std::string& name, const Tensor& g) {
    if (tap_grads != nullptr) (*tap_grads)[name] = g;
  };

  Tensor g = conv_backward(head_, grad_logits, tape, grads);
  record("dec0", g);
  g = norm_act_backward(out_norm_, g, tape, grads);
  std::vector<Tensor> skip_grads(depth);
  for (int l = 0; l < depth; ++l) {
    g = blocks_backward(dec_blocks_[l], std::move(g), tape, grads);
    g = conv_backward(fuse_[l], g, tape, grads);
    Tensor g_up;
    split_channels(g, up_[l].out, g_up, skip_grads[l]);
    g = conv_backward(up_[l], upsample2x_backward(g_up), tape, grads);
    if (l + 1 < depth) record("dec" + std::to_string(l + 1), g);
  }
  record("enc" + std::to_string(depth), g);
  for (int l = depth; l >= 1; --l) {
    g = blocks_backward(enc_blocks_[l], std::move(g), tape, grads);
    g = conv_backward(down_[l - 1], g, tape, grads);
    add_inplace(g, skip_grads[l - 1]);
    record("enc" + std::to_string(l - 1), g);
  }
  g = blocks_backward(enc_blocks_[0], std::move(g), tape, grads);
  g = conv_backward(stem_, g, tape, grads);
  return g;
}

void SegmentationNetwork::commit_batch_stats(const Tape& tape, float momentum) {
  for (const auto& u : tape.stat_updates) {
    float* rm = params_[u.mean_param].value.data();
    float* rv = params_[u.var_param].value.data();
    for (std::size_t c = 0; c < u.batch_mean.size(); ++c) {
      rm[c] = (1.0f - momentum) * rm[c] + momentum * u.batch_mean[c];
      rv[c] = (1.0f - momentum) * rv[c] + momentum * u.batch_var[c];
    }
  }
}

// --------------------------------------------------------------------------
// serialization

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  template <typename T>
  T get() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  void take(void* dst, std::size_t n) {
    if (pos_ + n > buf_.size()) throw CorruptionError("weights: truncated blob");
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

std::string digest(const std::vector<std::uint8_t>& blob) {
  Sha256 h;
  h.update(blob);
  return h.hex_digest();
}

}  // namespace

std::vector<std::uint8_t> SegmentationNetwork::serialize() const {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kBlobMagic, kBlobMagic + 4);
  put<std::uint32_t>(out, kBlobVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params_.size()));
  for (const auto& p : params_) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put<std::uint8_t>(out, p.trainable ? 1 : 0);
    put<std::int32_t>(out, p.value.n());
    put<std::int32_t>(out, p.value.c());
    put<std::int32_t>(out, p.value.h());
    put<std::int32_t>(out, p.value.w());
    const auto* d = reinterpret_cast<const std::uint8_t*>(p.value.data());
    out.insert(out.end(), d, d + p.value.size() * sizeof(float));
  }
  return out;
}

void SegmentationNetwork::deserialize(const std::vector<std::uint8_t>& blob) {
  Reader r(blob);
  char magic[4];
  r.take(magic, 4);
  if (std::memcmp(magic, kBlobMagic, 4) != 0) throw CorruptionError("weights: bad magic");
  if (r.get<std::uint32_t>() != kBlobVersion) throw CorruptionError("weights: unknown version");
  const auto count = r.get<std::uint32_t>();
  if (count != params_.size()) throw CorruptionError("weights: parameter count mismatch");
  for (auto& p : params_) {
    const auto len = r.get<std::uint32_t>();
    if (len > 4096) throw CorruptionError("weights: implausible parameter name length");
    std::string name(len, '\0');
    r.take(name.data(), len);
    r.get<std::uint8_t>();
    const int n = r.get<std::int32_t>(), c = r.get<std::int32_t>(), h = r.get<std::int32_t>(),
              w = r.get<std::int32_t>();
    if (name != p.name || n != p.value.n() || c != p.value.c() || h != p.value.h() ||
        w != p.value.w()) {
      throw CorruptionError("weights: layout mismatch at " + name);
    }
    r.take(p.value.data(), p.value.size() * sizeof(float));
  }
  if (!r.done()) throw CorruptionError("weights: trailing bytes");
}

std::string SegmentationNetwork::weights_hash() const { return digest(serialize()); }

std::filesystem::path sidecar_path(const std::filesystem::path& weights_path) {
  return weights_path.string() + ".json";
}

void save_network(const SegmentationNetwork& net, const std::filesystem::path& path,
                  const std::string& training_run_id, const nlohmann::json& reference) {
  const auto blob = net.serialize();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("weights: cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("weights: short write to " + path.string());
  }
  nlohmann::json side = {{"config", net.config().to_json()},
                         {"config_hash", net.config_hash()},
                         {"weights_hash", digest(blob)},
                         {"training_run_id", training_run_id},
                         {"reference", reference}};
  std::ofstream s(sidecar_path(path), std::ios::trunc);
  if (!s) throw IoError("weights: cannot write sidecar for " + path.string());
  s << side.dump(2) << '\n';
}

WeightsSidecar read_sidecar(const std::filesystem::path& weights_path) {
  const auto sp = sidecar_path(weights_path);
  std::ifstream s(sp);
  if (!s) throw IoError("weights: missing sidecar " + sp.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(s);
    WeightsSidecar out;
    out.config = NetworkConfig::from_json(j.at("config"));
    out.config_hash = j.at("config_hash").get<std::string>();
    out.weights_hash = j.at("weights_hash").get<std::string>();
    out.training_run_id = j.value("training_run_id", "");
    out.reference = j.value("reference", nlohmann::json());
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("weights: unreadable sidecar " + sp.string() + ": " + e.what());
  }
}

SegmentationNetwork load_network(const std::filesystem::path& path,
                                 const std::optional<NetworkConfig>& expected) {
  const WeightsSidecar side = read_sidecar(path);
  if (side.config.hash() != side.config_hash) {
    throw CorruptionError("weights: sidecar config does not match its config_hash in " +
                          sidecar_path(path).string());
  }
  if (expected && expected->hash() != side.config_hash) {
    throw ValidationError("weights: stored config " + side.config.to_json().dump() +
                          " does not match requested " + expected->to_json().dump());
  }
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("weights: cannot read " + path.string());
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (digest(blob) != side.weights_hash) {
    throw CorruptionError("weights: digest mismatch for " + path.string() +
                          " (truncated or modified)");
  }
  SegmentationNetwork net = SegmentationNetwork::build(side.config, 0);
  net.deserialize(blob);
  return net;
}

}  // namespace ccm
