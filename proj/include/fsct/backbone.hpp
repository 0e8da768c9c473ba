#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsct/data.hpp"
#include "fsct/rng.hpp"
#include "fsct/tensor.hpp"

namespace fsct {

/// 3x3 convolution, stride 1, zero padding 1, on B x C x H x W input with
/// O x C x 3 x 3 weights and per-channel bias. Output B x O x H x W.
inline Tensor conv2d_3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 4) fail_shape("conv2d_3x3", "input must be BxCxHxW, got " + shape_str(x.shape()));
  if (w.rank() != 4 || w.shape()[2] != 3 || w.shape()[3] != 3)
    fail_shape("conv2d_3x3", "weights must be OxCx3x3, got " + shape_str(w.shape()));
  if (w.shape()[1] != x.shape()[1])
    fail_shape("conv2d_3x3", "channel mismatch: input " + std::to_string(x.shape()[1]) +
                                 ", weights " + std::to_string(w.shape()[1]));
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t O = w.shape()[0];
  if (b.size() != O) fail_shape("conv2d_3x3", "bias must have one entry per output channel");

  Tensor out = Tensor::zeros({B, O, H, W});
  const auto& xd = x.node()->data;
  const auto& wd = w.node()->data;
  const auto& bd = b.node()->data;
  auto& od = out.node()->data;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xcol = 0; xcol < W; ++xcol) {
          double acc = bd[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xcol + kx) - 1;
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                acc += xd[((n * C + c) * H + sy) * W + sx] * wd[((o * C + c) * 3 + ky) * 3 + kx];
              }
            }
          od[((n * O + o) * H + y) * W + xcol] = acc;
        }

  if (detail::tracking({&x, &w, &b})) {
    detail::track_output(out, {&x, &w, &b});
    NodePtr xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
    Tape::active()->record({xn, wn, bn}, on, [xn, wn, bn, on, B, C, H, W, O]() {
      const auto& g = on->grad;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xcol = 0; xcol < W; ++xcol) {
              const double go = g[((n * O + o) * H + y) * W + xcol];
              if (go == 0.0) continue;
              if (bn->requires_grad) bn->grad[o] += go;
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ky = 0; ky < 3; ++ky) {
                  const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                  if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                  for (std::size_t kx = 0; kx < 3; ++kx) {
                    const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xcol + kx) - 1;
                    if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                    const std::size_t xi = ((n * C + c) * H + sy) * W + sx;
                    const std::size_t wi = ((o * C + c) * 3 + ky) * 3 + kx;
                    if (xn->requires_grad) xn->grad[xi] += go * wn->data[wi];
                    if (wn->requires_grad) wn->grad[wi] += go * xn->data[xi];
                  }
                }
            }
    });
  }
  return out;
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
inline Tensor max_pool2x2(const Tensor& x) {
  if (x.rank() != 4) fail_shape("max_pool2x2", "input must be BxCxHxW, got " + shape_str(x.shape()));
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t OH = H / 2, OW = W / 2;
  if (OH == 0 || OW == 0)
    fail_shape("max_pool2x2", "spatial extent too small to pool: " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({B, C, OH, OW});
  std::vector<std::size_t> argmax(out.size());
  const auto& xd = x.node()->data;
  auto& od = out.node()->data;
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t xcol = 0; xcol < OW; ++xcol) {
          std::size_t best = ((n * C + c) * H + 2 * y) * W + 2 * xcol;
          double best_v = xd[best];
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = ((n * C + c) * H + 2 * y + dy) * W + 2 * xcol + dx;
              if (xd[idx] > best_v) {
                best_v = xd[idx];
                best = idx;
              }
            }
          const std::size_t oi = ((n * C + c) * OH + y) * OW + xcol;
          od[oi] = best_v;
          argmax[oi] = best;
        }
  if (detail::tracking({&x})) {
    detail::track_output(out, {&x});
    NodePtr xn = x.node(), on = out.node();
    Tape::active()->record({xn}, on, [xn, on, argmax]() {
      if (!xn->requires_grad) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[argmax[i]] += on->grad[i];
    });
  }
  return out;
}

/// Per-channel batch normalization over B x C x H x W. In training mode the
/// batch statistics normalize the input and update the running buffers in
/// place (an untracked side effect); in eval mode the running buffers act as
/// constants.
inline Tensor batch_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         Tensor& running_mean, Tensor& running_var, bool training,
                         double momentum = 0.1, double eps = 1e-5) {
  if (x.rank() != 4) fail_shape("batch_norm", "input must be BxCxHxW, got " + shape_str(x.shape()));
  const std::size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (gain.size() != C || bias.size() != C || running_mean.size() != C || running_var.size() != C)
    fail_shape("batch_norm", "per-channel parameter size mismatch");
  const std::size_t per_chan = B * H * W;
  const std::size_t plane = H * W;

  std::vector<double> mu(C, 0.0), var(C, 0.0);
  const auto& xd = x.node()->data;
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double m = 0.0;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t p = 0; p < plane; ++p) m += xd[(n * C + c) * plane + p];
      m /= static_cast<double>(per_chan);
      double v = 0.0;
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
          const double dlt = xd[(n * C + c) * plane + p] - m;
          v += dlt * dlt;
        }
      v /= static_cast<double>(per_chan);
      mu[c] = m;
      var[c] = v;
      running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * m;
      running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * v;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      var[c] = running_var.data()[c];
    }
  }

  Tensor out = Tensor::zeros(x.shape());
  auto& od = out.node()->data;
  const auto& gd = gain.node()->data;
  const auto& bd = bias.node()->data;
  std::vector<double> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (n * C + c) * plane + p;
        od[i] = gd[c] * (xd[i] - mu[c]) * inv_std[c] + bd[c];
      }

  if (detail::tracking({&x, &gain, &bias})) {
    detail::track_output(out, {&x, &gain, &bias});
    NodePtr xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    Tape::active()->record(
        {xn, gn, bn}, on, [xn, gn, bn, on, B, C, plane, per_chan, mu, inv_std, training]() {
          const auto& g = on->grad;
          for (std::size_t c = 0; c < C; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t n = 0; n < B; ++n)
              for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (n * C + c) * plane + p;
                const double xhat = (xn->data[i] - mu[c]) * inv_std[c];
                sum_g += g[i];
                sum_gx += g[i] * xhat;
              }
            if (gn->requires_grad) gn->grad[c] += sum_gx;
            if (bn->requires_grad) bn->grad[c] += sum_g;
            if (xn->requires_grad) {
              const double scale = gn->data[c] * inv_std[c];
              if (training) {
                const double mean_g = sum_g / static_cast<double>(per_chan);
                const double mean_gx = sum_gx / static_cast<double>(per_chan);
                for (std::size_t n = 0; n < B; ++n)
                  for (std::size_t p = 0; p < plane; ++p) {
                    const std::size_t i = (n * C + c) * plane + p;
                    const double xhat = (xn->data[i] - mu[c]) * inv_std[c];
                    xn->grad[i] += scale * (g[i] - mean_g - xhat * mean_gx);
                  }
              } else {
                for (std::size_t n = 0; n < B; ++n)
                  for (std::size_t p = 0; p < plane; ++p) {
                    const std::size_t i = (n * C + c) * plane + p;
                    xn->grad[i] += scale * g[i];
                  }
              }
            }
          }
        });
  }
  return out;
}

enum class BackboneKind { kIdentity, kConv4, kConv6 };

inline const char* backbone_kind_name(BackboneKind k) {
  switch (k) {
    case BackboneKind::kIdentity: return "identity";
    case BackboneKind::kConv4: return "conv4";
    default: return "conv6";
  }
}

inline BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "identity") return BackboneKind::kIdentity;
  if (s == "conv4") return BackboneKind::kConv4;
  if (s == "conv6") return BackboneKind::kConv6;
  throw std::invalid_argument("backbone must be 'identity', 'conv4' or 'conv6', got '" + s + "'");
}

struct ConvStage {
  Tensor w;        // out x in x 3 x 3
  Tensor b;        // out
  Tensor bn_gain;  // out
  Tensor bn_bias;  // out
  Tensor bn_mean;  // out, running buffer
  Tensor bn_var;   // out, running buffer
  bool pooled = true;
};

/// Shallow convolutional feature extractor: each stage is conv3x3 + batch
/// norm + ReLU, optionally followed by 2x2 max pooling. The four-stage
/// variant pools everywhere; the six-stage variant pools in the first four
/// stages only. The identity kind forwards flat feature vectors untouched.
struct Backbone {
  BackboneKind kind = BackboneKind::kIdentity;
  SampleDims input;
  std::size_t conv_channels = 64;
  std::vector<ConvStage> stages;
  std::size_t feature_dim = 0;
  bool training = false;

  Backbone() = default;

  Backbone(BackboneKind k, const SampleDims& dims, std::size_t channels, Rng& rng)
      : kind(k), input(dims), conv_channels(channels) {
    if (kind == BackboneKind::kIdentity) {
      if (dims.is_image())
        throw std::invalid_argument("identity backbone requires flat feature samples");
      feature_dim = dims.features;
      return;
    }
    if (!dims.is_image())
      throw std::invalid_argument("conv backbone requires image samples");
    const std::size_t depth = kind == BackboneKind::kConv4 ? 4 : 6;
    std::size_t h = dims.height, w = dims.width, in_ch = dims.channels;
    for (std::size_t s = 0; s < depth; ++s) {
      const bool pooled = s < 4;
      const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * 9));
      ConvStage stage;
      stage.w = Tensor::uniform({conv_channels, in_ch, 3, 3}, -bound, bound, rng);
      stage.b = Tensor::zeros({conv_channels});
      stage.bn_gain = Tensor::ones({conv_channels});
      stage.bn_bias = Tensor::zeros({conv_channels});
      stage.bn_mean = Tensor::zeros({conv_channels});
      stage.bn_var = Tensor::ones({conv_channels});
      stage.pooled = pooled;
      stages.push_back(std::move(stage));
      in_ch = conv_channels;
      if (pooled) {
        h /= 2;
        w /= 2;
        if (h == 0 || w == 0)
          throw std::invalid_argument("image too small for " + std::string(backbone_kind_name(k)) +
                                      ": pooling stage " + std::to_string(s + 1) +
                                      " would empty the feature map");
      }
    }
    feature_dim = conv_channels * h * w;
  }

  /// Maps a batch of raw samples to row features (batch x feature_dim).
  Tensor forward(const Tensor& batch) {
    if (kind == BackboneKind::kIdentity) {
      if (batch.rank() != 2 || batch.shape()[1] != feature_dim)
        fail_shape("Backbone::forward", "expected batch x " + std::to_string(feature_dim) +
                                            " features, got " + shape_str(batch.shape()));
      return reshape(batch, batch.shape());
    }
    if (batch.rank() != 4 || batch.shape()[1] != input.channels ||
        batch.shape()[2] != input.height || batch.shape()[3] != input.width)
      fail_shape("Backbone::forward",
                 "expected batch x " + std::to_string(input.channels) + " x " +
                     std::to_string(input.height) + " x " + std::to_string(input.width) +
                     " images, got " + shape_str(batch.shape()));
    Tensor h = batch;
    for (ConvStage& stage : stages) {
      h = conv2d_3x3(h, stage.w, stage.b);
      h = batch_norm(h, stage.bn_gain, stage.bn_bias, stage.bn_mean, stage.bn_var, training);
      h = relu(h);
      if (stage.pooled) h = max_pool2x2(h);
    }
    return reshape(h, {batch.shape()[0], feature_dim});
  }
};

}  // namespace fsct
