#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsct/attention.hpp"
#include "fsct/backbone.hpp"
#include "fsct/data.hpp"
#include "fsct/prototype.hpp"
#include "fsct/rng.hpp"
#include "fsct/tensor.hpp"

namespace fsct {

enum class PrototypeMode { kLearnable, kUniform };

inline const char* prototype_mode_name(PrototypeMode m) {
  return m == PrototypeMode::kLearnable ? "learnable" : "uniform";
}

inline PrototypeMode parse_prototype_mode(const std::string& s) {
  if (s == "learnable") return PrototypeMode::kLearnable;
  if (s == "uniform") return PrototypeMode::kUniform;
  throw std::invalid_argument("prototype mode must be 'learnable' or 'uniform', got '" + s + "'");
}

struct ModelConfig {
  std::size_t ways = 5;
  std::size_t shots = 1;
  std::size_t queries_per_cat = 16;
  SampleDims input;
  BackboneKind backbone = BackboneKind::kIdentity;
  std::size_t conv_channels = 64;
  std::size_t num_heads = 8;
  AttentionMode attention = AttentionMode::kCosine;
  PrototypeMode prototype = PrototypeMode::kLearnable;
  bool pre_norm = true;
  double classifier_scale = 1.0;  // multiplies the cosine score; 1 = plain
};

/// Cross-attention transformer block: layer norm, multi-head attention
/// between prototypes and query samples, prototype skip connection, and a
/// GELU feed-forward with its own skip. Width d in, width d out.
struct TransformerBlock {
  AttentionHeads heads;
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;
  Tensor ffn_w1, ffn_b1;  // d x 4d, 4d
  Tensor ffn_w2, ffn_b2;  // 4d x d, d
  bool pre_norm = true;

  TransformerBlock() = default;

  TransformerBlock(std::size_t d, std::size_t num_heads, AttentionMode mode, bool pre, Rng& rng)
      : heads(d, num_heads, mode, rng), pre_norm(pre) {
    const std::size_t d_ff = 4 * d;
    ln1_gain = Tensor::ones({d});
    ln1_bias = Tensor::zeros({d});
    ln2_gain = Tensor::ones({d});
    ln2_bias = Tensor::zeros({d});
    const double b1 = 1.0 / std::sqrt(static_cast<double>(d));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(d_ff));
    ffn_w1 = Tensor::uniform({d, d_ff}, -b1, b1, rng);
    ffn_b1 = Tensor::zeros({d_ff});
    ffn_w2 = Tensor::uniform({d_ff, d}, -b2, b2, rng);
    ffn_b2 = Tensor::zeros({d});
  }

  Tensor ffn(const Tensor& x) const {
    return add(matmul(gelu(add(matmul(x, ffn_w1), ffn_b1)), ffn_w2), ffn_b2);
  }
};

/// One transformer pass: attends query samples to category prototypes and
/// returns a per-(query, category) feature tensor q x n x d. The prototype
/// skip connection broadcasts the raw prototypes over the query axis. When
/// map_out is given it receives the detached head-averaged attention map.
inline Tensor transformer_forward(const Tensor& protos, const Tensor& queries,
                                  const TransformerBlock& block, Tensor* map_out = nullptr) {
  if (protos.rank() != 2 || queries.rank() != 2 || protos.shape()[1] != queries.shape()[1])
    fail_shape("transformer_forward", "widths disagree: " + shape_str(protos.shape()) + " vs " +
                                          shape_str(queries.shape()));
  const std::size_t n = protos.shape()[0];
  const std::size_t d = protos.shape()[1];
  Tensor proto_rows = reshape(protos, {1, n, d});
  if (block.pre_norm) {
    Tensor p_in = layer_norm(protos, block.ln1_gain, block.ln1_bias);
    Tensor q_in = layer_norm(queries, block.ln1_gain, block.ln1_bias);
    Tensor h_att = multi_head(p_in, q_in, block.heads, map_out);
    Tensor x = add(proto_rows, h_att);
    return add(x, block.ffn(layer_norm(x, block.ln2_gain, block.ln2_bias)));
  }
  Tensor h_att = multi_head(protos, queries, block.heads, map_out);
  Tensor x = layer_norm(add(proto_rows, h_att), block.ln1_gain, block.ln1_bias);
  return layer_norm(add(x, block.ffn(x)), block.ln2_gain, block.ln2_bias);
}

/// Per-query category distribution: cosine similarity between each
/// (query, category) feature row and the classifier weight vector, optionally
/// scaled, normalized with a softmax over categories. Output q x n.
inline Tensor cosine_classify(const Tensor& h_out, const Tensor& weight, double scale = 1.0) {
  if (h_out.rank() != 3) fail_shape("cosine_classify", "expected q x n x d features");
  const std::size_t d = h_out.shape()[2];
  if (weight.rank() != 2 || weight.shape()[0] != d || weight.shape()[1] != 1)
    fail_shape("cosine_classify", "weight must be " + std::to_string(d) + " x 1, got " +
                                      shape_str(weight.shape()));
  Tensor dots = matmul(h_out, weight);                                        // q x n x 1
  Tensor h_norms = clamp_min(l2_norm_rows(h_out), kNormEps);                  // q x n x 1
  Tensor w_norm = clamp_min(l2_norm_rows(transpose_last2(weight)), kNormEps); // 1 x 1
  Tensor scores = div(dots, mul(h_norms, w_norm));
  if (scale != 1.0) scores = mul(scores, scale);
  return softmax(reshape(scores, {h_out.shape()[0], h_out.shape()[1]}), 1);
}

/// Complete parameter set: backbone, prototype weights, transformer block,
/// classifier. Construction draws every initial value from the given rng in
/// a fixed order, so equal seeds give equal models.
struct ModelState {
  ModelConfig config;
  Backbone backbone;
  PrototypeWeights proto;
  TransformerBlock block;
  Tensor classifier;  // d x 1

  ModelState() = default;

  ModelState(const ModelConfig& cfg, Rng& rng)
      : config(cfg), backbone(cfg.backbone, cfg.input, cfg.conv_channels, rng) {
    const std::size_t d = backbone.feature_dim;
    proto = PrototypeWeights(cfg.ways, cfg.shots, d);
    block = TransformerBlock(d, cfg.num_heads, cfg.attention, cfg.pre_norm, rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    classifier = Tensor::uniform({d, 1}, -bound, bound, rng);
  }

  std::size_t feature_dim() const { return backbone.feature_dim; }

  /// Trainable parameters in a fixed order. Prototype weights participate
  /// only in learnable mode.
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t s = 0; s < backbone.stages.size(); ++s) {
      ConvStage& st = backbone.stages[s];
      const std::string p = "backbone.stage" + std::to_string(s) + ".";
      fn(p + "w", st.w);
      fn(p + "b", st.b);
      fn(p + "bn_gain", st.bn_gain);
      fn(p + "bn_bias", st.bn_bias);
    }
    if (config.prototype == PrototypeMode::kLearnable) fn("proto.theta", proto.theta);
    fn("block.w_query", block.heads.w_query);
    fn("block.w_key", block.heads.w_key);
    fn("block.w_value", block.heads.w_value);
    fn("block.w_out", block.heads.w_out);
    fn("block.ln1_gain", block.ln1_gain);
    fn("block.ln1_bias", block.ln1_bias);
    fn("block.ln2_gain", block.ln2_gain);
    fn("block.ln2_bias", block.ln2_bias);
    fn("block.ffn_w1", block.ffn_w1);
    fn("block.ffn_b1", block.ffn_b1);
    fn("block.ffn_w2", block.ffn_w2);
    fn("block.ffn_b2", block.ffn_b2);
    fn("classifier", classifier);
  }

  /// Every persisted array: trainable parameters, the prototype weights even
  /// when frozen, and batch-norm running buffers.
  void for_each_array(const std::function<void(const std::string&, Tensor&)>& fn) {
    for_each_param(fn);
    if (config.prototype != PrototypeMode::kLearnable) fn("proto.theta", proto.theta);
    for (std::size_t s = 0; s < backbone.stages.size(); ++s) {
      ConvStage& st = backbone.stages[s];
      const std::string p = "backbone.stage" + std::to_string(s) + ".";
      fn(p + "bn_mean", st.bn_mean);
      fn(p + "bn_var", st.bn_var);
    }
  }

  void set_requires_grad(bool on) {
    for_each_param([on](const std::string&, Tensor& t) { t.set_requires_grad(on); });
  }

  void check_episode(const Episode& ep) const {
    if (ep.ways != config.ways || ep.shots != config.shots)
      throw std::invalid_argument("episode is " + std::to_string(ep.ways) + "-way " +
                                  std::to_string(ep.shots) + "-shot but the model expects " +
                                  std::to_string(config.ways) + "-way " +
                                  std::to_string(config.shots) + "-shot");
  }
};

/// Full forward pass of one episode: features, prototypes, transformer,
/// classifier. Returns the q x n probability matrix.
inline Tensor forward_probs(const Episode& ep, ModelState& state, Tensor* map_out = nullptr) {
  state.check_episode(ep);
  Tensor support_feats = state.backbone.forward(ep.support);
  Tensor z_s = reshape(support_feats, {ep.ways, ep.shots, state.feature_dim()});
  Tensor z_p = state.config.prototype == PrototypeMode::kLearnable
                   ? proto_embed(z_s, state.proto)
                   : proto_mean(z_s);
  Tensor z_q = state.backbone.forward(ep.query);
  Tensor h_out = transformer_forward(z_p, z_q, state.block, map_out);
  return cosine_classify(h_out, state.classifier, state.config.classifier_scale);
}

struct Prediction {
  std::vector<std::size_t> labels;
  Tensor probs;  // q x n
};

/// Most-likely category per query; ties resolve to the lowest index.
inline Prediction predict(const Episode& ep, ModelState& state, Tensor* map_out = nullptr) {
  Prediction out;
  out.probs = forward_probs(ep, state, map_out).detach();
  const std::size_t q = out.probs.shape()[0], n = out.probs.shape()[1];
  out.labels.resize(q);
  for (std::size_t i = 0; i < q; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c)
      if (out.probs.data()[i * n + c] > out.probs.data()[i * n + best]) best = c;
    out.labels[i] = best;
  }
  return out;
}

}  // namespace fsct
