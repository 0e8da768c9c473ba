#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsct/rng.hpp"
#include "fsct/tensor.hpp"

namespace fsct {

inline constexpr double kNormEps = 1e-8;

/// Cosine of the angle between two equal-length vectors, with norms floored
/// at kNormEps so zero vectors map to 0 instead of NaN.
inline double cosine_sim_vec(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size())
    fail_shape("cosine_sim_vec", "length mismatch " + std::to_string(a.size()) + " vs " +
                                     std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a.data()[i] * b.data()[i];
    na += a.data()[i] * a.data()[i];
    nb += b.data()[i] * b.data()[i];
  }
  return dot / (std::max(std::sqrt(na), kNormEps) * std::max(std::sqrt(nb), kNormEps));
}

/// Pairwise cosine similarity between the rows of A (n x k) and the columns
/// of B (k x m): the matrix product divided elementwise by the outer product
/// of the corresponding norms, each floored at kNormEps. Differentiable.
inline Tensor cosine_sim_mat(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    fail_shape("cosine_sim_mat", "expected matrices, got " + shape_str(a.shape()) + " and " +
                                     shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    fail_shape("cosine_sim_mat", "inner dims " + std::to_string(a.shape()[1]) + " vs " +
                                     std::to_string(b.shape()[0]));
  Tensor prod = matmul(a, b);
  Tensor row_norms = clamp_min(l2_norm_rows(a), kNormEps);                       // n x 1
  Tensor col_norms = clamp_min(l2_norm_rows(transpose_last2(b)), kNormEps);      // m x 1
  Tensor denom = mul(row_norms, reshape(col_norms, {1, b.shape()[1]}));          // n x m
  return div(prod, denom);
}

enum class AttentionMode { kSoftmax, kCosine };

inline const char* attention_mode_name(AttentionMode m) {
  return m == AttentionMode::kCosine ? "cosine" : "softmax";
}

inline AttentionMode parse_attention_mode(const std::string& s) {
  if (s == "cosine") return AttentionMode::kCosine;
  if (s == "softmax") return AttentionMode::kSoftmax;
  throw std::invalid_argument("attention mode must be 'cosine' or 'softmax', got '" + s + "'");
}

namespace detail {

inline void check_attention_shapes(const char* op, const Tensor& q_star, const Tensor& k,
                                   const Tensor& v) {
  if (q_star.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    fail_shape(op, "rank-3 inputs required");
  if (q_star.shape()[0] != 1)
    fail_shape(op, "proto projections must be 1xnxd, got " + shape_str(q_star.shape()));
  if (k.shape()[1] != 1 || v.shape()[1] != 1)
    fail_shape(op, "sample projections must be qx1xd, got " + shape_str(k.shape()) + " and " +
                       shape_str(v.shape()));
  const std::size_t d = q_star.shape()[2];
  if (k.shape()[2] != d || v.shape()[2] != d)
    fail_shape(op, "feature width mismatch: " + std::to_string(d) + ", " +
                       std::to_string(k.shape()[2]) + ", " + std::to_string(v.shape()[2]));
  if (k.shape()[0] != v.shape()[0])
    fail_shape(op, "k and v disagree on sample count");
}

// Broadcast dot products <q_star[0,j,:], k[i,0,:]> -> q x n x 1.
inline Tensor pairwise_dots(const Tensor& q_star, const Tensor& k) {
  return sum(mul(q_star, k), 2, true);
}

}  // namespace detail

/// Scaled dot-product attention between proto projections (1 x n x d_head)
/// and sample projections (q x 1 x d_head), normalized with a softmax over
/// the category axis. Output q x n x d_head; h_a[i,j,:] = map[i,j] * v[i,:].
/// When map_out is given it receives the q x n x 1 attention map.
inline Tensor softmax_attention(const Tensor& q_star, const Tensor& k, const Tensor& v,
                                Tensor* map_out = nullptr) {
  detail::check_attention_shapes("softmax_attention", q_star, k, v);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q_star.shape()[2]));
  Tensor map = softmax(mul(detail::pairwise_dots(q_star, k), scale), 1);
  if (map_out != nullptr) *map_out = map;
  return mul(map, v);
}

/// Cosine-similarity attention: the map entry for (sample i, category j) is
/// the cosine of q_star[0,j,:] and k[i,0,:], bounded to [-1,1], used directly
/// with no softmax. Output q x n x d_head as in softmax_attention.
inline Tensor cosine_attention(const Tensor& q_star, const Tensor& k, const Tensor& v,
                               Tensor* map_out = nullptr) {
  detail::check_attention_shapes("cosine_attention", q_star, k, v);
  Tensor dots = detail::pairwise_dots(q_star, k);
  Tensor qn = clamp_min(l2_norm_rows(q_star), kNormEps);  // 1 x n x 1
  Tensor kn = clamp_min(l2_norm_rows(k), kNormEps);       // q x 1 x 1
  Tensor map = div(dots, mul(qn, kn));
  if (map_out != nullptr) *map_out = map;
  return mul(map, v);
}

/// Projection parameters for multi-head cross attention. Protos are projected
/// by w_query; samples supply keys and values via w_key / w_value; w_out maps
/// the concatenated head outputs back to model width.
struct AttentionHeads {
  std::size_t num_heads = 8;
  std::size_t d_model = 0;
  std::size_t d_head = 0;
  AttentionMode mode = AttentionMode::kCosine;
  Tensor w_query;  // d_model x (num_heads * d_head)
  Tensor w_key;    // d_model x (num_heads * d_head)
  Tensor w_value;  // d_model x (num_heads * d_head)
  Tensor w_out;    // (num_heads * d_head) x d_model

  AttentionHeads() = default;

  AttentionHeads(std::size_t d_model_in, std::size_t heads, AttentionMode attn_mode, Rng& rng)
      : num_heads(heads), d_model(d_model_in), mode(attn_mode) {
    if (num_heads == 0) throw std::invalid_argument("AttentionHeads: num_heads must be positive");
    if (d_model % num_heads != 0)
      throw std::invalid_argument("AttentionHeads: width " + std::to_string(d_model) +
                                  " not divisible by " + std::to_string(num_heads) + " heads");
    d_head = d_model / num_heads;
    const std::size_t inner = num_heads * d_head;
    const double in_bound = 1.0 / std::sqrt(static_cast<double>(d_model));
    const double out_bound = 1.0 / std::sqrt(static_cast<double>(inner));
    w_query = Tensor::uniform({d_model, inner}, -in_bound, in_bound, rng);
    w_key = Tensor::uniform({d_model, inner}, -in_bound, in_bound, rng);
    w_value = Tensor::uniform({d_model, inner}, -in_bound, in_bound, rng);
    w_out = Tensor::uniform({inner, d_model}, -out_bound, out_bound, rng);
  }
};

/// Full multi-head pass: project protos (n x d) and samples (q x d), split
/// into heads, attend per head, concatenate along features, project back to
/// d. Output q x n x d. When map_out is given it receives the detached
/// head-averaged attention map of shape q x n.
inline Tensor multi_head(const Tensor& protos, const Tensor& samples, const AttentionHeads& heads,
                         Tensor* map_out = nullptr) {
  if (protos.rank() != 2 || samples.rank() != 2)
    fail_shape("multi_head", "expected n x d protos and q x d samples, got " +
                                 shape_str(protos.shape()) + " and " + shape_str(samples.shape()));
  if (protos.shape()[1] != heads.d_model || samples.shape()[1] != heads.d_model)
    fail_shape("multi_head", "feature width " + std::to_string(protos.shape()[1]) + "/" +
                                 std::to_string(samples.shape()[1]) + " does not match configured " +
                                 std::to_string(heads.d_model));
  const std::size_t n = protos.shape()[0];
  const std::size_t q = samples.shape()[0];
  const std::size_t dh = heads.d_head;

  Tensor q_star = matmul(protos, heads.w_query);  // n x inner
  Tensor k = matmul(samples, heads.w_key);        // q x inner
  Tensor v = matmul(samples, heads.w_value);      // q x inner

  std::vector<Tensor> head_outs;
  head_outs.reserve(heads.num_heads);
  Tensor map_sum;
  for (std::size_t h = 0; h < heads.num_heads; ++h) {
    Tensor qh = reshape(narrow(q_star, 1, h * dh, dh), {1, n, dh});
    Tensor kh = reshape(narrow(k, 1, h * dh, dh), {q, 1, dh});
    Tensor vh = reshape(narrow(v, 1, h * dh, dh), {q, 1, dh});
    Tensor map;
    Tensor out = heads.mode == AttentionMode::kCosine ? cosine_attention(qh, kh, vh, &map)
                                                      : softmax_attention(qh, kh, vh, &map);
    head_outs.push_back(out);
    if (map_out != nullptr) {
      Tensor flat = reshape(map.detach(), {q, n});
      map_sum = h == 0 ? flat : add(map_sum, flat);
    }
  }
  if (map_out != nullptr) *map_out = mul(map_sum, 1.0 / static_cast<double>(heads.num_heads));
  Tensor joined = concat(head_outs, 2);  // q x n x inner
  return matmul(joined, heads.w_out);    // q x n x d
}

}  // namespace fsct
