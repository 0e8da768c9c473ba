#pragma once

#include <cstddef>
#include <string>

#include "fsct/tensor.hpp"

namespace fsct {

/// Learnable per-slot averaging weights for turning support features into
/// category prototypes. Shape n x k x d (way, shot, feature); softmax over
/// the shot axis turns them into a convex combination per (way, feature)
/// position. Initialized to 1, which makes the combination the arithmetic
/// mean until training moves it.
struct PrototypeWeights {
  Tensor theta;  // n x k x d

  PrototypeWeights() = default;
  PrototypeWeights(std::size_t ways, std::size_t shots, std::size_t dim)
      : theta(Tensor::ones({ways, shots, dim})) {}

  std::size_t ways() const { return theta.shape().at(0); }
  std::size_t shots() const { return theta.shape().at(1); }
  std::size_t dim() const { return theta.shape().at(2); }
};

/// Weighted-mean prototypes: softmax the weights along the shot axis and
/// contract support features (n x k x d) down to one vector per category
/// (n x d). Uniform weights reproduce the plain mean over shots.
inline Tensor proto_embed(const Tensor& support, const PrototypeWeights& w) {
  if (support.rank() != 3)
    fail_shape("proto_embed", "support features must be n x k x d, got " +
                                  shape_str(support.shape()));
  if (support.shape() != w.theta.shape())
    fail_shape("proto_embed", "weight shape " + shape_str(w.theta.shape()) +
                                  " does not match support " + shape_str(support.shape()));
  Tensor averaged = softmax(w.theta, 1);
  return sum(mul(support, averaged), 1);
}

/// Fixed arithmetic-mean prototypes, the ablation fallback.
inline Tensor proto_mean(const Tensor& support) {
  if (support.rank() != 3)
    fail_shape("proto_mean", "support features must be n x k x d, got " +
                                 shape_str(support.shape()));
  return mean(support, 1);
}

}  // namespace fsct
