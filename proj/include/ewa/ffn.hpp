#pragma once

#include "ewa/tensor.hpp"

namespace ewa {

// Two-layer MLP block: gelu(x w1 + b1) w2 + b2.
struct FFNParams {
  Tensor w1;  // [d_model, d_hidden]
  Tensor b1;  // [d_hidden]
  Tensor w2;  // [d_hidden, d_model]
  Tensor b2;  // [d_model]

  // Weights ~ N(0, 0.02^2), biases zero, all marked trainable.
  static FFNParams init(int64_t d_model, int64_t d_hidden, Rng& rng);
  static FFNParams zeros(int64_t d_model, int64_t d_hidden);

  FFNParams clone() const;
  void validate() const;
  int64_t d_model() const { return w1.dim(0); }
  int64_t d_hidden() const { return w1.dim(1); }
  int64_t param_count() const;
  std::vector<Tensor> tensors() const { return {w1, b1, w2, b2}; }
};

// tokens [T, d_model] -> [T, d_model]. Rows are independent: each token goes
// through the same MLP.
Tensor ffn_forward(const FFNParams& ffn, const Tensor& tokens);

}  // namespace ewa
