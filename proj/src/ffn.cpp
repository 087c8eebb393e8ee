#include "ewa/ffn.hpp"

namespace ewa {

FFNParams FFNParams::init(int64_t d_model, int64_t d_hidden, Rng& rng) {
  check_value(d_model >= 1 && d_hidden >= 1, "FFNParams: dimensions must be positive");
  FFNParams p;
  p.w1 = Tensor::randn({d_model, d_hidden}, rng, 0.02).set_requires_grad();
  p.b1 = Tensor::zeros({d_hidden}).set_requires_grad();
  p.w2 = Tensor::randn({d_hidden, d_model}, rng, 0.02).set_requires_grad();
  p.b2 = Tensor::zeros({d_model}).set_requires_grad();
  return p;
}

FFNParams FFNParams::zeros(int64_t d_model, int64_t d_hidden) {
  check_value(d_model >= 1 && d_hidden >= 1, "FFNParams: dimensions must be positive");
  FFNParams p;
  p.w1 = Tensor::zeros({d_model, d_hidden}).set_requires_grad();
  p.b1 = Tensor::zeros({d_hidden}).set_requires_grad();
  p.w2 = Tensor::zeros({d_hidden, d_model}).set_requires_grad();
  p.b2 = Tensor::zeros({d_model}).set_requires_grad();
  return p;
}

FFNParams FFNParams::clone() const {
  FFNParams p;
  p.w1 = w1.clone().set_requires_grad(w1.requires_grad());
  p.b1 = b1.clone().set_requires_grad(b1.requires_grad());
  p.w2 = w2.clone().set_requires_grad(w2.requires_grad());
  p.b2 = b2.clone().set_requires_grad(b2.requires_grad());
  return p;
}

void FFNParams::validate() const {
  check_value(w1.defined() && b1.defined() && w2.defined() && b2.defined(),
              "FFNParams: missing tensors");
  check_shape(w1.rank() == 2 && w2.rank() == 2, "FFNParams: w1/w2 must be 2-d");
  const int64_t d = w1.dim(0), h = w1.dim(1);
  check_shape(b1.numel() == h && w2.dim(0) == h && w2.dim(1) == d && b2.numel() == d,
              "FFNParams: inconsistent shapes " + shape_str(w1.shape()) + " " +
                  shape_str(b1.shape()) + " " + shape_str(w2.shape()) + " " +
                  shape_str(b2.shape()));
}

int64_t FFNParams::param_count() const {
  return w1.numel() + b1.numel() + w2.numel() + b2.numel();
}

Tensor ffn_forward(const FFNParams& ffn, const Tensor& tokens) {
  ffn.validate();
  check_shape(tokens.rank() == 2 && tokens.dim(1) == ffn.d_model(),
              "ffn_forward: tokens " + shape_str(tokens.shape()) + " do not match d_model " +
                  std::to_string(ffn.d_model()));
  Tensor hidden = gelu(add_rowvec(matmul(tokens, ffn.w1), ffn.b1));
  return add_rowvec(matmul(hidden, ffn.w2), ffn.b2);
}

}  // namespace ewa
