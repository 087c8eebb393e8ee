#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ewa/tensor.hpp"

namespace ewa {

enum class OptimKind { Sgd, AdamW };

struct OptimConfig {
  OptimKind kind = OptimKind::AdamW;
  double lr = 1e-3;  // peak rate; the harness passes the scheduled rate per step
  double weight_decay = 0.0;
  double momentum = 0.9;  // sgd only
  double beta1 = 0.9;     // adamw moments
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Owns per-parameter state buffers keyed by registration order, so parameter
// tensors must keep their identity across steps (in-place data writes are
// fine, replacing a Tensor is not).
//
// sgd: v = momentum*v + (g + wd*p); p -= lr*v          (coupled decay)
// adamw: moment update with bias correction, then p -= lr*(mhat/(sqrt(vhat)+eps) + wd*p)
//                                                       (decoupled decay)
// Weight decay only touches tensors of rank >= 2; biases and norm parameters
// (rank 1) never decay.
class Optimizer {
 public:
  Optimizer(OptimConfig config, std::vector<std::pair<std::string, Tensor>> params);

  // One update with the given learning rate. Consumes and zeroes each
  // parameter's accumulated gradient; parameters without a gradient buffer
  // are left alone. Throws DivergenceError naming the parameter if a
  // gradient is non-finite.
  void step(double lr);

  int64_t steps_taken() const { return t_; }
  const OptimConfig& config() const { return config_; }

  static bool decays(const Tensor& param) { return param.rank() >= 2; }

 private:
  OptimConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m1_;  // sgd velocity / adamw first moment
  std::vector<std::vector<double>> m2_;  // adamw second moment
  int64_t t_ = 0;
};

// Linear warmup from lr_max/warmup_steps up to lr_max over warmup_steps,
// then cosine decay to zero across the rest of the run.
double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_max);

}  // namespace ewa
