#include "ewa/optim.hpp"

#include <cmath>
#include <numbers>

namespace ewa {

Optimizer::Optimizer(OptimConfig config, std::vector<std::pair<std::string, Tensor>> params)
    : config_(std::move(config)), params_(std::move(params)) {
  check_value(!params_.empty(), "Optimizer: no parameters");
  m1_.resize(params_.size());
  m2_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    const size_t n = static_cast<size_t>(params_[i].second.numel());
    m1_[i].assign(n, 0.0);
    if (config_.kind == OptimKind::AdamW) m2_[i].assign(n, 0.0);
  }
}

void Optimizer::step(double lr) {
  ++t_;
  const double wd = config_.weight_decay;
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    const std::vector<double>& g = p.grad();
    for (double gv : g) {
      if (!std::isfinite(gv)) {
        throw DivergenceError("optimizer: gradient for " + params_[i].first +
                              " is not finite at step " + std::to_string(t_));
      }
    }
    auto& data = p.data();
    const double decay = decays(p) ? wd : 0.0;
    if (config_.kind == OptimKind::Sgd) {
      auto& v = m1_[i];
      for (size_t c = 0; c < data.size(); ++c) {
        const double grad = g[c] + decay * data[c];
        v[c] = config_.momentum * v[c] + grad;
        data[c] -= lr * v[c];
      }
    } else {
      auto& m = m1_[i];
      auto& v = m2_[i];
      const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
      for (size_t c = 0; c < data.size(); ++c) {
        m[c] = config_.beta1 * m[c] + (1.0 - config_.beta1) * g[c];
        v[c] = config_.beta2 * v[c] + (1.0 - config_.beta2) * g[c] * g[c];
        const double mhat = m[c] / bc1;
        const double vhat = v[c] / bc2;
        data[c] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + decay * data[c]);
      }
    }
    p.zero_grad();
  }
}

double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double lr_max) {
  check_value(total_steps >= 1, "cosine_lr: total_steps must be positive");
  check_value(warmup_steps >= 0 && warmup_steps <= total_steps,
              "cosine_lr: warmup_steps out of range");
  check_value(step >= 0, "cosine_lr: step must be non-negative");
  if (step < warmup_steps) {
    return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const int64_t span = total_steps - warmup_steps;
  if (span <= 0) return lr_max;
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
  progress = std::min(1.0, progress);
  return 0.5 * lr_max * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace ewa
