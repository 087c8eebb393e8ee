#include "ewa/theory.hpp"

#include <cmath>

namespace ewa {

namespace {

std::vector<double> flatten(const FFNParams& e) {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(e.param_count()));
  for (const Tensor& t : e.tensors()) {
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return out;
}

std::vector<std::vector<double>> flatten_bank(const std::vector<FFNParams>& bank) {
  std::vector<std::vector<double>> out;
  out.reserve(bank.size());
  for (const FFNParams& e : bank) out.push_back(flatten(e));
  return out;
}

void copy_bank_data(std::vector<FFNParams>& dst, const std::vector<FFNParams>& src) {
  for (size_t i = 0; i < dst.size(); ++i) {
    auto d = dst[i].tensors();
    auto s = src[i].tensors();
    for (size_t p = 0; p < d.size(); ++p) d[p].copy_data_from(s[p]);
  }
}

}  // namespace

Trajectory record_trajectory(const std::vector<FFNParams>& experts, const ProbeLoss& loss_fn,
                             int64_t steps, double eta, double beta) {
  check_value(experts.size() >= 2, "record_trajectory: need at least two experts");
  check_value(steps >= 0, "record_trajectory: steps must be non-negative");

  std::vector<FFNParams> bank;
  bank.reserve(experts.size());
  for (const FFNParams& e : experts) {
    FFNParams c = e.clone();
    for (Tensor t : c.tensors()) t.set_requires_grad();
    bank.push_back(std::move(c));
  }

  Trajectory traj;
  traj.n_experts = static_cast<int64_t>(bank.size());
  traj.steps = steps;
  traj.eta = eta;
  traj.beta = beta;
  traj.pre.reserve(static_cast<size_t>(steps + 1));
  traj.post.reserve(static_cast<size_t>(steps + 1));
  traj.upd.reserve(static_cast<size_t>(steps));

  traj.pre.push_back(flatten_bank(bank));
  copy_bank_data(bank, ewa_step(bank, beta));
  traj.post.push_back(flatten_bank(bank));

  for (int64_t s = 0; s < steps; ++s) {
    for (FFNParams& e : bank) {
      for (Tensor t : e.tensors()) t.zero_grad();
    }
    Tensor loss = loss_fn(bank);
    check_value(loss.defined() && loss.numel() == 1,
                "record_trajectory: probe loss must be a one-element tensor");
    if (!std::isfinite(loss.item())) {
      throw DivergenceError("record_trajectory: probe loss is not finite at step " +
                            std::to_string(s));
    }
    backward(loss);

    std::vector<std::vector<double>> step_upd;
    step_upd.reserve(bank.size());
    for (FFNParams& e : bank) {
      std::vector<double> d;
      d.reserve(static_cast<size_t>(e.param_count()));
      for (Tensor t : e.tensors()) {
        if (t.has_grad()) {
          for (double g : t.grad()) {
            if (!std::isfinite(g)) {
              throw DivergenceError("record_trajectory: gradient is not finite at step " +
                                    std::to_string(s));
            }
            d.push_back(-g);
          }
        } else {
          d.insert(d.end(), static_cast<size_t>(t.numel()), 0.0);
        }
      }
      step_upd.push_back(std::move(d));
    }
    traj.upd.push_back(step_upd);

    // apply the update, then the averaging pass
    for (size_t i = 0; i < bank.size(); ++i) {
      size_t c = 0;
      for (Tensor t : bank[i].tensors()) {
        for (double& v : t.data()) v += eta * step_upd[i][c++];
      }
    }
    traj.pre.push_back(flatten_bank(bank));
    copy_bank_data(bank, ewa_step(bank, beta));
    traj.post.push_back(flatten_bank(bank));
  }
  return traj;
}

double verify_single_step(const Trajectory& traj) {
  const int64_t n = traj.n_experts;
  const double beta = traj.beta;
  const double coef = beta / static_cast<double>(n - 1);
  const size_t dim = traj.pre[0][0].size();
  double worst = 0.0;

  // post[s] against the direct averaging formula on pre[s]
  for (int64_t s = 0; s <= traj.steps; ++s) {
    for (int64_t i = 0; i < n; ++i) {
      for (size_t c = 0; c < dim; ++c) {
        double mix = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          if (j == i) continue;
          mix += traj.pre[static_cast<size_t>(s)][static_cast<size_t>(j)][c];
        }
        const double expect =
            (1.0 - beta) * traj.pre[static_cast<size_t>(s)][static_cast<size_t>(i)][c] +
            coef * mix;
        worst = std::max(worst,
                         std::fabs(traj.post[static_cast<size_t>(s)][static_cast<size_t>(i)][c] -
                                   expect));
      }
    }
  }

  // post[s] against averaging applied to the previous averaged weights plus
  // the recorded update (the one-step unrolled identity)
  for (int64_t s = 1; s <= traj.steps; ++s) {
    for (int64_t i = 0; i < n; ++i) {
      for (size_t c = 0; c < dim; ++c) {
        double mix = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          if (j == i) continue;
          mix += traj.post[static_cast<size_t>(s - 1)][static_cast<size_t>(j)][c] +
                 traj.eta * traj.upd[static_cast<size_t>(s - 1)][static_cast<size_t>(j)][c];
        }
        const double stepped =
            traj.post[static_cast<size_t>(s - 1)][static_cast<size_t>(i)][c] +
            traj.eta * traj.upd[static_cast<size_t>(s - 1)][static_cast<size_t>(i)][c];
        const double expect = (1.0 - beta) * stepped + coef * mix;
        worst = std::max(worst,
                         std::fabs(traj.post[static_cast<size_t>(s)][static_cast<size_t>(i)][c] -
                                   expect));
      }
    }
  }
  return worst;
}

namespace {

// The unrolled closed form for expert i, coordinate c, evaluated either in
// full or without the leading decay term (used for the projection fit).
double unrolled_rhs(const Trajectory& traj, int64_t i, size_t c, bool include_decay) {
  const int64_t m = traj.steps;
  const int64_t n = traj.n_experts;
  const double beta = traj.beta;
  const double coef = beta / static_cast<double>(n - 1);
  double rhs = 0.0;
  if (include_decay) {
    rhs += std::pow(1.0 - beta, static_cast<double>(m + 1)) *
           traj.pre[0][static_cast<size_t>(i)][c];
  }
  for (int64_t k = 1; k <= m; ++k) {
    rhs += traj.eta * std::pow(1.0 - beta, static_cast<double>(k)) *
           traj.upd[static_cast<size_t>(m - k)][static_cast<size_t>(i)][c];
  }
  for (int64_t j = 0; j < n; ++j) {
    if (j == i) continue;
    for (int64_t k = 0; k <= m; ++k) {
      rhs += coef * std::pow(1.0 - beta, static_cast<double>(m - k)) *
             traj.pre[static_cast<size_t>(k)][static_cast<size_t>(j)][c];
    }
  }
  return rhs;
}

}  // namespace

double verify_unrolled(const Trajectory& traj) {
  const size_t dim = traj.pre[0][0].size();
  double worst = 0.0;
  for (int64_t i = 0; i < traj.n_experts; ++i) {
    for (size_t c = 0; c < dim; ++c) {
      const double rhs = unrolled_rhs(traj, i, c, true);
      worst = std::max(
          worst,
          std::fabs(traj.post[static_cast<size_t>(traj.steps)][static_cast<size_t>(i)][c] - rhs));
    }
  }
  return worst;
}

DecayHistoryReport decay_and_history_report(const Trajectory& traj) {
  DecayHistoryReport rep;
  const int64_t m = traj.steps;
  rep.decay_expected = std::pow(1.0 - traj.beta, static_cast<double>(m + 1));

  // residual = final weights minus everything except the decay term; its
  // projection onto the start weights recovers the decay coefficient
  double num = 0.0, den = 0.0;
  const size_t dim = traj.pre[0][0].size();
  for (int64_t i = 0; i < traj.n_experts; ++i) {
    for (size_t c = 0; c < dim; ++c) {
      const double w0 = traj.pre[0][static_cast<size_t>(i)][c];
      const double residual =
          traj.post[static_cast<size_t>(m)][static_cast<size_t>(i)][c] -
          unrolled_rhs(traj, i, c, false);
      num += residual * w0;
      den += w0 * w0;
    }
  }
  check_value(den > 0.0, "decay_and_history_report: start weights are all zero");
  rep.decay_measured = num / den;
  rep.decay_abs_err = std::fabs(rep.decay_measured - rep.decay_expected);

  rep.history_weights.resize(static_cast<size_t>(m + 1));
  for (int64_t k = 0; k <= m; ++k) {
    rep.history_weights[static_cast<size_t>(k)] =
        std::pow(1.0 - traj.beta, static_cast<double>(m - k));
  }
  rep.history_monotone = true;
  for (int64_t k = 0; k < m; ++k) {
    if (rep.history_weights[static_cast<size_t>(k + 1)] <
        rep.history_weights[static_cast<size_t>(k)]) {
      rep.history_monotone = false;
      break;
    }
  }
  return rep;
}

}  // namespace ewa
