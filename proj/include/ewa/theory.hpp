#pragma once

#include <functional>

#include "ewa/ewa_scheme.hpp"

namespace ewa {

// One recorded probe run over a toy expert bank: m gradient steps with an
// averaging pass after each, plus the averaging pass on the start weights.
// Per-expert weights are stored flattened (w1|b1|w2|b2 concatenated).
//
// Index convention, s = 0..steps:
//   pre[s]  holds W^{t+s}, the weights before the averaging pass
//   post[s] holds the weights after it
//   upd[s]  (s < steps) is the recorded update direction d at step s, with
//           pre[s+1] = post[s] + eta * d (d is the negative loss gradient)
struct Trajectory {
  int64_t n_experts = 0;
  int64_t steps = 0;
  double eta = 0.0;
  double beta = 0.0;
  std::vector<std::vector<std::vector<double>>> pre;   // [steps+1][expert][coord]
  std::vector<std::vector<std::vector<double>>> post;  // [steps+1][expert][coord]
  std::vector<std::vector<std::vector<double>>> upd;   // [steps][expert][coord]
};

// Scalar loss over the bank, built from recorded ops so gradients come from
// backward(). Called once per step on the current weights.
using ProbeLoss = std::function<Tensor(const std::vector<FFNParams>&)>;

// Runs the probe. The bank is deep-copied first; callers keep their experts.
// Needs n_experts >= 2 (averaging with one expert is the identity and the
// closed forms below assume mixing). Throws DivergenceError if the loss
// turns non-finite mid-run.
Trajectory record_trajectory(const std::vector<FFNParams>& experts, const ProbeLoss& loss_fn,
                             int64_t steps, double eta, double beta);

// Largest elementwise gap, over every recorded transition, between the
// recorded weights and the one-step closed form. Checks both faces of the
// identity: post[s] against the averaging formula on pre[s], and post[s]
// against averaging applied to (post[s-1] + eta*upd[s-1]).
double verify_single_step(const Trajectory& traj);

// Largest elementwise gap between post[m] and the m-step unrolled form:
//   (1-beta)^(m+1) W^t
//   + eta * sum_{k=1..m} (1-beta)^k d^{t+m-k}
//   + beta/(N-1) * sum_{j != i} sum_{k=0..m} (1-beta)^(m-k) W_j^{t+k}
double verify_unrolled(const Trajectory& traj);

struct DecayHistoryReport {
  double decay_expected = 0.0;  // (1-beta)^(m+1)
  double decay_measured = 0.0;  // least-squares coefficient of W^t in post[m]
  double decay_abs_err = 0.0;
  std::vector<double> history_weights;  // (1-beta)^(m-k) for k = 0..m
  bool history_monotone = false;        // weights never decrease in k
};

// How strongly the start weights and each step's cross-expert contribution
// survive into the final weights. The measured decay coefficient comes from
// projecting the residual (final weights minus the update-history and
// cross-expert terms) onto the start weights.
DecayHistoryReport decay_and_history_report(const Trajectory& traj);

}  // namespace ewa
