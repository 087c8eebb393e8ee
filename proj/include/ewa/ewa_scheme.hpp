#pragma once

#include "ewa/vit.hpp"

namespace ewa {

enum class ScheduleKind { Constant, Linear };
enum class ScheduleGranularity { PerEpoch, PerStep };

// Mixing-rate schedule. Positions run 0..horizon; Linear ramps from 0 at
// position 0 to share_rate at position horizon, Constant holds share_rate
// everywhere. When early_cutoff < 1, positions at or past
// early_cutoff * (horizon + 1) give 0 (averaging only early in the run).
struct ShareSchedule {
  ScheduleKind kind = ScheduleKind::Linear;
  double share_rate = 0.3;
  int64_t horizon = 1;
  ScheduleGranularity granularity = ScheduleGranularity::PerEpoch;
  double early_cutoff = 1.0;
};

double schedule_beta(const ShareSchedule& sched, int64_t position);

// One averaging step over the expert bank: each expert moves toward the
// others, expert i receiving beta/(N-1) of every other expert j:
//   new_i = (1 - beta) * W_i + sum_{j != i} beta/(N-1) * W_j
// Computed as W_i + beta/(N-1) * sum_{j != i} (W_j - W_i), which is the same
// expression but leaves equal experts and beta = 0 bitwise untouched.
// Pure: returns a fresh bank, inputs are not modified.
std::vector<FFNParams> ewa_step(const std::vector<FFNParams>& experts, double beta);

// Deployment form of an expert bank: the elementwise mean (1/N) sum_i W_i,
// evaluated as W_0 + (1/N) sum_{j>0} (W_j - W_0) so identical experts return
// expert 0 exactly.
FFNParams convert_moe_to_ffn(const MoELayer& layer);

// Inverse direction for fine-tuning: N bit-identical copies of a dense FFN.
// TopK mode also needs router_rng for fresh router weights.
MoELayer expand_ffn_to_moe(const FFNParams& ffn, int64_t n_experts, MoEMode mode,
                           Rng* router_rng = nullptr, int64_t top_k = 1,
                           double capacity_ratio = 1.05, double balance_weight = 0.01);

enum class PlacementKind { Every2, Last4 };

// Which blocks carry expert banks. Every2 takes the second block of every
// pair (indices 1, 3, 5, ...); Last4 takes the final four blocks.
struct PlacementPolicy {
  PlacementKind kind = PlacementKind::Every2;
  std::vector<int64_t> block_indices(int64_t depth) const;
};

struct MoESpec {
  int64_t n_experts = 4;
  MoEMode mode = MoEMode::RUP;
  int64_t top_k = 1;
  double capacity_ratio = 1.05;
  double balance_weight = 0.01;
};

// Dense skeleton with the placement blocks' FFNs replaced by freshly
// initialized expert banks (independent draws per expert, plus a router in
// TopK mode). All draws come from rng in construction order.
Model build_ewa_model(const ViTConfig& config, const PlacementPolicy& placement,
                      const MoESpec& spec, Rng& rng);

// Dense deployment copy: every expert bank collapses to its mean FFN, all
// other parameters are copied bit-identically. A model with no expert banks
// comes back as a plain deep copy.
Model convert_model(const Model& model);

}  // namespace ewa
