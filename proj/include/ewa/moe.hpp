#pragma once

#include <optional>

#include "ewa/ffn.hpp"

namespace ewa {

enum class MoEMode { RUP, TopK };
enum class RunMode { Train, Eval };

// Which expert each token row goes to. token_lists[i] holds the rows of
// expert i in dispatch order; their concatenation is a permutation of 0..T-1.
struct PartitionAssignment {
  std::vector<int64_t> expert_of_token;
  std::vector<std::vector<int64_t>> token_lists;

  int64_t n_tokens() const { return static_cast<int64_t>(expert_of_token.size()); }
  int64_t n_experts() const { return static_cast<int64_t>(token_lists.size()); }
};

// Bank of expert MLPs plus dispatch settings. In RUP mode tokens are
// partitioned uniformly at random with no learned router; in TopK mode a
// linear router picks k experts per token under a capacity cap.
struct MoELayer {
  std::vector<FFNParams> experts;
  MoEMode mode = MoEMode::RUP;
  Tensor router_w;  // [d_model, n_experts], TopK mode only
  int64_t top_k = 1;
  double capacity_ratio = 1.05;
  double balance_weight = 0.01;

  int64_t n_experts() const { return static_cast<int64_t>(experts.size()); }
  int64_t d_model() const { return experts.empty() ? 0 : experts.front().d_model(); }
  int64_t d_hidden() const { return experts.empty() ? 0 : experts.front().d_hidden(); }
  MoELayer clone() const;
  void validate() const;
};

// Shuffles 0..T-1 (Fisher-Yates) and slices the result into N contiguous
// chunks; the first T mod N experts take one extra token. Every token lands
// on exactly one expert. T < N is an error.
PartitionAssignment rup_partition(int64_t n_tokens, int64_t n_experts, Rng& rng);

// Routing-free forward: partition, run each expert on its chunk, put rows
// back in token order. Train mode draws the partition from rng; eval mode
// uses a fixed internal seed so repeated evaluations see the same partition.
Tensor moe_rup_forward(const MoELayer& layer, const Tensor& tokens, Rng* rng, RunMode mode);

// Per-token gate values [T, N]: softmax of router logits with everything
// outside the top k zeroed. No renormalization after masking. Ties keep the
// lower expert index.
Tensor router_scores(const MoELayer& layer, const Tensor& tokens);

struct TopKStats {
  int64_t capacity = 0;        // per-expert row cap for this batch
  int64_t dropped = 0;         // (token, expert) assignments lost to full experts
  std::vector<int64_t> kept_per_expert;
};

struct TopKResult {
  Tensor output;        // [T, d]; rows whose every assignment overflowed are zero
  Tensor balance_loss;  // scalar auxiliary loss (see load_balance_loss)
  TopKStats stats;
};

// Learned-routing forward with capacity cap ceil(capacity_ratio * T * k / N).
// Tokens are dispatched in row order; a token's choices are tried in gate
// order. Overflowing assignments contribute nothing (the surrounding
// residual connection carries those tokens through).
TopKResult moe_topk_forward(const MoELayer& layer, const Tensor& tokens, RunMode mode);

// lambda * N * sum_i f_i * P_i, where f_i is the fraction of tokens whose
// top-1 choice is expert i (constant) and P_i the mean gate probability of
// expert i over tokens (differentiable through gate_probs [T, N]).
Tensor load_balance_loss(const Tensor& gate_probs, const std::vector<int64_t>& top1_of_token,
                         double lambda);

}  // namespace ewa
