#include "ewa/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ewa {

namespace {

// Evaluation partitions are drawn from this fixed seed instead of the run's
// rng, so two evaluations of the same weights always agree.
constexpr uint64_t kEvalPartitionSeed = 0x45574156u;

}  // namespace

MoELayer MoELayer::clone() const {
  MoELayer c;
  c.experts.reserve(experts.size());
  for (const FFNParams& e : experts) c.experts.push_back(e.clone());
  c.mode = mode;
  if (router_w.defined()) {
    c.router_w = router_w.clone().set_requires_grad(router_w.requires_grad());
  }
  c.top_k = top_k;
  c.capacity_ratio = capacity_ratio;
  c.balance_weight = balance_weight;
  return c;
}

void MoELayer::validate() const {
  check_value(!experts.empty(), "MoELayer: no experts");
  experts.front().validate();
  const int64_t d = experts.front().d_model();
  const int64_t h = experts.front().d_hidden();
  for (const FFNParams& e : experts) {
    e.validate();
    check_shape(e.d_model() == d && e.d_hidden() == h,
                "MoELayer: experts disagree on shape");
  }
  if (mode == MoEMode::TopK) {
    check_value(router_w.defined(), "MoELayer: TopK mode needs router weights");
    check_shape(router_w.rank() == 2 && router_w.dim(0) == d && router_w.dim(1) == n_experts(),
                "MoELayer: router must be [" + std::to_string(d) + "," +
                    std::to_string(n_experts()) + "], got " + shape_str(router_w.shape()));
    check_value(top_k >= 1 && top_k <= n_experts(),
                "MoELayer: top_k " + std::to_string(top_k) + " out of range for " +
                    std::to_string(n_experts()) + " experts");
    check_value(capacity_ratio > 0.0, "MoELayer: capacity_ratio must be positive");
    check_value(balance_weight >= 0.0, "MoELayer: balance_weight must be non-negative");
  }
}

PartitionAssignment rup_partition(int64_t n_tokens, int64_t n_experts, Rng& rng) {
  check_value(n_experts >= 1, "rup_partition: need at least one expert");
  check_value(n_tokens >= n_experts,
              "rup_partition: " + std::to_string(n_tokens) + " tokens cannot cover " +
                  std::to_string(n_experts) + " experts");
  const std::vector<int64_t> perm = rng.permutation(n_tokens);
  PartitionAssignment part;
  part.expert_of_token.assign(static_cast<size_t>(n_tokens), -1);
  part.token_lists.resize(static_cast<size_t>(n_experts));
  const int64_t base = n_tokens / n_experts;
  const int64_t extra = n_tokens % n_experts;
  int64_t offset = 0;
  for (int64_t e = 0; e < n_experts; ++e) {
    const int64_t count = base + (e < extra ? 1 : 0);
    auto& list = part.token_lists[static_cast<size_t>(e)];
    list.assign(perm.begin() + offset, perm.begin() + offset + count);
    for (int64_t t : list) part.expert_of_token[static_cast<size_t>(t)] = e;
    offset += count;
  }
  return part;
}

Tensor moe_rup_forward(const MoELayer& layer, const Tensor& tokens, Rng* rng, RunMode mode) {
  layer.validate();
  check_value(layer.mode == MoEMode::RUP,
              "moe_rup_forward: layer is routed, not partition-based");
  check_shape(tokens.rank() == 2 && tokens.dim(1) == layer.d_model(),
              "moe_rup_forward: tokens " + shape_str(tokens.shape()) +
                  " do not match d_model " + std::to_string(layer.d_model()));
  const int64_t n = layer.n_experts();
  if (n == 1) return ffn_forward(layer.experts.front(), tokens);

  Rng eval_rng(kEvalPartitionSeed);
  Rng* source = mode == RunMode::Train ? rng : &eval_rng;
  check_value(source != nullptr, "moe_rup_forward: train mode needs an rng");

  const int64_t t = tokens.dim(0);
  const PartitionAssignment part = rup_partition(t, n, *source);
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(n));
  for (int64_t e = 0; e < n; ++e) {
    Tensor chunk = gather_rows(tokens, part.token_lists[static_cast<size_t>(e)]);
    outs.push_back(ffn_forward(layer.experts[static_cast<size_t>(e)], chunk));
  }
  Tensor stacked = concat_rows(outs);
  // stacked row j holds token token_lists[...][j']; invert that ordering
  std::vector<int64_t> row_of_token(static_cast<size_t>(t));
  int64_t pos = 0;
  for (const auto& list : part.token_lists) {
    for (int64_t tok : list) row_of_token[static_cast<size_t>(tok)] = pos++;
  }
  return gather_rows(stacked, row_of_token);
}

namespace {

// Expert preference order for one token: by gate value descending, ties by
// lower expert index. probs points at the token's row of the gate matrix.
std::vector<int64_t> ranked_experts(const double* probs, int64_t n) {
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), int64_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [probs](int64_t a, int64_t b) { return probs[a] > probs[b]; });
  return order;
}

}  // namespace

Tensor router_scores(const MoELayer& layer, const Tensor& tokens) {
  layer.validate();
  check_value(layer.mode == MoEMode::TopK, "router_scores: layer has no router");
  Tensor probs = softmax(matmul(tokens, layer.router_w), 1);
  const int64_t t = probs.dim(0), n = probs.dim(1);
  std::vector<double> mask(static_cast<size_t>(t * n), 0.0);
  for (int64_t r = 0; r < t; ++r) {
    const std::vector<int64_t> order = ranked_experts(probs.data().data() + r * n, n);
    for (int64_t j = 0; j < layer.top_k; ++j) {
      mask[static_cast<size_t>(r * n + order[static_cast<size_t>(j)])] = 1.0;
    }
  }
  return mul_mask(probs, std::move(mask));
}

TopKResult moe_topk_forward(const MoELayer& layer, const Tensor& tokens, RunMode mode) {
  (void)mode;  // routing is deterministic; mode kept for signature symmetry
  layer.validate();
  check_value(layer.mode == MoEMode::TopK,
              "moe_topk_forward: layer is partition-based, not routed");
  check_shape(tokens.rank() == 2 && tokens.dim(1) == layer.d_model(),
              "moe_topk_forward: tokens " + shape_str(tokens.shape()) +
                  " do not match d_model " + std::to_string(layer.d_model()));
  const int64_t t = tokens.dim(0);
  const int64_t n = layer.n_experts();
  const int64_t k = layer.top_k;
  const int64_t capacity = static_cast<int64_t>(std::ceil(
      layer.capacity_ratio * static_cast<double>(t) * static_cast<double>(k) /
      static_cast<double>(n)));

  Tensor probs = softmax(matmul(tokens, layer.router_w), 1);

  // dispatch in token order; within a token, in gate order
  std::vector<std::vector<int64_t>> kept(static_cast<size_t>(n));
  std::vector<int64_t> top1(static_cast<size_t>(t));
  std::vector<double> mask(static_cast<size_t>(t * n), 0.0);
  int64_t dropped = 0;
  for (int64_t r = 0; r < t; ++r) {
    const std::vector<int64_t> order = ranked_experts(probs.data().data() + r * n, n);
    top1[static_cast<size_t>(r)] = order[0];
    for (int64_t j = 0; j < k; ++j) {
      const int64_t e = order[static_cast<size_t>(j)];
      mask[static_cast<size_t>(r * n + e)] = 1.0;
      auto& list = kept[static_cast<size_t>(e)];
      if (static_cast<int64_t>(list.size()) < capacity) {
        list.push_back(r);
      } else {
        ++dropped;
      }
    }
  }

  // the cap is a hard invariant, not a soft target
  for (const auto& list : kept) {
    check_value(static_cast<int64_t>(list.size()) <= capacity,
                "moe_topk_forward: expert exceeded its capacity");
  }

  // gate matrix with only the top-k entries alive
  Tensor gates = mul_mask(probs, std::move(mask));

  TopKResult res;
  res.stats.capacity = capacity;
  res.stats.dropped = dropped;
  res.stats.kept_per_expert.resize(static_cast<size_t>(n));
  Tensor out;
  for (int64_t e = 0; e < n; ++e) {
    const auto& rows = kept[static_cast<size_t>(e)];
    res.stats.kept_per_expert[static_cast<size_t>(e)] = static_cast<int64_t>(rows.size());
    if (rows.empty()) continue;
    Tensor chunk = gather_rows(tokens, rows);
    Tensor y = ffn_forward(layer.experts[static_cast<size_t>(e)], chunk);
    Tensor gate_col = slice_cols(gather_rows(gates, rows), e, e + 1);
    Tensor contrib = scatter_rows(mul_rows(y, gate_col), rows, t);
    out = out.defined() ? add(out, contrib) : contrib;
  }
  if (!out.defined()) out = Tensor::zeros({t, layer.d_model()});
  res.output = out;
  res.balance_loss = load_balance_loss(probs, top1, layer.balance_weight);
  return res;
}

Tensor load_balance_loss(const Tensor& gate_probs, const std::vector<int64_t>& top1_of_token,
                         double lambda) {
  check_shape(gate_probs.rank() == 2, "load_balance_loss: gate_probs must be 2-d");
  const int64_t t = gate_probs.dim(0), n = gate_probs.dim(1);
  check_value(static_cast<int64_t>(top1_of_token.size()) == t,
              "load_balance_loss: assignment count does not match token count");
  std::vector<double> freq(static_cast<size_t>(n), 0.0);
  for (int64_t e : top1_of_token) {
    check_value(e >= 0 && e < n, "load_balance_loss: expert index out of range");
    freq[static_cast<size_t>(e)] += 1.0 / static_cast<double>(t);
  }
  // sum_i f_i P_i = (1/T) * sum_{t,i} probs[t,i] * f_i
  std::vector<double> weights(static_cast<size_t>(t * n));
  for (int64_t r = 0; r < t; ++r) {
    for (int64_t e = 0; e < n; ++e) {
      weights[static_cast<size_t>(r * n + e)] = freq[static_cast<size_t>(e)];
    }
  }
  return scale(dot_const(gate_probs, weights),
               lambda * static_cast<double>(n) / static_cast<double>(t));
}

}  // namespace ewa
