#include "ewa/ewa_scheme.hpp"

#include <algorithm>

namespace ewa {

double schedule_beta(const ShareSchedule& sched, int64_t position) {
  check_value(position >= 0, "schedule_beta: position must be non-negative");
  check_value(sched.share_rate >= 0.0 && sched.share_rate <= 1.0,
              "schedule_beta: share_rate must lie in [0,1]");
  check_value(sched.early_cutoff >= 0.0 && sched.early_cutoff <= 1.0,
              "schedule_beta: early_cutoff must lie in [0,1]");
  if (sched.early_cutoff < 1.0) {
    const double total = static_cast<double>(sched.horizon + 1);
    if (static_cast<double>(position) >= sched.early_cutoff * total) return 0.0;
  }
  if (sched.kind == ScheduleKind::Constant) return sched.share_rate;
  const int64_t h = std::max<int64_t>(1, sched.horizon);
  const double frac = std::min(1.0, static_cast<double>(position) / static_cast<double>(h));
  return sched.share_rate * frac;
}

namespace {

void check_bank(const std::vector<FFNParams>& experts) {
  check_value(!experts.empty(), "expert bank is empty");
  experts.front().validate();
  const int64_t d = experts.front().d_model();
  const int64_t h = experts.front().d_hidden();
  for (const FFNParams& e : experts) {
    e.validate();
    check_shape(e.d_model() == d && e.d_hidden() == h, "expert bank has mismatched shapes");
  }
}

}  // namespace

std::vector<FFNParams> ewa_step(const std::vector<FFNParams>& experts, double beta) {
  check_bank(experts);
  check_value(beta >= 0.0 && beta <= 1.0,
              "ewa_step: beta must lie in [0,1], got " + std::to_string(beta));
  const int64_t n = static_cast<int64_t>(experts.size());
  std::vector<FFNParams> out;
  out.reserve(experts.size());
  if (n == 1) {
    out.push_back(experts.front().clone());
    return out;
  }
  const double coef = beta / static_cast<double>(n - 1);
  std::vector<std::vector<Tensor>> bank;
  bank.reserve(experts.size());
  for (const FFNParams& e : experts) bank.push_back(e.tensors());
  const size_t n_tensors = bank.front().size();
  for (int64_t i = 0; i < n; ++i) {
    FFNParams mixed = experts[static_cast<size_t>(i)].clone();
    auto dst = mixed.tensors();
    for (size_t p = 0; p < n_tensors; ++p) {
      auto& out_data = dst[p].data();
      const auto& own_data = bank[static_cast<size_t>(i)][p].data();
      for (size_t c = 0; c < out_data.size(); ++c) {
        double acc = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          if (j == i) continue;
          acc += bank[static_cast<size_t>(j)][p].data()[c] - own_data[c];
        }
        out_data[c] = own_data[c] + coef * acc;
      }
    }
    out.push_back(std::move(mixed));
  }
  return out;
}

FFNParams convert_moe_to_ffn(const MoELayer& layer) {
  layer.validate();
  const int64_t n = layer.n_experts();
  FFNParams mean = layer.experts.front().clone();
  if (n == 1) return mean;
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<std::vector<Tensor>> bank;
  bank.reserve(layer.experts.size());
  for (const FFNParams& e : layer.experts) bank.push_back(e.tensors());
  auto dst = mean.tensors();
  for (size_t p = 0; p < dst.size(); ++p) {
    auto& out_data = dst[p].data();
    const auto& base_data = bank[0][p].data();
    for (size_t c = 0; c < out_data.size(); ++c) {
      double acc = 0.0;
      for (int64_t j = 1; j < n; ++j) {
        acc += bank[static_cast<size_t>(j)][p].data()[c] - base_data[c];
      }
      out_data[c] = base_data[c] + inv_n * acc;
    }
  }
  return mean;
}

MoELayer expand_ffn_to_moe(const FFNParams& ffn, int64_t n_experts, MoEMode mode,
                           Rng* router_rng, int64_t top_k, double capacity_ratio,
                           double balance_weight) {
  ffn.validate();
  check_value(n_experts >= 1, "expand_ffn_to_moe: need at least one expert");
  MoELayer layer;
  layer.mode = mode;
  layer.top_k = top_k;
  layer.capacity_ratio = capacity_ratio;
  layer.balance_weight = balance_weight;
  layer.experts.reserve(static_cast<size_t>(n_experts));
  for (int64_t i = 0; i < n_experts; ++i) layer.experts.push_back(ffn.clone());
  if (mode == MoEMode::TopK) {
    check_value(router_rng != nullptr, "expand_ffn_to_moe: TopK mode needs router_rng");
    layer.router_w =
        Tensor::randn({ffn.d_model(), n_experts}, *router_rng, 0.02).set_requires_grad();
  }
  layer.validate();
  return layer;
}

std::vector<int64_t> PlacementPolicy::block_indices(int64_t depth) const {
  check_value(depth >= 1, "PlacementPolicy: depth must be positive");
  std::vector<int64_t> out;
  if (kind == PlacementKind::Every2) {
    check_value(depth >= 2, "PlacementPolicy: every-2 placement needs depth >= 2");
    for (int64_t i = 1; i < depth; i += 2) out.push_back(i);
  } else {
    check_value(depth >= 4, "PlacementPolicy: last-4 placement needs depth >= 4");
    for (int64_t i = depth - 4; i < depth; ++i) out.push_back(i);
  }
  return out;
}

Model build_ewa_model(const ViTConfig& config, const PlacementPolicy& placement,
                      const MoESpec& spec, Rng& rng) {
  check_value(spec.n_experts >= 1, "build_ewa_model: need at least one expert");
  Model m = build_model(config, rng);
  const std::vector<int64_t> where = placement.block_indices(config.depth);
  for (int64_t idx : where) {
    Block& b = m.blocks[static_cast<size_t>(idx)];
    MoELayer layer;
    layer.mode = spec.mode;
    layer.top_k = spec.top_k;
    layer.capacity_ratio = spec.capacity_ratio;
    layer.balance_weight = spec.balance_weight;
    layer.experts.reserve(static_cast<size_t>(spec.n_experts));
    for (int64_t e = 0; e < spec.n_experts; ++e) {
      layer.experts.push_back(FFNParams::init(config.d_model, config.d_hidden(), rng));
    }
    if (spec.mode == MoEMode::TopK) {
      layer.router_w =
          Tensor::randn({config.d_model, spec.n_experts}, rng, 0.02).set_requires_grad();
    }
    layer.validate();
    b.ffn.reset();
    b.moe = std::move(layer);
  }
  return m;
}

Model convert_model(const Model& model) {
  Model out = model.clone();
  for (Block& b : out.blocks) {
    if (!b.moe) continue;
    b.ffn = convert_moe_to_ffn(*b.moe);
    b.moe.reset();
  }
  return out;
}

}  // namespace ewa
