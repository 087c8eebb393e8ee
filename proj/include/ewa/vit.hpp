#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>

#include "ewa/moe.hpp"

namespace ewa {

struct ViTConfig {
  int64_t image_size = 32;
  int64_t patch_size = 4;
  int64_t in_channels = 3;
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t depth = 4;
  double mlp_ratio = 4.0;
  int64_t n_classes = 10;
  double dropout = 0.0;
  double attn_dropout = 0.0;
  double stochastic_depth = 0.0;

  int64_t patches_per_side() const { return image_size / patch_size; }
  int64_t n_patches() const { return patches_per_side() * patches_per_side(); }
  int64_t seq_len() const { return n_patches() + 1; }  // class token + patches
  int64_t patch_dim() const { return in_channels * patch_size * patch_size; }
  int64_t d_hidden() const { return std::llround(mlp_ratio * static_cast<double>(d_model)); }
  void validate() const;
  bool operator==(const ViTConfig&) const = default;
};

struct LayerNormParams {
  Tensor gamma, beta;
};

struct AttentionParams {
  Tensor qkv_w;  // [d, 3d]
  Tensor qkv_b;  // [3d]
  Tensor out_w;  // [d, d]
  Tensor out_b;  // [d]
};

// Pre-norm transformer block. Exactly one of ffn / moe is set.
struct Block {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  std::optional<FFNParams> ffn;
  std::optional<MoELayer> moe;
};

struct Model {
  ViTConfig config;
  Tensor patch_w;    // [patch_dim, d]
  Tensor patch_b;    // [d]
  Tensor cls_token;  // [1, d]
  Tensor pos_embed;  // [seq_len, d]
  std::vector<Block> blocks;
  LayerNormParams ln_final;
  Tensor head_w;  // [d, n_classes]
  Tensor head_b;  // [n_classes]

  // Stable name -> tensor pairs in construction order; names like
  // blocks.2.ffn.w1 or blocks.3.moe.experts.1.w2 identify checkpoint records.
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  bool has_moe() const;
  std::vector<int64_t> moe_block_indices() const;
  int64_t param_count() const;
  Model clone() const;
};

// Dense (FFN-only) model with weights ~ N(0, 0.02^2), biases and norm
// offsets zero, norm scales one.
Model build_model(const ViTConfig& config, Rng& rng);

// What Model::param_count() of a dense model must equal, in closed form.
int64_t dense_param_count(const ViTConfig& config);

// [B, C, H, W] images -> [B * n_patches, C * P * P] rows. Patches scan the
// grid row-major; features are channel-major within a patch. Not recorded on
// the graph (images are constants).
Tensor patchify(const Tensor& images, int64_t patch_size);

struct ForwardResult {
  Tensor logits;        // [B, n_classes]
  Tensor balance_loss;  // set only when routed MoE layers ran in train mode
};

// Full forward pass. Train mode needs rng for dropout, stochastic depth and
// RUP partitions; eval mode ignores rng and is deterministic.
ForwardResult model_forward(const Model& model, const Tensor& images, RunMode mode,
                            Rng* rng = nullptr);

// Single-sample pre-norm attention sublayer: tokens + attn(ln1(tokens)),
// tokens [T, d]. probs_out, when given, receives [H, T, T] attention weights.
Tensor attention_forward(const Block& block, const Tensor& tokens, int64_t n_heads,
                         std::vector<double>* probs_out = nullptr);

}  // namespace ewa
