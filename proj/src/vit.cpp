#include "ewa/vit.hpp"

#include <algorithm>

namespace ewa {

void ViTConfig::validate() const {
  check_value(image_size >= 1 && patch_size >= 1, "ViTConfig: image/patch size must be positive");
  check_value(image_size % patch_size == 0,
              "ViTConfig: image_size " + std::to_string(image_size) +
                  " not divisible by patch_size " + std::to_string(patch_size));
  check_value(in_channels >= 1, "ViTConfig: in_channels must be positive");
  check_value(d_model >= 2, "ViTConfig: d_model must be at least 2");
  check_value(n_heads >= 1 && d_model % n_heads == 0,
              "ViTConfig: d_model " + std::to_string(d_model) + " not divisible by " +
                  std::to_string(n_heads) + " heads");
  check_value(depth >= 1, "ViTConfig: depth must be positive");
  check_value(mlp_ratio > 0.0 && d_hidden() >= 1, "ViTConfig: bad mlp_ratio");
  check_value(n_classes >= 2, "ViTConfig: need at least two classes");
  check_value(dropout >= 0.0 && dropout < 1.0, "ViTConfig: dropout must lie in [0,1)");
  check_value(attn_dropout >= 0.0 && attn_dropout < 1.0,
              "ViTConfig: attn_dropout must lie in [0,1)");
  check_value(stochastic_depth >= 0.0 && stochastic_depth < 1.0,
              "ViTConfig: stochastic_depth must lie in [0,1)");
}

namespace {

LayerNormParams init_ln(int64_t d) {
  LayerNormParams ln;
  ln.gamma = Tensor::full({d}, 1.0).set_requires_grad();
  ln.beta = Tensor::zeros({d}).set_requires_grad();
  return ln;
}

LayerNormParams clone_ln(const LayerNormParams& ln) {
  LayerNormParams c;
  c.gamma = ln.gamma.clone().set_requires_grad(ln.gamma.requires_grad());
  c.beta = ln.beta.clone().set_requires_grad(ln.beta.requires_grad());
  return c;
}

Tensor clone_param(const Tensor& t) {
  return t.clone().set_requires_grad(t.requires_grad());
}

// Per-sample residual-branch drop ("stochastic depth"): whole samples are
// zeroed with probability p and survivors rescaled. Identity when inactive.
Tensor drop_path(const Tensor& x, double p, int64_t batch, int64_t tokens, Rng* rng,
                 bool train) {
  if (!train || p == 0.0) return x;
  check_value(p > 0.0 && p < 1.0, "drop_path: p must lie in [0,1)");
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> row_factor(static_cast<size_t>(batch * tokens));
  for (int64_t b = 0; b < batch; ++b) {
    const double f = (rng->uniform() < p) ? 0.0 : keep_scale;
    for (int64_t t = 0; t < tokens; ++t) row_factor[static_cast<size_t>(b * tokens + t)] = f;
  }
  return mul_rows(x, Tensor::from({batch * tokens}, std::move(row_factor)));
}

}  // namespace

Model build_model(const ViTConfig& config, Rng& rng) {
  config.validate();
  const int64_t d = config.d_model;
  Model m;
  m.config = config;
  m.patch_w = Tensor::randn({config.patch_dim(), d}, rng, 0.02).set_requires_grad();
  m.patch_b = Tensor::zeros({d}).set_requires_grad();
  m.cls_token = Tensor::randn({1, d}, rng, 0.02).set_requires_grad();
  m.pos_embed = Tensor::randn({config.seq_len(), d}, rng, 0.02).set_requires_grad();
  m.blocks.resize(static_cast<size_t>(config.depth));
  for (Block& b : m.blocks) {
    b.ln1 = init_ln(d);
    b.attn.qkv_w = Tensor::randn({d, 3 * d}, rng, 0.02).set_requires_grad();
    b.attn.qkv_b = Tensor::zeros({3 * d}).set_requires_grad();
    b.attn.out_w = Tensor::randn({d, d}, rng, 0.02).set_requires_grad();
    b.attn.out_b = Tensor::zeros({d}).set_requires_grad();
    b.ln2 = init_ln(d);
    b.ffn = FFNParams::init(d, config.d_hidden(), rng);
  }
  m.ln_final = init_ln(d);
  m.head_w = Tensor::randn({d, config.n_classes}, rng, 0.02).set_requires_grad();
  m.head_b = Tensor::zeros({config.n_classes}).set_requires_grad();
  return m;
}

int64_t dense_param_count(const ViTConfig& c) {
  const int64_t d = c.d_model;
  const int64_t h = c.d_hidden();
  const int64_t embed = c.patch_dim() * d + d  // patch projection
                        + d                    // class token
                        + c.seq_len() * d;     // positional table
  const int64_t per_block = 2 * d                  // ln1
                            + d * 3 * d + 3 * d    // qkv
                            + d * d + d            // attn out
                            + 2 * d                // ln2
                            + d * h + h + h * d + d;  // ffn
  const int64_t head = 2 * d + d * c.n_classes + c.n_classes;  // final ln + classifier
  return embed + c.depth * per_block + head;
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("patch_embed.w", patch_w);
  out.emplace_back("patch_embed.b", patch_b);
  out.emplace_back("cls_token", cls_token);
  out.emplace_back("pos_embed", pos_embed);
  for (size_t i = 0; i < blocks.size(); ++i) {
    const Block& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.gamma", b.ln1.gamma);
    out.emplace_back(p + "ln1.beta", b.ln1.beta);
    out.emplace_back(p + "attn.qkv_w", b.attn.qkv_w);
    out.emplace_back(p + "attn.qkv_b", b.attn.qkv_b);
    out.emplace_back(p + "attn.out_w", b.attn.out_w);
    out.emplace_back(p + "attn.out_b", b.attn.out_b);
    out.emplace_back(p + "ln2.gamma", b.ln2.gamma);
    out.emplace_back(p + "ln2.beta", b.ln2.beta);
    check_value(b.ffn.has_value() != b.moe.has_value(),
                "Model: block " + std::to_string(i) + " must have exactly one of ffn/moe");
    if (b.ffn) {
      out.emplace_back(p + "ffn.w1", b.ffn->w1);
      out.emplace_back(p + "ffn.b1", b.ffn->b1);
      out.emplace_back(p + "ffn.w2", b.ffn->w2);
      out.emplace_back(p + "ffn.b2", b.ffn->b2);
    } else {
      for (size_t e = 0; e < b.moe->experts.size(); ++e) {
        const std::string q = p + "moe.experts." + std::to_string(e) + ".";
        out.emplace_back(q + "w1", b.moe->experts[e].w1);
        out.emplace_back(q + "b1", b.moe->experts[e].b1);
        out.emplace_back(q + "w2", b.moe->experts[e].w2);
        out.emplace_back(q + "b2", b.moe->experts[e].b2);
      }
      if (b.moe->router_w.defined()) {
        out.emplace_back(p + "moe.router_w", b.moe->router_w);
      }
    }
  }
  out.emplace_back("ln_final.gamma", ln_final.gamma);
  out.emplace_back("ln_final.beta", ln_final.beta);
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  return out;
}

bool Model::has_moe() const {
  return std::any_of(blocks.begin(), blocks.end(),
                     [](const Block& b) { return b.moe.has_value(); });
}

std::vector<int64_t> Model::moe_block_indices() const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].moe) out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

int64_t Model::param_count() const {
  int64_t total = 0;
  for (const auto& [name, t] : named_params()) total += t.numel();
  return total;
}

Model Model::clone() const {
  Model m;
  m.config = config;
  m.patch_w = clone_param(patch_w);
  m.patch_b = clone_param(patch_b);
  m.cls_token = clone_param(cls_token);
  m.pos_embed = clone_param(pos_embed);
  m.blocks.reserve(blocks.size());
  for (const Block& b : blocks) {
    Block c;
    c.ln1 = clone_ln(b.ln1);
    c.attn.qkv_w = clone_param(b.attn.qkv_w);
    c.attn.qkv_b = clone_param(b.attn.qkv_b);
    c.attn.out_w = clone_param(b.attn.out_w);
    c.attn.out_b = clone_param(b.attn.out_b);
    c.ln2 = clone_ln(b.ln2);
    if (b.ffn) c.ffn = b.ffn->clone();
    if (b.moe) c.moe = b.moe->clone();
    m.blocks.push_back(std::move(c));
  }
  m.ln_final = clone_ln(ln_final);
  m.head_w = clone_param(head_w);
  m.head_b = clone_param(head_b);
  return m;
}

Tensor patchify(const Tensor& images, int64_t patch_size) {
  check_shape(images.rank() == 4, "patchify: images must be [B,C,H,W], got " +
                                      shape_str(images.shape()));
  const int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  check_value(h % patch_size == 0 && w % patch_size == 0,
              "patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                  " not divisible into " + std::to_string(patch_size) + "-pixel patches");
  const int64_t gy = h / patch_size, gx = w / patch_size;
  const int64_t t0 = gy * gx;
  const int64_t pd = c * patch_size * patch_size;
  Tensor out = Tensor::zeros({b * t0, pd});
  const double* src = images.data().data();
  double* dst = out.data().data();
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t py = 0; py < gy; ++py) {
      for (int64_t px = 0; px < gx; ++px) {
        double* row = dst + ((bi * t0) + (py * gx + px)) * pd;
        for (int64_t ci = 0; ci < c; ++ci) {
          for (int64_t y = 0; y < patch_size; ++y) {
            const double* line =
                src + ((bi * c + ci) * h + (py * patch_size + y)) * w + px * patch_size;
            double* cell = row + (ci * patch_size + y) * patch_size;
            std::copy(line, line + patch_size, cell);
          }
        }
      }
    }
  }
  return out;
}

namespace {

// Shared attention sublayer body: h = ln1(x); x + proj(mhsa(qkv(h))).
Tensor attention_sublayer(const Block& block, const Tensor& x, int64_t batch, int64_t tokens,
                          int64_t n_heads, const ViTConfig* cfg, Rng* rng, bool train,
                          std::vector<double>* probs_out) {
  Tensor h = layer_norm(x, block.ln1.gamma, block.ln1.beta);
  Tensor qkv = add_rowvec(matmul(h, block.attn.qkv_w), block.attn.qkv_b);
  const double attn_p = cfg ? cfg->attn_dropout : 0.0;
  Tensor a = multihead_attention(qkv, batch, tokens, n_heads, attn_p, rng, train, probs_out);
  Tensor o = add_rowvec(matmul(a, block.attn.out_w), block.attn.out_b);
  if (cfg && train) {
    o = dropout(o, cfg->dropout, *rng, train);
    o = drop_path(o, cfg->stochastic_depth, batch, tokens, rng, train);
  }
  return add(x, o);
}

}  // namespace

Tensor attention_forward(const Block& block, const Tensor& tokens, int64_t n_heads,
                         std::vector<double>* probs_out) {
  check_shape(tokens.rank() == 2, "attention_forward: tokens must be [T,d]");
  return attention_sublayer(block, tokens, 1, tokens.dim(0), n_heads, nullptr, nullptr,
                            false, probs_out);
}

ForwardResult model_forward(const Model& model, const Tensor& images, RunMode mode, Rng* rng) {
  const ViTConfig& cfg = model.config;
  cfg.validate();
  const bool train = mode == RunMode::Train;
  check_value(!train || rng != nullptr, "model_forward: train mode needs an rng");
  check_shape(images.rank() == 4, "model_forward: images must be [B,C,H,W]");
  check_shape(images.dim(1) == cfg.in_channels && images.dim(2) == cfg.image_size &&
                  images.dim(3) == cfg.image_size,
              "model_forward: images " + shape_str(images.shape()) + " do not match config (" +
                  std::to_string(cfg.in_channels) + "," + std::to_string(cfg.image_size) + "," +
                  std::to_string(cfg.image_size) + ")");
  const int64_t batch = images.dim(0);
  const int64_t tokens = cfg.seq_len();

  Tensor patches = patchify(images, cfg.patch_size);
  Tensor embedded = add_rowvec(matmul(patches, model.patch_w), model.patch_b);
  Tensor x = assemble_tokens(embedded, model.cls_token, model.pos_embed, batch);
  if (train) x = dropout(x, cfg.dropout, *rng, train);

  ForwardResult result;
  for (const Block& block : model.blocks) {
    x = attention_sublayer(block, x, batch, tokens, cfg.n_heads, &cfg, rng, train, nullptr);
    Tensor h = layer_norm(x, block.ln2.gamma, block.ln2.beta);
    Tensor f;
    check_value(block.ffn.has_value() != block.moe.has_value(),
                "model_forward: block must have exactly one of ffn/moe");
    if (block.ffn) {
      f = ffn_forward(*block.ffn, h);
    } else if (block.moe->mode == MoEMode::RUP) {
      f = moe_rup_forward(*block.moe, h, rng, mode);
    } else {
      TopKResult r = moe_topk_forward(*block.moe, h, mode);
      f = r.output;
      if (train) {
        result.balance_loss = result.balance_loss.defined()
                                  ? add(result.balance_loss, r.balance_loss)
                                  : r.balance_loss;
      }
    }
    if (train) {
      f = dropout(f, cfg.dropout, *rng, train);
      f = drop_path(f, cfg.stochastic_depth, batch, tokens, rng, train);
    }
    x = add(x, f);
  }
  x = layer_norm(x, model.ln_final.gamma, model.ln_final.beta);
  std::vector<int64_t> cls_rows(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) cls_rows[static_cast<size_t>(b)] = b * tokens;
  Tensor cls = gather_rows(x, cls_rows);
  result.logits = add_rowvec(matmul(cls, model.head_w), model.head_b);
  return result;
}

}  // namespace ewa
