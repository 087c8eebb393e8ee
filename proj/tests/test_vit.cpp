#include <doctest.h>

#include <cmath>
#include <set>

#include "ewa/vit.hpp"

using namespace ewa;

namespace {

ViTConfig tiny_config() {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.in_channels = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.depth = 2;
  cfg.mlp_ratio = 2.0;
  cfg.n_classes = 3;
  return cfg;
}

}  // namespace

TEST_CASE("config derived quantities and validation") {
  ViTConfig cfg = tiny_config();
  CHECK(cfg.patches_per_side() == 2);
  CHECK(cfg.n_patches() == 4);
  CHECK(cfg.seq_len() == 5);
  CHECK(cfg.patch_dim() == 32);
  CHECK(cfg.d_hidden() == 16);
  cfg.validate();

  ViTConfig bad = cfg;
  bad.patch_size = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = cfg;
  bad.n_heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = cfg;
  bad.depth = 0;
  CHECK_THROWS_AS(bad.validate(), ValueError);
  bad = cfg;
  bad.dropout = 1.5;
  CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("patchify lays out the patch grid row-major, channel-major features") {
  // one 1-channel 4x4 image with pixel value 10*row + col
  std::vector<double> img(16);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) img[static_cast<size_t>(r * 4 + c)] = 10.0 * r + c;
  Tensor images = Tensor::from({1, 1, 4, 4}, img);
  Tensor patches = patchify(images, 2);
  REQUIRE(patches.shape() == Shape{4, 4});
  // patch 0 = rows 0..1, cols 0..1 in py-major then px order
  CHECK(patches.at(0, 0) == 0.0);
  CHECK(patches.at(0, 1) == 1.0);
  CHECK(patches.at(0, 2) == 10.0);
  CHECK(patches.at(0, 3) == 11.0);
  // patch 1 = rows 0..1, cols 2..3
  CHECK(patches.at(1, 0) == 2.0);
  CHECK(patches.at(1, 3) == 13.0);
  // patch 2 = rows 2..3, cols 0..1
  CHECK(patches.at(2, 0) == 20.0);
  // patch 3 = rows 2..3, cols 2..3
  CHECK(patches.at(3, 3) == 33.0);
}

TEST_CASE("patchify keeps channels contiguous within a patch row") {
  std::vector<double> img(2 * 4);  // 2 channels, 2x2 image, patch 2 -> one patch
  for (size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  Tensor images = Tensor::from({1, 2, 2, 2}, img);
  Tensor patches = patchify(images, 2);
  REQUIRE(patches.shape() == Shape{1, 8});
  // feature index (c*P + py)*P + px: channel 0 occupies 0..3, channel 1 4..7
  for (int i = 0; i < 8; ++i) CHECK(patches.at(0, i) == static_cast<double>(i));
}

TEST_CASE("model construction counts parameters in closed form") {
  Rng rng(1);
  ViTConfig cfg = tiny_config();
  Model m = build_model(cfg, rng);
  CHECK(m.param_count() == dense_param_count(cfg));
  CHECK_FALSE(m.has_moe());
  CHECK(m.moe_block_indices().empty());

  // hand count for the tiny config: patch 32*8+8, cls 8, pos 5*8,
  // per block ln1 16 + qkv 8*24+24 + out 8*8+8 + ln2 16 + ffn (8*16+16 + 16*8+8),
  // final norm 16, head 8*3+3
  int64_t block = 16 + (8 * 24 + 24) + (8 * 8 + 8) + 16 + (8 * 16 + 16 + 16 * 8 + 8);
  int64_t expected = (32 * 8 + 8) + 8 + 40 + 2 * block + 16 + (8 * 3 + 3);
  CHECK(m.param_count() == expected);

  // desk-scale and reference-scale closed-form counts, frozen
  ViTConfig desk;  // defaults
  CHECK(dense_param_count(desk) == 208074);
  ViTConfig ref;
  ref.image_size = 224;
  ref.patch_size = 16;
  ref.d_model = 384;
  ref.n_heads = 6;
  ref.depth = 12;
  ref.mlp_ratio = 4.0;
  ref.n_classes = 1000;
  CHECK(dense_param_count(ref) == 22050664);
}

TEST_CASE("named parameters are unique, complete and stably ordered") {
  Rng rng(2);
  Model m = build_model(tiny_config(), rng);
  auto params = m.named_params();
  std::set<std::string> names;
  int64_t total = 0;
  for (const auto& [name, t] : params) {
    CHECK(names.insert(name).second);
    CHECK(t.requires_grad());
    total += t.numel();
  }
  CHECK(total == m.param_count());
  CHECK(names.count("patch_embed.w"));
  CHECK(names.count("cls_token"));
  CHECK(names.count("pos_embed"));
  CHECK(names.count("blocks.0.attn.qkv_w"));
  CHECK(names.count("blocks.1.ffn.w2"));
  CHECK(names.count("ln_final.gamma"));
  CHECK(names.count("head.b"));

  Rng rng2(2);
  Model m2 = build_model(tiny_config(), rng2);
  auto params2 = m2.named_params();
  REQUIRE(params.size() == params2.size());
  for (size_t i = 0; i < params.size(); ++i) {
    CHECK(params[i].first == params2[i].first);
    CHECK(params[i].second.data() == params2[i].second.data());  // same seed, same init
  }
}

TEST_CASE("initialization statistics match the 0.02 normal recipe") {
  Rng rng(3);
  ViTConfig cfg = tiny_config();
  cfg.d_model = 32;
  cfg.depth = 4;
  Model m = build_model(cfg, rng);
  for (const auto& [name, t] : m.named_params()) {
    if (name.find("gamma") != std::string::npos) {
      for (double v : t.data()) CHECK(v == 1.0);
    } else if (name.find(".b") != std::string::npos || name.find("beta") != std::string::npos) {
      for (double v : t.data()) CHECK(v == 0.0);
    }
  }
  // pooled weight draws should look like N(0, 0.02^2)
  double sum = 0, sum2 = 0;
  int64_t n = 0;
  for (const auto& [name, t] : m.named_params()) {
    if (name.find("_w") == std::string::npos && name.find(".w") == std::string::npos) continue;
    for (double v : t.data()) {
      sum += v;
      sum2 += v * v;
      ++n;
    }
  }
  double mean = sum / static_cast<double>(n);
  double sd = std::sqrt(sum2 / static_cast<double>(n) - mean * mean);
  CHECK(std::abs(mean) < 0.002);
  CHECK(sd == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("model forward is deterministic in eval and matches train when nothing is stochastic") {
  Rng rng(4);
  ViTConfig cfg = tiny_config();
  Model m = build_model(cfg, rng);
  Rng data(5);
  Tensor images = Tensor::randn({3, cfg.in_channels, cfg.image_size, cfg.image_size}, data);

  ForwardResult a = model_forward(m, images, RunMode::Eval);
  ForwardResult b = model_forward(m, images, RunMode::Eval);
  REQUIRE(a.logits.shape() == Shape{3, 3});
  CHECK(a.logits.data() == b.logits.data());
  CHECK_FALSE(a.balance_loss.defined());

  NoGradGuard guard;
  Rng mrng(6);
  ForwardResult c = model_forward(m, images, RunMode::Train, &mrng);
  for (int64_t i = 0; i < a.logits.numel(); ++i)
    CHECK(c.logits.at(i) == doctest::Approx(a.logits.at(i)).epsilon(1e-14));
}

TEST_CASE("train mode requires an rng and dropout changes the output") {
  Rng rng(7);
  ViTConfig cfg = tiny_config();
  cfg.dropout = 0.3;
  Model m = build_model(cfg, rng);
  Rng data(8);
  Tensor images = Tensor::randn({2, cfg.in_channels, cfg.image_size, cfg.image_size}, data);
  CHECK_THROWS_AS(model_forward(m, images, RunMode::Train, nullptr), ValueError);

  NoGradGuard guard;
  Rng m1(9), m2(10);
  ForwardResult t1 = model_forward(m, images, RunMode::Train, &m1);
  ForwardResult t2 = model_forward(m, images, RunMode::Train, &m2);
  CHECK(t1.logits.data() != t2.logits.data());
  ForwardResult ev = model_forward(m, images, RunMode::Eval);
  ForwardResult ev2 = model_forward(m, images, RunMode::Eval);
  CHECK(ev.logits.data() == ev2.logits.data());
}

TEST_CASE("every parameter receives a gradient from the classification loss") {
  Rng rng(11);
  ViTConfig cfg = tiny_config();
  Model m = build_model(cfg, rng);
  Rng data(12);
  Tensor images = Tensor::randn({2, cfg.in_channels, cfg.image_size, cfg.image_size}, data);
  Rng mrng(13);
  ForwardResult fr = model_forward(m, images, RunMode::Train, &mrng);
  std::vector<int64_t> labels = {0, 2};
  backward(cross_entropy(fr.logits, labels));
  for (auto& [name, t] : m.named_params()) {
    INFO(name);
    REQUIRE(t.has_grad());
    double norm = 0;
    for (double g : t.grad()) norm += g * g;
    CHECK(norm > 0.0);
    t.zero_grad();
  }
}

TEST_CASE("end-to-end gradient check through a full forward pass") {
  Rng rng(14);
  ViTConfig cfg = tiny_config();
  Model m = build_model(cfg, rng);
  Rng data(15);
  Tensor images = Tensor::randn({2, cfg.in_channels, cfg.image_size, cfg.image_size}, data);
  std::vector<int64_t> labels = {1, 0};

  // check a few load-bearing parameters end to end (sampled coordinates);
  // perturbations are written into the live parameter so the raw form is
  // needed, not the single-tensor convenience overload
  for (const char* target : {"patch_embed.w", "blocks.0.attn.qkv_w", "blocks.1.ffn.w1",
                             "pos_embed", "ln_final.gamma"}) {
    Tensor param;
    for (const auto& [name, t] : m.named_params())
      if (name == target) param = t;
    REQUIRE(param.defined());
    auto value_fn = [&](const std::vector<double>& v) {
      NoGradGuard ng;
      param.data() = v;
      ForwardResult fr = model_forward(m, images, RunMode::Eval);
      return cross_entropy(fr.logits, labels, 0.1).item();
    };
    auto grad_fn = [&](const std::vector<double>& v) {
      param.data() = v;
      for (auto& [name, t] : m.named_params()) t.zero_grad();
      ForwardResult fr = model_forward(m, images, RunMode::Eval);
      backward(cross_entropy(fr.logits, labels, 0.1));
      return param.grad();
    };
    GradCheckResult res = grad_check(value_fn, grad_fn, param.data(), 1e-5, 24, 99);
    INFO(target, " worst analytic ", res.analytic_at_worst, " numeric ", res.numeric_at_worst);
    // looser than the per-op checks: tiny end-to-end gradients run into the
    // central-difference noise floor of an O(1) loss at h = 1e-5
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("single-sample attention wrapper agrees with the batched sublayer") {
  Rng rng(16);
  ViTConfig cfg = tiny_config();
  Model m = build_model(cfg, rng);
  Rng data(17);
  Tensor images = Tensor::randn({1, cfg.in_channels, cfg.image_size, cfg.image_size}, data);

  // reproduce block 0's input: embed + assemble, then compare sublayer output
  NoGradGuard guard;
  Tensor patches = patchify(images, cfg.patch_size);
  Tensor embedded = add_rowvec(matmul(patches, m.patch_w), m.patch_b);
  Tensor tokens = assemble_tokens(embedded, m.cls_token, m.pos_embed, 1);

  std::vector<double> probs;
  Tensor out = attention_forward(m.blocks[0], tokens, cfg.n_heads, &probs);
  REQUIRE(out.shape() == tokens.shape());
  REQUIRE(probs.size() ==
          static_cast<size_t>(cfg.n_heads * cfg.seq_len() * cfg.seq_len()));
  for (size_t r = 0; r + cfg.seq_len() <= probs.size(); r += cfg.seq_len()) {
    double s = 0;
    for (int64_t c = 0; c < cfg.seq_len(); ++c) s += probs[r + static_cast<size_t>(c)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("stochastic depth drops residual branches only in train mode") {
  Rng rng(18);
  ViTConfig cfg = tiny_config();
  cfg.stochastic_depth = 0.99;  // nearly always drop
  Model m = build_model(cfg, rng);
  Rng data(19);
  Tensor images = Tensor::randn({2, cfg.in_channels, cfg.image_size, cfg.image_size}, data);

  NoGradGuard guard;
  Rng mrng(20);
  ForwardResult dropped = model_forward(m, images, RunMode::Train, &mrng);
  ForwardResult ev = model_forward(m, images, RunMode::Eval);
  // with every branch dropped, train output differs a lot from eval
  double diff = 0;
  for (int64_t i = 0; i < ev.logits.numel(); ++i)
    diff = std::max(diff, std::abs(dropped.logits.at(i) - ev.logits.at(i)));
  CHECK(diff > 1e-8);

  ViTConfig cfg0 = tiny_config();
  Rng rng0(18);
  Model m0 = build_model(cfg0, rng0);
  Rng mrng0(21);
  ForwardResult t0 = model_forward(m0, images, RunMode::Train, &mrng0);
  ForwardResult e0 = model_forward(m0, images, RunMode::Eval);
  for (int64_t i = 0; i < e0.logits.numel(); ++i)
    CHECK(t0.logits.at(i) == doctest::Approx(e0.logits.at(i)).epsilon(1e-14));
}

TEST_CASE("clone produces an independent deep copy") {
  Rng rng(22);
  Model m = build_model(tiny_config(), rng);
  Model c = m.clone();
  CHECK(c.param_count() == m.param_count());
  auto pm = m.named_params();
  auto pc = c.named_params();
  REQUIRE(pm.size() == pc.size());
  for (size_t i = 0; i < pm.size(); ++i) {
    CHECK(pm[i].first == pc[i].first);
    CHECK(pm[i].second.data() == pc[i].second.data());
    CHECK(pm[i].second.impl() != pc[i].second.impl());
  }
  pc[0].second.at(0) += 1.0;
  CHECK(pm[0].second.at(0) != pc[0].second.at(0));
}
