#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "ewa/moe.hpp"

using namespace ewa;

namespace {

// expert e computes (e+1) * x for |x| < 5: gelu(x + 20) == x + 20 to double
// precision, so the MLP reduces to (x + 20)(e+1) - 20(e+1)
FFNParams scaling_expert(int64_t e) {
  FFNParams f;
  f.w1 = Tensor::from({1, 1}, {1.0});
  f.b1 = Tensor::from({1}, {20.0});
  f.w2 = Tensor::from({1, 1}, {static_cast<double>(e + 1)});
  f.b2 = Tensor::from({1}, {-20.0 * static_cast<double>(e + 1)});
  return f;
}

MoELayer scaling_bank(int64_t n) {
  MoELayer layer;
  for (int64_t e = 0; e < n; ++e) layer.experts.push_back(scaling_expert(e));
  return layer;
}

}  // namespace

TEST_CASE("rup partition splits tokens into near-equal disjoint chunks") {
  Rng rng(1);
  PartitionAssignment even = rup_partition(8, 4, rng);
  REQUIRE(even.n_experts() == 4);
  for (const auto& list : even.token_lists) CHECK(list.size() == 2);

  PartitionAssignment uneven = rup_partition(10, 4, rng);
  CHECK(uneven.token_lists[0].size() == 3);
  CHECK(uneven.token_lists[1].size() == 3);
  CHECK(uneven.token_lists[2].size() == 2);
  CHECK(uneven.token_lists[3].size() == 2);

  // concatenation is a permutation of 0..9 and expert_of_token agrees
  std::set<int64_t> seen;
  for (int64_t e = 0; e < uneven.n_experts(); ++e) {
    for (int64_t t : uneven.token_lists[static_cast<size_t>(e)]) {
      CHECK(seen.insert(t).second);
      CHECK(uneven.expert_of_token[static_cast<size_t>(t)] == e);
    }
  }
  CHECK(seen.size() == 10);
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == 9);

  CHECK_THROWS_AS(rup_partition(3, 4, rng), ValueError);
  CHECK_THROWS_AS(rup_partition(5, 0, rng), ValueError);
}

TEST_CASE("rup partition assigns tokens to experts uniformly") {
  Rng rng(2);
  const int64_t draws = 4000;
  std::vector<int64_t> counts(4, 0);
  for (int64_t i = 0; i < draws; ++i) {
    PartitionAssignment part = rup_partition(8, 4, rng);
    ++counts[static_cast<size_t>(part.expert_of_token[0])];
  }
  // each expert expected 1000 times; 5 sigma = 5 * sqrt(4000 * 0.25 * 0.75) ~ 137
  for (int64_t c : counts) {
    CHECK(c > 1000 - 137);
    CHECK(c < 1000 + 137);
  }
}

TEST_CASE("identical experts make the bank equivalent to its dense mlp") {
  Rng rng(3);
  FFNParams dense = FFNParams::init(6, 12, rng);
  MoELayer layer;
  for (int e = 0; e < 4; ++e) layer.experts.push_back(dense.clone());

  Tensor tokens = Tensor::randn({9, 6}, rng);
  Tensor want = ffn_forward(dense, tokens);
  Rng trng(4);
  Tensor train_out = moe_rup_forward(layer, tokens, &trng, RunMode::Train);
  Tensor eval_out = moe_rup_forward(layer, tokens, nullptr, RunMode::Eval);
  for (int64_t i = 0; i < want.numel(); ++i) {
    CHECK(train_out.at(i) == doctest::Approx(want.at(i)).epsilon(1e-12));
    CHECK(eval_out.at(i) == doctest::Approx(want.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("rup forward sends each token through its assigned expert") {
  MoELayer layer = scaling_bank(4);
  const int64_t t = 10;
  std::vector<double> xs(static_cast<size_t>(t));
  for (int64_t i = 0; i < t; ++i) xs[static_cast<size_t>(i)] = static_cast<double>(i) - 4.5;
  Tensor tokens = Tensor::from({t, 1}, xs);

  // train mode: a twin rng replays the partition the forward pass will draw
  Rng rng(777), twin(777);
  PartitionAssignment part = rup_partition(t, 4, twin);
  Tensor out = moe_rup_forward(layer, tokens, &rng, RunMode::Train);
  for (int64_t i = 0; i < t; ++i) {
    double scale = static_cast<double>(part.expert_of_token[static_cast<size_t>(i)] + 1);
    CHECK(out.at(i, 0) == doctest::Approx(scale * xs[static_cast<size_t>(i)]).epsilon(1e-12));
  }

  // eval mode: deterministic, and chunk sizes recovered from the outputs
  // must match the 3,3,2,2 split
  Tensor e1 = moe_rup_forward(layer, tokens, nullptr, RunMode::Eval);
  Tensor e2 = moe_rup_forward(layer, tokens, nullptr, RunMode::Eval);
  CHECK(e1.data() == e2.data());
  std::vector<int64_t> per_expert(4, 0);
  for (int64_t i = 0; i < t; ++i) {
    double ratio = e1.at(i, 0) / xs[static_cast<size_t>(i)];
    auto e = static_cast<int64_t>(std::llround(ratio)) - 1;
    REQUIRE(e >= 0);
    REQUIRE(e < 4);
    CHECK(ratio == doctest::Approx(static_cast<double>(e + 1)).epsilon(1e-12));
    ++per_expert[static_cast<size_t>(e)];
  }
  std::vector<int64_t> want_sizes = {3, 3, 2, 2};
  CHECK(per_expert == want_sizes);
}

TEST_CASE("single-expert bank short-circuits to the plain mlp") {
  Rng rng(5);
  MoELayer layer;
  layer.experts.push_back(FFNParams::init(4, 8, rng));
  Tensor tokens = Tensor::randn({3, 4}, rng);
  Tensor out = moe_rup_forward(layer, tokens, nullptr, RunMode::Eval);
  Tensor want = ffn_forward(layer.experts.front(), tokens);
  CHECK(out.data() == want.data());
}

TEST_CASE("mode and argument mismatches are rejected") {
  Rng rng(6);
  MoELayer rup;
  for (int e = 0; e < 2; ++e) rup.experts.push_back(FFNParams::init(4, 8, rng));
  Tensor tokens = Tensor::randn({5, 4}, rng);

  CHECK_THROWS_AS(moe_topk_forward(rup, tokens, RunMode::Eval), ValueError);
  CHECK_THROWS_AS(router_scores(rup, tokens), ValueError);
  CHECK_THROWS_AS(moe_rup_forward(rup, tokens, nullptr, RunMode::Train), ValueError);
  Tensor wrong = Tensor::randn({5, 3}, rng);
  CHECK_THROWS_AS(moe_rup_forward(rup, wrong, nullptr, RunMode::Eval), ShapeError);

  MoELayer topk = rup.clone();
  topk.mode = MoEMode::TopK;
  CHECK_THROWS_AS(moe_topk_forward(topk, tokens, RunMode::Eval), ValueError);  // no router
  topk.router_w = Tensor::randn({4, 2}, rng);
  CHECK_THROWS_AS(moe_rup_forward(topk, tokens, nullptr, RunMode::Eval), ValueError);
  topk.top_k = 3;
  CHECK_THROWS_AS(moe_topk_forward(topk, tokens, RunMode::Eval), ValueError);
  topk.top_k = 1;
  moe_topk_forward(topk, tokens, RunMode::Eval);  // now fine

  MoELayer empty;
  CHECK_THROWS_AS(moe_rup_forward(empty, tokens, nullptr, RunMode::Eval), ValueError);
  MoELayer ragged;
  ragged.experts.push_back(FFNParams::init(4, 8, rng));
  ragged.experts.push_back(FFNParams::init(4, 6, rng));
  CHECK_THROWS_AS(moe_rup_forward(ragged, tokens, nullptr, RunMode::Eval), ShapeError);
}

TEST_CASE("router scores keep the top gate without renormalizing") {
  MoELayer layer = scaling_bank(2);
  layer.mode = MoEMode::TopK;
  layer.router_w = Tensor::from({1, 2}, {0.0, std::log(3.0)});
  layer.top_k = 1;

  Tensor tokens = Tensor::from({1, 1}, {1.0});
  Tensor scores = router_scores(layer, tokens);
  REQUIRE(scores.shape() == Shape{1, 2});
  // softmax([0, ln 3]) = [0.25, 0.75]; top-1 keeps 0.75 unrenormalized
  CHECK(scores.at(0, 0) == 0.0);
  CHECK(scores.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("ties in the router resolve to the lower expert index") {
  Rng rng(7);
  MoELayer layer;
  for (int e = 0; e < 3; ++e) layer.experts.push_back(FFNParams::init(2, 4, rng));
  layer.mode = MoEMode::TopK;
  layer.router_w = Tensor::zeros({2, 3});
  layer.top_k = 1;
  Tensor tokens = Tensor::randn({4, 2}, rng);
  Tensor scores = router_scores(layer, tokens);
  for (int64_t r = 0; r < 4; ++r) {
    CHECK(scores.at(r, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(scores.at(r, 1) == 0.0);
    CHECK(scores.at(r, 2) == 0.0);
  }
}

TEST_CASE("routed forward scales the chosen expert by its gate") {
  Rng rng(8);
  FFNParams dense = FFNParams::init(1, 3, rng);
  MoELayer layer;
  layer.experts.push_back(dense.clone());
  layer.experts.push_back(dense.clone());
  layer.mode = MoEMode::TopK;
  layer.router_w = Tensor::from({1, 2}, {0.0, std::log(3.0)});
  layer.top_k = 1;

  Tensor tokens = Tensor::from({1, 1}, {1.0});
  TopKResult res = moe_topk_forward(layer, tokens, RunMode::Eval);
  Tensor want = ffn_forward(dense, tokens);
  CHECK(res.output.at(0, 0) == doctest::Approx(0.75 * want.at(0, 0)).epsilon(1e-12));
  CHECK(res.stats.dropped == 0);
  std::vector<int64_t> kept = {0, 1};
  CHECK(res.stats.kept_per_expert == kept);
}

TEST_CASE("capacity cap drops overflow assignments and zeroes their rows") {
  Rng rng(9);
  MoELayer layer;
  for (int e = 0; e < 2; ++e) layer.experts.push_back(FFNParams::init(1, 3, rng));
  layer.mode = MoEMode::TopK;
  layer.router_w = Tensor::from({1, 2}, {5.0, 0.0});  // everyone prefers expert 0
  layer.top_k = 1;
  layer.capacity_ratio = 1.0;

  Tensor tokens = Tensor::full({4, 1}, 1.0);
  TopKResult res = moe_topk_forward(layer, tokens, RunMode::Train);
  CHECK(res.stats.capacity == 2);  // ceil(1.0 * 4 * 1 / 2)
  CHECK(res.stats.dropped == 2);
  std::vector<int64_t> kept = {2, 0};
  CHECK(res.stats.kept_per_expert == kept);
  CHECK(res.output.at(0, 0) != 0.0);
  CHECK(res.output.at(1, 0) != 0.0);
  CHECK(res.output.at(2, 0) == 0.0);
  CHECK(res.output.at(3, 0) == 0.0);
  CHECK(res.balance_loss.defined());
}

TEST_CASE("balance loss is lambda when balanced and lambda N when collapsed") {
  const double lambda = 0.01;
  Tensor balanced = Tensor::from({2, 2}, {0.5, 0.5, 0.5, 0.5});
  Tensor loss = load_balance_loss(balanced, {0, 1}, lambda);
  CHECK(loss.item() == doctest::Approx(lambda).epsilon(1e-12));

  Tensor collapsed = Tensor::from({2, 2}, {1.0, 0.0, 1.0, 0.0});
  Tensor worst = load_balance_loss(collapsed, {0, 0}, lambda);
  CHECK(worst.item() == doctest::Approx(lambda * 2.0).epsilon(1e-12));

  CHECK_THROWS_AS(load_balance_loss(balanced, {0}, lambda), ValueError);
  CHECK_THROWS_AS(load_balance_loss(balanced, {0, 5}, lambda), ValueError);
}

TEST_CASE("gradients flow through partitioned dispatch") {
  Rng rng(10);
  MoELayer layer;
  for (int e = 0; e < 2; ++e) {
    layer.experts.push_back(FFNParams::init(3, 5, rng));
    for (Tensor& t : layer.experts.back().tensors()) t.set_requires_grad();
  }
  Tensor tokens = Tensor::randn({6, 3}, rng);

  Tensor target = layer.experts[1].w1;
  auto value_fn = [&](const std::vector<double>& v) {
    NoGradGuard ng;
    target.data() = v;
    return sum_all(moe_rup_forward(layer, tokens, nullptr, RunMode::Eval)).item();
  };
  auto grad_fn = [&](const std::vector<double>& v) {
    target.data() = v;
    for (auto& e : layer.experts)
      for (Tensor& t : e.tensors()) t.zero_grad();
    backward(sum_all(moe_rup_forward(layer, tokens, nullptr, RunMode::Eval)));
    return target.grad();
  };
  GradCheckResult res = grad_check(value_fn, grad_fn, target.data(), 1e-5);
  CHECK(res.max_rel_err < 1e-6);
  CHECK(res.coords_checked == target.numel());
}

TEST_CASE("gradients flow through the router and gated experts") {
  Rng rng(11);
  MoELayer layer;
  for (int e = 0; e < 2; ++e) {
    layer.experts.push_back(FFNParams::init(2, 4, rng));
    for (Tensor& t : layer.experts.back().tensors()) t.set_requires_grad();
  }
  layer.mode = MoEMode::TopK;
  // well-separated logits so top-k membership is stable under perturbation
  layer.router_w = Tensor::from({2, 2}, {2.0, -2.0, -1.0, 1.0}).set_requires_grad();
  layer.top_k = 1;
  layer.capacity_ratio = 2.0;
  Tensor tokens = Tensor::from({3, 2}, {1.0, 0.2, -0.8, 1.0, 0.5, -1.2});

  auto total_loss = [&]() {
    TopKResult res = moe_topk_forward(layer, tokens, RunMode::Train);
    return add(sum_all(res.output), res.balance_loss);
  };
  for (Tensor target : {layer.router_w, layer.experts[0].w1, layer.experts[1].w2}) {
    auto value_fn = [&](const std::vector<double>& v) {
      NoGradGuard ng;
      target.data() = v;
      return total_loss().item();
    };
    auto grad_fn = [&](const std::vector<double>& v) {
      target.data() = v;
      layer.router_w.zero_grad();
      for (auto& e : layer.experts)
        for (Tensor& t : e.tensors()) t.zero_grad();
      backward(total_loss());
      return target.grad();
    };
    GradCheckResult res = grad_check(value_fn, grad_fn, target.data(), 1e-5);
    CHECK(res.max_rel_err < 1e-6);
    CHECK(res.coords_checked == target.numel());
  }
}
