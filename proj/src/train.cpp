#include "ewa/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ewa/common.hpp"

namespace ewa {

using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

void copy_bank(std::vector<FFNParams>& dst, const std::vector<FFNParams>& src) {
  check_value(dst.size() == src.size(), "training: expert bank size changed");
  for (size_t e = 0; e < dst.size(); ++e) {
    std::vector<Tensor> dt = dst[e].tensors();
    std::vector<Tensor> st = src[e].tensors();
    for (size_t k = 0; k < dt.size(); ++k) dt[k].copy_data_from(st[k]);
  }
}

// Marsaglia-Tsang for alpha >= 1; alpha < 1 boosts through Gamma(alpha + 1).
double sample_gamma(Rng& rng, double alpha) {
  check_value(alpha > 0.0, "sample_gamma: alpha must be positive");
  if (alpha < 1.0) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    return sample_gamma(rng, alpha + 1.0) * std::pow(u, 1.0 / alpha);
  }
  double d = alpha - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x = rng.normal();
    double t = 1.0 + c * x;
    if (t <= 0.0) continue;
    double v = t * t * t;
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

double sample_beta_dist(Rng& rng, double alpha) {
  double a = sample_gamma(rng, alpha);
  double b = sample_gamma(rng, alpha);
  double s = a + b;
  return s > 0.0 ? a / s : 0.5;
}

void random_flip_inplace(Tensor& images, Rng& rng) {
  const Shape& s = images.shape();
  check_value(s.size() == 4, "random_flip: images must be [B, C, H, W]");
  std::vector<double>& d = images.data();
  int64_t bsz = s[0], ch = s[1], h = s[2], w = s[3];
  for (int64_t b = 0; b < bsz; ++b) {
    if (rng.uniform() >= 0.5) continue;
    for (int64_t c = 0; c < ch; ++c)
      for (int64_t y = 0; y < h; ++y) {
        double* row = d.data() + ((b * ch + c) * h + y) * w;
        std::reverse(row, row + w);
      }
  }
}

json meta_to_json(const CheckpointMeta& meta) {
  json arch;
  arch["model"] = json::parse(model_config_to_json(meta.model));
  arch["moe_blocks"] = meta.moe_blocks;
  if (!meta.moe_blocks.empty())
    arch["moe"] = json{{"n_experts", meta.moe.n_experts},
                       {"mode", meta.moe.mode},
                       {"top_k", meta.moe.top_k},
                       {"capacity_ratio", meta.moe.capacity_ratio},
                       {"balance_weight", meta.moe.balance_weight}};
  json j;
  j["arch"] = arch;
  j["position"] = json{{"epoch", meta.epoch}, {"global_step", meta.global_step}};
  json rng = json::object();
  if (!meta.model_rng.empty()) rng["model"] = meta.model_rng;
  if (!meta.data_rng.empty()) rng["data"] = meta.data_rng;
  if (!meta.augment_rng.empty()) rng["augment"] = meta.augment_rng;
  j["rng"] = rng;
  if (meta.has_train_config) j["train_config"] = json::parse(config_to_json(meta.train_config));
  return j;
}

struct RunStreams {
  Rng model, data, augment;
};

int64_t argmax_of_row(const std::vector<double>& flat, int64_t row, int64_t width) {
  int64_t best = 0;
  double best_v = flat[static_cast<size_t>(row * width)];
  for (int64_t k = 1; k < width; ++k) {
    double v = flat[static_cast<size_t>(row * width + k)];
    if (v > best_v) {
      best_v = v;
      best = k;
    }
  }
  return best;
}

double median_of(std::vector<double> xs) {
  check_value(!xs.empty(), "median of empty sample");
  std::sort(xs.begin(), xs.end());
  size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

TrainResult run_training(const TrainConfig& cfg, Model model, const fs::path& out_dir,
                         const EpochCallback& on_epoch) {
  auto t_run0 = Clock::now();
  DataSplits splits = load_dataset(cfg.dataset);
  int64_t n_train = splits.train.size();
  check_value(n_train >= cfg.batch_size,
              "training: dataset has " + std::to_string(n_train) +
                  " samples, smaller than one batch of " + std::to_string(cfg.batch_size));

  int64_t steps_per_epoch = n_train / cfg.batch_size;  // trailing partial batch dropped
  int64_t total_steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * steps_per_epoch;
  check_value(total_steps > 0, "training: run has zero optimizer steps");
  int64_t epochs_total =
      cfg.steps > 0 ? (cfg.steps + steps_per_epoch - 1) / steps_per_epoch : cfg.epochs;
  int64_t warmup_steps = std::llround(cfg.warmup_fraction * static_cast<double>(total_steps));

  ScheduleGranularity gran = cfg.ewa.parsed_granularity();
  int64_t horizon = gran == ScheduleGranularity::PerEpoch ? std::max<int64_t>(1, epochs_total - 1)
                                                          : std::max<int64_t>(1, total_steps - 1);
  ShareSchedule sched = cfg.ewa.schedule_for(horizon);

  RunStreams streams{Rng::stream(cfg.seed, "model"), Rng::stream(cfg.seed, "data"),
                     Rng::stream(cfg.seed, "augment")};

  Optimizer opt(cfg.optimizer, model.named_params());
  std::vector<int64_t> moe_blocks = model.moe_block_indices();

  TrainResult result;
  result.config = cfg;

  std::ofstream metrics;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream cfg_out(out_dir / "config.json");
    cfg_out << config_to_json(cfg);
    metrics.open(out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw IoError("training: cannot write metrics.csv in " + out_dir.string());
    metrics << "epoch,step,split,loss,accuracy,lr,beta,ms\n";
  }

  auto meta_now = [&](int64_t epoch, int64_t gstep) {
    CheckpointMeta meta;
    meta.model = cfg.model;
    meta.moe_blocks = moe_blocks;
    meta.moe = cfg.moe;
    meta.epoch = epoch;
    meta.global_step = gstep;
    meta.model_rng = streams.model.serialize();
    meta.data_rng = streams.data.serialize();
    meta.augment_rng = streams.augment.serialize();
    meta.has_train_config = true;
    meta.train_config = cfg;
    return meta;
  };

  Checkpoint last_good = checkpoint_from_model(model, meta_now(0, 0));
  auto save_last_good = [&] {
    if (!out_dir.empty()) last_good.save(out_dir / "checkpoint_last_good.ewac");
  };

  int64_t global_step = 0;
  std::vector<int64_t> batch_idx(static_cast<size_t>(cfg.batch_size));
  for (int64_t epoch = 0; epoch < epochs_total && global_step < total_steps; ++epoch) {
    std::vector<int64_t> perm = streams.data.permutation(n_train);
    for (int64_t b = 0; b < steps_per_epoch && global_step < total_steps; ++b) {
      auto t0 = Clock::now();
      for (int64_t i = 0; i < cfg.batch_size; ++i)
        batch_idx[static_cast<size_t>(i)] = perm[static_cast<size_t>(b * cfg.batch_size + i)];
      auto [images, labels] = splits.train.batch(batch_idx);

      if (cfg.random_flip) random_flip_inplace(images, streams.augment);

      double lam = 1.0;
      std::vector<int64_t> labels_b;
      if (cfg.mixup_alpha > 0.0) {
        lam = sample_beta_dist(streams.augment, cfg.mixup_alpha);
        std::vector<int64_t> pair = streams.augment.permutation(cfg.batch_size);
        std::vector<double> orig = images.data();
        std::vector<double>& dst = images.data();
        int64_t stride = images.numel() / cfg.batch_size;
        labels_b.resize(static_cast<size_t>(cfg.batch_size));
        for (int64_t i = 0; i < cfg.batch_size; ++i) {
          const double* src = orig.data() + pair[static_cast<size_t>(i)] * stride;
          double* out = dst.data() + i * stride;
          for (int64_t k = 0; k < stride; ++k) out[k] = lam * out[k] + (1.0 - lam) * src[k];
          labels_b[static_cast<size_t>(i)] = labels[static_cast<size_t>(pair[static_cast<size_t>(i)])];
        }
      }

      double lr = cosine_lr(global_step, total_steps, warmup_steps, cfg.optimizer.lr);

      Graph::get().clear();
      ForwardResult fr = model_forward(model, images, RunMode::Train, &streams.model);
      Tensor task = cross_entropy(fr.logits, labels, cfg.label_smoothing);
      if (!labels_b.empty() && lam < 1.0) {
        Tensor task_b = cross_entropy(fr.logits, labels_b, cfg.label_smoothing);
        task = add(scale(task, lam), scale(task_b, 1.0 - lam));
      }
      Tensor objective = fr.balance_loss.defined() ? add(task, fr.balance_loss) : task;

      double loss_val = objective.data()[0];
      if (!std::isfinite(loss_val)) {
        save_last_good();
        throw DivergenceError("training: loss is not finite at step " +
                              std::to_string(global_step));
      }

      int64_t correct = 0;
      {
        const std::vector<double>& lg = fr.logits.data();
        for (int64_t i = 0; i < cfg.batch_size; ++i)
          if (argmax_of_row(lg, i, cfg.model.n_classes) == labels[static_cast<size_t>(i)])
            ++correct;
      }

      backward(objective);
      try {
        opt.step(lr);
      } catch (const DivergenceError&) {
        save_last_good();
        throw;
      }

      double beta = 0.0;
      if (!moe_blocks.empty()) {
        int64_t position = gran == ScheduleGranularity::PerEpoch ? epoch : global_step;
        beta = schedule_beta(sched, position);
        if (beta > 0.0) {
          for (int64_t bi : moe_blocks) {
            MoELayer& layer = *model.blocks[static_cast<size_t>(bi)].moe;
            copy_bank(layer.experts, ewa_step(layer.experts, beta));
          }
          ++result.ewa_applications;
        }
      }

      StepRecord rec;
      rec.epoch = epoch;
      rec.step = global_step;
      rec.loss = loss_val;
      rec.accuracy = static_cast<double>(correct) / static_cast<double>(cfg.batch_size);
      rec.lr = lr;
      rec.beta = beta;
      rec.ms = ms_between(t0, Clock::now());
      result.steps.push_back(rec);
      if (metrics.is_open())
        metrics << rec.epoch << ',' << rec.step << ",train," << rec.loss << ','
                << rec.accuracy << ',' << rec.lr << ',' << rec.beta << ',' << rec.ms << '\n';
      ++global_step;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.step = global_step;
    if (splits.eval) {
      auto te0 = Clock::now();
      Model deploy = convert_model(model);
      er.eval = evaluate(deploy, *splits.eval, cfg.batch_size);
      if (metrics.is_open())
        metrics << epoch << ',' << global_step << ",eval," << er.eval.loss << ','
                << er.eval.accuracy << ",0,0," << ms_between(te0, Clock::now()) << '\n';
    }
    result.epochs.push_back(er);
    if (on_epoch) on_epoch(er);

    last_good = checkpoint_from_model(model, meta_now(epoch + 1, global_step));
    if (!out_dir.empty()) last_good.save(out_dir / "checkpoint_last.ewac");
    if (metrics.is_open()) metrics.flush();
  }

  Graph::get().clear();
  result.model = model;
  result.converted = convert_model(model);
  if (!out_dir.empty()) {
    CheckpointMeta final_meta = meta_now(epochs_total, global_step);
    checkpoint_from_model(model, final_meta).save(out_dir / "checkpoint_final.ewac");
    final_meta.moe_blocks.clear();
    final_meta.train_config.moe.enabled = false;
    checkpoint_from_model(result.converted, final_meta)
        .save(out_dir / "checkpoint_converted.ewac");
  }
  result.total_seconds = ms_between(t_run0, Clock::now()) / 1000.0;
  return result;
}

}  // namespace

Checkpoint checkpoint_from_model(const Model& model, const CheckpointMeta& meta) {
  Checkpoint ckpt;
  ckpt.config_text = meta_to_json(meta).dump(2);
  ckpt.records = param_records(model);
  return ckpt;
}

CheckpointMeta meta_from_checkpoint(const Checkpoint& ckpt) {
  json j;
  try {
    j = json::parse(ckpt.config_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: invalid metadata JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("arch"))
    throw ParseError("checkpoint: metadata has no arch section");

  CheckpointMeta meta;
  const json& arch = j.at("arch");
  meta.model = model_config_from_json(arch.at("model").dump());
  if (arch.contains("moe_blocks"))
    meta.moe_blocks = arch.at("moe_blocks").get<std::vector<int64_t>>();
  if (arch.contains("moe")) {
    const json& m = arch.at("moe");
    meta.moe.enabled = !meta.moe_blocks.empty();
    if (m.contains("n_experts")) meta.moe.n_experts = m.at("n_experts").get<int64_t>();
    if (m.contains("mode")) meta.moe.mode = m.at("mode").get<std::string>();
    if (m.contains("top_k")) meta.moe.top_k = m.at("top_k").get<int64_t>();
    if (m.contains("capacity_ratio"))
      meta.moe.capacity_ratio = m.at("capacity_ratio").get<double>();
    if (m.contains("balance_weight"))
      meta.moe.balance_weight = m.at("balance_weight").get<double>();
  }
  if (j.contains("position")) {
    const json& p = j.at("position");
    if (p.contains("epoch")) meta.epoch = p.at("epoch").get<int64_t>();
    if (p.contains("global_step")) meta.global_step = p.at("global_step").get<int64_t>();
  }
  if (j.contains("rng")) {
    const json& r = j.at("rng");
    if (r.contains("model")) meta.model_rng = r.at("model").get<std::string>();
    if (r.contains("data")) meta.data_rng = r.at("data").get<std::string>();
    if (r.contains("augment")) meta.augment_rng = r.at("augment").get<std::string>();
  }
  if (j.contains("train_config")) {
    meta.has_train_config = true;
    meta.train_config = config_from_json(j.at("train_config").dump());
  }
  return meta;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  CheckpointMeta meta = meta_from_checkpoint(ckpt);
  Rng scratch(0);  // every draw is overwritten by the records below
  Model m = build_model(meta.model, scratch);
  if (!meta.moe_blocks.empty()) {
    MoESpec spec = meta.moe.spec();
    for (int64_t bi : meta.moe_blocks) {
      check_value(bi >= 0 && bi < static_cast<int64_t>(m.blocks.size()),
                  "checkpoint: expert bank block index " + std::to_string(bi) +
                      " out of range");
      Block& blk = m.blocks[static_cast<size_t>(bi)];
      MoELayer layer = expand_ffn_to_moe(*blk.ffn, spec.n_experts, spec.mode, &scratch,
                                         spec.top_k, spec.capacity_ratio,
                                         spec.balance_weight);
      blk.ffn.reset();
      blk.moe = std::move(layer);
    }
  }
  load_param_records(m, ckpt.records);
  return m;
}

TrainResult train(const TrainConfig& config, const fs::path& out_dir,
                  const EpochCallback& on_epoch) {
  config.validate();
  Rng init = Rng::stream(config.seed, "init");
  Model model;
  if (config.moe.enabled) {
    PlacementPolicy placement{config.moe.parsed_placement()};
    model = build_ewa_model(config.model, placement, config.moe.spec(), init);
  } else {
    model = build_model(config.model, init);
  }
  return run_training(config, std::move(model), out_dir, on_epoch);
}

TrainResult finetune(const TrainConfig& config, const fs::path& dense_checkpoint,
                     const fs::path& out_dir, const EpochCallback& on_epoch) {
  config.validate();
  Checkpoint ckpt = Checkpoint::load(dense_checkpoint);
  Rng router_rng = Rng::stream(config.seed, "router");
  Model model = build_finetune_model(ckpt, config, router_rng);
  return run_training(config, std::move(model), out_dir, on_epoch);
}

Model build_finetune_model(const Checkpoint& dense, const TrainConfig& config,
                           Rng& router_rng) {
  CheckpointMeta meta = meta_from_checkpoint(dense);
  check_value(meta.moe_blocks.empty(), "finetune: checkpoint already carries expert banks");
  if (!(meta.model == config.model))
    throw ValueError("finetune: checkpoint architecture differs from config.model");
  Model m = model_from_checkpoint(dense);
  if (!config.moe.enabled) return m;

  PlacementPolicy placement{config.moe.parsed_placement()};
  MoESpec spec = config.moe.spec();
  for (int64_t bi : placement.block_indices(config.model.depth)) {
    Block& blk = m.blocks[static_cast<size_t>(bi)];
    MoELayer layer = expand_ffn_to_moe(*blk.ffn, spec.n_experts, spec.mode, &router_rng,
                                       spec.top_k, spec.capacity_ratio, spec.balance_weight);
    blk.ffn.reset();
    blk.moe = std::move(layer);
  }
  return m;
}

EvalResult evaluate(const Model& model, const Dataset& data, int64_t batch_size,
                    double label_smoothing) {
  check_value(batch_size > 0, "evaluate: batch_size must be positive");
  NoGradGuard no_grad;
  int64_t n = data.size();
  double loss_sum = 0.0;
  int64_t correct = 0;
  std::vector<int64_t> idx;
  for (int64_t start = 0; start < n; start += batch_size) {
    int64_t stop = std::min(n, start + batch_size);
    idx.resize(static_cast<size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    auto [images, labels] = data.batch(idx);
    ForwardResult fr = model_forward(model, images, RunMode::Eval);
    Tensor loss = cross_entropy(fr.logits, labels, label_smoothing);
    loss_sum += loss.data()[0] * static_cast<double>(stop - start);
    const std::vector<double>& lg = fr.logits.data();
    for (int64_t i = 0; i < stop - start; ++i)
      if (argmax_of_row(lg, i, fr.logits.dim(1)) == labels[static_cast<size_t>(i)]) ++correct;
  }
  EvalResult res;
  res.count = n;
  if (n > 0) {
    res.loss = loss_sum / static_cast<double>(n);
    res.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  }
  return res;
}

void convert_checkpoint(const fs::path& in, const fs::path& out) {
  Checkpoint ckpt = Checkpoint::load(in);
  CheckpointMeta meta = meta_from_checkpoint(ckpt);
  Model model = model_from_checkpoint(ckpt);
  Model dense = convert_model(model);
  meta.moe_blocks.clear();
  if (meta.has_train_config) meta.train_config.moe.enabled = false;
  checkpoint_from_model(dense, meta).save(out);
}

BenchReport bench_latency(const TrainConfig& config, int64_t reps) {
  check_value(reps >= 3, "bench: need at least 3 reps");
  config.model.validate();

  Rng init_dense = Rng::stream(config.seed, "init");
  Model dense = build_model(config.model, init_dense);
  Rng init_bank = Rng::stream(config.seed, "init");
  PlacementPolicy placement{config.moe.parsed_placement()};
  Model bank = build_ewa_model(config.model, placement, config.moe.spec(), init_bank);

  Rng data_rng = Rng::stream(config.seed, "bench.data");
  int64_t bsz = config.batch_size;
  Tensor images = Tensor::randn(
      {bsz, config.model.in_channels, config.model.image_size, config.model.image_size},
      data_rng);
  std::vector<int64_t> labels(static_cast<size_t>(bsz));
  for (int64_t& l : labels) l = data_rng.uniform_int(config.model.n_classes);

  // Reps alternate between the two models being compared so slow drift in
  // machine state (page cache, heap layout, frequency scaling) lands on both
  // sides of each ratio instead of biasing whichever ran last.
  constexpr int64_t kWarmup = 2;
  auto step_once = [&](Model& m, Optimizer& opt, Rng& step_rng, bool averaging) {
    auto t0 = Clock::now();
    Graph::get().clear();
    ForwardResult fr = model_forward(m, images, RunMode::Train, &step_rng);
    Tensor loss = cross_entropy(fr.logits, labels, 0.0);
    if (fr.balance_loss.defined()) loss = add(loss, fr.balance_loss);
    backward(loss);
    opt.step(config.optimizer.lr);
    if (averaging)
      for (int64_t bi : m.moe_block_indices()) {
        MoELayer& layer = *m.blocks[static_cast<size_t>(bi)].moe;
        copy_bank(layer.experts, ewa_step(layer.experts, 0.3));
      }
    return ms_between(t0, Clock::now());
  };

  BenchReport report;
  report.reps = reps;
  {
    Optimizer dense_opt(config.optimizer, dense.named_params());
    Optimizer bank_opt(config.optimizer, bank.named_params());
    Rng dense_rng = Rng::stream(config.seed, "bench.step");
    Rng bank_rng = Rng::stream(config.seed, "bench.step");
    std::vector<double> dense_samples, bank_samples;
    for (int64_t r = 0; r < reps + kWarmup; ++r) {
      double dense_ms = step_once(dense, dense_opt, dense_rng, false);
      double bank_ms = step_once(bank, bank_opt, bank_rng, true);
      if (r >= kWarmup) {
        dense_samples.push_back(dense_ms);
        bank_samples.push_back(bank_ms);
      }
    }
    Graph::get().clear();
    report.dense_step_ms = median_of(dense_samples);
    report.ewa_step_ms = median_of(bank_samples);
  }
  report.step_ratio = report.ewa_step_ms / report.dense_step_ms;

  Model converted = convert_model(bank);
  auto infer_once = [&](const Model& m) {
    auto t0 = Clock::now();
    model_forward(m, images, RunMode::Eval);
    return ms_between(t0, Clock::now());
  };
  {
    NoGradGuard no_grad;
    std::vector<double> dense_samples, converted_samples;
    for (int64_t r = 0; r < reps + kWarmup; ++r) {
      double dense_ms = infer_once(dense);
      double converted_ms = infer_once(converted);
      if (r >= kWarmup) {
        dense_samples.push_back(dense_ms);
        converted_samples.push_back(converted_ms);
      }
    }
    report.dense_infer_ms = median_of(dense_samples);
    report.converted_infer_ms = median_of(converted_samples);
  }
  report.infer_ratio = report.converted_infer_ms / report.dense_infer_ms;
  return report;
}

}  // namespace ewa
