#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ewa/theory.hpp"
#include "ewa/train.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string dataset;
  std::string out_dir;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;
  bool full_scale = false;
};

void add_common(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--config", opts.config_path, "config JSON file");
  sub->add_flag("--full-scale", opts.full_scale,
                "start from the full-scale recipe instead of desk defaults");
  sub->add_option("--dataset", opts.dataset,
                  "dataset shorthand: synthetic:k=v,..., idx:IMAGES,LABELS[,EVAL_I,EVAL_L] "
                  "or csv:TRAIN[,EVAL]");
  sub->add_option("--out", opts.out_dir, "output directory (metrics, checkpoints)");
  auto* seed_opt = sub->add_option("--seed", opts.seed, "master seed override");
  sub->add_option("--set", opts.sets, "config override, dotted key=value (repeatable)")
      ->take_all();
  sub->parse_complete_callback([seed_opt, &opts] { opts.seed_given = seed_opt->count() > 0; });
}

ewa::TrainConfig make_config(const CommonOpts& opts) {
  ewa::TrainConfig cfg;
  if (!opts.config_path.empty())
    cfg = ewa::load_config(opts.config_path);
  else if (opts.full_scale)
    cfg = ewa::full_scale_config();
  else
    cfg = ewa::default_config();
  if (!opts.dataset.empty()) cfg.dataset = ewa::parse_dataset_arg(opts.dataset);
  for (const std::string& kv : opts.sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ewa::ParseError("--set expects key=value, got '" + kv + "'");
    ewa::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.seed_given) cfg.seed = opts.seed;
  return cfg;
}

void print_run(const ewa::TrainConfig& cfg, const ewa::TrainResult& res,
               const std::string& out_dir) {
  std::printf("done: %zu epochs, %zu steps, %.1f s, averaging passes %lld\n",
              res.epochs.size(), res.steps.size(), res.total_seconds,
              static_cast<long long>(res.ewa_applications));
  if (!res.epochs.empty() && res.epochs.back().eval.count > 0) {
    const ewa::EvalResult& ev = res.epochs.back().eval;
    std::printf("final eval (deployment copy): loss %.4f  accuracy %.4f  (n=%lld)\n",
                ev.loss, ev.accuracy, static_cast<long long>(ev.count));
  }
  if (!out_dir.empty())
    std::printf("wrote %s/metrics.csv, checkpoint_final.ewac, checkpoint_converted.ewac\n",
                out_dir.c_str());
  (void)cfg;
}

ewa::EpochCallback epoch_printer(int64_t epochs_total) {
  return [epochs_total](const ewa::EpochRecord& er) {
    if (er.eval.count > 0)
      std::printf("epoch %lld/%lld  step %lld  eval loss %.4f  accuracy %.4f\n",
                  static_cast<long long>(er.epoch + 1), static_cast<long long>(epochs_total),
                  static_cast<long long>(er.step), er.eval.loss, er.eval.accuracy);
    else
      std::printf("epoch %lld/%lld  step %lld\n", static_cast<long long>(er.epoch + 1),
                  static_cast<long long>(epochs_total), static_cast<long long>(er.step));
    std::fflush(stdout);
  };
}

int run_verify_theory(uint64_t seed, const std::string& csv_path) {
  using namespace ewa;
  const int64_t d = 6, h = 8, T = 5;
  const double eta = 0.01;
  const double kSingleStepTol = 1e-10, kUnrolledTol = 1e-8, kDecayTol = 1e-8;

  Rng rng(seed);
  Tensor X = Tensor::randn({T, d}, rng);
  Tensor Y = Tensor::randn({T, d}, rng);
  ProbeLoss loss = [X, Y](const std::vector<FFNParams>& bank) {
    Tensor total;
    for (const FFNParams& e : bank) {
      Tensor diff = sub(ffn_forward(e, X), Y);
      Tensor sq = sum_all(mul(diff, diff));
      total = total.defined() ? add(total, sq) : sq;
    }
    return scale(total, 1.0 / static_cast<double>(bank.size()));
  };

  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path, std::ios::trunc);
    if (!csv) throw IoError("verify-theory: cannot write " + csv_path);
    csv << "n_experts,steps,beta,single_step_gap,unrolled_gap,decay_expected,"
           "decay_measured,decay_abs_err,history_monotone\n";
  }

  struct GridPoint {
    int64_t n, m;
  };
  const GridPoint grid[] = {{2, 3}, {4, 5}, {4, 10}};
  const double betas[] = {0.1, 0.3, 0.5};

  bool all_ok = true;
  double worst_single = 0, worst_unrolled = 0, worst_decay = 0;
  for (const GridPoint& g : grid) {
    for (double beta : betas) {
      std::vector<FFNParams> bank;
      for (int64_t i = 0; i < g.n; ++i) bank.push_back(FFNParams::init(d, h, rng));
      Trajectory traj = record_trajectory(bank, loss, g.m, eta, beta);
      double ss = verify_single_step(traj);
      double un = verify_unrolled(traj);
      DecayHistoryReport rep = decay_and_history_report(traj);
      worst_single = std::max(worst_single, ss);
      worst_unrolled = std::max(worst_unrolled, un);
      worst_decay = std::max(worst_decay, rep.decay_abs_err);
      bool ok = ss < kSingleStepTol && un < kUnrolledTol && rep.decay_abs_err < kDecayTol &&
                rep.history_monotone;
      all_ok = all_ok && ok;
      std::printf(
          "N=%lld m=%-2lld beta=%.1f  single-step %.2e  unrolled %.2e  "
          "start-decay %.6f (expected %.6f, |err| %.2e)  history %s  %s\n",
          static_cast<long long>(g.n), static_cast<long long>(g.m), beta, ss, un,
          rep.decay_measured, rep.decay_expected, rep.decay_abs_err,
          rep.history_monotone ? "monotone" : "NOT MONOTONE", ok ? "ok" : "FAIL");
      if (csv.is_open())
        csv << g.n << ',' << g.m << ',' << beta << ',' << ss << ',' << un << ','
            << rep.decay_expected << ',' << rep.decay_measured << ',' << rep.decay_abs_err
            << ',' << (rep.history_monotone ? 1 : 0) << '\n';
    }
  }
  std::printf("worst gaps: single-step %.2e (tol %.0e), unrolled %.2e (tol %.0e), "
              "decay %.2e (tol %.0e)\n",
              worst_single, kSingleStepTol, worst_unrolled, kUnrolledTol, worst_decay,
              kDecayTol);
  std::printf(all_ok ? "theory checks passed\n" : "theory checks FAILED\n");
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  ewa::tune_allocator();

  CLI::App app{"vision transformer training with weight-averaged expert banks"};
  app.require_subcommand(1);

  CommonOpts train_opts, finetune_opts, bench_opts, dump_opts;
  std::string ckpt_path, out_path, csv_path;
  int64_t bench_reps = 15;
  int64_t eval_batch = 128;
  uint64_t theory_seed = 1234;

  CLI::App* cmd_train = app.add_subcommand("train", "train a model from scratch");
  add_common(cmd_train, train_opts);

  CLI::App* cmd_finetune = app.add_subcommand(
      "finetune", "expand a dense checkpoint into expert banks and keep training");
  add_common(cmd_finetune, finetune_opts);
  cmd_finetune->add_option("--checkpoint", ckpt_path, "dense source checkpoint")->required();

  CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  cmd_eval->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate")->required();
  cmd_eval->add_option("--dataset", csv_path,
                       "dataset shorthand; default: the one recorded in the checkpoint");
  cmd_eval->add_option("--batch-size", eval_batch, "evaluation batch size");

  CLI::App* cmd_convert =
      app.add_subcommand("convert", "collapse expert banks to their mean (dense checkpoint)");
  cmd_convert->add_option("--checkpoint", ckpt_path, "source checkpoint")->required();
  cmd_convert->add_option("--out", out_path, "output checkpoint path")->required();

  CLI::App* cmd_verify = app.add_subcommand(
      "verify-theory", "check recorded training against the closed-form averaging identities");
  cmd_verify->add_option("--seed", theory_seed, "probe seed");
  cmd_verify->add_option("--csv", csv_path, "write per-run results to a CSV file");

  CLI::App* cmd_bench =
      app.add_subcommand("bench", "step and inference latency, dense vs expert banks");
  add_common(cmd_bench, bench_opts);
  cmd_bench->add_option("--reps", bench_reps, "timed repetitions per measurement");

  CLI::App* cmd_dump = app.add_subcommand("dump-config", "print a config JSON to stdout");
  add_common(cmd_dump, dump_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (cmd_train->parsed()) {
      ewa::TrainConfig cfg = make_config(train_opts);
      ewa::TrainResult res = ewa::train(cfg, train_opts.out_dir, epoch_printer(cfg.epochs));
      print_run(cfg, res, train_opts.out_dir);
    } else if (cmd_finetune->parsed()) {
      ewa::TrainConfig cfg = make_config(finetune_opts);
      ewa::TrainResult res =
          ewa::finetune(cfg, ckpt_path, finetune_opts.out_dir, epoch_printer(cfg.epochs));
      print_run(cfg, res, finetune_opts.out_dir);
    } else if (cmd_eval->parsed()) {
      ewa::Checkpoint ckpt = ewa::Checkpoint::load(ckpt_path);
      ewa::CheckpointMeta meta = ewa::meta_from_checkpoint(ckpt);
      ewa::Model model = ewa::model_from_checkpoint(ckpt);
      ewa::DatasetSpec spec;
      if (!csv_path.empty())
        spec = ewa::parse_dataset_arg(csv_path);
      else if (meta.has_train_config)
        spec = meta.train_config.dataset;
      else
        throw ewa::ValueError("eval: checkpoint records no dataset, pass --dataset");
      ewa::DataSplits splits = ewa::load_dataset(spec);
      const ewa::Dataset& data = splits.eval ? *splits.eval : splits.train;
      ewa::EvalResult ev = ewa::evaluate(model, data, eval_batch);
      std::printf("model: loss %.4f  accuracy %.4f  (n=%lld)\n", ev.loss, ev.accuracy,
                  static_cast<long long>(ev.count));
      if (model.has_moe()) {
        ewa::EvalResult cv = ewa::evaluate(ewa::convert_model(model), data, eval_batch);
        std::printf("converted (expert means): loss %.4f  accuracy %.4f\n", cv.loss,
                    cv.accuracy);
      }
    } else if (cmd_convert->parsed()) {
      ewa::convert_checkpoint(ckpt_path, out_path);
      std::printf("wrote %s\n", out_path.c_str());
    } else if (cmd_verify->parsed()) {
      return run_verify_theory(theory_seed, csv_path);
    } else if (cmd_bench->parsed()) {
      ewa::TrainConfig cfg = make_config(bench_opts);
      ewa::BenchReport rep = ewa::bench_latency(cfg, bench_reps);
      std::printf("step:      dense %.1f ms, banks+averaging %.1f ms, ratio %.3f\n",
                  rep.dense_step_ms, rep.ewa_step_ms, rep.step_ratio);
      std::printf("inference: dense %.1f ms, converted %.1f ms, ratio %.3f\n",
                  rep.dense_infer_ms, rep.converted_infer_ms, rep.infer_ratio);
    } else if (cmd_dump->parsed()) {
      ewa::TrainConfig cfg = make_config(dump_opts);
      std::cout << ewa::config_to_json(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
