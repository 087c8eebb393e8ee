#pragma once

#include <filesystem>
#include <functional>

#include "ewa/checkpoint.hpp"
#include "ewa/config.hpp"

namespace ewa {

struct StepRecord {
  int64_t epoch = 0;
  int64_t step = 0;    // global optimizer step, 0-based
  double loss = 0;     // batch objective (task + balance term when routed)
  double accuracy = 0; // batch top-1 against the primary labels
  double lr = 0;
  double beta = 0;     // mixing rate applied right after this step, 0 = none
  double ms = 0;
};

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  int64_t count = 0;
};

struct EpochRecord {
  int64_t epoch = 0;
  int64_t step = 0;  // global step at end of epoch
  EvalResult eval;   // of the deployment (mean-collapsed) copy
};

struct TrainResult {
  TrainConfig config;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  int64_t ewa_applications = 0;  // steps followed by an averaging pass (beta > 0)
  double total_seconds = 0;
  Model model;      // final weights
  Model converted;  // deployment copy; equals a deep copy when dense
};

// What a checkpoint knows besides raw weights: enough to rebuild the exact
// module tree and to identify where in a run the weights came from.
struct CheckpointMeta {
  ViTConfig model;
  std::vector<int64_t> moe_blocks;  // empty = dense
  MoEOptions moe;                   // bank shape; relevant when moe_blocks non-empty
  int64_t epoch = 0;
  int64_t global_step = 0;
  std::string model_rng, data_rng, augment_rng;  // serialized stream states
  bool has_train_config = false;
  TrainConfig train_config;
};

Checkpoint checkpoint_from_model(const Model& model, const CheckpointMeta& meta);
CheckpointMeta meta_from_checkpoint(const Checkpoint& ckpt);
Model model_from_checkpoint(const Checkpoint& ckpt);

// Fires right after each epoch's deployment-copy evaluation.
using EpochCallback = std::function<void(const EpochRecord&)>;

// Full training run from fresh initialization. out_dir, when non-empty,
// receives metrics.csv plus rolling and final checkpoints; empty runs
// entirely in memory. Throws DivergenceError on a non-finite loss or
// gradient after saving the last good weights.
TrainResult train(const TrainConfig& config, const std::filesystem::path& out_dir = {},
                  const EpochCallback& on_epoch = {});

// Warm start: dense checkpoint -> expert banks cloned from each replaced FFN
// -> same training loop.
TrainResult finetune(const TrainConfig& config,
                     const std::filesystem::path& dense_checkpoint,
                     const std::filesystem::path& out_dir = {},
                     const EpochCallback& on_epoch = {});

// The expansion step of finetune, exposed for inspection: every placement
// block's FFN becomes n_experts bit-identical copies. The checkpoint must be
// dense and match config.model exactly.
Model build_finetune_model(const Checkpoint& dense, const TrainConfig& config,
                           Rng& router_rng);

// Deterministic full-split evaluation, partial final batch included.
// Top-1 ties resolve to the lower class index.
EvalResult evaluate(const Model& model, const Dataset& data, int64_t batch_size,
                    double label_smoothing = 0.0);

// Expert banks collapsed to their means; output is an ordinary dense model
// checkpoint.
void convert_checkpoint(const std::filesystem::path& in,
                        const std::filesystem::path& out);

struct BenchReport {
  double dense_step_ms = 0;      // forward+backward+update, dense baseline
  double ewa_step_ms = 0;        // same plus bank forward and averaging pass
  double step_ratio = 0;         // ewa / dense
  double dense_infer_ms = 0;     // eval-mode forward, dense baseline
  double converted_infer_ms = 0; // eval-mode forward, mean-collapsed model
  double infer_ratio = 0;        // converted / dense
  int64_t reps = 0;
};

// Median step and inference latency at config's model scale, dense baseline
// against the expert-bank model and its deployment copy.
BenchReport bench_latency(const TrainConfig& config, int64_t reps = 15);

}  // namespace ewa
