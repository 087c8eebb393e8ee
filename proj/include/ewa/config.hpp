#pragma once

#include <filesystem>
#include <string>

#include "ewa/dataset.hpp"
#include "ewa/ewa_scheme.hpp"
#include "ewa/optim.hpp"
#include "ewa/vit.hpp"

namespace ewa {

struct MoEOptions {
  bool enabled = false;
  int64_t n_experts = 4;
  std::string mode = "rup";           // rup | topk
  std::string placement = "every-2";  // every-2 | last-4
  int64_t top_k = 1;                  // topk mode only
  double capacity_ratio = 1.05;
  double balance_weight = 0.01;

  MoEMode parsed_mode() const;
  PlacementKind parsed_placement() const;
  MoESpec spec() const;
};

struct EwaOptions {
  std::string schedule = "linear";  // linear | constant
  double share_rate = 0.3;
  std::string granularity = "per-epoch";  // per-epoch | per-step
  double early_cutoff = 1.0;  // fraction of the run after which sharing stops

  ScheduleKind parsed_kind() const;
  ScheduleGranularity parsed_granularity() const;
  ShareSchedule schedule_for(int64_t horizon) const;
};

struct TrainConfig {
  ViTConfig model;
  MoEOptions moe;
  EwaOptions ewa;
  OptimConfig optimizer;
  int64_t epochs = 20;
  int64_t steps = 0;  // >0 runs a fixed number of steps instead of epochs
  int64_t batch_size = 128;
  double warmup_fraction = 0.1;  // of total optimizer steps
  double label_smoothing = 0.1;
  uint64_t seed = 42;
  DatasetSpec dataset;
  double mixup_alpha = 0.0;  // 0 disables
  bool random_flip = false;
  std::string run_name = "run";

  void validate() const;
};

// Desk-scale defaults: trains in minutes on one core.
TrainConfig default_config();

// Hyperparameters for the full-scale recipe this codebase reproduces in
// miniature. Not runnable on a desk machine; kept for reference runs.
TrainConfig full_scale_config();

std::string config_to_json(const TrainConfig& config);

// Architecture block alone, for embedding in checkpoint metadata.
std::string model_config_to_json(const ViTConfig& config);
ViTConfig model_config_from_json(const std::string& text);

// Strict parse: unknown keys are errors, missing keys keep their defaults.
TrainConfig config_from_json(const std::string& text);

TrainConfig load_config(const std::filesystem::path& path);

// key is a dotted path ("optimizer.lr", "moe.n_experts"); value is parsed as
// JSON when possible and treated as a bare string otherwise.
void apply_override(TrainConfig& config, const std::string& key, const std::string& value);

}  // namespace ewa
