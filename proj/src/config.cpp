#include "ewa/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ewa/common.hpp"

namespace ewa {

using nlohmann::json;

MoEMode MoEOptions::parsed_mode() const {
  if (mode == "rup") return MoEMode::RUP;
  if (mode == "topk") return MoEMode::TopK;
  throw ValueError("config: moe.mode must be 'rup' or 'topk', got '" + mode + "'");
}

PlacementKind MoEOptions::parsed_placement() const {
  if (placement == "every-2") return PlacementKind::Every2;
  if (placement == "last-4") return PlacementKind::Last4;
  throw ValueError("config: moe.placement must be 'every-2' or 'last-4', got '" +
                   placement + "'");
}

MoESpec MoEOptions::spec() const {
  MoESpec s;
  s.n_experts = n_experts;
  s.mode = parsed_mode();
  s.top_k = top_k;
  s.capacity_ratio = capacity_ratio;
  s.balance_weight = balance_weight;
  return s;
}

ScheduleKind EwaOptions::parsed_kind() const {
  if (schedule == "linear") return ScheduleKind::Linear;
  if (schedule == "constant") return ScheduleKind::Constant;
  throw ValueError("config: ewa.schedule must be 'linear' or 'constant', got '" +
                   schedule + "'");
}

ScheduleGranularity EwaOptions::parsed_granularity() const {
  if (granularity == "per-epoch") return ScheduleGranularity::PerEpoch;
  if (granularity == "per-step") return ScheduleGranularity::PerStep;
  throw ValueError("config: ewa.granularity must be 'per-epoch' or 'per-step', got '" +
                   granularity + "'");
}

ShareSchedule EwaOptions::schedule_for(int64_t horizon) const {
  ShareSchedule s;
  s.kind = parsed_kind();
  s.share_rate = share_rate;
  s.horizon = horizon;
  s.granularity = parsed_granularity();
  s.early_cutoff = early_cutoff;
  return s;
}

void TrainConfig::validate() const {
  model.validate();
  check_value(epochs > 0 || steps > 0, "config: epochs or steps must be positive");
  check_value(batch_size > 0, "config: batch_size must be positive");
  check_value(warmup_fraction >= 0.0 && warmup_fraction < 1.0,
              "config: warmup_fraction must be in [0, 1)");
  check_value(label_smoothing >= 0.0 && label_smoothing < 1.0,
              "config: label_smoothing must be in [0, 1)");
  check_value(mixup_alpha >= 0.0, "config: mixup_alpha must be non-negative");
  if (moe.enabled) {
    check_value(moe.n_experts >= 1, "config: moe.n_experts must be >= 1");
    moe.parsed_mode();
    PlacementKind pk = moe.parsed_placement();
    if (pk == PlacementKind::Last4)
      check_value(model.depth >= 4, "config: last-4 placement needs depth >= 4");
    else
      check_value(model.depth >= 2, "config: every-2 placement needs depth >= 2");
    if (moe.parsed_mode() == MoEMode::TopK) {
      check_value(moe.top_k >= 1 && moe.top_k <= moe.n_experts,
                  "config: moe.top_k must be in [1, n_experts]");
      check_value(moe.capacity_ratio > 0.0, "config: moe.capacity_ratio must be positive");
    }
  }
  check_value(ewa.share_rate >= 0.0 && ewa.share_rate < 1.0,
              "config: ewa.share_rate must be in [0, 1)");
  check_value(ewa.early_cutoff > 0.0 && ewa.early_cutoff <= 1.0,
              "config: ewa.early_cutoff must be in (0, 1]");
  ewa.parsed_kind();
  ewa.parsed_granularity();
}

TrainConfig default_config() {
  TrainConfig cfg;
  cfg.optimizer.kind = OptimKind::AdamW;
  cfg.optimizer.lr = 1e-3;
  cfg.optimizer.weight_decay = 0.05;
  return cfg;
}

TrainConfig full_scale_config() {
  TrainConfig cfg;
  cfg.model.image_size = 224;
  cfg.model.patch_size = 16;
  cfg.model.in_channels = 3;
  cfg.model.d_model = 384;
  cfg.model.n_heads = 6;
  cfg.model.depth = 12;
  cfg.model.mlp_ratio = 4.0;
  cfg.model.n_classes = 1000;
  cfg.moe.enabled = true;
  cfg.moe.n_experts = 8;
  cfg.moe.mode = "rup";
  cfg.moe.placement = "every-2";
  cfg.ewa.schedule = "linear";
  cfg.ewa.share_rate = 0.3;
  cfg.ewa.granularity = "per-epoch";
  cfg.optimizer.kind = OptimKind::AdamW;
  cfg.optimizer.lr = 0.0006;
  cfg.optimizer.weight_decay = 0.06;
  cfg.epochs = 300;
  cfg.batch_size = 128;
  cfg.warmup_fraction = 0.1;
  cfg.label_smoothing = 0.1;
  cfg.run_name = "full_scale";
  return cfg;
}

namespace {

void expect_keys(const json& j, std::initializer_list<const char*> allowed,
                 const char* where) {
  if (!j.is_object())
    throw ParseError(std::string("config: ") + where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ParseError(std::string("config: unknown key '") + it.key() + "' in " + where);
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

json model_to_json(const ViTConfig& m) {
  return json{{"image_size", m.image_size},
              {"patch_size", m.patch_size},
              {"in_channels", m.in_channels},
              {"d_model", m.d_model},
              {"n_heads", m.n_heads},
              {"depth", m.depth},
              {"mlp_ratio", m.mlp_ratio},
              {"n_classes", m.n_classes},
              {"dropout", m.dropout},
              {"attn_dropout", m.attn_dropout},
              {"stochastic_depth", m.stochastic_depth}};
}

ViTConfig model_from_json(const json& j) {
  expect_keys(j,
              {"image_size", "patch_size", "in_channels", "d_model", "n_heads", "depth",
               "mlp_ratio", "n_classes", "dropout", "attn_dropout", "stochastic_depth"},
              "model");
  ViTConfig m;
  read_field(j, "image_size", m.image_size);
  read_field(j, "patch_size", m.patch_size);
  read_field(j, "in_channels", m.in_channels);
  read_field(j, "d_model", m.d_model);
  read_field(j, "n_heads", m.n_heads);
  read_field(j, "depth", m.depth);
  read_field(j, "mlp_ratio", m.mlp_ratio);
  read_field(j, "n_classes", m.n_classes);
  read_field(j, "dropout", m.dropout);
  read_field(j, "attn_dropout", m.attn_dropout);
  read_field(j, "stochastic_depth", m.stochastic_depth);
  return m;
}

json dataset_to_json(const DatasetSpec& d) {
  json j{{"kind", d.kind}};
  if (d.kind == "synthetic") {
    j["n_train"] = d.synthetic.n_train;
    j["n_eval"] = d.synthetic.n_eval;
    j["classes"] = d.synthetic.n_classes;
    j["size"] = d.synthetic.image_size;
    j["channels"] = d.synthetic.channels;
    j["seed"] = d.synthetic.generator_seed;
    j["noise"] = d.synthetic.noise;
    j["shift"] = d.synthetic.shift;
  } else if (d.kind == "idx") {
    j["images"] = d.images_path;
    j["labels"] = d.labels_path;
    if (!d.eval_images_path.empty()) j["eval_images"] = d.eval_images_path;
    if (!d.eval_labels_path.empty()) j["eval_labels"] = d.eval_labels_path;
  } else if (d.kind == "csv") {
    j["train"] = d.csv_path;
    if (!d.eval_csv_path.empty()) j["eval"] = d.eval_csv_path;
  }
  return j;
}

DatasetSpec dataset_from_json(const json& j) {
  DatasetSpec d;
  read_field(j, "kind", d.kind);
  if (d.kind == "synthetic") {
    expect_keys(j, {"kind", "n_train", "n_eval", "classes", "size", "channels", "seed",
                    "noise", "shift"},
                "dataset");
    read_field(j, "n_train", d.synthetic.n_train);
    read_field(j, "n_eval", d.synthetic.n_eval);
    read_field(j, "classes", d.synthetic.n_classes);
    read_field(j, "size", d.synthetic.image_size);
    read_field(j, "channels", d.synthetic.channels);
    read_field(j, "seed", d.synthetic.generator_seed);
    read_field(j, "noise", d.synthetic.noise);
    read_field(j, "shift", d.synthetic.shift);
  } else if (d.kind == "idx") {
    expect_keys(j, {"kind", "images", "labels", "eval_images", "eval_labels"}, "dataset");
    read_field(j, "images", d.images_path);
    read_field(j, "labels", d.labels_path);
    read_field(j, "eval_images", d.eval_images_path);
    read_field(j, "eval_labels", d.eval_labels_path);
  } else if (d.kind == "csv") {
    expect_keys(j, {"kind", "train", "eval"}, "dataset");
    read_field(j, "train", d.csv_path);
    read_field(j, "eval", d.eval_csv_path);
  } else {
    throw ParseError("config: dataset.kind must be 'synthetic', 'idx' or 'csv', got '" +
                     d.kind + "'");
  }
  return d;
}

std::string optim_kind_str(OptimKind k) { return k == OptimKind::Sgd ? "sgd" : "adamw"; }

OptimKind optim_kind_from_str(const std::string& s) {
  if (s == "sgd") return OptimKind::Sgd;
  if (s == "adamw") return OptimKind::AdamW;
  throw ParseError("config: optimizer.kind must be 'sgd' or 'adamw', got '" + s + "'");
}

json config_to_json_obj(const TrainConfig& cfg) {
  json j;
  j["model"] = model_to_json(cfg.model);
  j["moe"] = json{{"enabled", cfg.moe.enabled},
                  {"n_experts", cfg.moe.n_experts},
                  {"mode", cfg.moe.mode},
                  {"placement", cfg.moe.placement},
                  {"top_k", cfg.moe.top_k},
                  {"capacity_ratio", cfg.moe.capacity_ratio},
                  {"balance_weight", cfg.moe.balance_weight}};
  j["ewa"] = json{{"schedule", cfg.ewa.schedule},
                  {"share_rate", cfg.ewa.share_rate},
                  {"granularity", cfg.ewa.granularity},
                  {"early_cutoff", cfg.ewa.early_cutoff}};
  j["optimizer"] = json{{"kind", optim_kind_str(cfg.optimizer.kind)},
                        {"lr", cfg.optimizer.lr},
                        {"weight_decay", cfg.optimizer.weight_decay},
                        {"momentum", cfg.optimizer.momentum},
                        {"beta1", cfg.optimizer.beta1},
                        {"beta2", cfg.optimizer.beta2},
                        {"eps", cfg.optimizer.eps}};
  j["epochs"] = cfg.epochs;
  j["steps"] = cfg.steps;
  j["batch_size"] = cfg.batch_size;
  j["warmup_fraction"] = cfg.warmup_fraction;
  j["label_smoothing"] = cfg.label_smoothing;
  j["seed"] = cfg.seed;
  j["dataset"] = dataset_to_json(cfg.dataset);
  j["mixup_alpha"] = cfg.mixup_alpha;
  j["random_flip"] = cfg.random_flip;
  j["run_name"] = cfg.run_name;
  return j;
}

TrainConfig config_from_json_obj(const json& j) {
  expect_keys(j,
              {"model", "moe", "ewa", "optimizer", "epochs", "steps", "batch_size",
               "warmup_fraction", "label_smoothing", "seed", "dataset", "mixup_alpha",
               "random_flip", "run_name"},
              "top level");
  TrainConfig cfg = default_config();
  if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
  if (j.contains("moe")) {
    const json& m = j.at("moe");
    expect_keys(m,
                {"enabled", "n_experts", "mode", "placement", "top_k", "capacity_ratio",
                 "balance_weight"},
                "moe");
    read_field(m, "enabled", cfg.moe.enabled);
    read_field(m, "n_experts", cfg.moe.n_experts);
    read_field(m, "mode", cfg.moe.mode);
    read_field(m, "placement", cfg.moe.placement);
    read_field(m, "top_k", cfg.moe.top_k);
    read_field(m, "capacity_ratio", cfg.moe.capacity_ratio);
    read_field(m, "balance_weight", cfg.moe.balance_weight);
  }
  if (j.contains("ewa")) {
    const json& e = j.at("ewa");
    expect_keys(e, {"schedule", "share_rate", "granularity", "early_cutoff"}, "ewa");
    read_field(e, "schedule", cfg.ewa.schedule);
    read_field(e, "share_rate", cfg.ewa.share_rate);
    read_field(e, "granularity", cfg.ewa.granularity);
    read_field(e, "early_cutoff", cfg.ewa.early_cutoff);
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    expect_keys(o, {"kind", "lr", "weight_decay", "momentum", "beta1", "beta2", "eps"},
                "optimizer");
    std::string kind = optim_kind_str(cfg.optimizer.kind);
    read_field(o, "kind", kind);
    cfg.optimizer.kind = optim_kind_from_str(kind);
    read_field(o, "lr", cfg.optimizer.lr);
    read_field(o, "weight_decay", cfg.optimizer.weight_decay);
    read_field(o, "momentum", cfg.optimizer.momentum);
    read_field(o, "beta1", cfg.optimizer.beta1);
    read_field(o, "beta2", cfg.optimizer.beta2);
    read_field(o, "eps", cfg.optimizer.eps);
  }
  read_field(j, "epochs", cfg.epochs);
  read_field(j, "steps", cfg.steps);
  read_field(j, "batch_size", cfg.batch_size);
  read_field(j, "warmup_fraction", cfg.warmup_fraction);
  read_field(j, "label_smoothing", cfg.label_smoothing);
  read_field(j, "seed", cfg.seed);
  if (j.contains("dataset")) cfg.dataset = dataset_from_json(j.at("dataset"));
  read_field(j, "mixup_alpha", cfg.mixup_alpha);
  read_field(j, "random_flip", cfg.random_flip);
  read_field(j, "run_name", cfg.run_name);
  return cfg;
}

}  // namespace

std::string config_to_json(const TrainConfig& config) {
  return config_to_json_obj(config).dump(2) + "\n";
}

std::string model_config_to_json(const ViTConfig& config) {
  return model_to_json(config).dump(2);
}

ViTConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: invalid JSON: ") + e.what());
  }
  return model_from_json(j);
}

TrainConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from_json_obj(j);
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

void apply_override(TrainConfig& config, const std::string& key, const std::string& value) {
  check_value(!key.empty(), "config: empty override key");
  json j = config_to_json_obj(config);
  std::string pointer = "/";
  for (char c : key) pointer += (c == '.') ? '/' : c;
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // bare strings like rup or per-step
  }
  try {
    json::json_pointer ptr(pointer);
    if (!j.contains(ptr))
      throw ParseError("config: no such setting '" + key + "'");
    // keep the stored type: a quoted number must not retype a string field
    if (j.at(ptr).is_string() && !parsed.is_string()) parsed = value;
    j[ptr] = parsed;
  } catch (const json::exception& e) {
    throw ParseError("config: bad override '" + key + "': " + e.what());
  }
  config = config_from_json_obj(j);
}

}  // namespace ewa
