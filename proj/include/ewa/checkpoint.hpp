#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ewa/vit.hpp"

namespace ewa {

enum class CheckpointDtype : uint8_t { F64 = 0, F32 = 1 };

struct ParamRecord {
  std::string name;
  CheckpointDtype dtype = CheckpointDtype::F64;
  Shape shape;
  std::vector<double> values;  // f32 records are widened on load
};

// Container file, little-endian throughout:
//   magic "EWAC", format version u32,
//   config text: u64 length + bytes (JSON: architecture, run position, rng state),
//   then records until end of file, each:
//     name u32 length + bytes, dtype u8 (0 = f64, 1 = f32), rank u8,
//     dims u64 each, raw payload.
struct Checkpoint {
  std::string config_text;
  std::vector<ParamRecord> records;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  const ParamRecord* find(const std::string& name) const;
  void set_storage(CheckpointDtype dtype);  // applies to every record
};

// One record per named parameter, f64, in Model::named_params() order.
std::vector<ParamRecord> param_records(const Model& model);

// Writes record values into an already-built model by name. Every model
// parameter must have a record of matching shape and every record must be
// consumed; anything missing, extra or misshapen is an error naming it.
void load_param_records(Model& model, const std::vector<ParamRecord>& records);

}  // namespace ewa
