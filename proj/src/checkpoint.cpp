#include "ewa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "ewa/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint i/o assumes a little-endian host");

namespace ewa {

namespace {

constexpr char kMagic[4] = {'E', 'W', 'A', 'C'};
constexpr uint32_t kFormatVersion = 1;

void write_bytes(std::ofstream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("checkpoint: write failed");
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  write_bytes(out, &v, sizeof(T));
}

void read_bytes(std::ifstream& in, void* p, size_t n, const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw IoError(std::string("checkpoint: truncated file while reading ") + what);
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
  T v;
  read_bytes(in, &v, sizeof(T), what);
  return v;
}

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open for writing: " + path.string());

  write_bytes(out, kMagic, sizeof(kMagic));
  write_pod<uint32_t>(out, kFormatVersion);
  write_pod<uint64_t>(out, config_text.size());
  if (!config_text.empty()) write_bytes(out, config_text.data(), config_text.size());

  for (const ParamRecord& rec : records) {
    check_value(!rec.name.empty(), "checkpoint: record with empty name");
    int64_t n = shape_numel(rec.shape);
    check_value(static_cast<int64_t>(rec.values.size()) == n,
                "checkpoint: record '" + rec.name + "' has " +
                    std::to_string(rec.values.size()) + " values but shape " +
                    shape_str(rec.shape));
    write_pod<uint32_t>(out, static_cast<uint32_t>(rec.name.size()));
    write_bytes(out, rec.name.data(), rec.name.size());
    write_pod<uint8_t>(out, static_cast<uint8_t>(rec.dtype));
    write_pod<uint8_t>(out, static_cast<uint8_t>(rec.shape.size()));
    for (int64_t d : rec.shape) write_pod<uint64_t>(out, static_cast<uint64_t>(d));
    if (rec.dtype == CheckpointDtype::F64) {
      write_bytes(out, rec.values.data(), sizeof(double) * static_cast<size_t>(n));
    } else {
      std::vector<float> narrow(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i)
        narrow[static_cast<size_t>(i)] = static_cast<float>(rec.values[static_cast<size_t>(i)]);
      write_bytes(out, narrow.data(), sizeof(float) * static_cast<size_t>(n));
    }
  }
  out.close();
  if (!out) throw IoError("checkpoint: close failed: " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open: " + path.string());

  char magic[4];
  read_bytes(in, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ParseError("checkpoint: bad magic in " + path.string());
  uint32_t version = read_pod<uint32_t>(in, "version");
  if (version != kFormatVersion)
    throw ParseError("checkpoint: unsupported format version " + std::to_string(version));

  Checkpoint ckpt;
  uint64_t cfg_len = read_pod<uint64_t>(in, "config length");
  ckpt.config_text.resize(cfg_len);
  if (cfg_len > 0) read_bytes(in, ckpt.config_text.data(), cfg_len, "config text");

  while (true) {
    uint32_t name_len;
    in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (in.gcount() == 0 && in.eof()) break;  // clean end of file
    if (static_cast<size_t>(in.gcount()) != sizeof(name_len))
      throw IoError("checkpoint: truncated record header");

    ParamRecord rec;
    rec.name.resize(name_len);
    read_bytes(in, rec.name.data(), name_len, "record name");
    uint8_t dtype = read_pod<uint8_t>(in, "dtype");
    if (dtype > 1)
      throw ParseError("checkpoint: record '" + rec.name + "' has unknown dtype " +
                       std::to_string(dtype));
    rec.dtype = static_cast<CheckpointDtype>(dtype);
    uint8_t rank = read_pod<uint8_t>(in, "rank");
    rec.shape.resize(rank);
    for (uint8_t i = 0; i < rank; ++i)
      rec.shape[i] = static_cast<int64_t>(read_pod<uint64_t>(in, "dim"));
    int64_t n = shape_numel(rec.shape);
    rec.values.resize(static_cast<size_t>(n));
    if (rec.dtype == CheckpointDtype::F64) {
      read_bytes(in, rec.values.data(), sizeof(double) * static_cast<size_t>(n), "payload");
    } else {
      std::vector<float> narrow(static_cast<size_t>(n));
      read_bytes(in, narrow.data(), sizeof(float) * static_cast<size_t>(n), "payload");
      for (int64_t i = 0; i < n; ++i)
        rec.values[static_cast<size_t>(i)] = static_cast<double>(narrow[static_cast<size_t>(i)]);
    }
    ckpt.records.push_back(std::move(rec));
  }
  return ckpt;
}

const ParamRecord* Checkpoint::find(const std::string& name) const {
  for (const ParamRecord& rec : records)
    if (rec.name == name) return &rec;
  return nullptr;
}

void Checkpoint::set_storage(CheckpointDtype dtype) {
  for (ParamRecord& rec : records) {
    if (rec.dtype == dtype) continue;
    if (dtype == CheckpointDtype::F32) {
      // round-trip through f32 now so saved bytes and in-memory values agree
      for (double& v : rec.values) v = static_cast<double>(static_cast<float>(v));
    }
    rec.dtype = dtype;
  }
}

std::vector<ParamRecord> param_records(const Model& model) {
  std::vector<ParamRecord> out;
  for (const auto& [name, t] : model.named_params()) {
    ParamRecord rec;
    rec.name = name;
    rec.dtype = CheckpointDtype::F64;
    rec.shape = t.shape();
    rec.values = t.data();
    out.push_back(std::move(rec));
  }
  return out;
}

void load_param_records(Model& model, const std::vector<ParamRecord>& records) {
  std::unordered_map<std::string, const ParamRecord*> by_name;
  for (const ParamRecord& rec : records) {
    if (!by_name.emplace(rec.name, &rec).second)
      throw ValueError("checkpoint: duplicate record '" + rec.name + "'");
  }
  std::unordered_set<std::string> used;
  for (auto& [name, t] : model.named_params()) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ValueError("checkpoint: missing record for parameter '" + name + "'");
    const ParamRecord& rec = *it->second;
    if (rec.shape != t.shape())
      throw ValueError("checkpoint: parameter '" + name + "' has shape " +
                       shape_str(t.shape()) + " but record has " + shape_str(rec.shape));
    std::copy(rec.values.begin(), rec.values.end(), t.data().begin());
    used.insert(name);
  }
  for (const ParamRecord& rec : records) {
    if (!used.count(rec.name))
      throw ValueError("checkpoint: record '" + rec.name + "' matches no model parameter");
  }
}

}  // namespace ewa
