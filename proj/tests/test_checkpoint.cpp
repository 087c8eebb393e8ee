#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "ewa/checkpoint.hpp"
#include "ewa/ewa_scheme.hpp"

using namespace ewa;
namespace fs = std::filesystem;

namespace {

fs::path scratch_file(const char* name) {
  fs::path dir = fs::temp_directory_path() / "ewa_checkpoint_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<uint8_t> file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

Checkpoint sample_checkpoint() {
  Checkpoint ckpt;
  ckpt.config_text = "{\"note\":\"sample\"}";
  ParamRecord a;
  a.name = "alpha";
  a.shape = {2, 3};
  a.values = {1.0, -2.5, 3.25, 0.0, 1e-17, -7.75};
  ParamRecord b;
  b.name = "beta";
  b.shape = {4};
  b.values = {0.1, 0.2, 0.3, 0.4};
  ckpt.records = {a, b};
  return ckpt;
}

ViTConfig small_config() {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.in_channels = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.depth = 2;
  cfg.mlp_ratio = 2.0;
  cfg.n_classes = 3;
  return cfg;
}

}  // namespace

TEST_CASE("f64 checkpoints roundtrip bit-exactly") {
  const fs::path path = scratch_file("roundtrip.ewac");
  Checkpoint ckpt = sample_checkpoint();
  ckpt.save(path);
  Checkpoint back = Checkpoint::load(path);

  CHECK(back.config_text == ckpt.config_text);
  REQUIRE(back.records.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(back.records[i].name == ckpt.records[i].name);
    CHECK(back.records[i].dtype == CheckpointDtype::F64);
    CHECK(back.records[i].shape == ckpt.records[i].shape);
    CHECK(back.records[i].values == ckpt.records[i].values);  // bitwise for doubles
  }

  // saving the loaded copy reproduces the file byte for byte
  const fs::path again = scratch_file("roundtrip2.ewac");
  back.save(again);
  CHECK(file_bytes(path) == file_bytes(again));

  const ParamRecord* hit = back.find("beta");
  REQUIRE(hit != nullptr);
  CHECK(hit->shape == Shape{4});
  CHECK(back.find("gamma") == nullptr);
}

TEST_CASE("f32 storage rounds values once and stays stable") {
  const fs::path path = scratch_file("f32.ewac");
  Checkpoint ckpt = sample_checkpoint();
  ckpt.set_storage(CheckpointDtype::F32);
  // in-memory values already match what the file will hold
  CHECK(ckpt.records[0].values[1] == static_cast<double>(static_cast<float>(-2.5)));
  CHECK(ckpt.records[0].values[4] == static_cast<double>(static_cast<float>(1e-17)));
  ckpt.save(path);

  Checkpoint back = Checkpoint::load(path);
  REQUIRE(back.records.size() == 2);
  CHECK(back.records[0].dtype == CheckpointDtype::F32);
  for (size_t i = 0; i < 2; ++i) CHECK(back.records[i].values == ckpt.records[i].values);

  // a second save of the same values is byte-identical (rounding is idempotent)
  const fs::path again = scratch_file("f32_again.ewac");
  back.save(again);
  CHECK(file_bytes(path) == file_bytes(again));

  // f32 payload is roughly half the f64 one
  const fs::path wide = scratch_file("f64_wide.ewac");
  sample_checkpoint().save(wide);
  CHECK(fs::file_size(path) < fs::file_size(wide));
}

TEST_CASE("corrupt files fail with the right error category") {
  const fs::path path = scratch_file("corrupt.ewac");
  sample_checkpoint().save(path);
  const std::vector<uint8_t> good = file_bytes(path);

  CHECK_THROWS_AS(Checkpoint::load(scratch_file("nonexistent.ewac")), IoError);

  auto write_prefix = [&](size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(good.data()), static_cast<std::streamsize>(n));
  };

  // bad magic
  {
    std::vector<uint8_t> bad = good;
    bad[0] = 'X';
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bad.data()), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_AS(Checkpoint::load(path), ParseError);

  // unsupported version
  {
    std::vector<uint8_t> bad = good;
    bad[4] = 99;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bad.data()), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_AS(Checkpoint::load(path), ParseError);

  // unknown dtype code inside a record
  {
    std::vector<uint8_t> bad = good;
    // find the first record: magic(4) + version(4) + u64 len + config bytes,
    // then name u32 + "alpha" + dtype byte
    size_t off = 8;
    uint64_t cfg_len = 0;
    for (int i = 0; i < 8; ++i) cfg_len |= static_cast<uint64_t>(bad[off + i]) << (8 * i);
    off += 8 + cfg_len + 4 + 5;  // skip config, name length, name
    bad[off] = 42;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bad.data()), static_cast<std::streamsize>(bad.size()));
  }
  CHECK_THROWS_AS(Checkpoint::load(path), ParseError);

  // truncations at various depths all surface as IoError, never garbage
  for (size_t cut : {2u, 6u, 10u, 30u, 60u}) {
    if (cut >= good.size()) continue;
    write_prefix(cut);
    CHECK_THROWS_AS(Checkpoint::load(path), IoError);
  }

  // empty file
  write_prefix(0);
  CHECK_THROWS_AS(Checkpoint::load(path), IoError);
}

TEST_CASE("model parameters roundtrip through records bitwise") {
  Rng rng(61);
  ViTConfig cfg = small_config();
  MoESpec spec;
  spec.n_experts = 3;
  spec.mode = MoEMode::TopK;
  Model m = build_ewa_model(cfg, PlacementPolicy{}, spec, rng);

  std::vector<ParamRecord> records = param_records(m);
  auto params = m.named_params();
  REQUIRE(records.size() == params.size());
  bool saw_expert = false, saw_router = false;
  for (size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].name == params[i].first);
    CHECK(records[i].shape == params[i].second.shape());
    CHECK(records[i].values == params[i].second.data());
    saw_expert |= records[i].name == "blocks.1.moe.experts.1.w2";
    saw_router |= records[i].name == "blocks.1.moe.router_w";
  }
  CHECK(saw_expert);
  CHECK(saw_router);

  // write into a differently-initialized skeleton and compare all leaves
  Rng rng2(62);
  Model fresh = build_ewa_model(cfg, PlacementPolicy{}, spec, rng2);
  load_param_records(fresh, records);
  auto fresh_params = fresh.named_params();
  for (size_t i = 0; i < fresh_params.size(); ++i)
    CHECK(fresh_params[i].second.data() == params[i].second.data());
}

TEST_CASE("record mismatches name the offending parameter") {
  Rng rng(63);
  Model m = build_model(small_config(), rng);
  std::vector<ParamRecord> records = param_records(m);

  auto expect_value_error = [&](std::vector<ParamRecord> broken, const char* needle) {
    try {
      load_param_records(m, broken);
      FAIL("expected ValueError for ", needle);
    } catch (const ValueError& e) {
      const std::string msg = e.what();
      INFO(msg);
      CHECK(msg.find(needle) != std::string::npos);
    }
  };

  std::vector<ParamRecord> missing = records;
  missing.erase(missing.begin());  // drop patch_embed.w
  expect_value_error(missing, "patch_embed.w");

  std::vector<ParamRecord> extra = records;
  ParamRecord stray;
  stray.name = "blocks.9.ffn.w1";
  stray.shape = {1};
  stray.values = {0.0};
  extra.push_back(stray);
  expect_value_error(extra, "blocks.9.ffn.w1");

  std::vector<ParamRecord> misshapen = records;
  misshapen[0].shape = {1, 2};
  misshapen[0].values = {0.0, 0.0};
  expect_value_error(misshapen, "patch_embed.w");

  std::vector<ParamRecord> duplicated = records;
  duplicated.push_back(records[0]);
  expect_value_error(duplicated, records[0].name.c_str());
}

TEST_CASE("a full checkpoint file restores every model leaf") {
  const fs::path path = scratch_file("model.ewac");
  Rng rng(64);
  ViTConfig cfg = small_config();
  MoESpec spec;
  spec.n_experts = 2;
  Model m = build_ewa_model(cfg, PlacementPolicy{}, spec, rng);

  Checkpoint ckpt;
  ckpt.config_text = "{}";
  ckpt.records = param_records(m);
  ckpt.save(path);

  Checkpoint loaded = Checkpoint::load(path);
  Rng rng2(65);
  Model fresh = build_ewa_model(cfg, PlacementPolicy{}, spec, rng2);
  load_param_records(fresh, loaded.records);

  auto want = m.named_params();
  auto got = fresh.named_params();
  REQUIRE(want.size() == got.size());
  for (size_t i = 0; i < want.size(); ++i) CHECK(got[i].second.data() == want[i].second.data());
}
