// Checkpoint round trips, exact training resume, and run-config parsing.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fhseg/checkpoint.hpp"
#include "fhseg/errors.hpp"
#include "fhseg/runconfig.hpp"
#include "fhseg/train.hpp"

using namespace fhseg;

namespace {

GeneratorSpec tiny_spec() {
  GeneratorSpec spec;
  spec.canvas = 16;
  spec.vessel_count_max = 1;
  spec.lumen_radius_min = 1.5;
  spec.lumen_radius_max = 2.0;
  spec.intima_width_min = 0.5;
  spec.intima_width_max = 1.0;
  spec.media_width_min = 0.5;
  spec.media_width_max = 1.5;
  spec.hyaline_prob = 0.0;
  return spec;
}

TrainConfig tiny_train_cfg() {
  TrainConfig tc;
  tc.model.depth = 2;
  tc.model.base_channels = 4;
  tc.model.skip_branch_channels = 8;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 9;
  return tc;
}

std::vector<Sample> tiny_train_set() {
  std::vector<Sample> out;
  for (std::uint64_t s = 0; s < 6; ++s) out.push_back(generate_sample(tiny_spec(), s));
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct TempDir {
  std::string path;
  explicit TempDir(std::string p) : path(std::move(p)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("save, load, save is byte-identical") {
  TempDir dir("tmp_persist_roundtrip");
  const auto train = tiny_train_set();
  const TrainConfig tc = tiny_train_cfg();

  Trainer a(tc);
  a.run(train);
  save_checkpoint(dir.path + "/a.ck", a);

  Trainer b(tc);
  load_checkpoint(dir.path + "/a.ck", b);
  CHECK(b.epoch == a.epoch);
  CHECK(b.iter == a.iter);
  CHECK(b.adam.step == a.adam.step);
  for (std::size_t i = 0; i < a.model.params.size(); ++i) {
    CHECK(b.model.params[i].t->data == a.model.params[i].t->data);
  }
  save_checkpoint(dir.path + "/b.ck", b);
  CHECK(slurp(dir.path + "/a.ck") == slurp(dir.path + "/b.ck"));
}

TEST_CASE("a loaded run continues exactly where the original left off") {
  TempDir dir("tmp_persist_resume");
  const auto train = tiny_train_set();
  TrainConfig tc = tiny_train_cfg();
  tc.epochs = 2;

  // straight-through run over two epochs
  Trainer full(tc);
  std::vector<std::string> full_lines;
  full.run(train, [&](long long it, long long ep, double loss) {
    full_lines.push_back(loss_log_line(it, ep, loss));
  });
  save_checkpoint(dir.path + "/full.ck", full);

  // stop after one epoch, reload into a fresh trainer, finish
  TrainConfig half = tc;
  half.epochs = 1;
  Trainer first(half);
  std::vector<std::string> resumed_lines;
  first.run(train, [&](long long it, long long ep, double loss) {
    resumed_lines.push_back(loss_log_line(it, ep, loss));
  });
  save_checkpoint(dir.path + "/half.ck", first);

  Trainer second(tc);  // full schedule again; the checkpoint carries epoch=1
  load_checkpoint(dir.path + "/half.ck", second);
  second.run(train, [&](long long it, long long ep, double loss) {
    resumed_lines.push_back(loss_log_line(it, ep, loss));
  });
  save_checkpoint(dir.path + "/resumed.ck", second);

  CHECK(resumed_lines == full_lines);
  CHECK(slurp(dir.path + "/resumed.ck") == slurp(dir.path + "/full.ck"));
}

TEST_CASE("checkpoints refuse a disagreeing model configuration") {
  TempDir dir("tmp_persist_mismatch");
  Trainer a(tiny_train_cfg());
  save_checkpoint(dir.path + "/a.ck", a);

  TrainConfig other = tiny_train_cfg();
  other.model.base_channels = 8;
  Trainer b(other);
  CHECK_THROWS_AS(load_checkpoint(dir.path + "/a.ck", b), ConfigError);

  const ModelConfig peeked = peek_checkpoint_config(dir.path + "/a.ck");
  CHECK(peeked == tiny_train_cfg().model);
}

TEST_CASE("corrupted checkpoints are rejected") {
  TempDir dir("tmp_persist_corrupt");
  Trainer a(tiny_train_cfg());
  save_checkpoint(dir.path + "/a.ck", a);
  const std::string good = slurp(dir.path + "/a.ck");

  std::string bad = good;
  bad[0] = 'X';
  spit(dir.path + "/magic.ck", bad);
  Trainer b(tiny_train_cfg());
  CHECK_THROWS_AS(load_checkpoint(dir.path + "/magic.ck", b), DataError);

  bad = good;
  bad[4] = 9;  // version from a future build
  spit(dir.path + "/version.ck", bad);
  CHECK_THROWS_AS(load_checkpoint(dir.path + "/version.ck", b), DataError);

  spit(dir.path + "/short.ck", good.substr(0, good.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(dir.path + "/short.ck", b), IoError);

  spit(dir.path + "/long.ck", good + "zz");
  CHECK_THROWS_AS(load_checkpoint(dir.path + "/long.ck", b), DataError);

  CHECK_THROWS_AS(load_checkpoint(dir.path + "/absent.ck", b), IoError);

  // a rejected load must not have poisoned the trainer: it still runs
  load_checkpoint(dir.path + "/a.ck", b);
  CHECK(b.epoch == a.epoch);
}

// ---------------------------------------------------------------------------
// Run configs
// ---------------------------------------------------------------------------

TEST_CASE("run config parsing applies defaults, comments, and overrides") {
  const auto cfg = parse_run_config(
      "# training fixture\n"
      "model.depth = 2      # shallow\n"
      "model.skip_mode=fullscale_all\n"
      "\n"
      "train.lr = 0.01\n"
      "train.augment = false\n"
      "data.n = 12\n"
      "seed = 77\n"
      "out_dir = runs/a\n");
  CHECK(cfg.train.model.depth == 2);
  CHECK(cfg.train.model.base_channels == 32);  // untouched default
  CHECK(cfg.train.model.skip_mode == SkipMode::fullscale_all);
  CHECK(cfg.train.lr == 0.01);
  CHECK_FALSE(cfg.train.augment_enabled);
  CHECK(cfg.data_n == 12);
  CHECK(cfg.seed == 77);
  CHECK(cfg.seed_set);
  CHECK(cfg.out_dir == "runs/a");
  CHECK(cfg.out_set);
  CHECK(cfg.data_dir() == "runs/a/data");
  CHECK(cfg.manifest_path() == "runs/a/data/manifest.txt");

  const auto with_manifest = parse_run_config("manifest = elsewhere/m.txt\nout_dir = runs/b\n");
  CHECK(with_manifest.manifest_path() == "elsewhere/m.txt");

  const auto empty = parse_run_config("");
  CHECK_FALSE(empty.seed_set);
  CHECK_FALSE(empty.out_set);
  CHECK(empty.train.epochs == 10);
}

TEST_CASE("run config rejects unknown keys and malformed values") {
  CHECK_THROWS_AS(parse_run_config("model.width = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("model.depth = deep\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("train.lr = fast\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("train.augment = yes\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("model.skip_mode = diagonal\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("seed = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("just a line\n"), ConfigError);

  try {
    parse_run_config("model.depth = 2\nbogus = 1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    CHECK(std::string(e.what()).find("bogus") != std::string::npos);
  }
}

TEST_CASE("the key reference lists every accepted key with a working default") {
  const std::string ref = run_config_reference();
  for (const char* key :
       {"model.depth", "model.skip_mode", "model.gates_enabled", "train.epochs", "train.lr",
        "data.n", "data.canvas", "data.patch", "ablation.seeds", "manifest", "seed", "out_dir"}) {
    CAPTURE(key);
    CHECK(ref.find(std::string(key) + "=") != std::string::npos);
  }

  // every line with a concrete default re-parses as-is
  std::istringstream lines(ref);
  std::string line;
  int parsed = 0;
  while (std::getline(lines, line)) {
    if (line.empty() || line.find("(required)") != std::string::npos) continue;
    CAPTURE(line);
    CHECK_NOTHROW(parse_run_config(line + "\n"));
    ++parsed;
  }
  CHECK(parsed >= 25);
}

TEST_CASE("run configs load from disk through the same parser") {
  TempDir dir("tmp_persist_runcfg");
  spit(dir.path + "/run.cfg", "model.depth = 2\nseed = 5\n");
  const auto cfg = load_run_config(dir.path + "/run.cfg");
  CHECK(cfg.train.model.depth == 2);
  CHECK(cfg.seed == 5);
  CHECK_THROWS_AS(load_run_config(dir.path + "/absent.cfg"), IoError);
}
