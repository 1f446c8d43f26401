#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fhseg/checkpoint.hpp"
#include "fhseg/data.hpp"
#include "fhseg/errors.hpp"
#include "fhseg/gradcheck.hpp"
#include "fhseg/metrics.hpp"
#include "fhseg/net.hpp"
#include "fhseg/runconfig.hpp"
#include "fhseg/train.hpp"
#include "fhseg/util.hpp"

namespace {

using namespace fhseg;

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::string checkpoint;
  std::string split = "test";
  std::uint64_t seed = 0;
  bool seed_given = false;
};

RunConfig resolve_config(const CommonFlags& flags, bool need_seed, bool need_out) {
  RunConfig cfg;
  if (!flags.config_path.empty()) cfg = load_run_config(flags.config_path);
  if (flags.seed_given) {
    cfg.seed = flags.seed;
    cfg.seed_set = true;
  }
  if (!flags.out_dir.empty()) {
    cfg.out_dir = flags.out_dir;
    cfg.out_set = true;
  }
  if (need_seed && !cfg.seed_set) {
    throw ConfigError("seed is required (config key 'seed' or --seed)");
  }
  if (need_out && !cfg.out_set) {
    throw ConfigError("output directory is required (config key 'out_dir' or --out)");
  }
  cfg.train.seed = cfg.seed;
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir + ": " + ec.message());
}

std::string sanitize(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    if (c == '/' || c == ' ') c = '_';
  }
  return out;
}

int cmd_gen_data(const CommonFlags& flags) {
  RunConfig cfg = resolve_config(flags, true, true);
  const auto entries =
      generate_dataset(cfg.gen, cfg.data_n, cfg.seed, cfg.data_dir(), cfg.data_patch);
  std::cout << "wrote " << entries.size() << " samples to " << cfg.data_dir() << "\n"
            << "manifest: " << cfg.data_dir() + "/manifest.txt" << "\n";
  return 0;
}

int cmd_train(const CommonFlags& flags) {
  RunConfig cfg = resolve_config(flags, true, true);
  const auto train_set = load_split(cfg.manifest_path(), "train");
  if (train_set.empty()) throw DataError(cfg.manifest_path() + ": train split is empty");

  Trainer trainer(cfg.train);
  if (!flags.checkpoint.empty()) load_checkpoint(flags.checkpoint, trainer);

  ensure_dir(cfg.out_dir);
  ensure_dir(cfg.out_dir + "/checkpoints");
  std::ofstream loss_log(cfg.out_dir + "/loss_log.txt", std::ios::app);
  if (!loss_log) throw IoError(cfg.out_dir + "/loss_log.txt: cannot open for append");

  const int interval = cfg.train.checkpoint_interval;
  trainer.run(
      train_set,
      [&loss_log](long long iter, long long epoch, double loss) {
        loss_log << loss_log_line(iter, epoch, loss);
        loss_log.flush();
      },
      [&trainer, &cfg, interval](long long epoch) {
        if (interval > 0 && epoch % interval == 0) {
          char name[64];
          std::snprintf(name, sizeof name, "/checkpoints/epoch_%04lld.bin", epoch);
          save_checkpoint(cfg.out_dir + name, trainer);
        }
      });

  const std::string final_path = cfg.out_dir + "/checkpoint.bin";
  save_checkpoint(final_path, trainer);
  std::cout << "checkpoint: " << final_path << "\n"
            << "iterations: " << trainer.iter << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& flags) {
  RunConfig cfg = resolve_config(flags, false, true);
  if (flags.checkpoint.empty()) throw ConfigError("--checkpoint is required for eval");
  Trainer trainer(cfg.train);
  load_checkpoint(flags.checkpoint, trainer);

  const auto samples = load_split(cfg.manifest_path(), flags.split);
  const MetricsReport report = evaluate(trainer.model, samples);

  ensure_dir(cfg.out_dir);
  const std::string base = cfg.out_dir + "/metrics_" + flags.split;
  write_file(base + ".txt", report.table());
  write_file(base + ".kv", report.key_values());
  std::cout << report.table() << "reports: " << base << ".txt, " << base << ".kv\n";
  return 0;
}

int cmd_ablation(const CommonFlags& flags) {
  RunConfig cfg = resolve_config(flags, true, true);
  if (cfg.ablation_seeds < 1) throw ConfigError("ablation.seeds must be >= 1");
  const auto train_set = load_split(cfg.manifest_path(), "train");
  const auto test_set = load_split(cfg.manifest_path(), "test");
  if (train_set.empty() || test_set.empty()) {
    throw DataError(cfg.manifest_path() + ": ablation needs non-empty train and test splits");
  }

  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < cfg.ablation_seeds; ++i) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));

  const auto outcomes = run_ablation(cfg.train, train_set, test_set, seeds, &std::cout);

  ensure_dir(cfg.out_dir);
  std::ostringstream summary;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %12s %12s %12s\n", "variant", "macro-Dice", "macro-F1",
                "macro-Avg");
  summary << line;
  for (const auto& oc : outcomes) {
    const std::string base = cfg.out_dir + "/ablation_" + sanitize(oc.name);
    write_file(base + ".txt", oc.mean.table());
    write_file(base + ".kv", oc.mean.key_values());
    std::snprintf(line, sizeof line, "%-8s %12.2f %12.2f %12.2f\n", oc.name.c_str(),
                  oc.mean.macro_dice, oc.mean.macro_f1, oc.mean.macro_average);
    summary << line;
  }
  write_file(cfg.out_dir + "/ablation_summary.txt", summary.str());
  std::cout << summary.str();
  return 0;
}

int cmd_gradcheck(const CommonFlags& flags) {
  const std::uint64_t seed0 = flags.seed_given ? flags.seed : 1;
  constexpr int kSeeds = 10;
  constexpr double kTol = 1e-4;

  if (const char* fault = std::getenv("FHSEG_FAULT_OP")) set_fault_injection(fault);

  std::vector<OpCheckResult> table;
  for (int s = 0; s < kSeeds; ++s) {
    auto rows = check_all_ops(seed0 + static_cast<std::uint64_t>(s), 1e-5, kTol);
    if (table.empty()) {
      table = std::move(rows);
    } else {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        table[i].max_rel_err = std::max(table[i].max_rel_err, rows[i].max_rel_err);
        table[i].pass = table[i].pass && rows[i].pass;
      }
    }
  }

  ModelCheckResult model_row;
  model_row.measurable = true;
  long long model_coords = 0;
  int model_redraws = 0;
  for (int s = 0; s < kSeeds; ++s) {
    const auto r = full_model_check(seed0 + static_cast<std::uint64_t>(s), 1e-5);
    model_row.max_rel_err = std::max(model_row.max_rel_err, r.max_rel_err);
    model_row.measurable = model_row.measurable && r.measurable;
    model_coords += r.coords;
    model_redraws += r.attempt;
  }

  bool all_pass = true;
  std::printf("%-18s %14s  %s\n", "op", "max rel err", "status");
  for (const auto& row : table) {
    std::printf("%-18s %14.3e  %s\n", row.name.c_str(), row.max_rel_err,
                row.pass ? "pass" : "FAIL");
    all_pass = all_pass && row.pass;
  }
  const bool model_pass = model_row.measurable && model_row.max_rel_err < kTol;
  std::printf("%-18s %14.3e  %s  (%lld coords, %d redraws)\n", "full_model",
              model_row.max_rel_err, model_pass ? "pass" : "FAIL", model_coords, model_redraws);
  all_pass = all_pass && model_pass;
  return all_pass ? 0 : static_cast<int>(ExitCode::threshold);
}

int cmd_config_keys() {
  std::cout << "# run configuration keys (key=default; '(required)' has no default)\n"
            << run_config_reference();
  return 0;
}

int cmd_params(const CommonFlags& flags) {
  RunConfig cfg = resolve_config(flags, false, false);
  const AuditResult audit = audit_params(cfg.train.model, cfg.seed);
  std::cout << audit.report;
  if (cfg.train.model.skip_mode != SkipMode::plain) {
    ModelConfig plain = cfg.train.model;
    plain.skip_mode = SkipMode::plain;
    const ParamCounts pc = count_params_unet(plain);
    std::cout << "baseline decoder for comparison (plain skips, same depth/width):\n";
    for (const auto& s : pc.decoder_stages) {
      std::cout << "  decoder stage " << s.level << ": " << s.conv_weights << "  [" << s.formula
                << "]\n";
    }
  }
  return audit.exact ? 0 : static_cast<int>(ExitCode::threshold);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fhseg: full-scale gated segmentation workbench"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto add_common = [&flags](CLI::App* cmd) {
    cmd->add_option("--config", flags.config_path, "key=value run configuration file");
    cmd->add_option("--out", flags.out_dir, "output directory");
    cmd->add_option("--seed", flags.seed, "seed override")->each([&flags](const std::string&) {
      flags.seed_given = true;
    });
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic vessel dataset");
  add_common(gen);
  auto* train = app.add_subcommand("train", "train a model on the generated dataset");
  add_common(train);
  train->add_option("--checkpoint", flags.checkpoint, "resume from this checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  add_common(eval);
  eval->add_option("--checkpoint", flags.checkpoint, "checkpoint to evaluate");
  eval->add_option("--split", flags.split, "train, val, or test (default test)");
  auto* ablation = app.add_subcommand("ablation", "train and score the four variants");
  add_common(ablation);
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(gradcheck);
  auto* params = app.add_subcommand("params", "analytic vs allocated parameter counts");
  add_common(params);
  auto* config_keys =
      app.add_subcommand("config-keys", "list every run configuration key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(fhseg::ExitCode::config);
  }

  try {
    fhseg::worker_count();  // validates FHSEG_THREADS before any work
    if (gen->parsed()) return cmd_gen_data(flags);
    if (train->parsed()) return cmd_train(flags);
    if (eval->parsed()) return cmd_eval(flags);
    if (ablation->parsed()) return cmd_ablation(flags);
    if (gradcheck->parsed()) return cmd_gradcheck(flags);
    if (params->parsed()) return cmd_params(flags);
    if (config_keys->parsed()) return cmd_config_keys();
    std::cerr << "no command\n";
    return static_cast<int>(fhseg::ExitCode::config);
  } catch (const fhseg::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return static_cast<int>(fhseg::ExitCode::io);
  } catch (const fhseg::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return static_cast<int>(fhseg::ExitCode::data);
  } catch (const fhseg::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return static_cast<int>(fhseg::ExitCode::numeric);
  } catch (const fhseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return static_cast<int>(fhseg::ExitCode::config);
  } catch (const fhseg::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return static_cast<int>(fhseg::ExitCode::config);
  } catch (const fhseg::ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return static_cast<int>(fhseg::ExitCode::config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(fhseg::ExitCode::config);
  }
}
