#pragma once

#include <string>

#include "fhseg/data.hpp"
#include "fhseg/train.hpp"

namespace fhseg {

// Flat key=value run configuration ('#' starts a comment). Every key has a
// default except seed and out_dir, which may instead come from the --seed and
// --out command-line flags; unknown keys are rejected.
struct RunConfig {
  TrainConfig train;      // includes the model config
  GeneratorSpec gen;
  int data_n = 40;        // samples to generate
  int data_patch = 0;     // 0 = whole canvases
  int ablation_seeds = 3;
  std::uint64_t seed = 0;
  std::string out_dir;
  bool seed_set = false;
  bool out_set = false;

  // Defaults that depend on out_dir, applied after flag overrides.
  std::string data_dir() const { return out_dir + "/data"; }
  std::string manifest_path() const {
    return train.manifest.empty() ? data_dir() + "/manifest.txt" : train.manifest;
  }
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Lists every known key with its default, for --help style output.
std::string run_config_reference();

}  // namespace fhseg
