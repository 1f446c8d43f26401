#pragma once

#include <string>

#include "fhseg/net.hpp"
#include "fhseg/train.hpp"

namespace fhseg {

// Binary checkpoint: magic, version, model-config echo, named parameter
// records, batch-norm running statistics, optimizer state, RNG state, and the
// epoch/iteration counters. All reals are little-endian 64-bit, so a
// save -> load -> save round trip is byte-identical.

void save_checkpoint(const std::string& path, Trainer& trainer);

// Restores into a trainer built from the same configuration. Rejects a file
// whose model config disagrees with trainer.cfg.model.
void load_checkpoint(const std::string& path, Trainer& trainer);

// Reads just the embedded model config (for reporting and validation).
ModelConfig peek_checkpoint_config(const std::string& path);

}  // namespace fhseg
