#include "fhseg/checkpoint.hpp"

#include <cstring>
#include <sstream>

#include "fhseg/errors.hpp"
#include "fhseg/util.hpp"

namespace fhseg {

namespace {

constexpr char kMagic[4] = {'F', 'H', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_model_config(ByteWriter& w, const ModelConfig& cfg) {
  w.u32(static_cast<std::uint32_t>(cfg.depth));
  w.u32(static_cast<std::uint32_t>(cfg.base_channels));
  w.u32(static_cast<std::uint32_t>(cfg.kernel_size));
  w.str(skip_mode_name(cfg.skip_mode));
  w.u8(cfg.gates_enabled ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(cfg.skip_branch_channels));
  w.u32(static_cast<std::uint32_t>(cfg.num_classes));
  w.u32(static_cast<std::uint32_t>(cfg.input_channels));
}

ModelConfig read_model_config(ByteReader& r) {
  ModelConfig cfg;
  cfg.depth = static_cast<int>(r.u32());
  cfg.base_channels = static_cast<int>(r.u32());
  cfg.kernel_size = static_cast<int>(r.u32());
  cfg.skip_mode = skip_mode_from_name(r.str());
  cfg.gates_enabled = r.u8() != 0;
  cfg.skip_branch_channels = static_cast<int>(r.u32());
  cfg.num_classes = static_cast<int>(r.u32());
  cfg.input_channels = static_cast<int>(r.u32());
  return cfg;
}

ByteReader open_checkpoint(const std::string& buf, const std::string& path) {
  ByteReader r(buf);
  char magic[4];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw DataError(path + ": not a checkpoint file");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  return r;
}

}  // namespace

void save_checkpoint(const std::string& path, Trainer& trainer) {
  ByteWriter w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  write_model_config(w, trainer.cfg.model);

  w.u64(trainer.model.params.size());
  for (const auto& p : trainer.model.params) {
    w.str(p.name);
    w.u8(static_cast<std::uint8_t>(p.t->ndim()));
    for (int d = 0; d < p.t->ndim(); ++d) w.u32(static_cast<std::uint32_t>(p.t->dim(d)));
    w.f64_vec(p.t->data);
  }

  const auto buffers = trainer.model.buffers();
  w.u64(buffers.size());
  for (const auto& b : buffers) {
    w.str(b.name);
    w.f64_vec(*b.values);
  }

  w.i64(trainer.adam.step);
  w.u64(trainer.adam.m.size());
  for (std::size_t i = 0; i < trainer.adam.m.size(); ++i) {
    w.f64_vec(trainer.adam.m[i]);
    w.f64_vec(trainer.adam.v[i]);
  }

  std::ostringstream rng_state;
  rng_state << trainer.rng;
  w.str(rng_state.str());

  w.i64(trainer.epoch);
  w.i64(trainer.iter);
  write_file(path, w.buffer());
}

void load_checkpoint(const std::string& path, Trainer& trainer) {
  const std::string buf = read_file(path);
  ByteReader r = open_checkpoint(buf, path);

  const ModelConfig stored = read_model_config(r);
  if (!(stored == trainer.cfg.model)) {
    throw ConfigError(path + ": checkpoint model config disagrees with the requested one");
  }

  const std::uint64_t n_params = r.u64();
  if (n_params != trainer.model.params.size()) {
    throw DataError(path + ": parameter count mismatch");
  }
  for (auto& p : trainer.model.params) {
    const std::string name = r.str();
    if (name != p.name) {
      throw DataError(path + ": parameter order mismatch at '" + name + "'");
    }
    const int rank = r.u8();
    if (rank != p.t->ndim()) throw DataError(path + ": rank mismatch for '" + name + "'");
    for (int d = 0; d < rank; ++d) {
      if (static_cast<int>(r.u32()) != p.t->dim(d)) {
        throw DataError(path + ": shape mismatch for '" + name + "'");
      }
    }
    auto values = r.f64_vec();
    if (values.size() != p.t->numel()) {
      throw DataError(path + ": value count mismatch for '" + name + "'");
    }
    p.t->data = std::move(values);
    p.t->zero_grad();
  }

  auto buffers = trainer.model.buffers();
  const std::uint64_t n_buffers = r.u64();
  if (n_buffers != buffers.size()) throw DataError(path + ": buffer count mismatch");
  for (auto& b : buffers) {
    const std::string name = r.str();
    if (name != b.name) throw DataError(path + ": buffer order mismatch at '" + name + "'");
    auto values = r.f64_vec();
    if (values.size() != b.values->size()) {
      throw DataError(path + ": buffer length mismatch for '" + name + "'");
    }
    *b.values = std::move(values);
  }

  trainer.adam.step = r.i64();
  const std::uint64_t n_adam = r.u64();
  if (n_adam != 0 && n_adam != trainer.model.params.size()) {
    throw DataError(path + ": optimizer state count mismatch");
  }
  trainer.adam.m.assign(n_adam, {});
  trainer.adam.v.assign(n_adam, {});
  for (std::uint64_t i = 0; i < n_adam; ++i) {
    trainer.adam.m[i] = r.f64_vec();
    trainer.adam.v[i] = r.f64_vec();
    const std::size_t want = trainer.model.params[i].t->numel();
    if (trainer.adam.m[i].size() != want || trainer.adam.v[i].size() != want) {
      throw DataError(path + ": optimizer state length mismatch");
    }
  }

  std::istringstream rng_state(r.str());
  rng_state >> trainer.rng;
  if (rng_state.fail()) throw DataError(path + ": bad RNG state");

  trainer.epoch = r.i64();
  trainer.iter = r.i64();
  if (!r.exhausted()) throw DataError(path + ": trailing bytes");
}

ModelConfig peek_checkpoint_config(const std::string& path) {
  const std::string buf = read_file(path);
  ByteReader r = open_checkpoint(buf, path);
  return read_model_config(r);
}

}  // namespace fhseg
