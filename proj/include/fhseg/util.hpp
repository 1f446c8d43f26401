#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace fhseg {

// ---------------------------------------------------------------------------
// Deterministic randomness.
//
// Everything that draws random numbers goes through mt19937_64 (whose output
// sequence is pinned by the standard) plus the hand-rolled transforms below.
// std::normal_distribution / std::uniform_int_distribution / std::shuffle are
// implementation-defined and would break bit-reproducibility across stdlibs.
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view s);
std::uint64_t splitmix64(std::uint64_t x);

// Sub-seed for the stream identified by (seed, label).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

// Engine for the stream identified by (seed, label). Distinct labels give
// independent streams; the same (seed, label) always gives the same sequence.
std::mt19937_64 seeded_engine(std::uint64_t seed, std::string_view label);

// Uniform double in [0, 1) with 53 random bits.
double uniform01(std::mt19937_64& eng);

// Uniform double in [a, b).
double uniform_real(std::mt19937_64& eng, double a, double b);

// Uniform integer in [lo, hi], inclusive. Rejection sampling, no modulo bias.
std::int64_t uniform_int(std::mt19937_64& eng, std::int64_t lo, std::int64_t hi);

// Standard normal via Box-Muller (pair-cached).
class GaussianRng {
 public:
  explicit GaussianRng(std::mt19937_64 eng) : eng_(eng) {}
  double next();

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// In-place Fisher-Yates shuffle.
template <typename T>
void fisher_yates(std::vector<T>& v, std::mt19937_64& eng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(eng, 0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

// ---------------------------------------------------------------------------
// Worker pool. FHSEG_THREADS caps the worker count; results must be written to
// per-index slots so the reduction order never depends on scheduling.
// ---------------------------------------------------------------------------

int worker_count();
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// Little-endian binary serialization helpers.
// ---------------------------------------------------------------------------

class ByteWriter {
 public:
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v);
  void f64(double v);
  void str(std::string_view s);                  // u32 length + bytes
  void f64_vec(const std::vector<double>& v);    // u64 count + payload
  void bytes(const void* p, std::size_t n);

  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view buf) : buf_(buf) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64();
  double f64();
  std::string str();
  std::vector<double> f64_vec();
  void bytes(void* p, std::size_t n);
  bool exhausted() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n);
  std::string_view buf_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace fhseg
