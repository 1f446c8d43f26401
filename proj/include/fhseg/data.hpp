#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace fhseg {

// Pixel label ids. "artery_wall" is the combined intima+media labeling used by
// wall-level samples; "artery" labels the whole structure including the lumen.
enum class SampleClass : std::uint8_t {
  background = 0,
  lumen = 1,
  intima = 2,
  media = 3,
  artery = 4,
  artery_wall = 5,
  hyaline = 6,
};

constexpr int kNumClasses = 7;

const char* class_name(int id);

// How a sample's vessels are labeled: every sample picks exactly one view.
enum class LabelVariant : std::uint8_t {
  component = 0,  // lumen / intima / media as separate classes
  wall = 1,       // lumen + combined artery_wall ring
  artery = 2,     // whole structure as one artery blob
};

struct GeneratorSpec {
  int canvas = 64;
  int vessel_count_min = 1;
  int vessel_count_max = 3;
  double lumen_radius_min = 3.0;
  double lumen_radius_max = 6.0;
  double intima_width_min = 1.5;
  double intima_width_max = 3.0;
  double media_width_min = 2.0;
  double media_width_max = 4.0;
  double hyaline_prob = 0.25;
  double noise = 0.04;
  // Mean RGB per class id; rendering adds Gaussian noise and clamps to [0,1].
  std::array<std::array<double, 3>, kNumClasses> palette = {{
      {0.88, 0.85, 0.90},  // background
      {0.96, 0.94, 0.90},  // lumen
      {0.82, 0.55, 0.70},  // intima
      {0.55, 0.30, 0.45},  // media
      {0.55, 0.60, 0.75},  // artery
      {0.70, 0.42, 0.45},  // artery_wall
      {0.93, 0.88, 0.60},  // hyaline
  }};
};

void validate(const GeneratorSpec& spec);

struct Sample {
  int h = 0, w = 0;
  std::vector<double> image;       // 3*h*w, channel-major, values in [0,1]
  std::vector<std::uint8_t> mask;  // h*w class ids
  std::uint64_t seed = 0;
  LabelVariant variant = LabelVariant::component;
};

// Deterministic in (spec, seed): nested rotated ellipses on a noisy canvas.
Sample generate_sample(const GeneratorSpec& spec, std::uint64_t seed);

Sample flip_h(const Sample& s);
Sample flip_v(const Sample& s);

// Random flips (p=0.5 each, image and mask together) plus per-channel color
// scale in [0.9, 1.1] and shift in [-0.05, 0.05], clamped to [0,1].
Sample augment(const Sample& s, std::uint64_t seed);

// Non-overlapping grid crops; patch must divide both extents.
std::vector<Sample> patchify(const Sample& s, int patch);

struct Splits {
  std::vector<int> train, val, test;
};

// Seeded shuffle, then floor(0.6 n) / floor(0.2 n) / remainder.
Splits make_splits(int n_total, std::uint64_t seed);

// Flat binary record: magic "FHSG", version, H, W, class count, image as
// little-endian 64-bit reals, mask as bytes.
void write_sample(const std::string& path, const Sample& s);
Sample read_sample(const std::string& path);

struct ManifestEntry {
  std::string file;  // relative to the manifest's directory
  std::uint64_t seed = 0;
  std::string split;
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

// Generates n samples under out_dir, writes them plus manifest.txt and
// splits.txt, and returns the manifest. patch=0 stores whole canvases;
// patch>0 stores the grid crops instead.
std::vector<ManifestEntry> generate_dataset(const GeneratorSpec& spec, int n, std::uint64_t seed,
                                            const std::string& out_dir, int patch = 0);

std::vector<Sample> load_split(const std::string& manifest_path, const std::string& split);

}  // namespace fhseg
