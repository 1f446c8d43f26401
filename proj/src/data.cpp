#include "fhseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "fhseg/errors.hpp"
#include "fhseg/util.hpp"

namespace fhseg {

namespace {

constexpr char kSampleMagic[4] = {'F', 'H', 'S', 'G'};
constexpr std::uint32_t kSampleVersion = 1;

double max_outer_radius(const GeneratorSpec& spec) {
  return spec.lumen_radius_max + spec.intima_width_max + spec.media_width_max;
}

// One vessel: three nested rotated ellipses sharing a center and orientation.
struct Vessel {
  double cx = 0, cy = 0;
  double cth = 1, sth = 0;
  double al = 0, bl = 0;  // lumen axes
  double ai = 0, bi = 0;  // intima outer axes
  double am = 0, bm = 0;  // media outer axes

  // Normalized radius against the given axes: <=1 means inside that ellipse.
  double rho(double px, double py, double a, double b) const {
    const double dx = px - cx, dy = py - cy;
    const double xr = dx * cth + dy * sth;
    const double yr = -dx * sth + dy * cth;
    return std::sqrt((xr / a) * (xr / a) + (yr / b) * (yr / b));
  }

  double outer() const { return std::max(am, bm); }
};

std::uint8_t ring_class(const Vessel& v, LabelVariant variant, double px, double py) {
  if (v.rho(px, py, v.am, v.bm) > 1.0) return static_cast<std::uint8_t>(SampleClass::background);
  switch (variant) {
    case LabelVariant::artery:
      return static_cast<std::uint8_t>(SampleClass::artery);
    case LabelVariant::wall:
      if (v.rho(px, py, v.al, v.bl) <= 1.0) return static_cast<std::uint8_t>(SampleClass::lumen);
      return static_cast<std::uint8_t>(SampleClass::artery_wall);
    case LabelVariant::component:
      if (v.rho(px, py, v.al, v.bl) <= 1.0) return static_cast<std::uint8_t>(SampleClass::lumen);
      if (v.rho(px, py, v.ai, v.bi) <= 1.0) return static_cast<std::uint8_t>(SampleClass::intima);
      return static_cast<std::uint8_t>(SampleClass::media);
  }
  throw ContractError("unknown label variant");
}

// Tries to paint one hyaline blob strictly inside the media ring of v.
// Returns true once a blob of at least 3 pixels was committed.
bool paint_hyaline(const Vessel& v, int h, int w, std::mt19937_64& eng,
                   std::vector<std::uint8_t>& mask) {
  for (int attempt = 0; attempt < 20; ++attempt) {
    const double phi = uniform_real(eng, 0.0, 2.0 * std::numbers::pi);
    const double rb = uniform_real(eng, 1.2, 2.5);
    // Along direction phi, a point with media-normalized radius u has
    // intima-normalized radius u*f; the blob center must sit between the two.
    const double f = std::sqrt((v.am * std::cos(phi) / v.ai) * (v.am * std::cos(phi) / v.ai) +
                               (v.bm * std::sin(phi) / v.bi) * (v.bm * std::sin(phi) / v.bi));
    const double u_lo = 1.04 / f, u_hi = 0.96;
    if (u_lo >= u_hi) continue;
    const double u = 0.5 * (u_lo + u_hi);
    const double xr = u * v.am * std::cos(phi);
    const double yr = u * v.bm * std::sin(phi);
    const double bx = v.cx + xr * v.cth - yr * v.sth;
    const double by = v.cy + xr * v.sth + yr * v.cth;

    std::vector<int> hits;
    const int x0 = std::max(0, static_cast<int>(std::floor(bx - rb)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(bx + rb)));
    const int y0 = std::max(0, static_cast<int>(std::floor(by - rb)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(by + rb)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        if (std::hypot(px - bx, py - by) > rb) continue;
        if (v.rho(px, py, v.ai, v.bi) < 1.02) continue;  // keep off the intima
        if (v.rho(px, py, v.am, v.bm) > 0.98) continue;  // keep inside the media
        hits.push_back(y * w + x);
      }
    }
    if (hits.size() >= 3) {
      for (int p : hits) mask[static_cast<std::size_t>(p)] =
          static_cast<std::uint8_t>(SampleClass::hyaline);
      return true;
    }
  }
  return false;
}

std::string sample_filename(int index, int patch_index) {
  char buf[64];
  if (patch_index < 0) {
    std::snprintf(buf, sizeof buf, "sample_%05d.bin", index);
  } else {
    std::snprintf(buf, sizeof buf, "sample_%05d_p%d.bin", index, patch_index);
  }
  return buf;
}

}  // namespace

const char* class_name(int id) {
  switch (static_cast<SampleClass>(id)) {
    case SampleClass::background: return "background";
    case SampleClass::lumen: return "lumen";
    case SampleClass::intima: return "intima";
    case SampleClass::media: return "media";
    case SampleClass::artery: return "artery";
    case SampleClass::artery_wall: return "artery_wall";
    case SampleClass::hyaline: return "hyaline";
  }
  throw ContractError("class id out of range");
}

void validate(const GeneratorSpec& spec) {
  if (spec.canvas < 8) throw ConfigError("canvas must be >= 8");
  if (spec.vessel_count_min < 1 || spec.vessel_count_max < spec.vessel_count_min) {
    throw ConfigError("vessel count range must satisfy 1 <= min <= max");
  }
  if (spec.lumen_radius_min < 1.5 || spec.lumen_radius_max < spec.lumen_radius_min) {
    throw ConfigError("lumen radius range must satisfy 1.5 <= min <= max");
  }
  if (spec.intima_width_min < 0.5 || spec.intima_width_max < spec.intima_width_min) {
    throw ConfigError("intima width range must satisfy 0.5 <= min <= max");
  }
  if (spec.media_width_min < 0.5 || spec.media_width_max < spec.media_width_min) {
    throw ConfigError("media width range must satisfy 0.5 <= min <= max");
  }
  if (spec.hyaline_prob < 0.0 || spec.hyaline_prob > 1.0) {
    throw ConfigError("hyaline probability must be in [0,1]");
  }
  if (spec.noise < 0.0 || spec.noise > 0.25) throw ConfigError("noise must be in [0,0.25]");
  if (spec.canvas < 2.0 * max_outer_radius(spec) + 4.0) {
    throw ConfigError("canvas too small for the configured vessel radii");
  }
}

Sample generate_sample(const GeneratorSpec& spec, std::uint64_t seed) {
  validate(spec);
  auto eng = seeded_engine(seed, "sample");
  const int c = spec.canvas;

  Sample s;
  s.h = c;
  s.w = c;
  s.seed = seed;
  s.variant = static_cast<LabelVariant>(uniform_int(eng, 0, 2));
  s.mask.assign(static_cast<std::size_t>(c) * c,
                static_cast<std::uint8_t>(SampleClass::background));

  const int want = static_cast<int>(uniform_int(eng, spec.vessel_count_min,
                                                spec.vessel_count_max));
  std::vector<Vessel> vessels;
  for (int v = 0; v < want; ++v) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Vessel cand;
      cand.al = uniform_real(eng, spec.lumen_radius_min, spec.lumen_radius_max);
      cand.bl = uniform_real(eng, spec.lumen_radius_min, spec.lumen_radius_max);
      const double wi = uniform_real(eng, spec.intima_width_min, spec.intima_width_max);
      const double wm = uniform_real(eng, spec.media_width_min, spec.media_width_max);
      cand.ai = cand.al + wi;
      cand.bi = cand.bl + wi;
      cand.am = cand.ai + wm;
      cand.bm = cand.bi + wm;
      const double r = cand.outer();
      cand.cx = uniform_real(eng, r + 1.5, c - r - 1.5);
      cand.cy = uniform_real(eng, r + 1.5, c - r - 1.5);
      const double theta = uniform_real(eng, 0.0, 2.0 * std::numbers::pi);
      cand.cth = std::cos(theta);
      cand.sth = std::sin(theta);

      bool clear = true;
      for (const auto& u : vessels) {
        if (std::hypot(cand.cx - u.cx, cand.cy - u.cy) < r + u.outer() + 2.0) {
          clear = false;
          break;
        }
      }
      if (clear) {
        vessels.push_back(cand);
        break;
      }
    }
  }

  for (const auto& v : vessels) {
    const double r = v.outer();
    const int x0 = std::max(0, static_cast<int>(std::floor(v.cx - r - 1.0)));
    const int x1 = std::min(c - 1, static_cast<int>(std::ceil(v.cx + r + 1.0)));
    const int y0 = std::max(0, static_cast<int>(std::floor(v.cy - r - 1.0)));
    const int y1 = std::min(c - 1, static_cast<int>(std::ceil(v.cy + r + 1.0)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const std::uint8_t cls = ring_class(v, s.variant, x + 0.5, y + 0.5);
        if (cls != static_cast<std::uint8_t>(SampleClass::background)) {
          s.mask[static_cast<std::size_t>(y) * c + x] = cls;
        }
      }
    }
  }

  if (!vessels.empty() && uniform01(eng) < spec.hyaline_prob) {
    const auto& v = vessels[static_cast<std::size_t>(
        uniform_int(eng, 0, static_cast<std::int64_t>(vessels.size()) - 1))];
    paint_hyaline(v, c, c, eng, s.mask);
  }

  GaussianRng noise(seeded_engine(seed, "noise"));
  const std::size_t hw = static_cast<std::size_t>(c) * c;
  s.image.resize(3 * hw);
  for (int ch = 0; ch < 3; ++ch) {
    for (std::size_t p = 0; p < hw; ++p) {
      const double base = spec.palette[s.mask[p]][static_cast<std::size_t>(ch)];
      s.image[static_cast<std::size_t>(ch) * hw + p] =
          std::clamp(base + spec.noise * noise.next(), 0.0, 1.0);
    }
  }
  return s;
}

Sample flip_h(const Sample& s) {
  Sample out = s;
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const std::size_t src = static_cast<std::size_t>(y) * s.w + (s.w - 1 - x);
      const std::size_t dst = static_cast<std::size_t>(y) * s.w + x;
      out.mask[dst] = s.mask[src];
      for (int ch = 0; ch < 3; ++ch) {
        out.image[static_cast<std::size_t>(ch) * hw + dst] =
            s.image[static_cast<std::size_t>(ch) * hw + src];
      }
    }
  }
  return out;
}

Sample flip_v(const Sample& s) {
  Sample out = s;
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const std::size_t src = static_cast<std::size_t>(s.h - 1 - y) * s.w + x;
      const std::size_t dst = static_cast<std::size_t>(y) * s.w + x;
      out.mask[dst] = s.mask[src];
      for (int ch = 0; ch < 3; ++ch) {
        out.image[static_cast<std::size_t>(ch) * hw + dst] =
            s.image[static_cast<std::size_t>(ch) * hw + src];
      }
    }
  }
  return out;
}

Sample augment(const Sample& s, std::uint64_t seed) {
  auto eng = seeded_engine(seed, "augment");
  Sample out = s;
  if (uniform01(eng) < 0.5) out = flip_h(out);
  if (uniform01(eng) < 0.5) out = flip_v(out);
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  for (int ch = 0; ch < 3; ++ch) {
    const double scale = uniform_real(eng, 0.9, 1.1);
    const double shift = uniform_real(eng, -0.05, 0.05);
    for (std::size_t p = 0; p < hw; ++p) {
      double& v = out.image[static_cast<std::size_t>(ch) * hw + p];
      v = std::clamp(v * scale + shift, 0.0, 1.0);
    }
  }
  return out;
}

std::vector<Sample> patchify(const Sample& s, int patch) {
  if (patch < 1) throw ConfigError("patch size must be >= 1");
  if (s.h % patch != 0 || s.w % patch != 0) {
    throw ShapeError("patch size " + std::to_string(patch) + " does not divide " +
                     std::to_string(s.h) + "x" + std::to_string(s.w));
  }
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  std::vector<Sample> out;
  for (int py = 0; py < s.h / patch; ++py) {
    for (int px = 0; px < s.w / patch; ++px) {
      Sample p;
      p.h = patch;
      p.w = patch;
      p.seed = s.seed;
      p.variant = s.variant;
      p.mask.resize(static_cast<std::size_t>(patch) * patch);
      p.image.resize(3 * static_cast<std::size_t>(patch) * patch);
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) {
          const std::size_t src =
              static_cast<std::size_t>(py * patch + y) * s.w + (px * patch + x);
          const std::size_t dst = static_cast<std::size_t>(y) * patch + x;
          p.mask[dst] = s.mask[src];
          for (int ch = 0; ch < 3; ++ch) {
            p.image[static_cast<std::size_t>(ch) * patch * patch + dst] =
                s.image[static_cast<std::size_t>(ch) * hw + src];
          }
        }
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

Splits make_splits(int n_total, std::uint64_t seed) {
  if (n_total < 10) throw ConfigError("need at least 10 samples to split");
  std::vector<int> idx(static_cast<std::size_t>(n_total));
  for (int i = 0; i < n_total; ++i) idx[static_cast<std::size_t>(i)] = i;
  auto eng = seeded_engine(seed, "splits");
  fisher_yates(idx, eng);
  const int n_train = (n_total * 6) / 10;
  const int n_val = (n_total * 2) / 10;
  Splits s;
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  s.test.assign(idx.begin() + n_train + n_val, idx.end());
  return s;
}

void write_sample(const std::string& path, const Sample& s) {
  ByteWriter w;
  w.bytes(kSampleMagic, sizeof kSampleMagic);
  w.u32(kSampleVersion);
  w.u32(static_cast<std::uint32_t>(s.h));
  w.u32(static_cast<std::uint32_t>(s.w));
  w.u32(kNumClasses);
  for (double v : s.image) w.f64(v);
  w.bytes(s.mask.data(), s.mask.size());
  write_file(path, w.buffer());
}

Sample read_sample(const std::string& path) {
  const std::string buf = read_file(path);
  ByteReader r(buf);
  char magic[4];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kSampleMagic, sizeof magic) != 0) {
    throw DataError(path + ": not a sample file");
  }
  const std::uint32_t version = r.u32();
  if (version != kSampleVersion) {
    throw DataError(path + ": unsupported sample version " + std::to_string(version));
  }
  Sample s;
  s.h = static_cast<int>(r.u32());
  s.w = static_cast<int>(r.u32());
  const std::uint32_t classes = r.u32();
  if (classes != kNumClasses) {
    throw DataError(path + ": unexpected class count " + std::to_string(classes));
  }
  if (s.h < 1 || s.w < 1 || s.h > 1 << 16 || s.w > 1 << 16) {
    throw DataError(path + ": implausible extent");
  }
  const std::size_t hw = static_cast<std::size_t>(s.h) * s.w;
  s.image.resize(3 * hw);
  for (double& v : s.image) v = r.f64();
  s.mask.resize(hw);
  r.bytes(s.mask.data(), hw);
  if (!r.exhausted()) throw DataError(path + ": trailing bytes");
  for (std::uint8_t id : s.mask) {
    if (id >= kNumClasses) throw DataError(path + ": class id out of range");
  }
  return s;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ostringstream out;
  for (const auto& e : entries) out << e.file << " " << e.seed << " " << e.split << "\n";
  write_file(path, out.str());
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.file >> e.seed >> e.split)) {
      throw DataError(path + ": malformed manifest line '" + line + "'");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<ManifestEntry> generate_dataset(const GeneratorSpec& spec, int n, std::uint64_t seed,
                                            const std::string& out_dir, int patch) {
  validate(spec);
  if (n < 10) throw ConfigError("dataset size must be >= 10");
  if (patch < 0) throw ConfigError("patch size must be >= 0");
  if (patch > 0 && spec.canvas % patch != 0) {
    throw ConfigError("patch size must divide the canvas");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir + ": " + ec.message());

  std::vector<Sample> samples(static_cast<std::size_t>(n));
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    samples[i] = generate_sample(
        spec, derive_seed(seed, "sample." + std::to_string(i)));
  });

  const Splits splits = make_splits(n, seed);
  std::vector<std::string> split_of(static_cast<std::size_t>(n));
  for (int i : splits.train) split_of[static_cast<std::size_t>(i)] = "train";
  for (int i : splits.val) split_of[static_cast<std::size_t>(i)] = "val";
  for (int i : splits.test) split_of[static_cast<std::size_t>(i)] = "test";

  std::vector<ManifestEntry> entries;
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (patch == 0) {
      const std::string file = sample_filename(i, -1);
      write_sample(out_dir + "/" + file, s);
      entries.push_back({file, s.seed, split_of[static_cast<std::size_t>(i)]});
    } else {
      const auto patches = patchify(s, patch);
      for (std::size_t p = 0; p < patches.size(); ++p) {
        const std::string file = sample_filename(i, static_cast<int>(p));
        write_sample(out_dir + "/" + file, patches[p]);
        entries.push_back({file, s.seed, split_of[static_cast<std::size_t>(i)]});
      }
    }
  }
  write_manifest(out_dir + "/manifest.txt", entries);

  std::ostringstream sp;
  for (const auto& e : entries) sp << e.split << " " << e.file << "\n";
  write_file(out_dir + "/splits.txt", sp.str());
  return entries;
}

std::vector<Sample> load_split(const std::string& manifest_path, const std::string& split) {
  if (split != "train" && split != "val" && split != "test") {
    throw ConfigError("unknown split '" + split + "' (expected train, val, or test)");
  }
  const auto entries = read_manifest(manifest_path);
  const std::string dir = std::filesystem::path(manifest_path).parent_path().string();
  std::vector<Sample> out;
  for (const auto& e : entries) {
    if (e.split != split) continue;
    Sample s = read_sample(dir.empty() ? e.file : dir + "/" + e.file);
    s.seed = e.seed;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fhseg
