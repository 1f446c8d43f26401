#include "fhseg/runconfig.hpp"

#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>

#include "fhseg/errors.hpp"
#include "fhseg/util.hpp"

namespace fhseg {

namespace {

int parse_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long n = std::strtol(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0') {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return static_cast<int>(n);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0' || v.front() == '-') {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return n;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0') {
    throw ConfigError(key + ": expected a real number, got '" + v + "'");
  }
  return d;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

struct Key {
  std::string default_text;
  std::function<void(RunConfig&, const std::string&, const std::string&)> apply;
};

const std::map<std::string, Key>& key_table() {
  static const std::map<std::string, Key> table = {
      {"model.depth", {"3", [](RunConfig& c, const std::string& k, const std::string& v) {
                         c.train.model.depth = parse_int(k, v);
                       }}},
      {"model.base_channels",
       {"32", [](RunConfig& c, const std::string& k, const std::string& v) {
          c.train.model.base_channels = parse_int(k, v);
        }}},
      {"model.kernel_size",
       {"3", [](RunConfig& c, const std::string& k, const std::string& v) {
          c.train.model.kernel_size = parse_int(k, v);
        }}},
      {"model.skip_mode",
       {"fullscale_neighbor", [](RunConfig& c, const std::string&, const std::string& v) {
          c.train.model.skip_mode = skip_mode_from_name(v);
        }}},
      {"model.gates_enabled",
       {"true", [](RunConfig& c, const std::string& k, const std::string& v) {
          c.train.model.gates_enabled = parse_bool(k, v);
        }}},
      {"model.skip_branch_channels",
       {"64", [](RunConfig& c, const std::string& k, const std::string& v) {
          c.train.model.skip_branch_channels = parse_int(k, v);
        }}},
      {"model.num_classes",
       {"7", [](RunConfig& c, const std::string& k, const std::string& v) {
          c.train.model.num_classes = parse_int(k, v);
        }}},
      {"model.input_channels",
       {"3", [](RunConfig& c, const std::string& k, const std::string& v) {
          c.train.model.input_channels = parse_int(k, v);
        }}},
      {"train.epochs", {"10", [](RunConfig& c, const std::string& k, const std::string& v) {
                          c.train.epochs = parse_int(k, v);
                        }}},
      {"train.batch_size",
       {"4", [](RunConfig& c, const std::string& k, const std::string& v) {
          c.train.batch_size = parse_int(k, v);
        }}},
      {"train.lr", {"0.001", [](RunConfig& c, const std::string& k, const std::string& v) {
                      c.train.lr = parse_double(k, v);
                    }}},
      {"train.beta1", {"0.9", [](RunConfig& c, const std::string& k, const std::string& v) {
                         c.train.beta1 = parse_double(k, v);
                       }}},
      {"train.beta2", {"0.999", [](RunConfig& c, const std::string& k, const std::string& v) {
                         c.train.beta2 = parse_double(k, v);
                       }}},
      {"train.adam_eps", {"1e-8", [](RunConfig& c, const std::string& k, const std::string& v) {
                            c.train.adam_eps = parse_double(k, v);
                          }}},
      {"train.checkpoint_interval",
       {"1", [](RunConfig& c, const std::string& k, const std::string& v) {
          c.train.checkpoint_interval = parse_int(k, v);
        }}},
      {"train.augment", {"true", [](RunConfig& c, const std::string& k, const std::string& v) {
                           c.train.augment_enabled = parse_bool(k, v);
                         }}},
      {"manifest", {"", [](RunConfig& c, const std::string&, const std::string& v) {
                      c.train.manifest = v;
                    }}},
      {"data.n", {"40", [](RunConfig& c, const std::string& k, const std::string& v) {
                    c.data_n = parse_int(k, v);
                  }}},
      {"data.canvas", {"64", [](RunConfig& c, const std::string& k, const std::string& v) {
                         c.gen.canvas = parse_int(k, v);
                       }}},
      {"data.vessels_min", {"1", [](RunConfig& c, const std::string& k, const std::string& v) {
                              c.gen.vessel_count_min = parse_int(k, v);
                            }}},
      {"data.vessels_max", {"3", [](RunConfig& c, const std::string& k, const std::string& v) {
                              c.gen.vessel_count_max = parse_int(k, v);
                            }}},
      {"data.lumen_min", {"3", [](RunConfig& c, const std::string& k, const std::string& v) {
                            c.gen.lumen_radius_min = parse_double(k, v);
                          }}},
      {"data.lumen_max", {"6", [](RunConfig& c, const std::string& k, const std::string& v) {
                            c.gen.lumen_radius_max = parse_double(k, v);
                          }}},
      {"data.intima_min", {"1.5", [](RunConfig& c, const std::string& k, const std::string& v) {
                             c.gen.intima_width_min = parse_double(k, v);
                           }}},
      {"data.intima_max", {"3", [](RunConfig& c, const std::string& k, const std::string& v) {
                             c.gen.intima_width_max = parse_double(k, v);
                           }}},
      {"data.media_min", {"2", [](RunConfig& c, const std::string& k, const std::string& v) {
                            c.gen.media_width_min = parse_double(k, v);
                          }}},
      {"data.media_max", {"4", [](RunConfig& c, const std::string& k, const std::string& v) {
                            c.gen.media_width_max = parse_double(k, v);
                          }}},
      {"data.hyaline_prob",
       {"0.25", [](RunConfig& c, const std::string& k, const std::string& v) {
          c.gen.hyaline_prob = parse_double(k, v);
        }}},
      {"data.noise", {"0.04", [](RunConfig& c, const std::string& k, const std::string& v) {
                        c.gen.noise = parse_double(k, v);
                      }}},
      {"data.patch", {"0", [](RunConfig& c, const std::string& k, const std::string& v) {
                        c.data_patch = parse_int(k, v);
                      }}},
      {"ablation.seeds", {"3", [](RunConfig& c, const std::string& k, const std::string& v) {
                            c.ablation_seeds = parse_int(k, v);
                          }}},
      {"seed", {"(required)", [](RunConfig& c, const std::string& k, const std::string& v) {
                  c.seed = parse_u64(k, v);
                  c.seed_set = true;
                }}},
      {"out_dir", {"(required)", [](RunConfig& c, const std::string&, const std::string& v) {
                     c.out_dir = v;
                     c.out_set = true;
                   }}},
  };
  return table;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = key_table().find(key);
    if (it == key_table().end()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    it->second.apply(cfg, key, value);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_file(path));
}

std::string run_config_reference() {
  std::ostringstream out;
  for (const auto& [key, entry] : key_table()) {
    out << key << "=" << entry.default_text << "\n";
  }
  return out.str();
}

}  // namespace fhseg
