#pragma once

// Flat key=value configuration with a fixed key registry. Precedence:
// command-line override > file > default.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "impervia/errors.hpp"

namespace impervia {

enum class ValueType { Int, Real, Text, IntList };

struct ConfigKey {
  const char* name;
  ValueType type;
  const char* fallback;
  const char* help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"schedule.steps", ValueType::Int, "1000", "diffusion steps T"},
      {"schedule.beta_start", ValueType::Real, "1e-4", "first beta of the linear schedule"},
      {"schedule.beta_end", ValueType::Real, "0.02", "last beta of the linear schedule"},
      {"model.depth", ValueType::Int, "3", "UNet resolution levels"},
      {"model.base_channels", ValueType::Int, "8", "channels at full resolution"},
      {"model.gn_groups", ValueType::Int, "4", "group-norm groups"},
      {"model.embed_dim", ValueType::Int, "32", "timestep embedding width"},
      {"model.n_cond", ValueType::Int, "3", "conditioning timestamps N"},
      {"model.input_side", ValueType::Int, "32", "patch side in pixels"},
      {"train.steps", ValueType::Int, "20000", "optimizer steps"},
      {"train.batch", ValueType::Int, "8", "batch size"},
      {"train.lr", ValueType::Real, "3e-4", "Adam learning rate"},
      {"train.ema", ValueType::Real, "0.99", "EMA rate"},
      {"sample.ddim_steps", ValueType::Int, "500", "DDIM steps"},
      {"sample.eta", ValueType::Real, "0", "DDIM eta"},
      {"sample.seeds", ValueType::Int, "5", "forecasts per tile"},
      {"eval.cells", ValueType::IntList, "4,8,16,32,64,128", "aggregation cell sizes in pixels"},
      {"cluster.k", ValueType::Int, "5", "number of clusters"},
      {"cluster.signature", ValueType::Text, "mean_change", "mean_change or fraction_changed"},
      {"ca.window", ValueType::Int, "5", "odd neighbourhood window"},
      {"ca.eta", ValueType::Real, "0.1", "multiplier update rate"},
      {"ca.tolerance", ValueType::Real, "0.005", "relative area tolerance per class"},
      {"ca.max_iterations", ValueType::Int, "500", "allocation iteration cap"},
      {"split.lag", ValueType::Int, "10", "minimum years between conditioning and target"},
      {"split.targets", ValueType::IntList, "2016,2019", "target years"},
      {"split.holdout", ValueType::IntList, "2021", "years never used as training targets"},
      {"tile.side", ValueType::Int, "32", "tile side in pixels"},
  };
  return keys;
}

inline const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (name == k.name) return &k;
  return nullptr;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_keys()) values_[k.name] = k.fallback;
  }

  /// Sets a value after validating its key and type.
  void set(const std::string& key, const std::string& value) {
    const auto* k = find_key(key);
    if (!k) throw ConfigError("unknown config key " + key);
    validate(*k, value);
    values_[key] = value;
  }

  void load(std::istream& is) {
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + " has no '='");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    load(f);
  }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key " + key);
    return it->second;
  }
  long long integer(const std::string& key) const { return std::stoll(text(key)); }
  double real(const std::string& key) const { return std::stod(text(key)); }
  std::vector<long long> int_list(const std::string& key) const { return parse_list(text(key)); }

  const std::map<std::string, std::string>& values() const { return values_; }

  /// Only the given keys, for run manifests.
  std::map<std::string, std::string> subset(const std::vector<std::string>& keys) const {
    std::map<std::string, std::string> out;
    for (const auto& k : keys) out[k] = text(k);
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
  }

  static std::vector<long long> parse_list(const std::string& v) {
    std::vector<long long> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      std::size_t used = 0;
      long long x = 0;
      try {
        x = std::stoll(tok, &used);
      } catch (const std::exception&) {
        throw ConfigError("not an integer list: " + v);
      }
      if (used != tok.size()) throw ConfigError("not an integer list: " + v);
      out.push_back(x);
    }
    return out;
  }

  static void validate(const ConfigKey& k, const std::string& v) {
    std::size_t used = 0;
    try {
      switch (k.type) {
        case ValueType::Int:
          (void)std::stoll(v, &used);
          if (used != v.size()) throw std::invalid_argument("trailing");
          break;
        case ValueType::Real:
          (void)std::stod(v, &used);
          if (used != v.size()) throw std::invalid_argument("trailing");
          break;
        case ValueType::IntList:
          (void)parse_list(v);
          break;
        case ValueType::Text:
          if (v.empty()) throw std::invalid_argument("empty");
          break;
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("bad value '" + v + "' for " + k.name);
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace impervia
