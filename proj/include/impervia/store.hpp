#pragma once

// Run manifests and (target, conditioning) split definitions.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "impervia/digest.hpp"
#include "impervia/errors.hpp"
#include "impervia/raster.hpp"

namespace impervia::store {

// ---------------------------------------------------------------------------
// Manifest
//
// "run.manifest": UTF-8 key=value lines, LF-terminated, in this order:
//   run_id=... | config.<key>=<value> ... | input.<path>=<sha256 hex> ... |
//   seeds=<u64>,<u64>... | output.<name>=<path> ... | timestamp.<name>=...

struct RunManifest {
  std::string run_id;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> inputs;  // path -> sha256 hex
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::string> outputs;
  std::map<std::string, std::string> timestamps;

  bool operator==(const RunManifest&) const = default;

  bool equal_ignoring_timestamps(const RunManifest& o) const {
    return run_id == o.run_id && config == o.config && inputs == o.inputs && seeds == o.seeds && outputs == o.outputs;
  }

  void add_input(const std::string& path) { inputs[path] = sha256_file_hex(path); }
};

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void check_value(const std::string& key, const std::string& v) {
  if (v.find('\n') != std::string::npos || v.find('\r') != std::string::npos)
    throw SchemaError("manifest value for " + key + " contains a line break");
}

inline void write_manifest(std::ostream& os, const RunManifest& m) {
  auto line = [&](const std::string& k, const std::string& v) {
    if (k.empty() || k.find('=') != std::string::npos) throw SchemaError("bad manifest key '" + k + "'");
    check_value(k, v);
    os << k << '=' << v << '\n';
  };
  line("run_id", m.run_id);
  for (const auto& [k, v] : m.config) line("config." + k, v);
  for (const auto& [k, v] : m.inputs) line("input." + k, v);
  std::string seeds;
  for (std::size_t i = 0; i < m.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(m.seeds[i]);
  line("seeds", seeds);
  for (const auto& [k, v] : m.outputs) line("output." + k, v);
  for (const auto& [k, v] : m.timestamps) line("timestamp." + k, v);
}

inline RunManifest read_manifest(std::istream& is) {
  RunManifest m;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("manifest line " + std::to_string(n) + " has no '='");
    const auto k = line.substr(0, eq), v = line.substr(eq + 1);
    auto suffix = [&](const char* prefix) -> std::string {
      const std::string p(prefix);
      return k.rfind(p, 0) == 0 ? k.substr(p.size()) : std::string{};
    };
    if (k == "run_id") m.run_id = v;
    else if (k == "seeds") {
      std::stringstream ss(v);
      std::string tok;
      while (std::getline(ss, tok, ','))
        if (!tok.empty()) m.seeds.push_back(std::stoull(tok));
    } else if (auto s = suffix("config."); !s.empty()) m.config[s] = v;
    else if (auto s2 = suffix("input."); !s2.empty()) m.inputs[s2] = v;
    else if (auto s3 = suffix("output."); !s3.empty()) m.outputs[s3] = v;
    else if (auto s4 = suffix("timestamp."); !s4.empty()) m.timestamps[s4] = v;
    else throw SchemaError("unknown manifest key " + k);
  }
  return m;
}

/// Writes to a sibling temp file and renames it over `path`.
inline void save_manifest(const RunManifest& m, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    write_manifest(f, m);
    f.flush();
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename manifest into " + path.string());
  }
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return read_manifest(f);
}

/// Paths whose current digest differs from the recorded one (missing files
/// included).
inline std::vector<std::string> verify(const RunManifest& m) {
  std::vector<std::string> bad;
  for (const auto& [path, hex] : m.inputs) {
    try {
      if (sha256_file_hex(path) != hex) bad.push_back(path);
    } catch (const IoError&) {
      bad.push_back(path);
    }
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Splits

/// The `n` most recent years at least `lag` years before `target`, in
/// chronological order.
inline std::vector<int> conditioning_years(const std::vector<int>& years, int target, int lag = 10, std::size_t n = 3) {
  std::vector<int> sorted(years);
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<int> eligible;
  for (int y : sorted)
    if (y <= target - lag) eligible.push_back(y);
  if (eligible.size() < n)
    throw RangeError("target " + std::to_string(target) + " has " + std::to_string(eligible.size()) +
                     " years at least " + std::to_string(lag) + " years older, needs " + std::to_string(n));
  return {eligible.end() - static_cast<std::ptrdiff_t>(n), eligible.end()};
}

struct SplitPair {
  std::size_t tile = 0;
  int target = 0;
  std::vector<int> conditioning;

  bool operator==(const SplitPair&) const = default;
};

struct Split {
  std::vector<SplitPair> train;
  std::vector<SplitPair> holdout;
};

/// Enumerates tiles x targets. Targets without enough history are skipped;
/// if no target qualifies the split is an error. Pairs whose target is a
/// holdout year go to `holdout`, all others to `train`.
inline Split make_split(const TileSet& tiles, const std::vector<int>& years, const std::vector<int>& targets,
                        const std::vector<int>& holdout_years, int lag = 10, std::size_t n = 3) {
  const std::set<int> holdout(holdout_years.begin(), holdout_years.end());
  std::vector<std::pair<int, std::vector<int>>> ok;
  for (int t : targets) {
    if (std::find(years.begin(), years.end(), t) == years.end())
      throw RangeError("target year " + std::to_string(t) + " not in the year list");
    try {
      ok.emplace_back(t, conditioning_years(years, t, lag, n));
    } catch (const RangeError&) {
    }
  }
  if (ok.empty()) throw RangeError("no target year has enough history for the conditioning lag");
  Split s;
  for (std::size_t i = 0; i < tiles.tiles.size(); ++i)
    for (const auto& [t, cond] : ok) (holdout.count(t) ? s.holdout : s.train).push_back({i, t, cond});
  return s;
}

}  // namespace impervia::store
