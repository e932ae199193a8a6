#pragma once

// IDNP checkpoint format (little-endian):
//
//   magic "IDNP" | version u16 (=1) | SHA-256 of the canonical model config
//   (32 bytes) | config text (u32 length + bytes) | tensor count u32 |
//   tensors | EMA tensor count u32 | EMA tensors
//
// tensor = name length u16 | name bytes | rank u8 | dims u32 x rank | f32 body

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "impervia/denoiser.hpp"
#include "impervia/digest.hpp"
#include "impervia/errors.hpp"
#include "impervia/raster.hpp"

namespace impervia {

inline constexpr std::uint16_t kIdnpVersion = 1;

template <class Real>
struct Checkpoint {
  DenoiserConfig config;
  ParamSet<Real> params;
  ParamSet<Real> ema;
};

namespace detail {

template <class Real>
void write_tensors(std::ostream& os, const ParamSet<Real>& ps) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& name = ps.names[i];
    const auto& t = ps.tensors[i];
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (int d : t.shape) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (auto v : t.data) put_le<float>(os, static_cast<float>(v));
  }
}

template <class Real>
ParamSet<Real> read_tensors(std::istream& is) {
  ParamSet<Real> ps;
  std::uint32_t count = 0;
  if (!get_le(is, count)) throw IoError("IDNP: truncated tensor table");
  for (std::uint32_t k = 0; k < count; ++k) {
    std::uint16_t len = 0;
    if (!get_le(is, len)) throw IoError("IDNP: truncated tensor header");
    std::string name(len, '\0');
    std::uint8_t rank = 0;
    if (!is.read(name.data(), len) || !get_le(is, rank)) throw IoError("IDNP: truncated tensor header");
    std::vector<int> shape(rank);
    for (auto& d : shape) {
      std::uint32_t v = 0;
      if (!get_le(is, v)) throw IoError("IDNP: truncated tensor dims");
      d = static_cast<int>(v);
    }
    const int idx = ps.add(name, shape);
    for (auto& v : ps.tensors[idx].data) {
      float f = 0;
      if (!get_le(is, f)) throw IoError("IDNP: truncated tensor body for " + name);
      v = static_cast<Real>(f);
    }
  }
  return ps;
}

inline DenoiserConfig parse_model_config(const std::string& text) {
  DenoiserConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq);
    const int v = std::stoi(line.substr(eq + 1));
    if (key == "depth") c.depth = v;
    else if (key == "base_channels") c.base_channels = v;
    else if (key == "gn_groups") c.gn_groups = v;
    else if (key == "embed_dim") c.embed_dim = v;
    else if (key == "n_cond") c.n_cond = v;
    else if (key == "input_side") c.input_side = v;
    else throw SchemaError("IDNP: unknown model config key " + key);
  }
  return c;
}

}  // namespace detail

template <class Real>
void write_checkpoint(std::ostream& os, const Checkpoint<Real>& ck) {
  const auto text = ck.config.canonical();
  const auto digest = sha256(text);
  os.write("IDNP", 4);
  detail::put_le<std::uint16_t>(os, kIdnpVersion);
  os.write(reinterpret_cast<const char*>(digest.data()), static_cast<std::streamsize>(digest.size()));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::write_tensors(os, ck.params);
  detail::write_tensors(os, ck.ema);
}

template <class Real>
Checkpoint<Real> read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw IoError("IDNP: truncated header");
  if (std::string(magic, 4) != "IDNP") throw FormatError("IDNP: bad magic");
  std::uint16_t version = 0;
  if (!detail::get_le(is, version)) throw IoError("IDNP: truncated header");
  if (version != kIdnpVersion) throw FormatError("IDNP: unsupported version " + std::to_string(version));
  Sha256 digest{};
  std::uint32_t len = 0;
  if (!is.read(reinterpret_cast<char*>(digest.data()), 32) || !detail::get_le(is, len))
    throw IoError("IDNP: truncated header");
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) throw IoError("IDNP: truncated config");
  if (sha256(text) != digest) throw SchemaError("IDNP: config digest mismatch");
  Checkpoint<Real> ck;
  ck.config = detail::parse_model_config(text);
  ck.params = detail::read_tensors<Real>(is);
  ck.ema = detail::read_tensors<Real>(is);
  // Names and shapes must match the topology the config describes.
  Denoiser<Real> probe(ck.config);
  for (const auto* ps : {&ck.params, &ck.ema}) {
    if (ps->names != probe.params().names) throw SchemaError("IDNP: tensor names do not match model config");
    for (std::size_t i = 0; i < ps->size(); ++i)
      if (ps->tensors[i].shape != probe.params().tensors[i].shape)
        throw SchemaError("IDNP: shape mismatch for " + ps->names[i]);
  }
  return ck;
}

template <class Real>
void save_checkpoint(const Checkpoint<Real>& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  write_checkpoint(f, ck);
  if (!f) throw IoError("write failed: " + path);
}

template <class Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return read_checkpoint<Real>(f);
}

/// "step,loss" CSV.
inline void write_loss_csv(std::ostream& os, const std::vector<double>& losses) {
  os << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, losses[i]);
    os << buf;
  }
}

}  // namespace impervia
