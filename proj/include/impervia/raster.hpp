#pragma once

// Raster substrate: the Grid type, the IGRD binary format, tiling, block
// aggregation and change maps.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "impervia/errors.hpp"

namespace impervia {

enum class GridKind : std::uint8_t { Categorical = 0, Continuous = 1 };

inline const char* to_string(GridKind k) {
  return k == GridKind::Categorical ? "categorical" : "continuous";
}

/// Row-major 2-D raster. Continuous grids hold imperviousness percent (or
/// other real-valued layers such as likelihoods and signed change); categorical
/// grids hold class indices. Values live in double precision in memory and are
/// narrowed to f32 / u8 only when written to disk.
struct Grid {
  std::size_t width = 0;
  std::size_t height = 0;
  double pixel_size = 30.0;  // meters per pixel
  GridKind kind = GridKind::Continuous;
  float nodata_value = -9999.0f;
  std::vector<double> values;
  std::vector<std::uint8_t> valid;  // 1 = valid, 0 = nodata

  static Grid continuous(std::size_t w, std::size_t h, double pixel_size = 30.0,
                         double fill = 0.0) {
    Grid g;
    g.width = w;
    g.height = h;
    g.pixel_size = pixel_size;
    g.kind = GridKind::Continuous;
    g.nodata_value = -9999.0f;
    g.values.assign(w * h, fill);
    g.valid.assign(w * h, 1);
    return g;
  }

  static Grid categorical(std::size_t w, std::size_t h, double pixel_size = 30.0,
                          std::uint8_t fill = 0) {
    Grid g;
    g.width = w;
    g.height = h;
    g.pixel_size = pixel_size;
    g.kind = GridKind::Categorical;
    g.nodata_value = 255.0f;
    g.values.assign(w * h, static_cast<double>(fill));
    g.valid.assign(w * h, 1);
    return g;
  }

  std::size_t size() const { return width * height; }
  bool is_valid(std::size_t i) const { return valid[i] != 0; }
  bool same_shape(const Grid& o) const { return width == o.width && height == o.height; }

  double& at(std::size_t row, std::size_t col) { return values[row * width + col]; }
  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }

  std::uint8_t class_at(std::size_t i) const { return static_cast<std::uint8_t>(values[i]); }

  void set_nodata(std::size_t i) {
    valid[i] = 0;
    values[i] = nodata_value;
  }

  double nodata_fraction() const {
    if (valid.empty()) return 0.0;
    std::size_t bad = 0;
    for (auto v : valid) bad += (v == 0);
    return static_cast<double>(bad) / static_cast<double>(valid.size());
  }

  /// Throws if the structural invariants do not hold. `class_count` is only
  /// consulted for categorical grids.
  void check(std::size_t class_count = 256) const {
    if (values.size() != width * height || valid.size() != width * height)
      throw ShapeError("grid value array length does not equal width*height");
    if (kind == GridKind::Categorical) {
      for (std::size_t i = 0; i < size(); ++i) {
        if (!valid[i]) continue;
        double v = values[i];
        if (v < 0 || v != std::floor(v) || v >= static_cast<double>(class_count))
          throw RangeError("categorical value " + std::to_string(v) + " outside legend of " +
                           std::to_string(class_count) + " classes");
      }
    }
  }

  /// Continuous imperviousness grids must stay within [0,100].
  void check_percent() const {
    if (kind != GridKind::Continuous) throw KindError("percent check needs a continuous grid");
    for (std::size_t i = 0; i < size(); ++i)
      if (valid[i] && (values[i] < 0.0 || values[i] > 100.0 || !std::isfinite(values[i])))
        throw RangeError("imperviousness value outside [0,100]");
  }
};

inline void require_same_shape(const Grid& a, const Grid& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": grid shapes differ (" + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                     std::to_string(b.height) + ")");
}

// ---------------------------------------------------------------------------
// Legend

/// Class legend. The default is the 16-class NLCD legend in its canonical
/// order; the four developed classes carry the upper bound of their
/// imperviousness band as weight.
struct LulcLegend {
  std::vector<std::string> names;
  std::vector<std::optional<double>> developed_weight;
  std::vector<bool> pervious;
  std::vector<int> source_codes;  // raw product codes, e.g. NLCD 11..95

  std::size_t class_count() const { return names.size(); }

  void check() const {
    const auto n = names.size();
    if (developed_weight.size() != n || pervious.size() != n)
      throw SchemaError("legend arrays have inconsistent lengths");
    for (std::size_t i = 0; i < n; ++i) {
      if (pervious[i] == developed_weight[i].has_value())
        throw SchemaError("legend class '" + names[i] +
                          "' must carry a weight iff it is developed");
      if (developed_weight[i] && (*developed_weight[i] <= 0.0 || *developed_weight[i] > 1.0))
        throw SchemaError("developed weight of '" + names[i] + "' outside (0,1]");
    }
  }

  /// Maps a raw product code to its class index, or -1 when unknown.
  int index_of_code(int code) const {
    for (std::size_t i = 0; i < source_codes.size(); ++i)
      if (source_codes[i] == code) return static_cast<int>(i);
    return -1;
  }

  static LulcLegend nlcd16() {
    LulcLegend l;
    struct Row {
      const char* name;
      int code;
      double weight;  // 0 = pervious
    };
    static constexpr std::array<Row, 16> rows{{
        {"Open Water", 11, 0.0},
        {"Perennial Ice/Snow", 12, 0.0},
        {"Developed, Open Space", 21, 0.20},
        {"Developed, Low Intensity", 22, 0.49},
        {"Developed, Medium Intensity", 23, 0.79},
        {"Developed, High Intensity", 24, 1.00},
        {"Barren Land", 31, 0.0},
        {"Deciduous Forest", 41, 0.0},
        {"Evergreen Forest", 42, 0.0},
        {"Mixed Forest", 43, 0.0},
        {"Shrub/Scrub", 52, 0.0},
        {"Grassland/Herbaceous", 71, 0.0},
        {"Pasture/Hay", 81, 0.0},
        {"Cultivated Crops", 82, 0.0},
        {"Woody Wetlands", 90, 0.0},
        {"Emergent Herbaceous Wetlands", 95, 0.0},
    }};
    for (const auto& r : rows) {
      l.names.emplace_back(r.name);
      l.source_codes.push_back(r.code);
      l.pervious.push_back(r.weight == 0.0);
      l.developed_weight.push_back(r.weight == 0.0 ? std::nullopt : std::optional<double>(r.weight));
    }
    return l;
  }
};

// NLCD class indices used across modules.
namespace nlcd {
inline constexpr std::uint8_t kOpenWater = 0;
inline constexpr std::uint8_t kDevOpen = 2;
inline constexpr std::uint8_t kDevLow = 3;
inline constexpr std::uint8_t kDevMedium = 4;
inline constexpr std::uint8_t kDevHigh = 5;
inline constexpr std::uint8_t kBarren = 6;
}  // namespace nlcd

// ---------------------------------------------------------------------------
// IGRD binary format
//
//   magic "IGRD" | version u16 (=1) | kind u8 | reserved u8 | width u32 |
//   height u32 | pixel_size_m f32 | nodata_value f32 | row-major body
//
// All fields little-endian. Body is u8 per pixel (categorical) or f32
// (continuous). Pixels equal to nodata_value are flagged invalid on load.

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  std::array<unsigned char, sizeof(T)> b{};
  std::memcpy(b.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  os.write(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

template <class T>
bool get_le(std::istream& is, T& v) {
  std::array<unsigned char, sizeof(T)> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return true;
}

inline bool same_float_bits(float a, float b) {
  if (std::isnan(a) && std::isnan(b)) return true;
  return a == b;
}

}  // namespace detail

inline constexpr std::uint16_t kIgrdVersion = 1;

inline void write_grid(std::ostream& os, const Grid& g) {
  if (g.values.size() != g.size()) throw ShapeError("grid value array length mismatch");
  os.write("IGRD", 4);
  detail::put_le<std::uint16_t>(os, kIgrdVersion);
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(g.kind));
  detail::put_le<std::uint8_t>(os, 0);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(g.width));
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(g.height));
  detail::put_le<float>(os, static_cast<float>(g.pixel_size));
  detail::put_le<float>(os, g.nodata_value);
  if (g.kind == GridKind::Categorical) {
    std::vector<std::uint8_t> body(g.size());
    const auto nd = static_cast<std::uint8_t>(g.nodata_value);
    for (std::size_t i = 0; i < g.size(); ++i)
      body[i] = g.valid[i] ? static_cast<std::uint8_t>(g.values[i]) : nd;
    os.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  } else {
    for (std::size_t i = 0; i < g.size(); ++i)
      detail::put_le<float>(os, g.valid[i] ? static_cast<float>(g.values[i]) : g.nodata_value);
  }
}

/// Reads an IGRD stream. When `expect` is set, a grid of the other kind is a
/// schema error.
inline Grid read_grid(std::istream& is, std::optional<GridKind> expect = std::nullopt) {
  char magic[4];
  if (!is.read(magic, 4)) throw IoError("IGRD: truncated header");
  if (std::memcmp(magic, "IGRD", 4) != 0) throw FormatError("IGRD: bad magic");
  std::uint16_t version = 0;
  std::uint8_t kind = 0, reserved = 0;
  std::uint32_t w = 0, h = 0;
  float px = 0, nodata = 0;
  if (!detail::get_le(is, version)) throw IoError("IGRD: truncated header");
  if (version != kIgrdVersion) throw FormatError("IGRD: unsupported version " + std::to_string(version));
  if (!detail::get_le(is, kind) || !detail::get_le(is, reserved) || !detail::get_le(is, w) ||
      !detail::get_le(is, h) || !detail::get_le(is, px) || !detail::get_le(is, nodata))
    throw IoError("IGRD: truncated header");
  if (kind > 1) throw SchemaError("IGRD: unknown kind byte " + std::to_string(kind));
  const auto k = static_cast<GridKind>(kind);
  if (expect && *expect != k)
    throw SchemaError(std::string("IGRD: expected ") + to_string(*expect) + " grid, found " + to_string(k));

  Grid g;
  g.width = w;
  g.height = h;
  g.pixel_size = px;
  g.kind = k;
  g.nodata_value = nodata;
  g.values.resize(g.size());
  g.valid.assign(g.size(), 1);
  if (k == GridKind::Categorical) {
    std::vector<std::uint8_t> body(g.size());
    if (!is.read(reinterpret_cast<char*>(body.data()), static_cast<std::streamsize>(body.size())))
      throw IoError("IGRD: truncated body");
    const bool has_nd = nodata >= 0.0f && nodata <= 255.0f;
    const auto nd = static_cast<std::uint8_t>(has_nd ? nodata : 0.0f);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g.values[i] = body[i];
      if (has_nd && body[i] == nd) g.valid[i] = 0;
    }
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) {
      float v = 0;
      if (!detail::get_le(is, v)) throw IoError("IGRD: truncated body");
      if (detail::same_float_bits(v, nodata)) {
        g.valid[i] = 0;
        g.values[i] = nodata;
      } else {
        g.values[i] = v;
      }
    }
  }
  return g;
}

inline Grid load_grid(const std::string& path, std::optional<GridKind> expect = std::nullopt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return read_grid(f, expect);
}

inline void save_grid(const Grid& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  write_grid(f, g);
  if (!f) throw IoError("write failed: " + path);
}

/// GeoTIFF input is not supported. Convert externally, e.g.
///   gdal_translate -of AAIGrid in.tif out.asc
/// and ingest the ESRI ASCII grid, which `read_ascii_grid` understands.
[[noreturn]] inline Grid load_geotiff(const std::string& path) {
  throw FormatError("GeoTIFF input is not supported (" + path +
                    "); convert to ESRI ASCII grid with gdal_translate -of AAIGrid");
}

/// Parses an ESRI ASCII grid (ncols/nrows/xllcorner/yllcorner/cellsize/
/// NODATA_value header followed by rows of numbers).
inline Grid read_ascii_grid(std::istream& is, GridKind kind) {
  std::size_t ncols = 0, nrows = 0;
  double cellsize = 30.0;
  std::optional<double> nodata;
  std::string key;
  std::streampos body_start = is.tellg();
  while (is >> key) {
    std::string lower;
    for (char c : key) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower == "ncols") is >> ncols;
    else if (lower == "nrows") is >> nrows;
    else if (lower == "cellsize") is >> cellsize;
    else if (lower == "nodata_value") { double v; is >> v; nodata = v; }
    else if (lower == "xllcorner" || lower == "yllcorner" || lower == "xllcenter" || lower == "yllcenter") {
      double ignored; is >> ignored;
    } else {
      is.clear();
      is.seekg(body_start);
      break;
    }
    body_start = is.tellg();
  }
  if (ncols == 0 || nrows == 0) throw FormatError("ASCII grid: missing ncols/nrows");
  Grid g = kind == GridKind::Categorical ? Grid::categorical(ncols, nrows, cellsize)
                                         : Grid::continuous(ncols, nrows, cellsize);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double v;
    if (!(is >> v)) throw IoError("ASCII grid: truncated body");
    if (nodata && v == *nodata) g.set_nodata(i);
    else g.values[i] = v;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Tiling

struct Tile {
  std::size_t row = 0;  // top-left pixel
  std::size_t col = 0;
  double nodata_fraction = 0.0;
};

/// Non-overlapping, top-left anchored tiles over a parent grid. Pixels in the
/// right and bottom margins that do not fill a whole tile are excluded.
struct TileSet {
  std::string parent_id;
  std::size_t grid_width = 0;
  std::size_t grid_height = 0;
  std::size_t side = 0;
  std::vector<Tile> tiles;
  std::size_t margin_right = 0;
  std::size_t margin_bottom = 0;
  bool warning = false;
  std::string status = "ok";

  std::size_t cols() const { return side ? grid_width / side : 0; }
  std::size_t rows() const { return side ? grid_height / side : 0; }
};

inline TileSet tile(const Grid& grid, std::size_t side, std::string parent_id = {}) {
  if (side < 1) throw RangeError("tile side must be >= 1");
  TileSet ts;
  ts.parent_id = std::move(parent_id);
  ts.grid_width = grid.width;
  ts.grid_height = grid.height;
  ts.side = side;
  if (side > grid.width || side > grid.height) {
    ts.warning = true;
    ts.status = "tile side " + std::to_string(side) + " exceeds grid " + std::to_string(grid.width) +
                "x" + std::to_string(grid.height) + "; no tiles";
    ts.margin_right = grid.width;
    ts.margin_bottom = grid.height;
    return ts;
  }
  ts.margin_right = grid.width % side;
  ts.margin_bottom = grid.height % side;
  for (std::size_t r = 0; r + side <= grid.height; r += side) {
    for (std::size_t c = 0; c + side <= grid.width; c += side) {
      std::size_t bad = 0;
      for (std::size_t y = r; y < r + side; ++y)
        for (std::size_t x = c; x < c + side; ++x) bad += grid.valid[y * grid.width + x] == 0;
      ts.tiles.push_back({r, c, static_cast<double>(bad) / static_cast<double>(side * side)});
    }
  }
  if (ts.margin_right || ts.margin_bottom)
    ts.status = "excluded margins: right " + std::to_string(ts.margin_right) + " px, bottom " +
                std::to_string(ts.margin_bottom) + " px";
  return ts;
}

/// Copies a square window out of `grid`.
inline Grid crop(const Grid& grid, std::size_t row, std::size_t col, std::size_t w, std::size_t h) {
  if (row + h > grid.height || col + w > grid.width) throw ShapeError("crop window outside grid");
  Grid out = grid;
  out.width = w;
  out.height = h;
  out.values.resize(w * h);
  out.valid.resize(w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      out.values[y * w + x] = grid.values[(row + y) * grid.width + col + x];
      out.valid[y * w + x] = grid.valid[(row + y) * grid.width + col + x];
    }
  return out;
}

inline Grid extract_tile(const Grid& grid, const TileSet& ts, std::size_t index) {
  const auto& t = ts.tiles.at(index);
  return crop(grid, t.row, t.col, ts.side, ts.side);
}

/// Writes `tile_grid` back into `dst` at the tile's offset.
inline void paste(Grid& dst, const Grid& tile_grid, std::size_t row, std::size_t col) {
  if (row + tile_grid.height > dst.height || col + tile_grid.width > dst.width)
    throw ShapeError("paste window outside grid");
  for (std::size_t y = 0; y < tile_grid.height; ++y)
    for (std::size_t x = 0; x < tile_grid.width; ++x) {
      dst.values[(row + y) * dst.width + col + x] = tile_grid.values[y * tile_grid.width + x];
      dst.valid[(row + y) * dst.width + col + x] = tile_grid.valid[y * tile_grid.width + x];
    }
}

// ---------------------------------------------------------------------------
// Aggregation and change

/// Block mean over cell x cell windows, ignoring nodata. A block with no valid
/// pixel is nodata in the output.
inline Grid aggregate(const Grid& grid, std::size_t cell) {
  if (grid.kind != GridKind::Continuous) throw KindError("aggregate needs a continuous grid");
  if (cell == 0 || grid.width % cell != 0 || grid.height % cell != 0)
    throw ShapeError("aggregation cell " + std::to_string(cell) + " does not divide grid " +
                     std::to_string(grid.width) + "x" + std::to_string(grid.height));
  Grid out = Grid::continuous(grid.width / cell, grid.height / cell, grid.pixel_size * static_cast<double>(cell));
  out.nodata_value = grid.nodata_value;
  for (std::size_t by = 0; by < out.height; ++by)
    for (std::size_t bx = 0; bx < out.width; ++bx) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t y = by * cell; y < (by + 1) * cell; ++y)
        for (std::size_t x = bx * cell; x < (bx + 1) * cell; ++x) {
          const auto i = y * grid.width + x;
          if (grid.valid[i]) {
            sum += grid.values[i];
            ++n;
          }
        }
      const auto o = by * out.width + bx;
      if (n == 0) out.set_nodata(o);
      else out.values[o] = sum / static_cast<double>(n);
    }
  return out;
}

/// Signed per-pixel difference after - before; nodata in either input
/// propagates.
inline Grid change_map(const Grid& before, const Grid& after) {
  require_same_shape(before, after, "change_map");
  if (before.kind != GridKind::Continuous || after.kind != GridKind::Continuous)
    throw KindError("change_map needs continuous grids");
  Grid out = Grid::continuous(before.width, before.height, before.pixel_size);
  out.nodata_value = before.nodata_value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (before.valid[i] && after.valid[i]) out.values[i] = after.values[i] - before.values[i];
    else out.set_nodata(i);
  }
  return out;
}

}  // namespace impervia
