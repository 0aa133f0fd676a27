#pragma once

// Assembly of the 12-channel model input for one 10 km mesh cell.
//
// Channel order: B4 B3 B2 | B7 B6 B5 | NDBI NDVI NDWI | NTL NTL NTL

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <limits>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "meshpop/error.hpp"
#include "meshpop/mesh_grid.hpp"
#include "meshpop/raster.hpp"

namespace meshpop::tiles {

using raster::Band;
using raster::RasterGrid;

inline constexpr int kChannels = 12;
inline constexpr int kDefaultTileSize = 334;

inline const std::array<std::string, kChannels>& channel_names() {
  static const std::array<std::string, kChannels> names = {"B4",   "B3",   "B2",   "B7",  "B6",  "B5",
                                                           "NDBI", "NDVI", "NDWI", "NTL", "NTL", "NTL"};
  return names;
}

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val" || s == "validation") return Split::val;
  if (s == "test") return Split::test;
  throw ParseError("unknown split '" + s + "'");
}

struct TileSample {
  mesh::MeshCode mesh;
  int year = 0;
  int size = kDefaultTileSize;
  std::vector<float> tensor;  // channel, row, column
  std::optional<std::array<float, 3>> label;
  std::optional<Split> split;

  const float* channel(int c) const { return tensor.data() + static_cast<std::size_t>(c) * size * size; }
  float* channel(int c) { return tensor.data() + static_cast<std::size_t>(c) * size * size; }
};

// Sub-raster of the pixels whose centers fall inside the mesh bbox.
// Throws IncompleteCoverage if any such pixel center lies outside `g`.
inline RasterGrid crop_to_mesh(const RasterGrid& g, const mesh::MeshCode& m) {
  const mesh::GeoBox b = m.bbox();
  auto row_center = [&](long r) { return g.origin_lat - (static_cast<double>(r) + 0.5) * g.pixel_lat; };
  auto col_center = [&](long c) { return g.origin_lon + (static_cast<double>(c) + 0.5) * g.pixel_lon; };

  // First row whose center is below lat_max, last row whose center is >= lat_min.
  long r0 = static_cast<long>(std::floor((g.origin_lat - b.lat_max) / g.pixel_lat - 0.5));
  while (row_center(r0) >= b.lat_max) ++r0;
  while (row_center(r0 - 1) < b.lat_max) --r0;
  long r1 = static_cast<long>(std::floor((g.origin_lat - b.lat_min) / g.pixel_lat - 0.5));
  while (row_center(r1) < b.lat_min) --r1;
  while (row_center(r1 + 1) >= b.lat_min) ++r1;
  long c0 = static_cast<long>(std::floor((b.lon_min - g.origin_lon) / g.pixel_lon - 0.5));
  while (col_center(c0) < b.lon_min) ++c0;
  while (col_center(c0 - 1) >= b.lon_min) --c0;
  long c1 = static_cast<long>(std::floor((b.lon_max - g.origin_lon) / g.pixel_lon - 0.5));
  while (col_center(c1) >= b.lon_max) --c1;
  while (col_center(c1 + 1) < b.lon_max) ++c1;

  if (r0 > r1 || c0 > c1) throw IncompleteCoverage("mesh " + m.str() + " contains no pixel center");
  if (r0 < 0 || c0 < 0 || r1 >= g.rows || c1 >= g.cols)
    throw IncompleteCoverage("mesh " + m.str() + " is not fully covered by the raster");

  RasterGrid out;
  out.rows = static_cast<int>(r1 - r0 + 1);
  out.cols = static_cast<int>(c1 - c0 + 1);
  out.origin_lat = g.origin_lat - static_cast<double>(r0) * g.pixel_lat;
  out.origin_lon = g.origin_lon + static_cast<double>(c0) * g.pixel_lon;
  out.pixel_lat = g.pixel_lat;
  out.pixel_lon = g.pixel_lon;
  out.north_up = g.north_up;
  out.crs = g.crs;
  out.values.resize(static_cast<std::size_t>(out.rows) * out.cols);
  for (int r = 0; r < out.rows; ++r)
    std::memcpy(&out.values[static_cast<std::size_t>(r) * out.cols], &g.values[(r0 + r) * g.cols + c0],
                sizeof(float) * out.cols);
  return out;
}

enum class Resampling { bilinear, nearest };

inline Resampling parse_resampling(const std::string& s) {
  if (s == "bilinear") return Resampling::bilinear;
  if (s == "nearest") return Resampling::nearest;
  throw ParseError("unknown resampling method '" + s + "'");
}

// Resamples onto an out_rows x out_cols grid spanning the same extent.
// Pixel centers are aligned (half-pixel convention); bilinear clamps at edges.
inline RasterGrid resample(const RasterGrid& g, int out_rows, int out_cols, Resampling method) {
  g.validate();
  if (out_rows < 1 || out_cols < 1) throw ShapeError("resample target must be at least 1x1");
  RasterGrid out;
  out.rows = out_rows;
  out.cols = out_cols;
  out.origin_lat = g.origin_lat;
  out.origin_lon = g.origin_lon;
  out.pixel_lat = g.pixel_lat * g.rows / out_rows;
  out.pixel_lon = g.pixel_lon * g.cols / out_cols;
  out.north_up = g.north_up;
  out.crs = g.crs;
  out.values.resize(static_cast<std::size_t>(out_rows) * out_cols);

  const double sy = static_cast<double>(g.rows) / out_rows;
  const double sx = static_cast<double>(g.cols) / out_cols;
  if (method == Resampling::nearest) {
    std::vector<int> cols(out_cols);
    for (int j = 0; j < out_cols; ++j) cols[j] = std::min(g.cols - 1, static_cast<int>(std::floor((j + 0.5) * sx)));
    for (int i = 0; i < out_rows; ++i) {
      const int r = std::min(g.rows - 1, static_cast<int>(std::floor((i + 0.5) * sy)));
      for (int j = 0; j < out_cols; ++j) out.at(i, j) = g.at(r, cols[j]);
    }
    return out;
  }

  struct Tap {
    int i0, i1;
    double t;
  };
  auto taps = [](int n_out, int n_in, double scale) {
    std::vector<Tap> v(n_out);
    for (int k = 0; k < n_out; ++k) {
      double s = (k + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
      const int i0 = static_cast<int>(std::floor(s));
      const int i1 = std::min(i0 + 1, n_in - 1);
      v[k] = {i0, i1, s - i0};
    }
    return v;
  };
  const auto ty = taps(out_rows, g.rows, sy);
  const auto tx = taps(out_cols, g.cols, sx);
  for (int i = 0; i < out_rows; ++i) {
    for (int j = 0; j < out_cols; ++j) {
      const double wy1 = ty[i].t, wy0 = 1.0 - wy1;
      const double wx1 = tx[j].t, wx0 = 1.0 - wx1;
      const double a = g.at(ty[i].i0, tx[j].i0), b = g.at(ty[i].i0, tx[j].i1);
      const double c = g.at(ty[i].i1, tx[j].i0), d = g.at(ty[i].i1, tx[j].i1);
      double acc = 0.0;
      bool nan = false;
      auto add = [&](double w, double v) {
        if (w == 0.0) return;
        if (std::isnan(v)) nan = true;
        acc += w * v;
      };
      add(wy0 * wx0, a);
      add(wy0 * wx1, b);
      add(wy1 * wx0, c);
      add(wy1 * wx1, d);
      out.at(i, j) = nan ? std::numeric_limits<float>::quiet_NaN() : static_cast<float>(acc);
    }
  }
  return out;
}

// A year's composites keyed by band.
using CompositeSet = std::map<Band, RasterGrid>;

struct TileOptions {
  int tile_size = kDefaultTileSize;
  Resampling reflectance_method = Resampling::bilinear;
  Resampling ntl_method = Resampling::nearest;
};

namespace detail {

inline std::uint32_t byteswap32(std::uint32_t v) { return __builtin_bswap32(v); }

// Replaces NaN with the mean of the finite values; throws if none are finite.
inline void fill_with_mean(float* v, std::size_t n, const std::string& what) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (std::isfinite(v[i])) {
      sum += v[i];
      ++count;
    }
  if (count == 0) throw DataError(what + " has no valid pixels");
  if (count == n) return;
  const float mean = static_cast<float>(sum / static_cast<double>(count));
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(v[i])) v[i] = mean;
}

}  // namespace detail

inline TileSample build_tile(const CompositeSet& composites, const mesh::MeshCode& m, int year,
                             const TileOptions& opts = {}) {
  if (m.level() != mesh::Level::L10km) throw LevelError("tiles are built for 10 km cells, got " + m.str());
  auto band = [&](Band b) -> const RasterGrid& {
    auto it = composites.find(b);
    if (it == composites.end())
      throw MissingBand(std::string("band ") + raster::band_name(b) + " missing for year " + std::to_string(year));
    return it->second;
  };
  // Fail fast on missing bands before any cropping.
  for (Band b : {Band::B2, Band::B3, Band::B4, Band::B5, Band::B6, Band::B7, Band::NTL}) (void)band(b);

  const int s = opts.tile_size;
  const RasterGrid b2 = crop_to_mesh(band(Band::B2), m);
  const RasterGrid b3 = crop_to_mesh(band(Band::B3), m);
  const RasterGrid b4 = crop_to_mesh(band(Band::B4), m);
  const RasterGrid b5 = crop_to_mesh(band(Band::B5), m);
  const RasterGrid b6 = crop_to_mesh(band(Band::B6), m);
  const RasterGrid b7 = crop_to_mesh(band(Band::B7), m);
  const RasterGrid ntl = raster::ntl_log(crop_to_mesh(band(Band::NTL), m));

  // Indices at native resolution, then resampled with the reflectance bands.
  const std::array<RasterGrid, 9> native = {b4, b3, b2, b7, b6, b5, raster::ndbi(b6, b5), raster::ndvi(b5, b4),
                                            raster::ndwi(b3, b5)};

  TileSample tile;
  tile.mesh = m;
  tile.year = year;
  tile.size = s;
  tile.tensor.resize(static_cast<std::size_t>(kChannels) * s * s);
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  for (int c = 0; c < 9; ++c) {
    const RasterGrid r = resample(native[c], s, s, opts.reflectance_method);
    std::memcpy(tile.channel(c), r.values.data(), plane * sizeof(float));
    detail::fill_with_mean(tile.channel(c), plane,
                           "tile " + m.str() + "/" + std::to_string(year) + " channel " + channel_names()[c]);
  }
  const RasterGrid n = resample(ntl, s, s, opts.ntl_method);
  std::memcpy(tile.channel(9), n.values.data(), plane * sizeof(float));
  detail::fill_with_mean(tile.channel(9), plane, "tile " + m.str() + "/" + std::to_string(year) + " channel NTL");
  std::memcpy(tile.channel(10), tile.channel(9), plane * sizeof(float));
  std::memcpy(tile.channel(11), tile.channel(9), plane * sizeof(float));
  return tile;
}

// ---------------------------------------------------------------------------
// Tile container: one JSON header line, then raw little-endian float32 data.

inline void write_tile(const std::filesystem::path& path, const TileSample& t) {
  if (t.tensor.size() != static_cast<std::size_t>(kChannels) * t.size * t.size)
    throw ShapeError("tile tensor size does not match its shape");
  nlohmann::json header = {
      {"mesh", t.mesh.str()},
      {"year", t.year},
      {"channel_names", channel_names()},
      {"shape", {kChannels, t.size, t.size}},
      {"dtype", "float32"},
      {"byte_order", "little"},
  };
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    const std::string h = header.dump() + "\n";
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(t.tensor.data()),
                static_cast<std::streamsize>(t.tensor.size() * sizeof(float)));
    } else {
      for (float v : t.tensor) {
        auto u = detail::byteswap32(std::bit_cast<std::uint32_t>(v));
        out.write(reinterpret_cast<const char*>(&u), sizeof(u));
      }
    }
    if (!out) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline TileSample read_tile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tile " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": bad tile header: " + e.what());
  }
  if (header.value("dtype", "") != "float32" || header.value("byte_order", "") != "little")
    throw ParseError(path.string() + ": unsupported tile encoding");
  const auto shape = header.at("shape").get<std::vector<int>>();
  if (shape.size() != 3 || shape[0] != kChannels || shape[1] != shape[2] || shape[1] < 1)
    throw ShapeError(path.string() + ": unexpected tile shape");
  TileSample t;
  t.mesh = mesh::MeshCode::parse(header.at("mesh").get<std::string>());
  t.year = header.at("year").get<int>();
  t.size = shape[1];
  t.tensor.resize(static_cast<std::size_t>(kChannels) * t.size * t.size);
  in.read(reinterpret_cast<char*>(t.tensor.data()), static_cast<std::streamsize>(t.tensor.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(t.tensor.size() * sizeof(float)))
    throw IoError(path.string() + ": truncated tile payload");
  if constexpr (std::endian::native != std::endian::little) {
    for (float& v : t.tensor) v = std::bit_cast<float>(detail::byteswap32(std::bit_cast<std::uint32_t>(v)));
  }
  return t;
}

struct TileEntry {
  mesh::MeshCode mesh;
  int year = 0;
  std::string path;  // relative to the manifest directory

  bool operator==(const TileEntry&) const = default;
};

inline std::string tile_relative_path(const mesh::MeshCode& m, int year) {
  return std::to_string(year) + "/" + m.str() + ".tile";
}

inline void write_tile_manifest(const std::filesystem::path& path, std::vector<TileEntry> entries) {
  std::sort(entries.begin(), entries.end(), [](const TileEntry& a, const TileEntry& b) {
    return a.year != b.year ? a.year < b.year : a.mesh.str() < b.mesh.str();
  });
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << "mesh,year,path\n";
    for (const auto& e : entries) out << e.mesh.str() << ',' << e.year << ',' << e.path << '\n';
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<TileEntry> read_tile_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tile manifest " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "mesh,year,path") throw ParseError(path.string() + ": unexpected manifest header");
  std::vector<TileEntry> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string mesh, year, rel;
    if (!std::getline(ss, mesh, ',') || !std::getline(ss, year, ',') || !std::getline(ss, rel))
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed manifest row");
    try {
      out.push_back({mesh::MeshCode::parse(mesh), std::stoi(year), rel});
    } catch (const std::invalid_argument&) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": bad year");
    }
  }
  return out;
}

}  // namespace meshpop::tiles
