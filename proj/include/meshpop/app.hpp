#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "meshpop/dataset.hpp"
#include "meshpop/error.hpp"
#include "meshpop/mesh_grid.hpp"
#include "meshpop/tile.hpp"
#include "meshpop/trainer.hpp"

namespace meshpop::app {

using mesh::MeshCode;

struct PredictionRecord {
  MeshCode mesh;
  int year = 0;
  double est_pop_0_14 = 0.0;
  double est_pop_15_64 = 0.0;
  double est_pop_65p = 0.0;
  double aged_rate = std::numeric_limits<double>::quiet_NaN();  // NaN when the total is 0

  bool aged_rate_defined() const { return !std::isnan(aged_rate); }
};

// Back-transforms one model output row (log10 counts).
inline PredictionRecord to_record(const MeshCode& m, int year, double y0, double y1, double y2) {
  PredictionRecord r;
  r.mesh = m;
  r.year = year;
  r.est_pop_0_14 = std::pow(10.0, y0);
  r.est_pop_15_64 = std::pow(10.0, y1);
  r.est_pop_65p = std::pow(10.0, y2);
  const double total = r.est_pop_0_14 + r.est_pop_15_64 + r.est_pop_65p;
  if (total > 0.0 && std::isfinite(total)) r.aged_rate = r.est_pop_65p / total;
  return r;
}

// One record per tile entry of `year`, in manifest order.
inline std::vector<PredictionRecord> predict_year(nn::Model<float>& model, const std::vector<tiles::TileEntry>& entries,
                                                  const std::filesystem::path& tile_dir, int year, int batch_size) {
  std::vector<data::Sample> samples;
  for (const auto& e : entries)
    if (e.year == year) samples.push_back({e.mesh, e.year, tile_dir / e.path, {}, false});
  if (samples.empty()) throw DataError("no tiles for year " + std::to_string(year));
  const auto y = train::infer(model, samples, batch_size);
  std::vector<PredictionRecord> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    out.push_back(to_record(samples[i].mesh, year, y[i * 3], y[i * 3 + 1], y[i * 3 + 2]));
  return out;
}

// ---------------------------------------------------------------------------

inline constexpr const char* kPredictionHeader = "mesh_code,year,est_pop_0_14,est_pop_15_64,est_pop_65p,aged_rate";

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << text;
    if (!out) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline void export_csv(const std::filesystem::path& path, const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw DomainError("nothing to export");
  std::string s = std::string(kPredictionHeader) + "\n";
  for (const auto& r : records)
    s += r.mesh.str() + "," + std::to_string(r.year) + "," + format_number(r.est_pop_0_14) + "," +
         format_number(r.est_pop_15_64) + "," + format_number(r.est_pop_65p) + "," + format_number(r.aged_rate) + "\n";
  write_text_atomic(path, s);
}

inline std::vector<PredictionRecord> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || data::detail::trim(line) != kPredictionHeader)
    throw ParseError(path.string() + ": expected header '" + kPredictionHeader + "'");
  std::vector<PredictionRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = data::detail::trim(line);
    if (line.empty()) continue;
    auto f = data::detail::split_csv(line);
    if (f.size() != 6) throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    try {
      PredictionRecord r;
      r.mesh = MeshCode::parse(f[0]);
      r.year = std::stoi(f[1]);
      r.est_pop_0_14 = std::stod(f[2]);
      r.est_pop_15_64 = std::stod(f[3]);
      r.est_pop_65p = std::stod(f[4]);
      r.aged_rate = f[5].empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[5]);
      out.push_back(r);
    } catch (const std::logic_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// RFC 7946 FeatureCollection; coordinates are [lon, lat], counter-clockwise.
inline nlohmann::json to_geojson(const std::vector<PredictionRecord>& records) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& r : records) {
    const auto b = r.mesh.bbox();
    nlohmann::json ring = nlohmann::json::array({{b.lon_min, b.lat_min},
                                                 {b.lon_max, b.lat_min},
                                                 {b.lon_max, b.lat_max},
                                                 {b.lon_min, b.lat_max},
                                                 {b.lon_min, b.lat_min}});
    nlohmann::json props = {{"mesh_code", r.mesh.str()},
                            {"year", r.year},
                            {"est_pop_0_14", r.est_pop_0_14},
                            {"est_pop_15_64", r.est_pop_15_64},
                            {"est_pop_65p", r.est_pop_65p}};
    props["aged_rate"] = r.aged_rate_defined() ? nlohmann::json(r.aged_rate) : nlohmann::json(nullptr);
    features.push_back({{"type", "Feature"},
                        {"geometry", {{"type", "Polygon"}, {"coordinates", nlohmann::json::array({ring})}}},
                        {"properties", props}});
  }
  return {{"type", "FeatureCollection"}, {"features", features}};
}

inline void export_geojson(const std::filesystem::path& path, const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw DomainError("nothing to export");
  write_text_atomic(path, to_geojson(records).dump() + "\n");
}

inline std::vector<PredictionRecord> read_geojson(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  std::vector<PredictionRecord> out;
  for (const auto& f : j.at("features")) {
    const auto& p = f.at("properties");
    PredictionRecord r;
    r.mesh = MeshCode::parse(p.at("mesh_code").get<std::string>());
    r.year = p.at("year").get<int>();
    r.est_pop_0_14 = p.at("est_pop_0_14").get<double>();
    r.est_pop_15_64 = p.at("est_pop_15_64").get<double>();
    r.est_pop_65p = p.at("est_pop_65p").get<double>();
    r.aged_rate = p.at("aged_rate").is_null() ? std::numeric_limits<double>::quiet_NaN() : p.at("aged_rate").get<double>();
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Choropleth of the aged rate as a binary PPM, one block of `cell_px` pixels
// per 10 km cell, north up. Cells without a record or with an undefined
// rate are light grey.

struct Rgb {
  unsigned char r, g, b;
};

// Sequential ramp, light yellow (low) to dark red (high).
inline const std::array<Rgb, 5>& color_ramp() {
  static const std::array<Rgb, 5> ramp{{{255, 255, 178}, {254, 204, 92}, {253, 141, 60}, {240, 59, 32}, {189, 0, 38}}};
  return ramp;
}

inline Rgb ramp_color(double t) {
  const auto& ramp = color_ramp();
  t = std::clamp(t, 0.0, 1.0) * (ramp.size() - 1);
  const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(t), ramp.size() - 2);
  const double f = t - static_cast<double>(i);
  auto mix = [&](unsigned char a, unsigned char b) {
    return static_cast<unsigned char>(std::lround(a + (static_cast<double>(b) - a) * f));
  };
  return {mix(ramp[i].r, ramp[i + 1].r), mix(ramp[i].g, ramp[i + 1].g), mix(ramp[i].b, ramp[i + 1].b)};
}

struct PlotOptions {
  int cell_px = 8;
  double rate_min = 0.0;  // ramp endpoints
  double rate_max = 0.5;
};

inline void write_choropleth(const std::filesystem::path& path, const std::vector<PredictionRecord>& records,
                             const PlotOptions& opt = {}) {
  if (records.empty()) throw DomainError("nothing to plot");
  std::int64_t rmin = INT64_MAX, rmax = INT64_MIN, cmin = INT64_MAX, cmax = INT64_MIN;
  for (const auto& r : records) {
    if (r.mesh.level() != mesh::Level::L10km) throw LevelError("choropleth expects 10 km cells, got " + r.mesh.str());
    rmin = std::min(rmin, r.mesh.row());
    rmax = std::max(rmax, r.mesh.row());
    cmin = std::min(cmin, r.mesh.col());
    cmax = std::max(cmax, r.mesh.col());
  }
  const std::int64_t rows = rmax - rmin + 1, cols = cmax - cmin + 1;
  if (rows * cols > 4'000'000) throw DomainError("choropleth extent too large");
  const int px = opt.cell_px;
  const std::size_t width = static_cast<std::size_t>(cols * px), height = static_cast<std::size_t>(rows * px);
  std::vector<unsigned char> img(width * height * 3, 220);
  for (const auto& r : records) {
    if (!r.aged_rate_defined()) continue;
    const Rgb c = ramp_color((r.aged_rate - opt.rate_min) / (opt.rate_max - opt.rate_min));
    const std::size_t y0 = static_cast<std::size_t>(rmax - r.mesh.row()) * px;
    const std::size_t x0 = static_cast<std::size_t>(r.mesh.col() - cmin) * px;
    for (int dy = 0; dy < px; ++dy)
      for (int dx = 0; dx < px; ++dx) {
        unsigned char* p = img.data() + ((y0 + dy) * width + x0 + dx) * 3;
        p[0] = c.r;
        p[1] = c.g;
        p[2] = c.b;
      }
  }
  std::string s = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  s.append(reinterpret_cast<const char*>(img.data()), img.size());
  write_text_atomic(path, s);
}

}  // namespace meshpop::app
