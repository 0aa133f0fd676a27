#pragma once

// Synthetic scenes and labels with a known relation between night-time light
// and population: for every 10 km cell the NTL radiance is constant, and the
// log10 group counts are affine in ln(1 + radiance) plus Gaussian noise.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "meshpop/dataset.hpp"
#include "meshpop/geotiff.hpp"
#include "meshpop/mesh_grid.hpp"
#include "meshpop/raster.hpp"
#include "meshpop/rng.hpp"

namespace meshpop::synth {

struct SynthOptions {
  std::string origin = "533900";  // south-west 10 km cell of the block
  int mesh_rows = 15;
  int mesh_cols = 20;
  int px_per_mesh = 24;   // reflectance pixels per cell side
  int ntl_px_per_mesh = 6;
  int scenes_per_year = 3;
  double cloud_fraction = 0.25;
  std::vector<int> census_years{2020};
  std::vector<int> prediction_years{2022};
  std::array<double, 3> intercept{1.0, 1.6, 1.2};
  std::array<double, 3> slope{0.6, 0.7, 0.5};
  double noise_sd = 0.05;
  double max_log_ntl = 4.0;
  bool fine_labels = true;  // write 1 km records that sum to the 10 km counts
  std::uint64_t seed = 1;
};

struct SynthResult {
  std::vector<mesh::MeshCode> meshes;
  std::map<std::string, double> log_ntl;  // per mesh, ln(1 + radiance)
  std::vector<mesh::LabelRecord> labels;  // as written (1 km or 10 km)
};

inline std::vector<mesh::MeshCode> mesh_block(const SynthOptions& o) {
  const mesh::MeshCode base = mesh::MeshCode::parse(o.origin);
  if (base.level() != mesh::Level::L10km) throw LevelError("synthetic origin must be a 10 km code");
  std::vector<mesh::MeshCode> out;
  for (int r = 0; r < o.mesh_rows; ++r)
    for (int c = 0; c < o.mesh_cols; ++c) out.emplace_back(mesh::Level::L10km, base.row() + r, base.col() + c);
  return out;
}

// Splits `total` into `parts` non-negative integers with random weights.
inline std::vector<std::uint64_t> scatter(std::uint64_t total, int parts, Rng& rng) {
  std::vector<double> w(parts);
  double sum = 0.0;
  for (auto& x : w) sum += (x = rng.uniform(0.2, 1.0));
  std::vector<std::uint64_t> out(parts);
  std::uint64_t used = 0;
  for (int i = 0; i < parts; ++i) used += (out[i] = static_cast<std::uint64_t>(std::floor(total * w[i] / sum)));
  for (std::uint64_t k = 0; used < total; ++k, ++used) out[k % parts] += 1;
  return out;
}

// Writes scenes/<year>/<band>/sNN.tif (+ sNN.mask.tif for Landsat bands)
// and labels.csv under `root`.
inline SynthResult generate(const std::filesystem::path& root, const SynthOptions& o) {
  namespace fs = std::filesystem;
  SynthResult res;
  res.meshes = mesh_block(o);
  Rng rng(o.seed);
  for (const auto& m : res.meshes) res.log_ntl[m.str()] = rng.uniform(0.0, o.max_log_ntl);

  const mesh::GeoBox sw = res.meshes.front().bbox();
  const double cell_lat = sw.lat_max - sw.lat_min;
  const double cell_lon = sw.lon_max - sw.lon_min;
  const double lat_top = sw.lat_min + o.mesh_rows * cell_lat;
  const double lon_left = sw.lon_min;
  const int rows = o.mesh_rows * o.px_per_mesh, cols = o.mesh_cols * o.px_per_mesh;
  const int nrows = o.mesh_rows * o.ntl_px_per_mesh, ncols = o.mesh_cols * o.ntl_px_per_mesh;

  auto mesh_at = [&](int r, int c, int per) {
    const int mr = o.mesh_rows - 1 - r / per;
    const int mc = c / per;
    return res.meshes[static_cast<std::size_t>(mr) * o.mesh_cols + mc].str();
  };

  std::vector<int> years = o.census_years;
  years.insert(years.end(), o.prediction_years.begin(), o.prediction_years.end());
  for (int year : years) {
    Rng yr(derive_seed(o.seed, static_cast<std::uint64_t>(year)));
    const fs::path ydir = root / "scenes" / std::to_string(year);
    for (raster::Band b : {raster::Band::B2, raster::Band::B3, raster::Band::B4, raster::Band::B5, raster::Band::B6,
                           raster::Band::B7}) {
      const fs::path bdir = ydir / raster::band_name(b);
      // Reflectance loosely tied to brightness.
      for (int s = 0; s < o.scenes_per_year; ++s) {
        raster::RasterGrid g(rows, cols, lat_top, lon_left, cell_lat / o.px_per_mesh, cell_lon / o.px_per_mesh);
        std::vector<std::uint8_t> cloud(g.values.size(), 0);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) {
            const double urban = res.log_ntl[mesh_at(r, c, o.px_per_mesh)] / o.max_log_ntl;
            const double refl = 0.05 + 0.2 * urban * (static_cast<int>(b) % 2 ? 1.0 : 0.6) + yr.uniform(0.0, 0.1);
            g.at(r, c) = static_cast<float>(std::round((refl - raster::kLandsatReflectanceOffset) /
                                                       raster::kLandsatReflectanceScale));
            cloud[static_cast<std::size_t>(r) * cols + c] = yr.uniform() < o.cloud_fraction ? 1 : 0;
          }
        char name[16];
        std::snprintf(name, sizeof(name), "s%02d", s);
        raster::write_raster(bdir / (std::string(name) + ".tif"), g);
        raster::write_mask(bdir / (std::string(name) + ".mask.tif"), g, cloud);
      }
    }
    raster::RasterGrid ntl(nrows, ncols, lat_top, lon_left, cell_lat / o.ntl_px_per_mesh, cell_lon / o.ntl_px_per_mesh);
    for (int r = 0; r < nrows; ++r)
      for (int c = 0; c < ncols; ++c)
        ntl.at(r, c) = static_cast<float>(std::expm1(res.log_ntl[mesh_at(r, c, o.ntl_px_per_mesh)]));
    raster::write_raster(ydir / "NTL" / "s00.tif", ntl);
  }

  for (int year : o.census_years) {
    Rng lr(derive_seed(o.seed ^ 0x1abe1, static_cast<std::uint64_t>(year)));
    for (const auto& m : res.meshes) {
      // Radiance as it reads back from the float32 raster.
      const double x = std::log1p(static_cast<double>(static_cast<float>(std::expm1(res.log_ntl[m.str()]))));
      std::array<std::uint64_t, 3> counts{};
      for (int g = 0; g < 3; ++g) {
        const double y = o.intercept[g] + o.slope[g] * x + lr.normal(0.0, o.noise_sd);
        counts[g] = static_cast<std::uint64_t>(std::llround(std::pow(10.0, y)));
      }
      if (!o.fine_labels) {
        res.labels.push_back({m, year, counts[0], counts[1], counts[2]});
        continue;
      }
      const auto kids = mesh::children_1km(m);
      std::array<std::vector<std::uint64_t>, 3> parts;
      for (int g = 0; g < 3; ++g) parts[g] = scatter(counts[g], static_cast<int>(kids.size()), lr);
      for (std::size_t k = 0; k < kids.size(); ++k)
        res.labels.push_back({kids[k], year, parts[0][k], parts[1][k], parts[2][k]});
    }
  }
  data::write_labels(root / "labels.csv", res.labels);
  return res;
}

}  // namespace meshpop::synth
