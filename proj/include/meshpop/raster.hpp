#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "meshpop/error.hpp"
#include "meshpop/mesh_grid.hpp"

namespace meshpop::raster {

// Single-band georeferenced float raster on a north-up lat/lon grid.
// Row 0 is the northern edge; nodata is normalized to NaN on load.
struct RasterGrid {
  int rows = 0;
  int cols = 0;
  std::vector<float> values;
  double origin_lat = 0.0;  // upper-left corner
  double origin_lon = 0.0;
  double pixel_lat = 1.0;   // magnitude, rows advance southward
  double pixel_lon = 1.0;
  bool north_up = true;
  std::string crs = "EPSG:4326";
  float nodata = std::numeric_limits<float>::quiet_NaN();

  RasterGrid() = default;
  RasterGrid(int rows_, int cols_, double origin_lat_, double origin_lon_, double pixel_lat_,
             double pixel_lon_, std::string crs_ = "EPSG:4326", float fill = 0.0f)
      : rows(rows_), cols(cols_), values(static_cast<std::size_t>(rows_) * cols_, fill),
        origin_lat(origin_lat_), origin_lon(origin_lon_), pixel_lat(pixel_lat_), pixel_lon(pixel_lon_),
        crs(std::move(crs_)) {
    validate();
  }

  void validate() const {
    if (rows < 1 || cols < 1) throw ShapeError("raster must be at least 1x1");
    if (!(pixel_lat > 0) || !(pixel_lon > 0)) throw DomainError("raster pixel sizes must be positive");
    if (values.size() != static_cast<std::size_t>(rows) * cols) throw ShapeError("raster value count mismatch");
    if (!std::isnan(nodata)) throw DomainError("in-memory rasters use NaN as nodata");
  }

  float& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  float at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }

  double lat_max() const { return origin_lat; }
  double lat_min() const { return origin_lat - rows * pixel_lat; }
  double lon_min() const { return origin_lon; }
  double lon_max() const { return origin_lon + cols * pixel_lon; }
  mesh::GeoBox extent() const { return {lat_min(), lat_max(), lon_min(), lon_max()}; }

  double row_center_lat(int r) const { return origin_lat - (r + 0.5) * pixel_lat; }
  double col_center_lon(int c) const { return origin_lon + (c + 0.5) * pixel_lon; }

  // Same shape and georeferencing, values ignored.
  bool same_geometry(const RasterGrid& o) const {
    return rows == o.rows && cols == o.cols && origin_lat == o.origin_lat && origin_lon == o.origin_lon &&
           pixel_lat == o.pixel_lat && pixel_lon == o.pixel_lon && north_up == o.north_up && crs == o.crs;
  }

  RasterGrid like(float fill = 0.0f) const {
    RasterGrid out = *this;
    out.values.assign(values.size(), fill);
    return out;
  }
};

enum class Band { B2, B3, B4, B5, B6, B7, NTL };
enum class Source { landsat8_sr, viirs_ntl };

inline const char* band_name(Band b) {
  switch (b) {
    case Band::B2: return "B2";
    case Band::B3: return "B3";
    case Band::B4: return "B4";
    case Band::B5: return "B5";
    case Band::B6: return "B6";
    case Band::B7: return "B7";
    case Band::NTL: return "NTL";
  }
  return "?";
}

inline Band parse_band(const std::string& s) {
  for (Band b : {Band::B2, Band::B3, Band::B4, Band::B5, Band::B6, Band::B7, Band::NTL})
    if (s == band_name(b)) return b;
  throw ParseError("unknown band '" + s + "'");
}

inline Source source_of(Band b) { return b == Band::NTL ? Source::viirs_ntl : Source::landsat8_sr; }

inline const char* source_name(Source s) { return s == Source::viirs_ntl ? "viirs_ntl" : "landsat8_sr"; }

struct AnnualComposite {
  int year = 0;
  Band band = Band::B2;
  RasterGrid grid;
  Source source = Source::landsat8_sr;

  AnnualComposite() = default;
  AnnualComposite(int year_, Band band_, RasterGrid grid_, Source source_)
      : year(year_), band(band_), grid(std::move(grid_)), source(source_) {
    if (source_of(band) != source)
      throw DomainError(std::string("band ") + band_name(band) + " cannot come from " + source_name(source));
  }
};

inline void require_same_geometry(const RasterGrid& a, const RasterGrid& b, const char* what) {
  if (!a.same_geometry(b)) throw GridMismatch(std::string(what) + ": rasters do not share grid geometry");
}

// One acquisition and its cloud mask (nonzero = cloud), same shape as values.
struct Scene {
  RasterGrid values;
  std::vector<std::uint8_t> cloud;
};

// Per-pixel mean over observations that are cloud-free and not NaN.
// Pixels with no valid observation become NaN.
inline RasterGrid cloudfree_annual_mean(const std::vector<Scene>& scenes) {
  if (scenes.empty()) throw DomainError("cloudfree_annual_mean needs at least one scene");
  const RasterGrid& ref = scenes.front().values;
  for (const auto& s : scenes) {
    require_same_geometry(ref, s.values, "cloudfree_annual_mean");
    if (s.cloud.size() != s.values.values.size())
      throw GridMismatch("cloudfree_annual_mean: cloud mask shape differs from scene");
  }
  const std::size_t n = ref.values.size();
  std::vector<double> sum(n, 0.0);
  std::vector<std::uint32_t> count(n, 0);
  for (const auto& s : scenes) {
    for (std::size_t i = 0; i < n; ++i) {
      const float v = s.values.values[i];
      if (s.cloud[i] == 0 && !std::isnan(v)) {
        sum[i] += v;
        ++count[i];
      }
    }
  }
  RasterGrid out = ref.like();
  for (std::size_t i = 0; i < n; ++i)
    out.values[i] = count[i] ? static_cast<float>(sum[i] / count[i]) : std::numeric_limits<float>::quiet_NaN();
  return out;
}

// Collection-2 Level-2 surface reflectance scaling.
inline constexpr double kLandsatReflectanceScale = 0.0000275;
inline constexpr double kLandsatReflectanceOffset = -0.2;

inline RasterGrid apply_scale_offset(const RasterGrid& g, double scale, double offset) {
  if (!std::isfinite(scale) || scale == 0.0 || !std::isfinite(offset))
    throw DomainError("scale must be finite and non-zero, offset finite");
  RasterGrid out = g;
  for (float& v : out.values)
    if (!std::isnan(v)) v = static_cast<float>(static_cast<double>(v) * scale + offset);
  return out;
}

// Denominators with |a + b| below this produce an index of 0.
inline constexpr double kIndexEpsilon = 1e-12;

inline float normalized_difference(float a, float b) {
  if (std::isnan(a) || std::isnan(b)) return std::numeric_limits<float>::quiet_NaN();
  const double sum = static_cast<double>(a) + static_cast<double>(b);
  if (std::abs(sum) < kIndexEpsilon) return 0.0f;
  return static_cast<float>((static_cast<double>(a) - static_cast<double>(b)) / sum);
}

inline RasterGrid normalized_difference(const RasterGrid& a, const RasterGrid& b, const char* what) {
  require_same_geometry(a, b, what);
  RasterGrid out = a.like();
  for (std::size_t i = 0; i < a.values.size(); ++i) out.values[i] = normalized_difference(a.values[i], b.values[i]);
  return out;
}

// Built-up index from SWIR1 (band 6) and NIR (band 5).
inline RasterGrid ndbi(const RasterGrid& b6, const RasterGrid& b5) { return normalized_difference(b6, b5, "ndbi"); }

// Vegetation index from NIR (band 5) and red (band 4).
inline RasterGrid ndvi(const RasterGrid& b5, const RasterGrid& b4) { return normalized_difference(b5, b4, "ndvi"); }

// Water index from green (band 3) and NIR (band 5).
inline RasterGrid ndwi(const RasterGrid& b3, const RasterGrid& b5) { return normalized_difference(b3, b5, "ndwi"); }

inline constexpr double kNtlNegativeTolerance = 1e-6;

// ln(1 + radiance). Slightly negative radiance within tolerance clamps to 0.
inline RasterGrid ntl_log(const RasterGrid& g) {
  RasterGrid out = g;
  for (float& v : out.values) {
    if (std::isnan(v)) continue;
    if (v < 0.0f) {
      if (v < -kNtlNegativeTolerance) throw DomainError("negative night-time radiance " + std::to_string(v));
      v = 0.0f;
    }
    v = static_cast<float>(std::log1p(static_cast<double>(v)));
  }
  return out;
}

}  // namespace meshpop::raster
