#pragma once

// Minimal single-band GeoTIFF reader/writer on top of libtiff.
// Supports north-up rasters described either by ModelPixelScale + ModelTiepoint
// or by a rotation-free ModelTransformation, EPSG codes via the GeoKey
// directory, and the GDAL_NODATA tag.

#include <tiffio.h>

#include <array>
#include <charconv>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "meshpop/error.hpp"
#include "meshpop/raster.hpp"

namespace meshpop::raster {

namespace geotiff_detail {

constexpr ttag_t kModelPixelScale = 33550;
constexpr ttag_t kModelTiepoint = 33922;
constexpr ttag_t kModelTransformation = 34264;
constexpr ttag_t kGeoKeyDirectory = 34735;
constexpr ttag_t kGeoDoubleParams = 34736;
constexpr ttag_t kGeoAsciiParams = 34737;

constexpr std::uint16_t kGTModelType = 1024;
constexpr std::uint16_t kGTRasterType = 1025;
constexpr std::uint16_t kGeographicType = 2048;
constexpr std::uint16_t kProjectedCSType = 3072;

inline TIFFExtendProc& parent_extender() {
  static TIFFExtendProc parent = nullptr;
  return parent;
}

inline void tag_extender(TIFF* tif) {
  static const TIFFFieldInfo fields[] = {
      {kModelPixelScale, -1, -1, TIFF_DOUBLE, FIELD_CUSTOM, 1, 1, const_cast<char*>("ModelPixelScaleTag")},
      {kModelTiepoint, -1, -1, TIFF_DOUBLE, FIELD_CUSTOM, 1, 1, const_cast<char*>("ModelTiepointTag")},
      {kModelTransformation, -1, -1, TIFF_DOUBLE, FIELD_CUSTOM, 1, 1,
       const_cast<char*>("ModelTransformationTag")},
      {kGeoKeyDirectory, -1, -1, TIFF_SHORT, FIELD_CUSTOM, 1, 1, const_cast<char*>("GeoKeyDirectoryTag")},
      {kGeoDoubleParams, -1, -1, TIFF_DOUBLE, FIELD_CUSTOM, 1, 1, const_cast<char*>("GeoDoubleParamsTag")},
      {kGeoAsciiParams, -1, -1, TIFF_ASCII, FIELD_CUSTOM, 1, 0, const_cast<char*>("GeoAsciiParamsTag")},
      {TIFFTAG_GDAL_NODATA, -1, -1, TIFF_ASCII, FIELD_CUSTOM, 1, 0, const_cast<char*>("GDALNoDataValue")},
  };
  TIFFMergeFieldInfo(tif, fields, sizeof(fields) / sizeof(fields[0]));
  if (parent_extender()) parent_extender()(tif);
}

inline thread_local std::string last_error;

inline void error_handler(const char* module, const char* fmt, va_list ap) {
  char buf[1024];
  std::vsnprintf(buf, sizeof(buf), fmt, ap);
  last_error = std::string(module ? module : "libtiff") + ": " + buf;
}

inline void warning_handler(const char*, const char*, va_list) {}

inline void install() {
  static std::once_flag once;
  std::call_once(once, [] {
    parent_extender() = TIFFSetTagExtender(tag_extender);
    TIFFSetErrorHandler(error_handler);
    TIFFSetWarningHandler(warning_handler);
  });
}

struct TiffCloser {
  void operator()(TIFF* t) const {
    if (t) TIFFClose(t);
  }
};
using TiffPtr = std::unique_ptr<TIFF, TiffCloser>;

template <typename T>
void convert_buffer(const unsigned char* src, std::size_t n, float* dst) {
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    dst[i] = static_cast<float>(v);
  }
}

inline void convert(const unsigned char* src, std::size_t n, std::uint16_t format, std::uint16_t bits, float* dst) {
  if (format == SAMPLEFORMAT_IEEEFP && bits == 32) return convert_buffer<float>(src, n, dst);
  if (format == SAMPLEFORMAT_IEEEFP && bits == 64) return convert_buffer<double>(src, n, dst);
  if (format == SAMPLEFORMAT_UINT && bits == 8) return convert_buffer<std::uint8_t>(src, n, dst);
  if (format == SAMPLEFORMAT_UINT && bits == 16) return convert_buffer<std::uint16_t>(src, n, dst);
  if (format == SAMPLEFORMAT_UINT && bits == 32) return convert_buffer<std::uint32_t>(src, n, dst);
  if (format == SAMPLEFORMAT_INT && bits == 8) return convert_buffer<std::int8_t>(src, n, dst);
  if (format == SAMPLEFORMAT_INT && bits == 16) return convert_buffer<std::int16_t>(src, n, dst);
  if (format == SAMPLEFORMAT_INT && bits == 32) return convert_buffer<std::int32_t>(src, n, dst);
  throw UnsupportedGeometry("unsupported sample format " + std::to_string(format) + "/" + std::to_string(bits));
}

}  // namespace geotiff_detail

// Reads a single-band north-up GeoTIFF. Values equal to the file's nodata
// sentinel become NaN. `expected_crs` empty skips the CRS check.
inline RasterGrid load_raster(const std::filesystem::path& path, const std::string& expected_crs = "EPSG:4326") {
  using namespace geotiff_detail;
  install();
  if (!std::filesystem::exists(path)) throw IoError("raster not found: " + path.string());
  TiffPtr tif(TIFFOpen(path.c_str(), "r"));
  if (!tif) throw IoError("cannot open " + path.string() + ": " + last_error);

  std::uint32_t width = 0, height = 0;
  std::uint16_t spp = 1, bits = 0, format = SAMPLEFORMAT_UINT;
  TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &width);
  TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &height);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bits);
  TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &format);
  if (spp != 1) throw UnsupportedGeometry(path.string() + ": expected a single band, found " + std::to_string(spp));
  if (width == 0 || height == 0) throw UnsupportedGeometry(path.string() + ": empty raster");

  RasterGrid g;
  g.rows = static_cast<int>(height);
  g.cols = static_cast<int>(width);

  // Georeferencing.
  std::uint16_t count = 0;
  double* data = nullptr;
  bool pixel_is_point = false;
  std::string crs = "unknown";
  std::uint16_t* keys = nullptr;
  if (TIFFGetField(tif.get(), kGeoKeyDirectory, &count, &keys) && count >= 4) {
    const int nkeys = keys[3];
    int model_type = 0;
    for (int k = 0; k < nkeys && 4 + 4 * k + 3 < count; ++k) {
      const std::uint16_t* e = keys + 4 + 4 * k;
      if (e[1] != 0) continue;  // only inline SHORT values matter here
      if (e[0] == kGTModelType) model_type = e[3];
      if (e[0] == kGTRasterType) pixel_is_point = e[3] == 2;
      if (e[0] == kGeographicType && (model_type == 2 || model_type == 0)) crs = "EPSG:" + std::to_string(e[3]);
      if (e[0] == kProjectedCSType) crs = "EPSG:" + std::to_string(e[3]);
    }
  }
  g.crs = crs;

  if (TIFFGetField(tif.get(), kModelTransformation, &count, &data) && count >= 16) {
    if (data[1] != 0.0 || data[4] != 0.0)
      throw UnsupportedGeometry(path.string() + ": rotated or sheared transform");
    if (!(data[5] < 0.0)) throw UnsupportedGeometry(path.string() + ": raster is not north-up");
    g.pixel_lon = data[0];
    g.pixel_lat = -data[5];
    g.origin_lon = data[3];
    g.origin_lat = data[7];
  } else {
    double* scale = nullptr;
    std::uint16_t nscale = 0;
    if (!TIFFGetField(tif.get(), kModelPixelScale, &nscale, &scale) || nscale < 2 ||
        !TIFFGetField(tif.get(), kModelTiepoint, &count, &data) || count < 6) {
      throw UnsupportedGeometry(path.string() + ": missing georeferencing tags");
    }
    if (!(scale[1] > 0.0) || !(scale[0] > 0.0)) throw UnsupportedGeometry(path.string() + ": raster is not north-up");
    g.pixel_lon = scale[0];
    g.pixel_lat = scale[1];
    g.origin_lon = data[3] - data[0] * scale[0];
    g.origin_lat = data[4] + data[1] * scale[1];
  }
  if (pixel_is_point) {
    g.origin_lon -= 0.5 * g.pixel_lon;
    g.origin_lat += 0.5 * g.pixel_lat;
  }

  if (!expected_crs.empty() && g.crs != expected_crs)
    throw CrsError(path.string() + ": CRS " + g.crs + " does not match expected " + expected_crs);

  double nodata = std::nan("");
  bool has_nodata = false;
  char* nodata_str = nullptr;
  if (TIFFGetField(tif.get(), TIFFTAG_GDAL_NODATA, &nodata_str) && nodata_str) {
    std::string s(nodata_str);
    if (s == "nan" || s == "NaN" || s == "-nan") {
      has_nodata = false;  // NaN is already NaN
    } else {
      try {
        nodata = std::stod(s);
        has_nodata = true;
      } catch (const std::exception&) {
        throw ParseError(path.string() + ": unreadable GDAL_NODATA '" + s + "'");
      }
    }
  }

  g.values.assign(static_cast<std::size_t>(g.rows) * g.cols, 0.0f);
  const std::size_t bytes_per = bits / 8;
  if (TIFFIsTiled(tif.get())) {
    std::uint32_t tw = 0, th = 0;
    TIFFGetField(tif.get(), TIFFTAG_TILEWIDTH, &tw);
    TIFFGetField(tif.get(), TIFFTAG_TILELENGTH, &th);
    std::vector<unsigned char> buf(TIFFTileSize(tif.get()));
    std::vector<float> conv(static_cast<std::size_t>(tw) * th);
    for (std::uint32_t y = 0; y < height; y += th) {
      for (std::uint32_t x = 0; x < width; x += tw) {
        if (TIFFReadTile(tif.get(), buf.data(), x, y, 0, 0) < 0)
          throw IoError(path.string() + ": tile read failed: " + last_error);
        convert(buf.data(), conv.size(), format, bits, conv.data());
        for (std::uint32_t ty = 0; ty < th && y + ty < height; ++ty)
          for (std::uint32_t tx = 0; tx < tw && x + tx < width; ++tx)
            g.at(static_cast<int>(y + ty), static_cast<int>(x + tx)) = conv[ty * tw + tx];
      }
    }
  } else {
    std::vector<unsigned char> buf(TIFFScanlineSize(tif.get()));
    if (buf.size() < width * bytes_per) throw UnsupportedGeometry(path.string() + ": unexpected scanline size");
    for (std::uint32_t r = 0; r < height; ++r) {
      if (TIFFReadScanline(tif.get(), buf.data(), r, 0) < 0)
        throw IoError(path.string() + ": scanline read failed: " + last_error);
      convert(buf.data(), width, format, bits, &g.values[static_cast<std::size_t>(r) * width]);
    }
  }
  if (has_nodata) {
    const float sentinel = static_cast<float>(nodata);
    for (float& v : g.values)
      if (v == sentinel) v = std::numeric_limits<float>::quiet_NaN();
  }
  g.validate();
  return g;
}

// Loads a cloud mask: nonzero (and NaN) pixels are cloud.
inline std::vector<std::uint8_t> load_mask(const std::filesystem::path& path, const std::string& expected_crs = "") {
  const RasterGrid g = load_raster(path, expected_crs);
  std::vector<std::uint8_t> mask(g.values.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (g.values[i] != 0.0f) ? 1 : 0;
  return mask;
}

struct WriteOptions {
  // Sentinel written in place of NaN (and recorded as GDAL_NODATA).
  std::optional<double> nodata;
  // Full 4x4 ModelTransformation, written instead of scale + tiepoint.
  std::optional<std::array<double, 16>> transformation;
};

// Writes float32, uncompressed, one strip per row, NaN nodata by default.
inline void write_raster(const std::filesystem::path& path, const RasterGrid& g, const WriteOptions& opts = {}) {
  using namespace geotiff_detail;
  install();
  g.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    TiffPtr tif(TIFFOpen(tmp.c_str(), "w"));
    if (!tif) throw IoError("cannot create " + tmp + ": " + last_error);
    TIFF* t = tif.get();
    TIFFSetField(t, TIFFTAG_IMAGEWIDTH, static_cast<std::uint32_t>(g.cols));
    TIFFSetField(t, TIFFTAG_IMAGELENGTH, static_cast<std::uint32_t>(g.rows));
    TIFFSetField(t, TIFFTAG_SAMPLESPERPIXEL, static_cast<std::uint16_t>(1));
    TIFFSetField(t, TIFFTAG_BITSPERSAMPLE, static_cast<std::uint16_t>(32));
    TIFFSetField(t, TIFFTAG_SAMPLEFORMAT, static_cast<std::uint16_t>(SAMPLEFORMAT_IEEEFP));
    TIFFSetField(t, TIFFTAG_PHOTOMETRIC, static_cast<std::uint16_t>(PHOTOMETRIC_MINISBLACK));
    TIFFSetField(t, TIFFTAG_PLANARCONFIG, static_cast<std::uint16_t>(PLANARCONFIG_CONTIG));
    TIFFSetField(t, TIFFTAG_COMPRESSION, static_cast<std::uint16_t>(COMPRESSION_NONE));
    TIFFSetField(t, TIFFTAG_ROWSPERSTRIP, static_cast<std::uint32_t>(1));

    double scale[3] = {g.pixel_lon, g.pixel_lat, 0.0};
    double tie[6] = {0.0, 0.0, 0.0, g.origin_lon, g.origin_lat, 0.0};
    if (opts.transformation) {
      std::array<double, 16> m = *opts.transformation;
      TIFFSetField(t, kModelTransformation, 16, m.data());
    } else {
      TIFFSetField(t, kModelPixelScale, 3, scale);
      TIFFSetField(t, kModelTiepoint, 6, tie);
    }

    std::vector<std::uint16_t> keys = {1, 1, 0, 0};
    auto add_key = [&](std::uint16_t id, std::uint16_t value) {
      keys.insert(keys.end(), {id, 0, 1, value});
      ++keys[3];
    };
    int epsg = 0;
    if (g.crs.rfind("EPSG:", 0) == 0) {
      const char* b = g.crs.data() + 5;
      std::from_chars(b, g.crs.data() + g.crs.size(), epsg);
    }
    const bool geographic = epsg == 4326 || epsg == 4612 || epsg == 6668 || epsg == 4269 || epsg == 4258;
    add_key(kGTModelType, geographic ? 2 : 1);
    add_key(kGTRasterType, 1);
    if (epsg > 0 && epsg < 65536) add_key(geographic ? kGeographicType : kProjectedCSType, static_cast<std::uint16_t>(epsg));
    TIFFSetField(t, kGeoKeyDirectory, static_cast<std::uint16_t>(keys.size()), keys.data());
    std::string nodata_text = "nan";
    if (opts.nodata) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g", *opts.nodata);
      nodata_text = buf;
    }
    TIFFSetField(t, TIFFTAG_GDAL_NODATA, nodata_text.c_str());

    std::vector<float> row(g.cols);
    for (int r = 0; r < g.rows; ++r) {
      std::memcpy(row.data(), &g.values[static_cast<std::size_t>(r) * g.cols], sizeof(float) * g.cols);
      if (opts.nodata)
        for (float& v : row)
          if (std::isnan(v)) v = static_cast<float>(*opts.nodata);
      if (TIFFWriteScanline(t, row.data(), static_cast<std::uint32_t>(r), 0) < 0)
        throw IoError("write failed for " + tmp + ": " + last_error);
    }
  }
  std::filesystem::rename(tmp, path);
}

// Writes a 0/1 mask as a float raster sharing `geometry`.
inline void write_mask(const std::filesystem::path& path, const RasterGrid& geometry,
                       const std::vector<std::uint8_t>& mask) {
  RasterGrid g = geometry.like();
  if (mask.size() != g.values.size()) throw GridMismatch("mask shape differs from geometry");
  for (std::size_t i = 0; i < mask.size(); ++i) g.values[i] = mask[i] ? 1.0f : 0.0f;
  write_raster(path, g);
}

}  // namespace meshpop::raster
