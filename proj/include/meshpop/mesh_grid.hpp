#pragma once

// Japanese standard grid squares (WGS84) at the 80 km, 10 km and 1 km levels.
//
//   80 km (primary):   4 digits "PPUU"     PP = floor(lat * 1.5), UU = floor(lon) - 100
//   10 km (secondary): 6 digits "PPUUqv"   q, v in 0..7  (5' lat x 7'30" lon)
//   1 km  (third):     8 digits "PPUUqvrw" r, w in 0..9  (30" lat x 45" lon)
//
// All cells are half-open boxes [min, max) in both axes, so every point maps
// to exactly one cell per level.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "meshpop/error.hpp"

namespace meshpop::mesh {

enum class Level { L80km, L10km, L1km };

inline int digits(Level level) {
  switch (level) {
    case Level::L80km: return 4;
    case Level::L10km: return 6;
    case Level::L1km: return 8;
  }
  return 0;
}

struct GeoBox {
  double lat_min = 0, lat_max = 0;
  double lon_min = 0, lon_max = 0;

  bool contains(double lat, double lon) const {
    return lat >= lat_min && lat < lat_max && lon >= lon_min && lon < lon_max;
  }
  double center_lat() const { return 0.5 * (lat_min + lat_max); }
  double center_lon() const { return 0.5 * (lon_min + lon_max); }
  bool valid() const {
    return std::isfinite(lat_min) && std::isfinite(lat_max) && std::isfinite(lon_min) &&
           std::isfinite(lon_max) && lat_min < lat_max && lon_min < lon_max;
  }
};

// A grid-square code. Stored as global row/column indices at its own level,
// which makes ordering, containment and bbox arithmetic exact.
class MeshCode {
 public:
  MeshCode() = default;

  static MeshCode parse(std::string_view code) {
    Level level;
    switch (code.size()) {
      case 4: level = Level::L80km; break;
      case 6: level = Level::L10km; break;
      case 8: level = Level::L1km; break;
      default:
        throw ParseError("mesh code '" + std::string(code) + "' must have 4, 6 or 8 digits");
    }
    for (char c : code) {
      if (c < '0' || c > '9') throw ParseError("mesh code '" + std::string(code) + "' is not numeric");
    }
    auto d = [&](std::size_t i) { return code[i] - '0'; };
    std::int64_t row = d(0) * 10 + d(1);
    std::int64_t col = d(2) * 10 + d(3) + 100;
    if (code.size() >= 6) {
      const int q = d(4), v = d(5);
      if (q > 7 || v > 7)
        throw ParseError("mesh code '" + std::string(code) + "' has 10 km sub-index outside 0..7");
      row = row * 8 + q;
      col = col * 8 + v;
    }
    if (code.size() == 8) {
      row = row * 10 + d(6);
      col = col * 10 + d(7);
    }
    return MeshCode(level, row, col);
  }

  // Row/col are global indices: row = floor(lat * lat_cells_per_degree) in
  // the primary-code convention (row 0 at the equator), col likewise for lon.
  MeshCode(Level level, std::int64_t row, std::int64_t col) : level_(level), row_(row), col_(col) {
    const std::int64_t lat_div = level == Level::L80km ? 1 : level == Level::L10km ? 8 : 80;
    const std::int64_t p = row_ / lat_div;
    const std::int64_t u = col_ / lat_div - 100;
    if (row_ < 0 || col_ < 0 || p > 99 || u < 0 || u > 99)
      throw DomainError("mesh indices outside the two-digit primary code range");
  }

  Level level() const { return level_; }
  std::int64_t row() const { return row_; }
  std::int64_t col() const { return col_; }

  std::string str() const {
    std::string out;
    std::int64_t row = row_, col = col_;
    std::string tail;
    if (level_ == Level::L1km) {
      tail = std::string{char('0' + row % 10), char('0' + col % 10)};
      row /= 10;
      col /= 10;
    }
    if (level_ != Level::L80km) {
      tail = std::string{char('0' + row % 8), char('0' + col % 8)} + tail;
      row /= 8;
      col /= 8;
    }
    const std::int64_t u = col - 100;
    out += char('0' + row / 10);
    out += char('0' + row % 10);
    out += char('0' + u / 10);
    out += char('0' + u % 10);
    return out + tail;
  }

  GeoBox bbox() const {
    // Primary rows are 2/3 degree tall: row / 1.5 == 2*row / 3.
    switch (level_) {
      case Level::L80km:
        return {static_cast<double>(row_) / 1.5, static_cast<double>(row_ + 1) / 1.5,
                static_cast<double>(col_), static_cast<double>(col_ + 1)};
      case Level::L10km:
        return {static_cast<double>(row_) / 12.0, static_cast<double>(row_ + 1) / 12.0,
                static_cast<double>(col_) / 8.0, static_cast<double>(col_ + 1) / 8.0};
      case Level::L1km:
        return {static_cast<double>(row_) / 120.0, static_cast<double>(row_ + 1) / 120.0,
                static_cast<double>(col_) / 80.0, static_cast<double>(col_ + 1) / 80.0};
    }
    return {};
  }

  MeshCode parent(Level target) const {
    if (digits(target) > digits(level_)) throw LevelError("parent level must be coarser than " + str());
    std::int64_t row = row_, col = col_;
    Level lv = level_;
    while (lv != target) {
      if (lv == Level::L1km) {
        row /= 10;
        col /= 10;
        lv = Level::L10km;
      } else {
        row /= 8;
        col /= 8;
        lv = Level::L80km;
      }
    }
    return MeshCode(target, row, col);
  }

  auto operator<=>(const MeshCode& o) const {
    // Same-level codes compare like their digit strings.
    return str() <=> o.str();
  }
  bool operator==(const MeshCode& o) const {
    return level_ == o.level_ && row_ == o.row_ && col_ == o.col_;
  }

 private:
  Level level_ = Level::L80km;
  std::int64_t row_ = 0;
  std::int64_t col_ = 0;
};

inline std::ostream& operator<<(std::ostream& os, const MeshCode& m) { return os << m.str(); }

struct Envelope {
  double lat_min = 20.0, lat_max = 46.0;
  double lon_min = 122.0, lon_max = 154.0;
};

namespace detail {

// floor(value * cells) corrected so that i / cells <= value < (i + 1) / cells
// holds in double arithmetic, matching the bbox formula exactly.
inline std::int64_t cell_index(double value, double cells_per_degree) {
  auto lower = [&](std::int64_t i) { return static_cast<double>(i) / cells_per_degree; };
  std::int64_t i = static_cast<std::int64_t>(std::floor(value * cells_per_degree));
  while (lower(i) > value) --i;
  while (lower(i + 1) <= value) ++i;
  return i;
}

}  // namespace detail

inline MeshCode point_to_mesh(double lat, double lon, Level level, const Envelope& env = {}) {
  if (!std::isfinite(lat) || !std::isfinite(lon) || lat < env.lat_min || lat > env.lat_max ||
      lon < env.lon_min || lon > env.lon_max) {
    throw DomainError("point (" + std::to_string(lat) + ", " + std::to_string(lon) +
                      ") outside the grid-square envelope");
  }
  std::int64_t row = 0;
  std::int64_t col = 0;
  switch (level) {
    case Level::L80km: {
      // bbox lower edge is row / 1.5; search with the same expression.
      row = static_cast<std::int64_t>(std::floor(lat * 1.5));
      while (static_cast<double>(row) / 1.5 > lat) --row;
      while (static_cast<double>(row + 1) / 1.5 <= lat) ++row;
      col = detail::cell_index(lon, 1.0);
      break;
    }
    case Level::L10km:
      row = detail::cell_index(lat, 12.0);
      col = detail::cell_index(lon, 8.0);
      break;
    case Level::L1km:
      row = detail::cell_index(lat, 120.0);
      col = detail::cell_index(lon, 80.0);
      break;
  }
  return MeshCode(level, row, col);
}

inline GeoBox mesh_to_bbox(const MeshCode& m) { return m.bbox(); }

// The 100 third-level cells of a 10 km cell, row-major from the south-west.
inline std::vector<MeshCode> children_1km(const MeshCode& m10) {
  if (m10.level() != Level::L10km) throw LevelError("children_1km expects a 10 km code, got " + m10.str());
  std::vector<MeshCode> out;
  out.reserve(100);
  for (int r = 0; r < 10; ++r)
    for (int w = 0; w < 10; ++w) out.emplace_back(Level::L1km, m10.row() * 10 + r, m10.col() * 10 + w);
  return out;
}

// The 64 second-level cells of an 80 km cell.
inline std::vector<MeshCode> children_10km(const MeshCode& m80) {
  if (m80.level() != Level::L80km) throw LevelError("children_10km expects an 80 km code, got " + m80.str());
  std::vector<MeshCode> out;
  out.reserve(64);
  for (int q = 0; q < 8; ++q)
    for (int v = 0; v < 8; ++v) out.emplace_back(Level::L10km, m80.row() * 8 + q, m80.col() * 8 + v);
  return out;
}

// Census counts for one mesh cell and year.
struct LabelRecord {
  MeshCode mesh;
  int year = 0;
  std::uint64_t pop_0_14 = 0;
  std::uint64_t pop_15_64 = 0;
  std::uint64_t pop_65p = 0;

  std::uint64_t total() const { return pop_0_14 + pop_15_64 + pop_65p; }
  bool operator==(const LabelRecord&) const = default;
};

// Sums 1 km records into their 10 km parents. Parents without any child in
// the input are absent from the output. Output is sorted by mesh code.
inline std::vector<LabelRecord> aggregate_labels(const std::vector<LabelRecord>& records) {
  std::map<std::string, LabelRecord> parents;
  for (const auto& r : records) {
    if (r.mesh.level() != Level::L1km) throw LevelError("aggregate_labels expects 1 km records, got " + r.mesh.str());
    if (r.year != records.front().year) throw DomainError("aggregate_labels received mixed years");
    const MeshCode parent = r.mesh.parent(Level::L10km);
    auto [it, inserted] = parents.try_emplace(parent.str(), LabelRecord{parent, r.year, 0, 0, 0});
    it->second.pop_0_14 += r.pop_0_14;
    it->second.pop_15_64 += r.pop_15_64;
    it->second.pop_65p += r.pop_65p;
  }
  std::vector<LabelRecord> out;
  out.reserve(parents.size());
  for (auto& [code, rec] : parents) out.push_back(rec);
  return out;
}

}  // namespace meshpop::mesh
