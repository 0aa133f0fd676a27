#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "meshpop/error.hpp"
#include "meshpop/mesh_grid.hpp"
#include "meshpop/rng.hpp"
#include "meshpop/tile.hpp"

namespace meshpop::data {

using mesh::LabelRecord;
using mesh::MeshCode;
using tiles::Split;

inline constexpr const char* kLabelHeader = "mesh_code,year,pop_0_14,pop_15_64,pop_65plus";

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(f);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

inline std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && s[i] == ' ') ++i;
  return s.substr(i);
}

}  // namespace detail

// Parses label rows. `source` names the input in error messages.
inline std::vector<LabelRecord> parse_labels(std::istream& in, const std::string& source = "labels") {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != kLabelHeader)
    throw ParseError(source + ":1: header must be exactly '" + std::string(kLabelHeader) + "'");
  std::vector<LabelRecord> out;
  std::set<std::pair<std::string, int>> seen;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    const std::string where = source + ":" + std::to_string(lineno);
    if (f.size() != 5) throw ParseError(where + ": expected 5 fields, got " + std::to_string(f.size()));
    LabelRecord r;
    try {
      r.mesh = MeshCode::parse(detail::trim(f[0]));
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    }
    auto parse_int = [&](const std::string& s, const char* name) -> long long {
      const std::string t = detail::trim(s);
      std::size_t pos = 0;
      long long v = 0;
      try {
        v = std::stoll(t, &pos);
      } catch (const std::exception&) {
        throw ParseError(where + ": " + name + " is not an integer: '" + t + "'");
      }
      if (pos != t.size()) throw ParseError(where + ": " + name + " is not an integer: '" + t + "'");
      return v;
    };
    r.year = static_cast<int>(parse_int(f[1], "year"));
    const long long a = parse_int(f[2], "pop_0_14");
    const long long b = parse_int(f[3], "pop_15_64");
    const long long c = parse_int(f[4], "pop_65plus");
    if (a < 0 || b < 0 || c < 0) throw DomainError(where + ": population counts must be non-negative");
    r.pop_0_14 = static_cast<std::uint64_t>(a);
    r.pop_15_64 = static_cast<std::uint64_t>(b);
    r.pop_65p = static_cast<std::uint64_t>(c);
    if (!seen.emplace(r.mesh.str(), r.year).second)
      throw DuplicateError(where + ": duplicate record for mesh " + r.mesh.str() + " year " + std::to_string(r.year));
    out.push_back(r);
  }
  return out;
}

inline std::vector<LabelRecord> load_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open labels " + path.string());
  return parse_labels(in, path.string());
}

inline void write_labels(const std::filesystem::path& path, const std::vector<LabelRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << kLabelHeader << '\n';
  for (const auto& r : records)
    out << r.mesh.str() << ',' << r.year << ',' << r.pop_0_14 << ',' << r.pop_15_64 << ',' << r.pop_65p << '\n';
}

// log10 of each group count, with zero counts treated as 1.
inline std::array<float, 3> to_label_vector(const LabelRecord& r) {
  auto lg = [](std::uint64_t v) { return static_cast<float>(std::log10(static_cast<double>(std::max<std::uint64_t>(v, 1)))); };
  return {lg(r.pop_0_14), lg(r.pop_15_64), lg(r.pop_65p)};
}

// Brings labels to the 10 km sample unit: 1 km records are summed per year,
// 10 km records pass through.
inline std::vector<LabelRecord> to_10km(const std::vector<LabelRecord>& records) {
  std::map<int, std::vector<LabelRecord>> fine;
  std::vector<LabelRecord> out;
  for (const auto& r : records) {
    if (r.mesh.level() == mesh::Level::L1km)
      fine[r.year].push_back(r);
    else if (r.mesh.level() == mesh::Level::L10km)
      out.push_back(r);
    else
      throw LevelError("labels at the 80 km level cannot be used as samples: " + r.mesh.str());
  }
  for (auto& [year, recs] : fine) {
    auto agg = mesh::aggregate_labels(recs);
    out.insert(out.end(), agg.begin(), agg.end());
  }
  std::set<std::pair<std::string, int>> seen;
  for (const auto& r : out)
    if (!seen.emplace(r.mesh.str(), r.year).second)
      throw DuplicateError("mesh " + r.mesh.str() + " year " + std::to_string(r.year) + " given at two levels");
  std::sort(out.begin(), out.end(), [](const LabelRecord& a, const LabelRecord& b) {
    return a.year != b.year ? a.year < b.year : a.mesh.str() < b.mesh.str();
  });
  return out;
}

struct SplitManifest {
  std::uint64_t seed = 0;
  std::vector<double> decile_bounds;            // 9 ascending cut values
  std::map<std::string, Split> assignment;      // mesh code -> split

  Split of(const MeshCode& m) const {
    auto it = assignment.find(m.str());
    if (it == assignment.end()) throw DataError("mesh " + m.str() + " is not in the split manifest");
    return it->second;
  }
  bool contains(const MeshCode& m) const { return assignment.count(m.str()) > 0; }

  nlohmann::json to_json() const {
    nlohmann::json a = nlohmann::json::object();
    for (const auto& [mesh, s] : assignment) a[mesh] = tiles::split_name(s);
    return {{"seed", seed}, {"decile_bounds", decile_bounds}, {"assignment", a}};
  }

  static SplitManifest from_json(const nlohmann::json& j) {
    SplitManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.decile_bounds = j.at("decile_bounds").get<std::vector<double>>();
    for (auto& [mesh, s] : j.at("assignment").items()) m.assignment[mesh] = tiles::parse_split(s.get<std::string>());
    return m;
  }
};

inline void save_manifest(const std::filesystem::path& path, const SplitManifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << m.to_json().dump(2) << '\n';
}

inline SplitManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open split manifest " + path.string());
  try {
    return SplitManifest::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

// Mesh-level stratified 8:1:1 split.
//
// Each mesh's total population is averaged over the years it appears in;
// meshes are ranked by (average, code) and cut into ten equal-rank buckets.
// Every bucket is shuffled with one seeded stream (bucket order); validation
// and test each fill a cumulative quota of floor(n_seen / 10), test's
// offset by half a step so single-mesh buckets do not collide. Each bucket
// is within one mesh of 10%, the global counts are floor(n / 10), and
// remainders go to train. Both census years of a mesh share a split.
inline SplitManifest stratified_split(const std::vector<LabelRecord>& records, std::uint64_t seed) {
  std::map<std::string, std::pair<double, int>> totals;
  for (const auto& r : records) {
    auto& t = totals[r.mesh.str()];
    t.first += static_cast<double>(r.total());
    t.second += 1;
  }
  if (totals.size() < 10) throw DomainError("stratified_split needs at least 10 distinct meshes");

  std::vector<std::pair<double, std::string>> ranked;
  ranked.reserve(totals.size());
  for (const auto& [mesh, t] : totals) ranked.emplace_back(t.first / t.second, mesh);
  std::sort(ranked.begin(), ranked.end());

  const std::size_t n = ranked.size();
  SplitManifest out;
  out.seed = seed;
  Rng rng(seed);
  std::size_t val_taken = 0, test_taken = 0;
  for (int d = 0; d < 10; ++d) {
    const std::size_t lo = n * d / 10;
    const std::size_t hi = n * (d + 1) / 10;
    if (d > 0) out.decile_bounds.push_back(ranked[lo].first);
    std::vector<std::string> bucket;
    for (std::size_t i = lo; i < hi; ++i) bucket.push_back(ranked[i].second);
    rng.shuffle(bucket);
    const std::size_t n_val = std::min(bucket.size(), hi / 10 - val_taken);
    const std::size_t n_test = std::min(bucket.size() - n_val, std::min((hi + 5) / 10, n / 10) - test_taken);
    val_taken += n_val;
    test_taken += n_test;
    for (std::size_t i = 0; i < bucket.size(); ++i) {
      Split s = Split::train;
      if (i < n_val)
        s = Split::val;
      else if (i < n_val + n_test)
        s = Split::test;
      out.assignment[bucket[i]] = s;
    }
  }
  return out;
}

// One labelled (or unlabelled) tile reference.
struct Sample {
  MeshCode mesh;
  int year = 0;
  std::filesystem::path path;
  std::array<float, 3> label{};
  bool has_label = false;
};

// Joins tile entries with the split manifest and labels. Tiles of meshes in
// `split` with a label for that year become samples; ordering follows the
// tile manifest.
inline std::vector<Sample> samples_for_split(const std::vector<tiles::TileEntry>& entries,
                                             const std::filesystem::path& tile_dir, const SplitManifest& manifest,
                                             const std::vector<LabelRecord>& labels, Split split) {
  std::map<std::pair<std::string, int>, const LabelRecord*> by_key;
  for (const auto& r : labels) by_key[{r.mesh.str(), r.year}] = &r;
  std::vector<Sample> out;
  for (const auto& e : entries) {
    if (!manifest.contains(e.mesh) || manifest.of(e.mesh) != split) continue;
    auto it = by_key.find({e.mesh.str(), e.year});
    if (it == by_key.end()) continue;
    out.push_back({e.mesh, e.year, tile_dir / e.path, to_label_vector(*it->second), true});
  }
  return out;
}

// Seeded permutation of [0, n) for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, epoch));
  rng.shuffle(idx);
  return idx;
}

// Consecutive batches of an epoch permutation; the last may be short.
inline std::vector<std::vector<std::size_t>> iterate_batches(std::size_t n, std::size_t batch_size,
                                                             std::uint64_t seed, std::uint64_t epoch,
                                                             bool shuffle = true) {
  if (batch_size < 1) throw DomainError("batch_size must be at least 1");
  std::vector<std::size_t> order;
  if (shuffle) {
    order = epoch_order(n, seed, epoch);
  } else {
    order.resize(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return batches;
}

// A loaded batch in sample-major layout: inputs N x 12 x S x S, labels N x 3.
struct Batch {
  int n = 0;
  int size = 0;
  std::vector<float> inputs;
  std::vector<float> labels;
};

inline Batch load_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  Batch b;
  b.n = static_cast<int>(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& s = samples.at(indices[k]);
    if (!std::filesystem::exists(s.path))
      throw DataError("tile for mesh " + s.mesh.str() + " year " + std::to_string(s.year) + " is missing (" +
                      s.path.string() + ")");
    tiles::TileSample t = tiles::read_tile(s.path);
    if (k == 0) {
      b.size = t.size;
      b.inputs.reserve(indices.size() * t.tensor.size());
    } else if (t.size != b.size) {
      throw ShapeError("tiles in one batch have different sizes");
    }
    b.inputs.insert(b.inputs.end(), t.tensor.begin(), t.tensor.end());
    b.labels.insert(b.labels.end(), s.label.begin(), s.label.end());
  }
  return b;
}

}  // namespace meshpop::data
