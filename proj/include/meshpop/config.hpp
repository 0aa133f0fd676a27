#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "meshpop/error.hpp"
#include "meshpop/model.hpp"
#include "meshpop/raster.hpp"
#include "meshpop/tile.hpp"
#include "meshpop/trainer.hpp"

namespace meshpop {

// Relative paths are resolved against the directory holding the config file.
struct PipelineConfig {
  struct Paths {
    std::filesystem::path scenes = "scenes";
    std::filesystem::path composites = "work/composites";
    std::filesystem::path labels = "labels.csv";
    std::filesystem::path tiles = "work/tiles";
    std::filesystem::path split = "work/split.json";
    std::filesystem::path weights;  // empty: synthetic stand-in weights
    std::filesystem::path checkpoints = "work/checkpoints";
    std::filesystem::path outputs = "work/out";
  } paths;
  std::vector<int> census_years{2015, 2020};
  std::vector<int> prediction_years{2022};
  std::uint64_t seed = 42;
  int batch_size = 32;
  int epochs = 250;
  int tile_size = tiles::kDefaultTileSize;
  tiles::Resampling reflectance_resampling = tiles::Resampling::bilinear;
  tiles::Resampling ntl_resampling = tiles::Resampling::nearest;
  std::string fill = "mean";
  bool landsat_scaled = false;  // scenes already hold reflectance
  double landsat_scale = raster::kLandsatReflectanceScale;
  double landsat_offset = raster::kLandsatReflectanceOffset;
  double adam_alpha = 0.001, adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  train::LossKind loss = train::LossKind::l2;
  nn::ModelConfig model;
  std::uint64_t weights_seed = 0;  // for the synthetic stand-in archive

  std::vector<int> all_years() const {
    std::set<int> s(census_years.begin(), census_years.end());
    s.insert(prediction_years.begin(), prediction_years.end());
    return {s.begin(), s.end()};
  }

  bool is_census_year(int y) const {
    return std::find(census_years.begin(), census_years.end(), y) != census_years.end();
  }

  std::filesystem::path best_checkpoint() const { return paths.checkpoints / "best.ckpt"; }
  std::filesystem::path tile_manifest() const { return paths.tiles / "manifest.csv"; }

  void validate() const {
    if (census_years.empty()) throw ConfigError("census_years must not be empty");
    for (int y : prediction_years)
      if (is_census_year(y)) throw ConfigError("year " + std::to_string(y) + " is both census and prediction year");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (tile_size < 1) throw ConfigError("tile_size must be positive");
    if (fill != "mean") throw ConfigError("unsupported fill policy '" + fill + "' (only \"mean\")");
    if (!(adam_alpha > 0) || !(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1) ||
        !(adam_eps > 0))
      throw ConfigError("invalid Adam hyperparameters");
    if (landsat_scale == 0.0 || !std::isfinite(landsat_scale)) throw ConfigError("landsat scale must be finite and nonzero");
    model.validate();
  }
};

inline PipelineConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  PipelineConfig c;
  try {
    auto path = [&](const nlohmann::json& p, const char* key, std::filesystem::path& dst) {
      if (!p.contains(key)) {
        if (!dst.empty()) dst = base_dir / dst;
        return;
      }
      std::filesystem::path v = p.at(key).get<std::string>();
      dst = v.is_absolute() ? v : base_dir / v;
    };
    const nlohmann::json paths = j.value("paths", nlohmann::json::object());
    path(paths, "scenes", c.paths.scenes);
    path(paths, "composites", c.paths.composites);
    path(paths, "labels", c.paths.labels);
    path(paths, "tiles", c.paths.tiles);
    path(paths, "split", c.paths.split);
    path(paths, "weights", c.paths.weights);
    path(paths, "checkpoints", c.paths.checkpoints);
    path(paths, "outputs", c.paths.outputs);
    c.census_years = j.value("census_years", c.census_years);
    c.prediction_years = j.value("prediction_years", c.prediction_years);
    c.seed = j.value("seed", c.seed);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.tile_size = j.value("tile_size", c.tile_size);
    if (j.contains("resampling")) {
      const auto& r = j.at("resampling");
      if (r.contains("reflectance")) c.reflectance_resampling = tiles::parse_resampling(r.at("reflectance").get<std::string>());
      if (r.contains("ntl")) c.ntl_resampling = tiles::parse_resampling(r.at("ntl").get<std::string>());
    }
    c.fill = j.value("fill", c.fill);
    if (j.contains("landsat")) {
      const auto& l = j.at("landsat");
      c.landsat_scaled = l.value("scaled", c.landsat_scaled);
      c.landsat_scale = l.value("scale", c.landsat_scale);
      c.landsat_offset = l.value("offset", c.landsat_offset);
    }
    if (j.contains("adam")) {
      const auto& a = j.at("adam");
      c.adam_alpha = a.value("alpha", c.adam_alpha);
      c.adam_beta1 = a.value("beta1", c.adam_beta1);
      c.adam_beta2 = a.value("beta2", c.adam_beta2);
      c.adam_eps = a.value("eps", c.adam_eps);
    }
    if (j.contains("loss")) c.loss = train::parse_loss(j.at("loss").get<std::string>());
    if (j.contains("model")) c.model = nn::ModelConfig::from_json(j.at("model"));
    c.weights_seed = j.value("weights_seed", c.weights_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j, std::filesystem::absolute(path).parent_path());
}

}  // namespace meshpop
