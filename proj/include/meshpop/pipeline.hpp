#pragma once

// Pipeline stages driven by a PipelineConfig. Each stage reads the previous
// stage's files and rewrites its own outputs deterministically.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "meshpop/app.hpp"
#include "meshpop/config.hpp"
#include "meshpop/dataset.hpp"
#include "meshpop/geotiff.hpp"
#include "meshpop/model.hpp"
#include "meshpop/raster.hpp"
#include "meshpop/tile.hpp"
#include "meshpop/trainer.hpp"

namespace meshpop::pipeline {

namespace fs = std::filesystem;
using raster::Band;

inline constexpr std::array<Band, 7> kBands{Band::B2, Band::B3, Band::B4, Band::B5, Band::B6, Band::B7, Band::NTL};

inline fs::path composite_path(const PipelineConfig& c, int year, Band b) {
  return c.paths.composites / std::to_string(year) / (std::string(raster::band_name(b)) + ".tif");
}

inline std::vector<fs::path> scene_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (!e.is_regular_file() || e.path().extension() != ".tif" || name.ends_with(".mask.tif")) continue;
    out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

struct StageLog {
  std::ostream* out = &std::cerr;
  template <typename... A>
  void operator()(const A&... a) const {
    if (!out) return;
    ((*out) << ... << a) << '\n';
  }
};

// scenes/<year>/<band>/*.tif (+ optional <name>.mask.tif) -> composites/<year>/<band>.tif
inline int run_composite(const PipelineConfig& c, const StageLog& log = {}) {
  int written = 0;
  for (int year : c.all_years()) {
    for (Band b : kBands) {
      const fs::path dir = c.paths.scenes / std::to_string(year) / raster::band_name(b);
      const auto files = scene_files(dir);
      if (files.empty()) {
        log("composite: no scenes for ", raster::band_name(b), " ", year, " in ", dir.string());
        continue;
      }
      std::vector<raster::Scene> scenes;
      for (const auto& f : files) {
        raster::Scene s;
        s.values = raster::load_raster(f);
        fs::path mask = f;
        mask.replace_extension(".mask.tif");
        s.cloud = fs::exists(mask) ? raster::load_mask(mask) : std::vector<std::uint8_t>(s.values.values.size(), 0);
        scenes.push_back(std::move(s));
      }
      raster::RasterGrid mean = raster::cloudfree_annual_mean(scenes);
      if (b != Band::NTL && !c.landsat_scaled) mean = raster::apply_scale_offset(mean, c.landsat_scale, c.landsat_offset);
      raster::AnnualComposite comp(year, b, std::move(mean), raster::source_of(b));
      raster::write_raster(composite_path(c, year, b), comp.grid);
      ++written;
    }
  }
  log("composite: wrote ", written, " composites");
  return written;
}

inline std::vector<mesh::LabelRecord> load_labels_10km(const PipelineConfig& c) {
  auto labels = data::to_10km(data::load_labels(c.paths.labels));
  for (const auto& r : labels)
    if (!c.is_census_year(r.year))
      throw DomainError("label year " + std::to_string(r.year) + " is not a configured census year");
  return labels;
}

// Builds one tile per (mesh, year). Census years use the meshes labelled in
// that year; prediction years use every mesh labelled in any census year.
// Meshes whose tile cannot be built are skipped for that year only.
inline std::vector<tiles::TileEntry> run_tile(const PipelineConfig& c, const StageLog& log = {}) {
  const auto labels = load_labels_10km(c);
  std::map<int, std::set<std::string>> by_year;
  std::set<std::string> universe;
  for (const auto& r : labels) {
    by_year[r.year].insert(r.mesh.str());
    universe.insert(r.mesh.str());
  }
  tiles::TileOptions opt;
  opt.tile_size = c.tile_size;
  opt.reflectance_method = c.reflectance_resampling;
  opt.ntl_method = c.ntl_resampling;

  std::vector<tiles::TileEntry> entries;
  for (int year : c.all_years()) {
    tiles::CompositeSet set;
    for (Band b : kBands) {
      const fs::path p = composite_path(c, year, b);
      if (fs::exists(p)) set[b] = raster::load_raster(p);
    }
    const auto& meshes = c.is_census_year(year) ? by_year[year] : universe;
    int skipped = 0;
    for (const auto& code : meshes) {
      const auto m = mesh::MeshCode::parse(code);
      tiles::TileSample t;
      try {
        t = tiles::build_tile(set, m, year, opt);
      } catch (const IncompleteCoverage& e) {
        ++skipped;
        log("tile: skip ", code, "/", year, ": ", e.what());
        continue;
      } catch (const DataError& e) {
        ++skipped;
        log("tile: skip ", code, "/", year, ": ", e.what());
        continue;
      }
      const std::string rel = tiles::tile_relative_path(m, year);
      tiles::write_tile(c.paths.tiles / rel, t);
      entries.push_back({m, year, rel});
    }
    log("tile: ", year, ": ", meshes.size() - skipped, " tiles, ", skipped, " skipped");
  }
  tiles::write_tile_manifest(c.tile_manifest(), entries);
  return tiles::read_tile_manifest(c.tile_manifest());
}

inline data::SplitManifest run_split(const PipelineConfig& c, const StageLog& log = {}) {
  const auto m = data::stratified_split(load_labels_10km(c), c.seed);
  data::save_manifest(c.paths.split, m);
  std::array<int, 3> n{};
  for (const auto& [k, s] : m.assignment) ++n[static_cast<int>(s)];
  log("split: train ", n[0], ", val ", n[1], ", test ", n[2]);
  return m;
}

inline std::vector<data::Sample> split_samples(const PipelineConfig& c, tiles::Split s) {
  return data::samples_for_split(tiles::read_tile_manifest(c.tile_manifest()), c.paths.tiles,
                                 data::load_manifest(c.paths.split), load_labels_10km(c), s);
}

inline nn::Archive pretrained_archive(const PipelineConfig& c) {
  if (c.paths.weights.empty()) return nn::make_synthetic_archive(c.model, c.weights_seed);
  return nn::Archive::load(c.paths.weights);
}

struct TrainOutcome {
  train::FitResult fit;
  train::MetricsReport report;
};

inline TrainOutcome run_train(const PipelineConfig& c, bool resume = false, const StageLog& log = {}) {
  const auto train_set = split_samples(c, tiles::Split::train);
  const auto val_set = split_samples(c, tiles::Split::val);
  nn::Model<float> model(c.model);
  nn::init_model(model, pretrained_archive(c), c.seed);

  train::FitOptions opt;
  opt.epochs = c.epochs;
  opt.batch_size = c.batch_size;
  opt.seed = c.seed;
  opt.loss = c.loss;
  opt.alpha = c.adam_alpha;
  opt.beta1 = c.adam_beta1;
  opt.beta2 = c.adam_beta2;
  opt.eps = c.adam_eps;
  opt.checkpoint_dir = c.paths.checkpoints;
  opt.resume = resume;
  opt.on_epoch = [&](const train::EpochRecord& r) {
    log("train: epoch ", r.epoch, "/", c.epochs, " train_loss ", r.train_loss, " val_loss ", r.val_loss);
  };
  if (!resume) {
    fs::remove(c.paths.checkpoints / "best.ckpt");
    fs::remove(c.paths.checkpoints / "last.ckpt");
    fs::remove(c.paths.checkpoints / "loss_curve.csv");
  }
  TrainOutcome out;
  out.fit = train::fit(model, train_set, val_set, opt);
  train::write_loss_curve(c.paths.outputs / "loss_curve.csv", out.fit.curve);
  out.report.epoch_selected = out.fit.state.best_epoch;
  out.report.splits["train"] = train::evaluate(model, train_set, c.batch_size, c.loss);
  out.report.splits["val"] = train::evaluate(model, val_set, c.batch_size, c.loss);
  train::save_metrics(c.paths.outputs / "metrics_train.json", out.report);
  log("train: best epoch ", out.fit.state.best_epoch, " val_loss ", out.fit.state.best_val_loss);
  return out;
}

inline nn::TrainState load_best(const PipelineConfig& c, std::unique_ptr<nn::Model<float>>& model) {
  const fs::path p = c.best_checkpoint();
  if (!fs::exists(p)) throw DataError("no trained checkpoint at " + p.string() + " (run train first)");
  const nn::Archive a = nn::Archive::load(p);
  model = std::make_unique<nn::Model<float>>(nn::checkpoint_config(a));
  return nn::load_checkpoint(a, *model);
}

inline train::MetricsReport run_eval(const PipelineConfig& c, tiles::Split split, const StageLog& log = {}) {
  std::unique_ptr<nn::Model<float>> model;
  const auto state = load_best(c, model);
  const auto samples = split_samples(c, split);
  train::MetricsReport r;
  r.epoch_selected = state.best_epoch;
  r.splits[tiles::split_name(split)] = train::evaluate(*model, samples, c.batch_size, c.loss);
  train::save_metrics(c.paths.outputs / (std::string("metrics_") + tiles::split_name(split) + ".json"), r);
  const auto& m = r.splits.at(tiles::split_name(split));
  log("eval: ", tiles::split_name(split), " n=", m.n, " loss ", m.loss, " r2 ", m.r2_standard[0], " ",
      m.r2_standard[1], " ", m.r2_standard[2]);
  return r;
}

inline fs::path predictions_csv(const PipelineConfig& c, int year) {
  return c.paths.outputs / ("predictions_" + std::to_string(year) + ".csv");
}

inline std::vector<app::PredictionRecord> run_predict(const PipelineConfig& c, int year, const StageLog& log = {}) {
  std::unique_ptr<nn::Model<float>> model;
  load_best(c, model);
  auto records =
      app::predict_year(*model, tiles::read_tile_manifest(c.tile_manifest()), c.paths.tiles, year, c.batch_size);
  app::export_csv(predictions_csv(c, year), records);
  log("predict: ", year, ": ", records.size(), " records");
  return records;
}

inline std::vector<app::PredictionRecord> run_export(const PipelineConfig& c, int year, bool plot,
                                                     const StageLog& log = {}) {
  const fs::path csv = predictions_csv(c, year);
  if (!fs::exists(csv)) throw DataError("no predictions at " + csv.string() + " (run predict first)");
  auto records = app::read_csv(csv);
  const fs::path geo = c.paths.outputs / ("aged_rate_" + std::to_string(year) + ".geojson");
  app::export_geojson(geo, records);
  if (plot) app::write_choropleth(c.paths.outputs / ("aged_rate_" + std::to_string(year) + ".ppm"), records);
  log("export-map: wrote ", geo.string());
  return records;
}

}  // namespace meshpop::pipeline
