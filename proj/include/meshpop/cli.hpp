#pragma once

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "meshpop/config.hpp"
#include "meshpop/error.hpp"
#include "meshpop/pipeline.hpp"

namespace meshpop::cli {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<int> batch_size;
};

inline PipelineConfig load_with_overrides(const std::string& path, const Overrides& o) {
  PipelineConfig c = load_config(path);
  if (o.seed) c.seed = *o.seed;
  if (o.epochs) c.epochs = *o.epochs;
  if (o.batch_size) c.batch_size = *o.batch_size;
  c.validate();
  return c;
}

// Exit codes: 0 success, 1 bad usage or validation error, 2 runtime error.
inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"Mesh-wise demographic composition from satellite tiles"};
  app.require_subcommand(1);
  std::string config;
  Overrides ov;
  std::string split = "test";
  int year = 0;
  bool plot = false, resume = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "pipeline config (JSON)")->required();
    sub->add_option("--seed", ov.seed, "override config seed");
    sub->add_option("--epochs", ov.epochs, "override epoch count");
    sub->add_option("--batch-size", ov.batch_size, "override batch size");
  };
  auto* composite = app.add_subcommand("composite", "cloud-free annual composites");
  auto* tile = app.add_subcommand("tile", "per-mesh tiles and tile manifest");
  auto* split_cmd = app.add_subcommand("split", "stratified train/val/test split");
  auto* train_cmd = app.add_subcommand("train", "train and select the best epoch");
  auto* eval = app.add_subcommand("eval", "metrics of the best checkpoint on one split");
  auto* predict = app.add_subcommand("predict", "predictions for one year");
  auto* export_map = app.add_subcommand("export-map", "GeoJSON (and optional PPM) of the aged rate");
  for (auto* s : {composite, tile, split_cmd, train_cmd, eval, predict, export_map}) common(s);
  train_cmd->add_flag("--resume", resume, "continue from the last checkpoint");
  eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  predict->add_option("--year", year, "year to predict")->required();
  export_map->add_option("--year", year, "year to export")->required();
  export_map->add_flag("--plot", plot, "also write a PPM choropleth");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::cout << app.help();
      return 0;
    }
    err << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    const PipelineConfig c = load_with_overrides(config, ov);
    const pipeline::StageLog log{&err};
    if (composite->parsed()) pipeline::run_composite(c, log);
    else if (tile->parsed()) pipeline::run_tile(c, log);
    else if (split_cmd->parsed()) pipeline::run_split(c, log);
    else if (train_cmd->parsed()) pipeline::run_train(c, resume, log);
    else if (eval->parsed()) pipeline::run_eval(c, tiles::parse_split(split), log);
    else if (predict->parsed()) pipeline::run_predict(c, year, log);
    else if (export_map->parsed()) pipeline::run_export(c, year, plot, log);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.validation() ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace meshpop::cli
