// Writes a synthetic scene/label set plus a matching pipeline config.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "meshpop/error.hpp"
#include "meshpop/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic dataset"};
  std::string out;
  meshpop::synth::SynthOptions o;
  int tile_size = 96, epochs = 15, batch = 16;
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--seed", o.seed, "generator seed");
  app.add_option("--rows", o.mesh_rows, "10 km cells north-south");
  app.add_option("--cols", o.mesh_cols, "10 km cells east-west");
  app.add_option("--px-per-mesh", o.px_per_mesh, "reflectance pixels per cell side");
  app.add_option("--tile-size", tile_size, "tile size written to the config");
  app.add_option("--epochs", epochs, "epochs written to the config");
  app.add_option("--batch-size", batch, "batch size written to the config");
  CLI11_PARSE(app, argc, argv);
  try {
    const auto res = meshpop::synth::generate(out, o);
    nlohmann::json cfg = {{"paths", {{"scenes", "scenes"}, {"labels", "labels.csv"}}},
                          {"census_years", o.census_years},
                          {"prediction_years", o.prediction_years},
                          {"seed", 42},
                          {"tile_size", tile_size},
                          {"epochs", epochs},
                          {"batch_size", batch}};
    std::ofstream(std::filesystem::path(out) / "config.json") << cfg.dump(2) << "\n";
    std::cerr << "synth: " << res.meshes.size() << " meshes, " << res.labels.size() << " label rows\n";
  } catch (const meshpop::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.validation() ? 1 : 2;
  }
  return 0;
}
