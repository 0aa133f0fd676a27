// Acceptance runner: one PASS/FAIL line per criterion, each timed against
// its runtime budget. Positional arguments select a subset of criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "meshpop/cli.hpp"
#include "meshpop/pipeline.hpp"
#include "meshpop/synthetic.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace meshpop;
using nlohmann::json;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

std::string fmt(double v, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

class Runner {
 public:
  explicit Runner(std::set<std::string> only) : only_(std::move(only)) {}

  bool selected(const std::string& key) const { return only_.empty() || only_.count(key); }

  void not_reproducible(const std::string& key, const std::string& name, const std::string& why) {
    if (!selected(key)) return;
    std::cout << "[N/A ] " << name << " | NOT desk-reproducible: " << why << std::endl;
  }

  // `extra_seconds` is added to the measured time (work done by an earlier criterion).
  void run(const std::string& key, const std::string& name, double budget, const std::function<Outcome()>& fn,
           const std::function<double()>& extra_seconds = {}) {
    if (!selected(key)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double t = seconds_since(t0) + (extra_seconds ? extra_seconds() : 0.0);
    const bool in_budget = t <= budget;
    const bool pass = o.ok && in_budget;
    if (!pass) ++failures_;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << name << " | " << o.detail << " | " << fmt(t, "%.2f") << " s (budget "
              << fmt(budget, "%.0f") << " s" << (in_budget ? ")" : ", exceeded)") << std::endl;
  }

  int failures() const { return failures_; }

 private:
  std::set<std::string> only_;
  int failures_ = 0;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::string join(const std::vector<std::string>& v, std::size_t limit = 3) {
  std::string s;
  for (std::size_t i = 0; i < v.size() && i < limit; ++i) s += (i ? "; " : "") + v[i];
  if (v.size() > limit) s += "; ... (" + std::to_string(v.size()) + " total)";
  return s;
}

// ---------------------------------------------------------------------------

Outcome conv_suite() {
  std::vector<std::string> bad;
  if (nn::conv_out_size(334, 3, 7, 2) != 167) bad.push_back("conv_out_size(334,3,7,2) != 167");
  const std::vector<int> chain{334, 167, 84, 84, 42, 21, 11, 1};
  if (nn::spatial_trace(334) != chain) bad.push_back("spatial_trace(334) differs");
  // Full stage structure at reduced channel width.
  nn::ModelConfig c;
  c.stem_width = 4;
  c.base_width = 4;
  c.fc_hidden = 8;
  nn::Model<float> m(c);
  nn::init_model(m, nn::make_synthetic_archive(c, 1), 2);
  Rng rng(3);
  std::vector<float> x(12 * 334 * 334);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
  const auto y = m.forward(x, 1, 334, nn::Mode::eval);
  if (y.size() != 3) bad.push_back("output is not 1x3");
  if (m.last_trace() != chain) bad.push_back("shape probe trace differs");
  return {bad.empty(), bad.empty() ? "167 exact; probe 334->167->84->84->42->21->11->1" : join(bad)};
}

Outcome index_suite() {
  const int n = 10000;
  Rng rng(11);
  raster::RasterGrid b3(100, 100, 36.0, 139.0, 0.001, 0.001), b4 = b3, b5 = b3, b6 = b3;
  for (int i = 0; i < n; ++i)
    for (auto* g : {&b3, &b4, &b5, &b6}) g->values[i] = static_cast<float>(rng.uniform(0.0, 1.0));
  const auto bu = raster::ndbi(b6, b5), vi = raster::ndvi(b5, b4), wi = raster::ndwi(b3, b5);
  const auto bu_swapped = raster::ndbi(b5, b6);
  double max_err = 0.0;
  int bound_violations = 0, antisym_violations = 0;
  for (int i = 0; i < n; ++i) {
    const double p3 = b3.values[i], p4 = b4.values[i], p5 = b5.values[i], p6 = b6.values[i];
    max_err = std::max({max_err, std::abs(bu.values[i] - (p6 - p5) / (p6 + p5)),
                        std::abs(vi.values[i] - (p5 - p4) / (p5 + p4)), std::abs(wi.values[i] - (p3 - p5) / (p3 + p5))});
    for (float v : {bu.values[i], vi.values[i], wi.values[i]})
      if (!(std::abs(v) <= 1.0f)) ++bound_violations;
    if (bu.values[i] != -bu_swapped.values[i]) ++antisym_violations;
  }
  const bool ok = max_err <= 1e-6 && bound_violations == 0 && antisym_violations == 0;
  return {ok, "10^4 pixels, max |err| " + fmt(max_err) + ", bound violations " + std::to_string(bound_violations) +
                  ", antisymmetry violations " + std::to_string(antisym_violations)};
}

Outcome mesh_suite() {
  const int n = 100000;
  const mesh::Envelope env;
  Rng rng(21);
  std::vector<std::string> bad;
  std::set<std::pair<std::int64_t, std::int64_t>> cells10;
  for (int i = 0; i < n; ++i) {
    const double lat = rng.uniform(env.lat_min, env.lat_max), lon = rng.uniform(env.lon_min, env.lon_max);
    for (auto lv : {mesh::Level::L80km, mesh::Level::L10km, mesh::Level::L1km}) {
      const mesh::MeshCode m = mesh::point_to_mesh(lat, lon, lv);
      const std::string code = m.str();
      if (code != test::oracle_code(lat, lon, lv)) bad.push_back("oracle mismatch at " + code);
      if (!(mesh::MeshCode::parse(code) == m)) bad.push_back("parse(str) differs for " + code);
      const mesh::GeoBox b = m.bbox();
      if (!(b.lat_min <= lat && lat < b.lat_max && b.lon_min <= lon && lon < b.lon_max))
        bad.push_back("bbox of " + code + " misses its point");
      if (lv == mesh::Level::L10km) cells10.insert({m.row(), m.col()});
    }
  }
  for (const auto& [r, c] : cells10) {
    const mesh::MeshCode parent(mesh::Level::L10km, r, c);
    const mesh::GeoBox pb = parent.bbox();
    const auto kids = mesh::children_1km(parent);
    std::set<std::string> uniq;
    double area = 0.0;
    for (const auto& k : kids) {
      uniq.insert(k.str());
      const mesh::GeoBox kb = k.bbox();
      area += (kb.lat_max - kb.lat_min) * (kb.lon_max - kb.lon_min);
      const double tol = 1e-12;
      if (kb.lat_min < pb.lat_min - tol || kb.lat_max > pb.lat_max + tol || kb.lon_min < pb.lon_min - tol ||
          kb.lon_max > pb.lon_max + tol)
        bad.push_back("child " + k.str() + " leaves " + parent.str());
      const double clat = 0.5 * (kb.lat_min + kb.lat_max), clon = 0.5 * (kb.lon_min + kb.lon_max);
      if (!(mesh::point_to_mesh(clat, clon, mesh::Level::L10km) == parent))
        bad.push_back("child " + k.str() + " centre not in " + parent.str());
    }
    const double parea = (pb.lat_max - pb.lat_min) * (pb.lon_max - pb.lon_min);
    if (kids.size() != 100 || uniq.size() != 100) bad.push_back(parent.str() + " does not have 100 distinct children");
    if (std::abs(area - parea) > 1e-9 * parea) bad.push_back(parent.str() + " children do not cover its area");
  }
  return {bad.empty(), "10^5 points x 3 levels, " + std::to_string(cells10.size()) + " 10 km cells x 100 children" +
                           (bad.empty() ? "" : ": " + join(bad))};
}

Outcome split_suite() {
  const mesh::MeshCode base = mesh::MeshCode::parse("533900");
  Rng rng(31);
  std::vector<mesh::LabelRecord> records;
  std::map<std::string, std::pair<double, int>> totals;
  for (int r = 0; r < 25; ++r)
    for (int c = 0; c < 40; ++c) {
      const mesh::MeshCode m(mesh::Level::L10km, base.row() + r, base.col() + c);
      for (int year : {2015, 2020}) {
        mesh::LabelRecord rec{m, year, 0, 0, 0};
        rec.pop_0_14 = static_cast<std::uint64_t>(std::pow(10.0, rng.uniform(0.0, 3.5)));
        rec.pop_15_64 = static_cast<std::uint64_t>(std::pow(10.0, rng.uniform(0.5, 4.5)));
        rec.pop_65p = static_cast<std::uint64_t>(std::pow(10.0, rng.uniform(0.2, 3.8)));
        auto& t = totals[m.str()];
        t.first += static_cast<double>(rec.total());
        t.second += 1;
        records.push_back(rec);
      }
    }
  const auto manifest = data::stratified_split(records, 42);
  std::vector<std::string> bad;

  std::array<std::set<std::string>, 3> members;
  for (const auto& [m, s] : manifest.assignment) members[static_cast<int>(s)].insert(m);
  std::size_t covered = members[0].size() + members[1].size() + members[2].size();
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b)
      for (const auto& m : members[a])
        if (members[b].count(m)) bad.push_back(m + " in two splits");
  if (covered != totals.size()) bad.push_back("assignment covers " + std::to_string(covered) + " of 1000 meshes");

  // Deciles recomputed independently from the mean totals.
  std::vector<std::pair<double, std::string>> ranked;
  for (const auto& [m, t] : totals) ranked.emplace_back(t.first / t.second, m);
  std::sort(ranked.begin(), ranked.end());
  int worst = 0;
  for (int d = 0; d < 10; ++d) {
    std::array<int, 3> cnt{};
    for (int i = d * 100; i < (d + 1) * 100; ++i) ++cnt[static_cast<int>(manifest.of(mesh::MeshCode::parse(ranked[i].second)))];
    worst = std::max({worst, std::abs(cnt[0] - 80), std::abs(cnt[1] - 10), std::abs(cnt[2] - 10)});
  }
  if (worst > 2) bad.push_back("decile deviation " + std::to_string(worst));

  const fs::path dir = fs::temp_directory_path() / ("meshpop_split_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  auto shuffled = records;
  rng.shuffle(shuffled);
  data::save_manifest(dir / "a.json", manifest);
  data::save_manifest(dir / "b.json", data::stratified_split(records, 42));
  data::save_manifest(dir / "c.json", data::stratified_split(shuffled, 42));
  const bool identical = slurp(dir / "a.json") == slurp(dir / "b.json") && slurp(dir / "a.json") == slurp(dir / "c.json");
  fs::remove_all(dir);
  if (!identical) bad.push_back("manifest bytes differ between runs");

  return {bad.empty(), "sizes " + std::to_string(members[0].size()) + "/" + std::to_string(members[1].size()) + "/" +
                           std::to_string(members[2].size()) + ", worst decile deviation " + std::to_string(worst) +
                           ", manifests byte-identical " + (identical ? "yes" : "no") +
                           (bad.empty() ? "" : ": " + join(bad))};
}

Outcome transfer_audit() {
  const nn::ModelConfig c;
  nn::Model<float> m(c);
  const nn::Archive a = nn::make_synthetic_archive(c, 5);
  nn::init_model(m, a, 9);
  std::vector<std::string> bad;

  std::set<std::string> random_modules;
  for (const auto& t : m.params()) {
    if (t.provenance == nn::Provenance::random) {
      random_modules.insert(nn::module_of(t.name));
      continue;
    }
    const auto& src = a.get(nn::archive_name_for(t.name));
    if (src.shape != t.shape || std::memcmp(src.data.data(), t.value.data(), src.data.size() * sizeof(float)) != 0)
      bad.push_back(t.name + " differs from its archive tensor");
  }
  if (random_modules != std::set<std::string>{"merge_conv", "fc2"}) bad.push_back("random modules are not {merge_conv, fc2}");

  const auto& first = a.get("conv1.weight");
  int heads_ok = 0;
  for (const char* h : nn::kHeadNames) {
    const auto& w = m.params().at(std::string(h) + ".conv.weight");
    if (w.shape == first.shape && std::memcmp(w.value.data(), first.data.data(), first.data.size() * sizeof(float)) == 0)
      ++heads_ok;
    else
      bad.push_back(std::string(h) + " does not bit-match conv1.weight");
  }

  std::size_t canonical = 0, transferred = 0;
  for (const auto& [name, shape] : nn::canonical_resnet50(c)) {
    if (name.rfind("conv1.", 0) == 0 || name.rfind("bn1.", 0) == 0) continue;
    ++canonical;
    const std::string local = name.rfind("fc.", 0) == 0 ? "fc1." + name.substr(3) : name;
    if (!m.params().has(local)) {
      bad.push_back(local + " missing");
    } else if (m.params().at(local).shape != shape) {
      bad.push_back(local + " has the wrong shape");
    }
  }
  for (const auto& t : m.params()) {
    const std::string mod = nn::module_of(t.name);
    if ((mod.rfind("layer", 0) == 0 || mod == "fc1") && t.provenance == nn::Provenance::pretrained) ++transferred;
  }
  if (transferred != canonical) bad.push_back("backbone+fc1 tensor count " + std::to_string(transferred) + " != " +
                                              std::to_string(canonical));
  return {bad.empty(), "random {merge_conv, fc2}, heads bit-matching " + std::to_string(heads_ok) +
                           "/4, backbone+fc1 tensors " + std::to_string(transferred) + "/" + std::to_string(canonical) +
                           (bad.empty() ? "" : ": " + join(bad))};
}

Outcome optimizer_oracle() {
  Rng rng(3);
  nn::ParamStore<double> ps;
  ps.add("a", {4}, true);
  ps.add("b", {2, 3}, true);
  std::vector<test::ScalarAdam> ref(10, test::ScalarAdam{0.01, 0.9, 0.999, 1e-8});
  std::vector<double> theta(10);
  for (int i = 0; i < 10; ++i) theta[i] = rng.normal();
  for (int i = 0; i < 4; ++i) ps[0].value[i] = theta[i];
  for (int i = 0; i < 6; ++i) ps[1].value[i] = theta[4 + i];
  nn::Moments<double> mom;
  nn::TrainState st;
  st.alpha = 0.01;
  double max_err = 0.0;
  for (int step = 0; step < 1000; ++step) {
    for (int i = 0; i < 10; ++i) {
      const double g = rng.normal(0.0, rng.uniform(0.01, 3.0));
      (i < 4 ? ps[0].grad[i] : ps[1].grad[i - 4]) = g;
      theta[i] = ref[i].step(theta[i], g);
    }
    train::adam_step(st, ps, mom);
    for (int i = 0; i < 10; ++i) max_err = std::max(max_err, std::abs((i < 4 ? ps[0].value[i] : ps[1].value[i - 4]) - theta[i]));
  }

  nn::ParamStore<double> q;
  q.add("theta", {1}, true);
  q[0].value[0] = 0.0;
  nn::Moments<double> qm;
  nn::TrainState qs;
  qs.alpha = 0.1;
  for (int i = 0; i < 2000; ++i) {
    q[0].grad[0] = 2.0 * (q[0].value[0] - 3.0);
    train::adam_step(qs, q, qm);
  }
  const double dist = std::abs(q[0].value[0] - 3.0);
  return {max_err <= 1e-9 && dist < 1e-3,
          "max deviation over 1000 steps " + fmt(max_err) + ", |theta-3| after 2000 steps " + fmt(dist)};
}

Outcome gradient_check() {
  nn::ModelConfig c;
  c.stem_width = 8;
  c.base_width = 8;
  c.blocks = {1};
  c.fc_hidden = 16;
  nn::Model<double> m(c);
  nn::init_model(m, nn::make_synthetic_archive(c, 3), 4);
  nn::set_output_bias(m, {2.0, 2.0, 2.0});
  const int n = 2, s = 64;
  const std::uint64_t dropout_seed = 17;  // same mask for every evaluation
  Rng rng(6);
  std::vector<double> x(static_cast<std::size_t>(n) * 12 * s * s);
  for (auto& v : x) v = rng.uniform(-1, 1);
  const std::vector<double> labels{1.0, 2.5, 3.0, 2.0, 1.0, 0.5};
  auto loss_at = [&] { return train::loss(m.forward(x, n, s, nn::Mode::train, dropout_seed), labels); };
  m.params().zero_grad();
  m.backward(train::loss_gradient(m.forward(x, n, s, nn::Mode::train, dropout_seed), labels));

  std::vector<std::pair<std::size_t, std::size_t>> scalars;
  for (std::size_t t = 0; t < m.params().size(); ++t)
    if (m.params()[t].trainable)
      for (std::size_t k = 0; k < m.params()[t].value.size(); ++k) scalars.push_back({t, k});
  Rng pick(7);
  std::set<std::size_t> chosen;
  while (chosen.size() < 50) chosen.insert(static_cast<std::size_t>(pick.uniform_index(scalars.size())));

  double worst = 0.0;
  std::string worst_name;
  for (std::size_t i : chosen) {
    auto& t = m.params()[scalars[i].first];
    const std::size_t k = scalars[i].second;
    const double orig = t.value[k], h = 1e-5;
    t.value[k] = orig + h;
    const double lp = loss_at();
    t.value[k] = orig - h;
    const double lm = loss_at();
    t.value[k] = orig;
    const double fd = (lp - lm) / (2 * h), an = t.grad[k];
    const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
    if (rel > worst) {
      worst = rel;
      worst_name = t.name + "[" + std::to_string(k) + "]";
    }
  }
  return {worst <= 1e-3, "50 of " + std::to_string(scalars.size()) + " parameters, worst relative error " + fmt(worst) +
                             " at " + worst_name};
}

json synth_config(int tile_size, int epochs, int batch_size) {
  return {{"paths", {{"scenes", "scenes"}, {"labels", "labels.csv"}}},
          {"census_years", {2020}},
          {"prediction_years", {2022}},
          {"seed", 42},
          {"tile_size", tile_size},
          {"epochs", epochs},
          {"batch_size", batch_size}};
}

Outcome overfit_probe(const fs::path& root) {
  fs::remove_all(root);
  synth::SynthOptions o;
  o.mesh_rows = 2;
  o.mesh_cols = 4;
  o.seed = 7;
  synth::generate(root, o);
  const PipelineConfig cfg = parse_config(synth_config(96, 0, 8), root);
  const pipeline::StageLog quiet{nullptr};
  pipeline::run_composite(cfg, quiet);
  std::vector<data::Sample> samples;
  std::map<std::string, std::array<float, 3>> labels;
  for (const auto& r : pipeline::load_labels_10km(cfg)) labels[r.mesh.str()] = data::to_label_vector(r);
  for (const auto& e : pipeline::run_tile(cfg, quiet))
    if (e.year == 2020) samples.push_back({e.mesh, e.year, cfg.paths.tiles / e.path, labels.at(e.mesh.str()), true});
  if (samples.size() != 8) return {false, "expected 8 tiles, got " + std::to_string(samples.size())};
  std::vector<std::size_t> all(samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const data::Batch b = data::load_batch(samples, all);

  // Dropout off for the probe.
  nn::ModelConfig mc;
  mc.dropout = 0.0;
  nn::Model<float> m(mc);
  nn::init_model(m, nn::make_synthetic_archive(mc, cfg.weights_seed), cfg.seed);
  nn::set_output_bias(m, train::label_means(samples));
  nn::TrainState st;
  nn::Moments<float> mom;
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    m.params().zero_grad();
    const auto y = m.forward(b.inputs, b.n, b.size, nn::Mode::train);
    losses.push_back(train::loss(y, b.labels));
    m.backward(train::loss_gradient(y, b.labels));
    train::adam_step(st, m.params(), mom);
  }
  double tail = 0.0;
  for (std::size_t i = losses.size() - 10; i < losses.size(); ++i) tail += losses[i] / 10.0;
  const double eval_loss = train::loss(m.forward(b.inputs, b.n, b.size, nn::Mode::eval), b.labels);
  fs::remove_all(root);
  return {tail < 0.1 * losses.front(), "initial " + fmt(losses.front()) + ", mean of last 10 steps " + fmt(tail) +
                                           " (ratio " + fmt(tail / losses.front()) + "), eval-mode loss " +
                                           fmt(eval_loss)};
}

struct E2E {
  fs::path root;
  double seconds = 0.0;
  json metrics;
};

E2E run_e2e(const fs::path& root) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::remove_all(root);
  synth::SynthOptions o;  // 15 x 20 cells, sigma 0.05
  synth::generate(root, o);
  const fs::path config = root / "config.json";
  std::ofstream(config) << synth_config(96, 15, 16).dump(2) << "\n";
  const std::vector<std::vector<std::string>> stages{
      {"composite"}, {"tile"}, {"split"}, {"train"}, {"eval", "--split", "test"}};
  for (auto args : stages) {
    args.insert(args.begin(), "meshpop");
    args.push_back("--config");
    args.push_back(config.string());
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    const int rc = cli::run_cli(static_cast<int>(argv.size()), argv.data(), std::cerr);
    if (rc != 0) throw std::runtime_error("stage '" + args[1] + "' exited with " + std::to_string(rc));
  }
  E2E r;
  r.root = root;
  r.metrics = json::parse(slurp(root / "work/out/metrics_test.json"));
  r.seconds = seconds_since(t0);
  return r;
}

Outcome e2e_outcome(const E2E& r) {
  const auto& t = r.metrics.at("splits").at("test");
  bool ok = true;
  std::string s = "test n=" + std::to_string(t.at("n").get<int>()) + ", R2";
  for (const char* g : train::kGroupNames) {
    const double v = t.at("r2").at("standard").at(g).get<double>();
    ok = ok && v > 0.8;
    s += std::string(" ") + g + "=" + fmt(v);
  }
  return {ok, s + ", loss " + fmt(t.at("loss").get<double>()) + ", epoch " +
                  std::to_string(r.metrics.at("epoch_selected").get<int>())};
}

// Largest numeric difference between two JSON documents of the same shape.
double json_diff(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return std::abs(a.get<double>() - b.get<double>());
  if (a.type() != b.type() || a.size() != b.size()) return INFINITY;
  double d = 0.0;
  if (a.is_object()) {
    for (auto it = a.begin(); it != a.end(); ++it) {
      if (!b.contains(it.key())) return INFINITY;
      d = std::max(d, json_diff(*it, b.at(it.key())));
    }
  } else if (a.is_array()) {
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, json_diff(a[i], b[i]));
  } else if (a != b) {
    return INFINITY;
  }
  return d;
}

std::map<std::string, std::string> tree_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

Outcome determinism(const E2E& a, const E2E& b) {
  std::vector<std::string> bad;
  double worst = 0.0;
  for (const char* f : {"work/out/metrics_test.json", "work/out/metrics_train.json"})
    worst = std::max(worst, json_diff(json::parse(slurp(a.root / f)), json::parse(slurp(b.root / f))));
  const auto ca = train::read_loss_curve(a.root / "work/out/loss_curve.csv");
  const auto cb = train::read_loss_curve(b.root / "work/out/loss_curve.csv");
  if (ca.size() != cb.size()) bad.push_back("loss curves differ in length");
  for (std::size_t i = 0; i < std::min(ca.size(), cb.size()); ++i)
    worst = std::max({worst, std::abs(ca[i].train_loss - cb[i].train_loss), std::abs(ca[i].val_loss - cb[i].val_loss)});
  if (!(worst <= 1e-4)) bad.push_back("metrics differ by " + fmt(worst));
  if (slurp(a.root / "work/split.json") != slurp(b.root / "work/split.json")) bad.push_back("split manifests differ");
  const auto ta = tree_bytes(a.root / "work/tiles"), tb = tree_bytes(b.root / "work/tiles");
  if (ta != tb) bad.push_back("tile trees differ");
  return {bad.empty(), "max metric difference " + fmt(worst) + ", " + std::to_string(ta.size()) +
                           " tile files incl. manifest byte-identical " + (ta == tb ? "yes" : "no") +
                           (bad.empty() ? "" : ": " + join(bad))};
}

Outcome metrics_identities() {
  std::vector<std::string> bad;
  const std::vector<double> l{1, 5, 2, 2, 6, 1, 3, 7, 5};
  for (auto v : {train::R2Variant::standard, train::R2Variant::paper_printed})
    for (int g = 0; g < 3; ++g) {
      if (train::r2_group(l, l, g, v) != 1.0) bad.push_back("perfect fit != 1");
      double mean = 0;
      for (int i = 0; i < 3; ++i) mean += l[i * 3 + g] / 3.0;
      std::vector<double> p = l;
      for (int i = 0; i < 3; ++i) p[i * 3 + g] = mean;
      if (std::abs(train::r2_group(p, l, g, v)) > 1e-12) bad.push_back("mean prediction != 0");
    }
  const double l0 = train::loss(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3});
  const double l5 = train::loss(std::vector<double>{3, 4, 0}, std::vector<double>{0, 0, 0});
  const double l2 = train::loss(std::vector<double>{1, 0, 0, 0, 3, 0}, std::vector<double>(6, 0.0));
  if (l0 != 0.0 || l5 != 5.0 || l2 != 2.0) bad.push_back("loss hand cases give " + fmt(l0) + ", " + fmt(l5) + ", " + fmt(l2));
  return {bad.empty(), "R2 anchors for both variants, loss hand cases 0/5/2" + (bad.empty() ? "" : ": " + join(bad))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<std::string> only;
  std::string work;
  bool keep = false;
  app.add_option("criteria", only,
                 "subset to run: headline conv index mesh split transfer adam gradcheck overfit e2e metrics determinism");
  app.add_option("--work-dir", work, "scratch directory for the synthetic runs");
  app.add_flag("--keep", keep, "keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  const fs::path root = work.empty() ? fs::temp_directory_path() / ("meshpop_acceptance_" + std::to_string(::getpid()))
                                     : fs::path(work);
  fs::create_directories(root);
  Runner r({only.begin(), only.end()});

  r.not_reproducible("headline", "Headline test R2 and losses",
                     "needs the national census extract, full-resolution imagery and GPU-scale training");
  r.run("conv", "Conv-arithmetic suite", 1, conv_suite);
  r.run("index", "Index oracle suite", 5, index_suite);
  r.run("mesh", "Mesh codec suite", 10, mesh_suite);
  r.run("split", "Split suite", 5, split_suite);
  r.run("transfer", "Transfer-init audit", 30, transfer_audit);
  r.run("adam", "Optimizer oracle", 5, optimizer_oracle);
  r.run("gradcheck", "Gradient check", 300, gradient_check);
  r.run("metrics", "Metrics identities", 1, metrics_identities);
  r.run("overfit", "Overfit probe", 900, [&] { return overfit_probe(root / "overfit"); });

  std::optional<E2E> first;
  r.run("e2e", "Synthetic end-to-end", 2700, [&] {
    first = run_e2e(root / "e2e_a");
    return e2e_outcome(*first);
  });
  r.run(
      "determinism", "Pipeline determinism", 2 * 2700,
      [&] {
        if (!first) first = run_e2e(root / "e2e_a");
        const E2E second = run_e2e(root / "e2e_b");
        return determinism(*first, second);
      },
      [&] { return r.selected("e2e") && first ? first->seconds : 0.0; });

  if (!keep && work.empty()) fs::remove_all(root);
  std::cout << (r.failures() == 0 ? "ALL PASS" : std::to_string(r.failures()) + " FAILED") << std::endl;
  return r.failures() == 0 ? 0 : 1;
}
