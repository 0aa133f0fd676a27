#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "meshpop/dataset.hpp"
#include "meshpop/error.hpp"
#include "meshpop/model.hpp"

namespace meshpop::train {

using nn::Model;
using nn::Moments;
using nn::TrainState;

inline constexpr std::array<const char*, 3> kGroupNames{"pop_0_14", "pop_15_64", "pop_65plus"};

enum class LossKind { l2, l1 };

inline LossKind parse_loss(const std::string& s) {
  if (s == "l2") return LossKind::l2;
  if (s == "l1") return LossKind::l1;
  throw ConfigError("unknown loss '" + s + "' (expected l2 or l1)");
}

// Mean over samples of the per-sample error norm. Rows have `width` values.
template <typename A, typename B>
double loss(const std::vector<A>& preds, const std::vector<B>& labels, int width = 3, LossKind kind = LossKind::l2) {
  if (preds.size() != labels.size() || width < 1 || preds.size() % width != 0)
    throw ShapeError("loss: predictions (" + std::to_string(preds.size()) + ") and labels (" +
                     std::to_string(labels.size()) + ") do not match");
  const std::size_t n = preds.size() / width;
  if (n == 0) throw ShapeError("loss: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int g = 0; g < width; ++g) {
      const double e = static_cast<double>(preds[i * width + g]) - static_cast<double>(labels[i * width + g]);
      acc += kind == LossKind::l2 ? e * e : std::abs(e);
    }
    total += kind == LossKind::l2 ? std::sqrt(acc) : acc;
  }
  return total / static_cast<double>(n);
}

// d(loss)/d(preds). The subgradient at a zero error is taken as 0.
template <typename T, typename B>
std::vector<T> loss_gradient(const std::vector<T>& preds, const std::vector<B>& labels, int width = 3,
                             LossKind kind = LossKind::l2) {
  if (preds.size() != labels.size() || preds.empty() || preds.size() % width != 0)
    throw ShapeError("loss gradient: shape mismatch");
  const std::size_t n = preds.size() / width;
  std::vector<T> g(preds.size(), T(0));
  for (std::size_t i = 0; i < n; ++i) {
    if (kind == LossKind::l1) {
      for (int k = 0; k < width; ++k) {
        const double e = static_cast<double>(preds[i * width + k]) - labels[i * width + k];
        g[i * width + k] = static_cast<T>((e > 0) - (e < 0)) / static_cast<T>(n);
      }
      continue;
    }
    double acc = 0.0;
    for (int k = 0; k < width; ++k) {
      const double e = static_cast<double>(preds[i * width + k]) - labels[i * width + k];
      acc += e * e;
    }
    const double norm = std::sqrt(acc);
    if (norm == 0.0) continue;
    for (int k = 0; k < width; ++k) {
      const double e = static_cast<double>(preds[i * width + k]) - labels[i * width + k];
      g[i * width + k] = static_cast<T>(e / (norm * static_cast<double>(n)));
    }
  }
  return g;
}

// One Adam update over all trainable tensors. The step is rejected as a
// whole if any gradient is non-finite.
template <typename T>
void adam_step(TrainState& state, nn::ParamStore<T>& ps, Moments<T>& mom) {
  for (const auto& t : ps) {
    if (!t.trainable) continue;
    for (const T g : t.grad)
      if (!std::isfinite(static_cast<double>(g))) throw NumericalError("non-finite gradient in " + t.name);
  }
  mom.ensure(ps);
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    if (!p.trainable) continue;
    auto& m = mom.m[i];
    auto& v = mom.v[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      const double mk = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      const double vk = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double mhat = mk / c1;
      const double vhat = vk / c2;
      p.value[k] = static_cast<T>(p.value[k] - state.alpha * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

enum class R2Variant { standard, paper_printed };

// Coefficient of determination for one output column.
template <typename A, typename B>
double r2_group(const std::vector<A>& preds, const std::vector<B>& labels, int g, R2Variant variant = R2Variant::standard,
                int width = 3) {
  if (preds.size() != labels.size() || preds.size() % width != 0) throw ShapeError("r2: shape mismatch");
  if (g < 0 || g >= width) throw DomainError("r2: group index " + std::to_string(g) + " out of range");
  const std::size_t n = preds.size() / width;
  if (n < 2) throw DomainError("r2 needs at least two samples");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += labels[i * width + g];
  mean /= static_cast<double>(n);
  double ss_tot = 0.0, ss_res = 0.0, ss_reg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = labels[i * width + g], p = preds[i * width + g];
    ss_tot += (y - mean) * (y - mean);
    ss_res += (y - p) * (y - p);
    ss_reg += (p - mean) * (p - mean);
  }
  if (ss_tot == 0.0) throw DomainError("r2: labels of group " + std::to_string(g) + " have zero variance");
  return variant == R2Variant::standard ? 1.0 - ss_res / ss_tot : ss_reg / ss_tot;
}

// ---------------------------------------------------------------------------

// Eval-mode predictions for `samples`, in order.
inline std::vector<float> infer(Model<float>& model, const std::vector<data::Sample>& samples, int batch_size) {
  std::vector<float> out;
  out.reserve(samples.size() * model.config().outputs);
  for (const auto& idx : data::iterate_batches(samples.size(), static_cast<std::size_t>(batch_size), 0, 0, false)) {
    data::Batch b = data::load_batch(samples, idx);
    auto y = model.forward(b.inputs, b.n, b.size, nn::Mode::eval);
    out.insert(out.end(), y.begin(), y.end());
  }
  return out;
}

struct SplitMetrics {
  std::size_t n = 0;
  double loss = 0.0;
  std::array<double, 3> r2_standard{};
  std::array<double, 3> r2_paper_printed{};

  nlohmann::json to_json() const {
    nlohmann::json std_j, pp_j;
    for (int g = 0; g < 3; ++g) {
      std_j[kGroupNames[g]] = r2_standard[g];
      pp_j[kGroupNames[g]] = r2_paper_printed[g];
    }
    return {{"n", n}, {"loss", loss}, {"r2", {{"standard", std_j}, {"paper_printed", pp_j}}}};
  }
};

inline SplitMetrics metrics_from(const std::vector<float>& preds, const std::vector<float>& labels,
                                 LossKind kind = LossKind::l2) {
  SplitMetrics m;
  m.n = preds.size() / 3;
  m.loss = loss(preds, labels, 3, kind);
  for (int g = 0; g < 3; ++g) {
    m.r2_standard[g] = r2_group(preds, labels, g, R2Variant::standard);
    m.r2_paper_printed[g] = r2_group(preds, labels, g, R2Variant::paper_printed);
  }
  return m;
}

inline SplitMetrics evaluate(Model<float>& model, const std::vector<data::Sample>& samples, int batch_size,
                             LossKind kind = LossKind::l2) {
  if (samples.empty()) throw DomainError("cannot evaluate an empty split");
  std::vector<float> labels;
  for (const auto& s : samples) {
    if (!s.has_label) throw DataError("sample " + s.mesh.str() + " has no label");
    labels.insert(labels.end(), s.label.begin(), s.label.end());
  }
  return metrics_from(infer(model, samples, batch_size), labels, kind);
}

struct MetricsReport {
  int epoch_selected = -1;
  std::map<std::string, SplitMetrics> splits;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["epoch_selected"] = epoch_selected;
    j["splits"] = nlohmann::json::object();
    for (const auto& [k, v] : splits) j["splits"][k] = v.to_json();
    return j;
  }
};

inline void save_metrics(const std::filesystem::path& path, const MetricsReport& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << r.to_json().dump(2) << '\n';
}

// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct FitOptions {
  int epochs = 250;
  int batch_size = 32;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::l2;
  double alpha = 0.001, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints
  bool resume = false;
  bool restore_best = true;
  bool init_output_bias = true;  // fc2 bias := training label means on a fresh start
  std::function<void(const EpochRecord&)> on_epoch;
};

inline std::vector<double> label_means(const std::vector<data::Sample>& samples) {
  std::vector<double> m(3, 0.0);
  for (const auto& s : samples)
    for (int g = 0; g < 3; ++g) m[g] += s.label[g];
  for (auto& v : m) v /= static_cast<double>(std::max<std::size_t>(samples.size(), 1));
  return m;
}

struct FitResult {
  TrainState state;
  std::vector<EpochRecord> curve;
  std::filesystem::path best_checkpoint;
};

inline void write_loss_curve(const std::filesystem::path& path, const std::vector<EpochRecord>& curve) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,val_loss\n" << std::setprecision(9);
  for (const auto& r : curve) out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << '\n';
}

inline std::vector<EpochRecord> read_loss_curve(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = data::detail::split_csv(line);
    if (f.size() != 3) throw ParseError(path.string() + ": bad loss curve row '" + line + "'");
    out.push_back({std::stoi(f[0]), std::stod(f[1]), std::stod(f[2])});
  }
  return out;
}

// One epoch of training; returns the sample-weighted mean training loss.
inline double train_epoch(Model<float>& model, const std::vector<data::Sample>& train, TrainState& state,
                          Moments<float>& mom, const FitOptions& opt, int epoch) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& idx :
       data::iterate_batches(train.size(), static_cast<std::size_t>(opt.batch_size), opt.seed, epoch)) {
    data::Batch b = data::load_batch(train, idx);
    model.params().zero_grad();
    auto y = model.forward(b.inputs, b.n, b.size, nn::Mode::train, derive_seed(opt.seed ^ 0xD0D0, state.step));
    total += loss(y, b.labels, 3, opt.loss) * b.n;
    count += b.n;
    model.backward(loss_gradient(y, b.labels, 3, opt.loss));
    adam_step(state, model.params(), mom);
  }
  return total / static_cast<double>(count);
}

inline double validation_loss(Model<float>& model, const std::vector<data::Sample>& val, const FitOptions& opt) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& idx : data::iterate_batches(val.size(), static_cast<std::size_t>(opt.batch_size), 0, 0, false)) {
    data::Batch b = data::load_batch(val, idx);
    auto y = model.forward(b.inputs, b.n, b.size, nn::Mode::eval);
    total += loss(y, b.labels, 3, opt.loss) * b.n;
    count += b.n;
  }
  return total / static_cast<double>(count);
}

// Trains for opt.epochs, validating after every epoch. "best.ckpt" is
// rewritten whenever validation loss strictly improves and "last.ckpt"
// after every epoch; with `resume` an existing last.ckpt is continued.
inline FitResult fit(Model<float>& model, const std::vector<data::Sample>& train, const std::vector<data::Sample>& val,
                     const FitOptions& opt) {
  if (train.empty()) throw DomainError("training split is empty");
  if (val.empty()) throw DomainError("validation split is empty");
  if (opt.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (opt.epochs < 0) throw ConfigError("epochs must be non-negative");

  namespace fs = std::filesystem;
  FitResult res;
  TrainState& state = res.state;
  state.seed = opt.seed;
  state.alpha = opt.alpha;
  state.beta1 = opt.beta1;
  state.beta2 = opt.beta2;
  state.eps = opt.eps;
  Moments<float> mom;
  mom.ensure(model.params());

  const bool ckpt = !opt.checkpoint_dir.empty();
  const fs::path best = ckpt ? opt.checkpoint_dir / "best.ckpt" : fs::path();
  const fs::path last = ckpt ? opt.checkpoint_dir / "last.ckpt" : fs::path();
  const fs::path curve_path = ckpt ? opt.checkpoint_dir / "loss_curve.csv" : fs::path();
  if (ckpt && opt.resume && fs::exists(last)) {
    state = nn::load_checkpoint(nn::Archive::load(last), model, &mom);
    if (fs::exists(curve_path)) res.curve = read_loss_curve(curve_path);
    res.curve.resize(std::min<std::size_t>(res.curve.size(), static_cast<std::size_t>(state.epoch)));
  }

  if (state.epoch == 0 && opt.init_output_bias) nn::set_output_bias(model, label_means(train));

  std::vector<std::vector<float>> best_values;
  for (int epoch = state.epoch + 1; epoch <= opt.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_epoch(model, train, state, mom, opt, epoch);
    rec.val_loss = validation_loss(model, val, opt);
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss))
      throw NumericalError("non-finite loss at epoch " + std::to_string(epoch));
    state.epoch = epoch;
    res.curve.push_back(rec);
    if (rec.val_loss < state.best_val_loss) {
      state.best_val_loss = rec.val_loss;
      state.best_epoch = epoch;
      if (ckpt) nn::save_checkpoint(best, model, state, &mom);
      if (opt.restore_best) {
        best_values.clear();
        for (const auto& t : model.params()) best_values.push_back(t.value);
      }
    }
    if (ckpt) {
      nn::save_checkpoint(last, model, state, &mom);
      write_loss_curve(curve_path, res.curve);
    }
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  if (ckpt) res.best_checkpoint = best;
  if (opt.restore_best) {
    if (!best_values.empty()) {
      for (std::size_t i = 0; i < model.params().size(); ++i) model.params()[i].value = best_values[i];
    } else if (ckpt && fs::exists(best)) {
      nn::load_checkpoint(nn::Archive::load(best), model);
    }
  }
  return res;
}

}  // namespace meshpop::train
