#pragma once

// Four-head ResNet50 regression network.
//
//   input N x 12 x S x S
//     channels 0-2  -> head_b432 \
//     channels 3-5  -> head_b765  |  conv 7x7/2 + bn + relu, 3 -> 64 each
//     channels 6-8  -> head_idx   |
//     channels 9-11 -> head_ntl  /
//   concat (256) -> merge_conv 1x1 -> 64 + bn + relu -> maxpool 3x3/2
//   layer1..layer4 bottlenecks -> global average pool (2048)
//   dropout -> fc1 (2048 -> 1000) -> relu -> dropout -> fc2 (1000 -> 3) -> relu

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "meshpop/archive.hpp"
#include "meshpop/error.hpp"
#include "meshpop/nn.hpp"
#include "meshpop/rng.hpp"

namespace meshpop::nn {

inline constexpr std::array<const char*, 4> kHeadNames{"head_b432", "head_b765", "head_idx", "head_ntl"};
inline constexpr int kInputChannels = 12;

struct ModelConfig {
  int stem_width = 64;   // per-head output channels and merge width
  int base_width = 64;   // bottleneck width of layer1
  int expansion = 4;
  std::vector<int> blocks{3, 4, 6, 3};
  int fc_hidden = 1000;
  int outputs = 3;
  double dropout = 0.25;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  double fc2_weight_gain = 0.1;  // scales the fan-in normal std of fc2
  double fc2_bias_init = 0.0;

  int feature_width() const {
    return base_width * (1 << (static_cast<int>(blocks.size()) - 1)) * expansion;
  }

  nlohmann::json to_json() const {
    return {{"stem_width", stem_width}, {"base_width", base_width}, {"expansion", expansion},
            {"blocks", blocks},         {"fc_hidden", fc_hidden},   {"outputs", outputs},
            {"dropout", dropout},       {"bn_momentum", bn_momentum}, {"bn_eps", bn_eps},
            {"fc2_weight_gain", fc2_weight_gain}, {"fc2_bias_init", fc2_bias_init}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.stem_width = j.value("stem_width", c.stem_width);
    c.base_width = j.value("base_width", c.base_width);
    c.expansion = j.value("expansion", c.expansion);
    c.blocks = j.value("blocks", c.blocks);
    c.fc_hidden = j.value("fc_hidden", c.fc_hidden);
    c.outputs = j.value("outputs", c.outputs);
    c.dropout = j.value("dropout", c.dropout);
    c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
    c.bn_eps = j.value("bn_eps", c.bn_eps);
    c.fc2_weight_gain = j.value("fc2_weight_gain", c.fc2_weight_gain);
    c.fc2_bias_init = j.value("fc2_bias_init", c.fc2_bias_init);
    return c;
  }

  void validate() const {
    if (stem_width < 1 || base_width < 1 || expansion < 1 || fc_hidden < 1 || outputs < 1)
      throw ConfigError("model widths must be positive");
    if (blocks.empty()) throw ConfigError("model needs at least one bottleneck stage");
    for (int b : blocks)
      if (b < 1) throw ConfigError("every stage needs at least one block");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (!(fc2_weight_gain > 0.0)) throw ConfigError("fc2_weight_gain must be positive");
  }
};

// Spatial sizes after each stage: input, heads, max pool, each backbone
// stage, global pool.
inline std::vector<int> spatial_trace(int input, const ModelConfig& cfg = {}) {
  std::vector<int> t{input};
  int s = conv_out_size(input, 3, 7, 2);
  t.push_back(s);
  s = conv_out_size(s, 1, 3, 2);
  t.push_back(s);
  for (std::size_t i = 0; i < cfg.blocks.size(); ++i) {
    if (i > 0) s = conv_out_size(s, 1, 3, 2);
    t.push_back(s);
  }
  t.push_back(1);
  return t;
}

// Tensor names and shapes of the reference ResNet50 state (torchvision
// naming, batch-norm counters excluded) scaled by the config widths.
inline std::vector<std::pair<std::string, std::vector<int>>> canonical_resnet50(const ModelConfig& cfg = {}) {
  std::vector<std::pair<std::string, std::vector<int>>> out;
  auto bn = [&](const std::string& p, int c) {
    for (const char* s : {".weight", ".bias", ".running_mean", ".running_var"}) out.push_back({p + s, {c}});
  };
  out.push_back({"conv1.weight", {cfg.stem_width, 3, 7, 7}});
  bn("bn1", cfg.stem_width);
  int in = cfg.stem_width;
  for (std::size_t st = 0; st < cfg.blocks.size(); ++st) {
    const int w = cfg.base_width << st;
    const int o = w * cfg.expansion;
    for (int b = 0; b < cfg.blocks[st]; ++b) {
      const std::string p = "layer" + std::to_string(st + 1) + "." + std::to_string(b);
      out.push_back({p + ".conv1.weight", {w, in, 1, 1}});
      bn(p + ".bn1", w);
      out.push_back({p + ".conv2.weight", {w, w, 3, 3}});
      bn(p + ".bn2", w);
      out.push_back({p + ".conv3.weight", {o, w, 1, 1}});
      bn(p + ".bn3", o);
      if (b == 0) {
        out.push_back({p + ".downsample.0.weight", {o, in, 1, 1}});
        bn(p + ".downsample.1", o);
      }
      in = o;
    }
  }
  out.push_back({"fc.weight", {cfg.fc_hidden, in}});
  out.push_back({"fc.bias", {cfg.fc_hidden}});
  return out;
}

// An archive with the reference names and shapes holding He-normal
// convolution weights and identity batch norms. Stands in for real
// ImageNet weights in tests and offline runs.
inline Archive make_synthetic_archive(const ModelConfig& cfg, std::uint64_t seed) {
  Archive a;
  Rng rng(seed);
  for (const auto& [name, shape] : canonical_resnet50(cfg)) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::vector<float> v(n, 0.0f);
    if (shape.size() == 4) {
      const double sd = std::sqrt(2.0 / (shape[1] * shape[2] * shape[3]));
      for (auto& x : v) x = static_cast<float>(rng.normal(0.0, sd));
    } else if (name == "fc.weight") {
      const double bound = 1.0 / std::sqrt(static_cast<double>(shape[1]));
      for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
    } else if (name.ends_with(".running_var") || name.ends_with(".weight")) {
      std::fill(v.begin(), v.end(), 1.0f);
    }
    a.put(name, shape, std::move(v));
  }
  a.metadata()["source"] = "synthetic";
  return a;
}

template <typename T>
class Bottleneck {
 public:
  Bottleneck(ParamStore<T>& ps, const std::string& p, int in, int width, int out, int stride, const ModelConfig& cfg)
      : conv1_(ps, p + ".conv1", in, width, 1, 1, 0),
        bn1_(ps, p + ".bn1", width, true, cfg.bn_momentum, cfg.bn_eps),
        conv2_(ps, p + ".conv2", width, width, 3, stride, 1),
        bn2_(ps, p + ".bn2", width, true, cfg.bn_momentum, cfg.bn_eps),
        conv3_(ps, p + ".conv3", width, out, 1, 1, 0),
        bn3_(ps, p + ".bn3", out, false, cfg.bn_momentum, cfg.bn_eps),
        stride_(stride) {
    if (stride != 1 || in != out) {
      down_ = std::make_unique<Conv2d<T>>(ps, p + ".downsample.0", in, out, 1, stride, 0);
      down_bn_ = std::make_unique<BatchNorm<T>>(ps, p + ".downsample.1", out, false, cfg.bn_momentum, cfg.bn_eps);
    }
  }

  int stride() const { return stride_; }

  Act<T> forward(ParamStore<T>& ps, const Act<T>& x, Mode mode) {
    Act<T> y = bn3_.forward(ps, conv3_.forward(ps, bn2_.forward(ps, conv2_.forward(
                                    ps, bn1_.forward(ps, conv1_.forward(ps, x, mode), mode), mode), mode), mode), mode);
    if (down_) {
      Act<T> s = down_bn_->forward(ps, down_->forward(ps, x, mode), mode);
      for (std::size_t i = 0; i < y.size(); ++i) y.d[i] += s.d[i];
    } else {
      for (std::size_t i = 0; i < y.size(); ++i) y.d[i] += x.d[i];
    }
    for (auto& v : y.d)
      if (v < T(0)) v = T(0);
    if (mode == Mode::train) {
      mask_.assign(y.size(), 0);
      for (std::size_t i = 0; i < y.size(); ++i) mask_[i] = y.d[i] > T(0);
    }
    return y;
  }

  Act<T> backward(ParamStore<T>& ps, Act<T> dy) {
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (!mask_[i]) dy.d[i] = T(0);
    Act<T> dx = conv1_.backward(ps, bn1_.backward(ps, conv2_.backward(ps, bn2_.backward(ps, conv3_.backward(
                                        ps, bn3_.backward(ps, dy))))));
    if (down_) {
      Act<T> ds = down_->backward(ps, down_bn_->backward(ps, dy));
      for (std::size_t i = 0; i < dx.size(); ++i) dx.d[i] += ds.d[i];
    } else {
      for (std::size_t i = 0; i < dx.size(); ++i) dx.d[i] += dy.d[i];
    }
    mask_.clear();
    return dx;
  }

 private:
  Conv2d<T> conv1_;
  BatchNorm<T> bn1_;
  Conv2d<T> conv2_;
  BatchNorm<T> bn2_;
  Conv2d<T> conv3_;
  BatchNorm<T> bn3_;
  int stride_ = 1;
  std::unique_ptr<Conv2d<T>> down_;
  std::unique_ptr<BatchNorm<T>> down_bn_;
  std::vector<std::uint8_t> mask_;
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg = {}) : cfg_(cfg), pool_(3, 2, 1), drop1_(cfg.dropout), drop2_(cfg.dropout) {
    cfg_.validate();
    for (const char* h : kHeadNames) {
      heads_.push_back({Conv2d<T>(ps_, std::string(h) + ".conv", 3, cfg_.stem_width, 7, 2, 3),
                        BatchNorm<T>(ps_, std::string(h) + ".bn", cfg_.stem_width, true, cfg_.bn_momentum,
                                     cfg_.bn_eps)});
    }
    merge_ = Conv2d<T>(ps_, "merge_conv", 4 * cfg_.stem_width, cfg_.stem_width, 1, 1, 0);
    merge_bn_ = BatchNorm<T>(ps_, "merge_conv.bn", cfg_.stem_width, true, cfg_.bn_momentum, cfg_.bn_eps);
    int in = cfg_.stem_width;
    for (std::size_t st = 0; st < cfg_.blocks.size(); ++st) {
      const int w = cfg_.base_width << st;
      const int o = w * cfg_.expansion;
      for (int b = 0; b < cfg_.blocks[st]; ++b) {
        const std::string p = "layer" + std::to_string(st + 1) + "." + std::to_string(b);
        blocks_.emplace_back(ps_, p, in, w, o, (b == 0 && st > 0) ? 2 : 1, cfg_);
        in = o;
      }
    }
    fc1_ = Linear<T>(ps_, "fc1", in, cfg_.fc_hidden);
    fc2_ = Linear<T>(ps_, "fc2", cfg_.fc_hidden, cfg_.outputs);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  // inputs: sample-major N x 12 x S x S. Returns N x outputs, row-major.
  template <typename In>
  std::vector<T> forward(const std::vector<In>& inputs, int n, int size, Mode mode, std::uint64_t dropout_seed = 0) {
    if (n < 1 || size < 1) throw ShapeError("empty batch");
    const std::size_t plane = static_cast<std::size_t>(size) * size;
    if (inputs.size() != static_cast<std::size_t>(n) * kInputChannels * plane)
      throw ShapeError("expected " + std::to_string(n) + " x 12 x " + std::to_string(size) + " x " +
                       std::to_string(size) + " inputs, got " + std::to_string(inputs.size()) + " values");
    spatial_trace(size, cfg_);  // rejects inputs too small for the stage chain

    trace_ = {size};
    Act<T> cat;
    for (int h = 0; h < 4; ++h) {
      Act<T> x(3, n, size, size);
      for (int c = 0; c < 3; ++c)
        for (int s = 0; s < n; ++s) {
          const In* src = inputs.data() + (static_cast<std::size_t>(s) * kInputChannels + h * 3 + c) * plane;
          T* dst = x.d.data() + (static_cast<std::size_t>(c) * n + s) * plane;
          for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<T>(src[i]);
        }
      Act<T> y = heads_[h].bn.forward(ps_, heads_[h].conv.forward(ps_, x, mode), mode);
      if (h == 0) {
        cat = Act<T>(4 * y.c, y.n, y.h, y.w);
        head_c_ = y.c;
      }
      std::copy(y.d.begin(), y.d.end(), cat.d.begin() + static_cast<std::ptrdiff_t>(h * y.size()));
    }
    trace_.push_back(cat.h);
    Act<T> x = pool_.forward(merge_bn_.forward(ps_, merge_.forward(ps_, cat, mode), mode), mode);
    trace_.push_back(x.h);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      x = blocks_[b].forward(ps_, x, mode);
      if (b + 1 == blocks_.size() || blocks_[b + 1].stride() != 1) trace_.push_back(x.h);
    }
    trace_.push_back(1);

    // global average pool to (N, C)
    gap_shape_ = {x.c, x.n, x.h, x.w};
    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    std::vector<T> f(static_cast<std::size_t>(n) * x.c);
    for (int c = 0; c < x.c; ++c)
      for (int s = 0; s < n; ++s) {
        const T* p = x.channel(c) + s * hw;
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += p[i];
        f[static_cast<std::size_t>(s) * x.c + c] = static_cast<T>(acc / static_cast<double>(hw));
      }

    f = drop1_.forward(f, mode, derive_seed(dropout_seed, 1));
    std::vector<T> h = fc1_.forward(ps_, f, n, mode);
    for (auto& v : h)
      if (v < T(0)) v = T(0);
    if (mode == Mode::train) hidden_ = h;
    h = drop2_.forward(h, mode, derive_seed(dropout_seed, 2));
    std::vector<T> out = fc2_.forward(ps_, h, n, mode);
    for (auto& v : out)
      if (v < T(0)) v = T(0);
    if (mode == Mode::train) output_ = out;
    n_ = n;
    return out;
  }

  // Accumulates parameter gradients for d(loss)/d(output) of the last
  // train-mode forward.
  void backward(const std::vector<T>& dout) {
    if (output_.size() != dout.size()) throw ShapeError("backward gradient does not match the last forward output");
    std::vector<T> g = dout;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (output_[i] <= T(0)) g[i] = T(0);
    g = drop2_.backward(fc2_.backward(ps_, g));
    for (std::size_t i = 0; i < g.size(); ++i)
      if (hidden_[i] <= T(0)) g[i] = T(0);
    g = drop1_.backward(fc1_.backward(ps_, g));

    const auto [c, n, h, w] = gap_shape_;
    Act<T> dx(c, n, h, w);
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    const T inv = T(1) / static_cast<T>(hw);
    for (int ch = 0; ch < c; ++ch)
      for (int s = 0; s < n; ++s) {
        const T v = g[static_cast<std::size_t>(s) * c + ch] * inv;
        T* p = dx.channel(ch) + s * hw;
        std::fill(p, p + hw, v);
      }
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) dx = it->backward(ps_, std::move(dx));
    Act<T> dcat = merge_.backward(ps_, merge_bn_.backward(ps_, pool_.backward(dx)));
    const std::size_t part = dcat.size() / 4;
    for (int hd = 0; hd < 4; ++hd) {
      Act<T> dy(head_c_, dcat.n, dcat.h, dcat.w);
      std::copy(dcat.d.begin() + static_cast<std::ptrdiff_t>(hd * part),
                dcat.d.begin() + static_cast<std::ptrdiff_t>((hd + 1) * part), dy.d.begin());
      heads_[hd].conv.backward(ps_, heads_[hd].bn.backward(ps_, dy));
    }
    output_.clear();
    hidden_.clear();
  }

  // Spatial sizes seen by the last forward: input, heads, max pool, each
  // backbone stage, global pool.
  const std::vector<int>& last_trace() const { return trace_; }

  std::size_t parameter_count(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& t : ps_)
      if (t.trainable || !trainable_only) n += t.numel();
    return n;
  }

 private:
  struct Head {
    Conv2d<T> conv;
    BatchNorm<T> bn;
  };

  ModelConfig cfg_;
  ParamStore<T> ps_;
  std::vector<Head> heads_;
  Conv2d<T> merge_;
  BatchNorm<T> merge_bn_;
  MaxPool<T> pool_;
  std::vector<Bottleneck<T>> blocks_;
  Linear<T> fc1_, fc2_;
  Dropout<T> drop1_, drop2_;
  std::array<int, 4> gap_shape_{};
  int head_c_ = 0;
  int n_ = 0;
  std::vector<T> hidden_, output_;
  std::vector<int> trace_;
};

// Module a parameter belongs to: "head_idx.bn.weight" -> "head_idx",
// "merge_conv.bn.bias" -> "merge_conv", "layer2.0.conv1.weight" -> "layer2".
inline std::string module_of(const std::string& name) { return name.substr(0, name.find('.')); }

// Source tensor in the reference archive for a model parameter, or "" for
// parameters without a pretrained counterpart.
inline std::string archive_name_for(const std::string& name) {
  const std::string mod = module_of(name);
  if (mod == "merge_conv" || mod == "fc2") return "";
  for (const char* h : kHeadNames) {
    if (mod != h) continue;
    const std::string rest = name.substr(mod.size() + 1);
    if (rest == "conv.weight") return "conv1.weight";
    if (rest.rfind("bn.", 0) == 0) return "bn1." + rest.substr(3);
    return "";
  }
  if (mod == "fc1") return "fc." + name.substr(4);
  return name;
}

// Copies pretrained tensors and draws the new layers (Kaiming fan-in
// normal for merge_conv and fc2) from `seed`.
template <typename T>
void init_model(Model<T>& model, const Archive& archive, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1417));
  for (auto& t : model.params()) {
    const std::string src = archive_name_for(t.name);
    if (!src.empty()) {
      if (!archive.has(src)) throw WeightLoadError("tensor '" + src + "' (for " + t.name + ") missing from archive");
      const ArchiveTensor& a = archive.get(src);
      if (a.shape != t.shape) {
        std::string want, got;
        for (int d : t.shape) want += std::to_string(d) + " ";
        for (int d : a.shape) got += std::to_string(d) + " ";
        throw WeightLoadError("tensor '" + src + "' has shape [ " + got + "], expected [ " + want + "] for " + t.name);
      }
      for (std::size_t i = 0; i < t.value.size(); ++i) t.value[i] = static_cast<T>(a.data[i]);
      t.provenance = Provenance::pretrained;
      continue;
    }
    t.provenance = Provenance::random;
    const bool is_bn = t.name.find(".bn.") != std::string::npos;
    if (t.shape.size() >= 2) {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < t.shape.size(); ++d) fan_in *= static_cast<std::size_t>(t.shape[d]);
      double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
      if (t.name == "fc2.weight") sd *= model.config().fc2_weight_gain;
      for (auto& v : t.value) v = static_cast<T>(rng.normal(0.0, sd));
    } else if (t.name == "fc2.bias") {
      std::fill(t.value.begin(), t.value.end(), static_cast<T>(model.config().fc2_bias_init));
    } else if (is_bn && (t.name.ends_with(".weight") || t.name.ends_with(".running_var"))) {
      std::fill(t.value.begin(), t.value.end(), T(1));
    } else {
      std::fill(t.value.begin(), t.value.end(), T(0));
    }
  }
}

// Starts each output at the mean of its training labels.
template <typename T>
void set_output_bias(Model<T>& model, const std::vector<double>& means) {
  auto& b = model.params().at("fc2.bias");
  if (means.size() != b.value.size()) throw ShapeError("output bias needs one value per output");
  for (std::size_t i = 0; i < means.size(); ++i) b.value[i] = static_cast<T>(means[i]);
}

// ---------------------------------------------------------------------------
// Checkpoints: model tensors under their own names, Adam moments under
// "adam.m.<name>" / "adam.v.<name>", train state and config as metadata.

struct TrainState {
  std::uint64_t step = 0;
  int epoch = 0;  // completed epochs
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::uint64_t seed = 0;
  double alpha = 0.001, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"step", step},   {"epoch", epoch}, {"best_epoch", best_epoch}, {"seed", seed},
                        {"alpha", alpha}, {"beta1", beta1}, {"beta2", beta2},           {"eps", eps}};
    j["best_val_loss"] = std::isfinite(best_val_loss) ? nlohmann::json(best_val_loss) : nlohmann::json(nullptr);
    return j;
  }

  static TrainState from_json(const nlohmann::json& j) {
    TrainState s;
    s.step = j.at("step").get<std::uint64_t>();
    s.epoch = j.at("epoch").get<int>();
    s.best_epoch = j.at("best_epoch").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.alpha = j.at("alpha").get<double>();
    s.beta1 = j.at("beta1").get<double>();
    s.beta2 = j.at("beta2").get<double>();
    s.eps = j.at("eps").get<double>();
    s.best_val_loss = j.at("best_val_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                      : j.at("best_val_loss").get<double>();
    return s;
  }
};

template <typename T>
struct Moments {
  std::vector<std::vector<T>> m, v;  // indexed like the parameter store

  void ensure(const ParamStore<T>& ps) {
    if (m.size() == ps.size()) return;
    m.assign(ps.size(), {});
    v.assign(ps.size(), {});
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (ps[i].trainable) {
        m[i].assign(ps[i].numel(), T(0));
        v[i].assign(ps[i].numel(), T(0));
      }
  }
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, const TrainState& state,
                     const Moments<T>* moments = nullptr) {
  Archive a;
  nlohmann::json prov = nlohmann::json::object();
  for (const auto& t : model.params()) {
    a.put(t.name, t.shape, std::vector<float>(t.value.begin(), t.value.end()));
    prov[t.name] = t.provenance == Provenance::pretrained ? "pretrained" : "random";
  }
  if (moments && moments->m.size() == model.params().size()) {
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      const auto& t = model.params()[i];
      if (!t.trainable) continue;
      a.put("adam.m." + t.name, t.shape, std::vector<float>(moments->m[i].begin(), moments->m[i].end()));
      a.put("adam.v." + t.name, t.shape, std::vector<float>(moments->v[i].begin(), moments->v[i].end()));
    }
  }
  a.metadata()["train_state"] = state.to_json().dump();
  a.metadata()["model_config"] = model.config().to_json().dump();
  a.metadata()["provenance"] = prov.dump();
  a.save(path);
}

inline ModelConfig checkpoint_config(const Archive& a) {
  auto it = a.metadata().find("model_config");
  if (it == a.metadata().end()) throw WeightLoadError("checkpoint has no model_config metadata");
  return ModelConfig::from_json(nlohmann::json::parse(it->second));
}

template <typename T>
TrainState load_checkpoint(const Archive& a, Model<T>& model, Moments<T>* moments = nullptr) {
  nlohmann::json prov;
  if (auto it = a.metadata().find("provenance"); it != a.metadata().end()) prov = nlohmann::json::parse(it->second);
  for (auto& t : model.params()) {
    const ArchiveTensor& src = a.get(t.name);
    if (src.shape != t.shape) throw WeightLoadError("checkpoint tensor '" + t.name + "' has the wrong shape");
    for (std::size_t i = 0; i < t.value.size(); ++i) t.value[i] = static_cast<T>(src.data[i]);
    if (prov.contains(t.name))
      t.provenance = prov[t.name] == "pretrained" ? Provenance::pretrained : Provenance::random;
  }
  if (moments) {
    moments->ensure(model.params());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      const auto& t = model.params()[i];
      if (!t.trainable || !a.has("adam.m." + t.name)) continue;
      const auto& m = a.get("adam.m." + t.name).data;
      const auto& v = a.get("adam.v." + t.name).data;
      moments->m[i].assign(m.begin(), m.end());
      moments->v[i].assign(v.begin(), v.end());
    }
  }
  auto it = a.metadata().find("train_state");
  if (it == a.metadata().end()) return TrainState{};
  return TrainState::from_json(nlohmann::json::parse(it->second));
}

}  // namespace meshpop::nn
