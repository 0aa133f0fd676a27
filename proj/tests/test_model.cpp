#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "meshpop/model.hpp"
#include "meshpop/trainer.hpp"
#include "test_util.hpp"

using namespace meshpop;
using namespace meshpop::nn;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.stem_width = 4;
  c.base_width = 4;
  c.blocks = {1, 1};
  c.fc_hidden = 8;
  return c;
}

std::vector<float> random_input(int n, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> x(static_cast<std::size_t>(n) * 12 * size * size);
  for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
  return x;
}

}  // namespace

TEST(Model, ConvArithmetic) {
  EXPECT_EQ(conv_out_size(334, 3, 7, 2), 167);
  EXPECT_EQ(conv_out_size(57, 0, 1, 1), 57);
  EXPECT_EQ(conv_out_size(167, 1, 3, 2), 84);
  EXPECT_THROW(conv_out_size(2, 0, 7, 1), DomainError);
  EXPECT_THROW(conv_out_size(10, 1, 3, 0), DomainError);
  EXPECT_THROW(conv_out_size(10, -1, 3, 1), DomainError);
  EXPECT_EQ(spatial_trace(334), (std::vector<int>{334, 167, 84, 84, 42, 21, 11, 1}));
}

TEST(Model, ShapeProbeMatchesTrace) {
  ModelConfig c = tiny();
  c.blocks = {3, 4, 6, 3};
  Model<float> m(c);
  init_model(m, make_synthetic_archive(c, 1), 2);
  const auto y = m.forward(random_input(1, 334, 3), 1, 334, Mode::eval);
  EXPECT_EQ(y.size(), 3u);
  EXPECT_EQ(m.last_trace(), (std::vector<int>{334, 167, 84, 84, 42, 21, 11, 1}));
}

TEST(Model, FullModelParameterCount) {
  Model<float> m;
  // Reference ResNet50 (25,557,032) + three extra heads (3 x 9,536)
  // + merge conv and its BN (16,384 + 128) + ReLU'd 1000->3 output (3,003).
  EXPECT_EQ(m.parameter_count(), 25557032u + 3u * 9536u + 16384u + 128u + 3003u);
  EXPECT_EQ(m.parameter_count(), 25605155u);
}

TEST(Model, CanonicalNamesMatchReference) {
  const auto canon = canonical_resnet50();
  // 161 learnable tensors and 106 running statistics.
  EXPECT_EQ(canon.size(), 267u);
  std::size_t count = 0;
  for (const auto& [n, s] : canon) {
    std::size_t k = 1;
    for (int d : s) k *= static_cast<std::size_t>(d);
    if (n.find("running_") == std::string::npos) count += k;
  }
  EXPECT_EQ(count, 25557032u);
}

TEST(Model, TransferInitProvenance) {
  const ModelConfig c;
  Model<float> m(c);
  const Archive a = make_synthetic_archive(c, 5);
  init_model(m, a, 9);
  std::set<std::string> random_modules;
  for (const auto& t : m.params())
    if (t.provenance == Provenance::random) random_modules.insert(module_of(t.name));
  EXPECT_EQ(random_modules, (std::set<std::string>{"merge_conv", "fc2"}));
  const auto& ref = a.get("conv1.weight");
  for (const char* h : kHeadNames) {
    const auto& w = m.params().at(std::string(h) + ".conv.weight");
    ASSERT_EQ(w.shape, ref.shape);
    EXPECT_EQ(std::memcmp(w.value.data(), ref.data.data(), ref.data.size() * sizeof(float)), 0);
  }
  std::size_t transferred = 0;
  for (const auto& [name, shape] : canonical_resnet50(c)) {
    if (name.rfind("conv1.", 0) == 0 || name.rfind("bn1.", 0) == 0) continue;
    const std::string local = name.rfind("fc.", 0) == 0 ? "fc1." + name.substr(3) : name;
    ASSERT_TRUE(m.params().has(local)) << local;
    EXPECT_EQ(m.params().at(local).shape, shape);
    ++transferred;
  }
  std::size_t pretrained_backbone = 0;
  for (const auto& t : m.params()) {
    const std::string mod = module_of(t.name);
    if ((mod.rfind("layer", 0) == 0 || mod == "fc1") && t.provenance == Provenance::pretrained) ++pretrained_backbone;
  }
  EXPECT_EQ(pretrained_backbone, transferred);
}

TEST(Model, Fc2DependsOnSeed) {
  const ModelConfig c = tiny();
  const Archive a = make_synthetic_archive(c, 5);
  Model<float> m1(c), m2(c);
  init_model(m1, a, 1);
  init_model(m2, a, 2);
  EXPECT_NE(m1.params().at("fc2.weight").value, m2.params().at("fc2.weight").value);
  EXPECT_EQ(m1.params().at("fc1.weight").value, m2.params().at("fc1.weight").value);
}

TEST(Model, WeightLoadErrorsNameTheTensor) {
  const ModelConfig c = tiny();
  Archive a = make_synthetic_archive(c, 5);
  Archive bad;
  for (const auto& n : a.names())
    if (n != "layer1.0.conv2.weight") bad.put(n, a.get(n).shape, a.get(n).data);
  Model<float> m(c);
  try {
    init_model(m, bad, 1);
    FAIL();
  } catch (const WeightLoadError& e) {
    EXPECT_NE(std::string(e.what()).find("layer1.0.conv2.weight"), std::string::npos);
  }
  Archive wrong = a;
  wrong.put("fc.weight", {3, 3}, std::vector<float>(9));
  try {
    init_model(m, wrong, 1);
    FAIL();
  } catch (const WeightLoadError& e) {
    EXPECT_NE(std::string(e.what()).find("fc.weight"), std::string::npos);
  }
}

TEST(Model, ArchiveRoundTrip) {
  test::TempDir dir;
  const ModelConfig c = tiny();
  Archive a = make_synthetic_archive(c, 5);
  a.metadata()["note"] = "x";
  a.save(dir / "w.safetensors");
  const Archive b = Archive::load(dir / "w.safetensors");
  EXPECT_EQ(b.names().size(), a.names().size());
  for (const auto& n : a.names()) {
    EXPECT_EQ(b.get(n).shape, a.get(n).shape);
    EXPECT_EQ(b.get(n).data, a.get(n).data);
  }
  EXPECT_EQ(b.metadata().at("note"), "x");
}

TEST(Model, ForwardShapeAndRectification) {
  const ModelConfig c = tiny();
  Model<float> m(c);
  init_model(m, make_synthetic_archive(c, 1), 2);
  const auto x = random_input(2, 64, 4);
  const auto y = m.forward(x, 2, 64, Mode::eval);
  ASSERT_EQ(y.size(), 6u);
  for (float v : y) EXPECT_GE(v, 0.0f);
  EXPECT_EQ(m.forward(x, 2, 64, Mode::eval), y);
  EXPECT_THROW(m.forward(std::vector<float>(10), 2, 64, Mode::eval), ShapeError);
}

TEST(Model, HeadsSeeTheirChannelSlices) {
  const ModelConfig c = tiny();
  Model<float> m(c);
  init_model(m, make_synthetic_archive(c, 1), 2);
  set_output_bias(m, {1.0, 1.0, 1.0});
  auto x = random_input(2, 32, 4);
  const auto y0 = m.forward(x, 2, 32, Mode::eval);
  // Perturb only the NTL slice; zero the head_ntl conv and the output is unchanged.
  auto& w = m.params().at("head_ntl.conv.weight").value;
  std::fill(w.begin(), w.end(), 0.0f);
  const auto y1 = m.forward(x, 2, 32, Mode::eval);
  for (std::size_t i = 9 * 32 * 32; i < 12 * 32 * 32; ++i) x[i] += 1.0f;
  EXPECT_EQ(m.forward(x, 2, 32, Mode::eval), y1);
  x[0] += 1.0f;
  EXPECT_NE(m.forward(x, 2, 32, Mode::eval), y1);
  (void)y0;
}

TEST(Model, ZeroLossGivesZeroFc2Gradient) {
  const ModelConfig c = tiny();
  Model<float> m(c);
  init_model(m, make_synthetic_archive(c, 1), 2);
  set_output_bias(m, {2.0, 2.0, 2.0});
  const auto x = random_input(2, 32, 4);
  auto y = m.forward(x, 2, 32, Mode::train, 7);
  m.params().zero_grad();
  m.backward(train::loss_gradient(y, y));
  for (float g : m.params().at("fc2.weight").grad) EXPECT_EQ(g, 0.0f);
  for (float g : m.params().at("fc2.bias").grad) EXPECT_EQ(g, 0.0f);
}

TEST(Model, GradientCheckDouble) {
  ModelConfig c = tiny();
  c.blocks = {1};
  c.dropout = 0.0;
  Model<double> m(c);
  init_model(m, make_synthetic_archive(c, 3), 4);
  set_output_bias(m, {2.0, 2.0, 2.0});
  const int n = 2, s = 32;
  Rng rng(6);
  std::vector<double> x(static_cast<std::size_t>(n) * 12 * s * s);
  for (auto& v : x) v = rng.uniform(-1, 1);
  const std::vector<double> labels{1.0, 2.5, 3.0, 2.0, 1.0, 0.5};
  auto loss_at = [&] { return train::loss(m.forward(x, n, s, Mode::train), labels); };
  m.params().zero_grad();
  m.backward(train::loss_gradient(m.forward(x, n, s, Mode::train), labels));
  int checked = 0;
  for (auto& t : m.params()) {
    if (!t.trainable) continue;
    for (std::size_t k = 0; k < t.value.size(); k += 1 + t.value.size() / 3) {
      const double orig = t.value[k], h = 1e-5;
      t.value[k] = orig + h;
      const double lp = loss_at();
      t.value[k] = orig - h;
      const double lm = loss_at();
      t.value[k] = orig;
      const double fd = (lp - lm) / (2 * h);
      const double an = t.grad[k];
      EXPECT_LE(std::abs(fd - an), 1e-3 * std::max({std::abs(fd), std::abs(an), 1e-6})) << t.name << "[" << k << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 50);
}

TEST(Model, DuplicatedSampleKeepsMeanGradient) {
  ModelConfig c = tiny();
  c.dropout = 0.0;
  Model<double> m(c);
  init_model(m, make_synthetic_archive(c, 3), 4);
  set_output_bias(m, {2.0, 2.0, 2.0});
  const int s = 32;
  Rng rng(6);
  std::vector<double> x(12 * s * s);
  for (auto& v : x) v = rng.uniform(-1, 1);
  const std::vector<double> l{1.0, 2.5, 3.0};
  m.params().zero_grad();
  auto y = m.forward(x, 1, s, Mode::train);
  const double l1 = train::loss(y, l);
  m.backward(train::loss_gradient(y, l));
  const auto g1 = m.params().at("fc1.weight").grad;

  // A batch holding the sample twice has the same batch statistics, so the
  // mean loss and its gradient are unchanged.
  std::vector<double> xx = x, ll = l;
  xx.insert(xx.end(), x.begin(), x.end());
  ll.insert(ll.end(), l.begin(), l.end());
  m.params().zero_grad();
  y = m.forward(xx, 2, s, Mode::train);
  EXPECT_NEAR(train::loss(y, ll), l1, 1e-12);
  m.backward(train::loss_gradient(y, ll));
  const auto& g2 = m.params().at("fc1.weight").grad;
  for (std::size_t i = 0; i < g1.size(); ++i) ASSERT_NEAR(g2[i], g1[i], 1e-9 * (1 + std::abs(g1[i])));
}

TEST(Model, CheckpointRoundTrip) {
  test::TempDir dir;
  const ModelConfig c = tiny();
  Model<float> m(c);
  init_model(m, make_synthetic_archive(c, 1), 2);
  Moments<float> mom;
  mom.ensure(m.params());
  mom.m[0][0] = 0.5f;
  TrainState st;
  st.step = 12;
  st.epoch = 3;
  st.best_epoch = 2;
  st.best_val_loss = 0.25;
  save_checkpoint(dir / "c.ckpt", m, st, &mom);
  const Archive a = Archive::load(dir / "c.ckpt");
  Model<float> m2(checkpoint_config(a));
  Moments<float> mom2;
  const TrainState st2 = load_checkpoint(a, m2, &mom2);
  EXPECT_EQ(st2.step, 12u);
  EXPECT_EQ(st2.epoch, 3);
  EXPECT_EQ(st2.best_epoch, 2);
  EXPECT_DOUBLE_EQ(st2.best_val_loss, 0.25);
  EXPECT_EQ(mom2.m[0][0], 0.5f);
  for (std::size_t i = 0; i < m.params().size(); ++i) EXPECT_EQ(m.params()[i].value, m2.params()[i].value);
  EXPECT_EQ(m2.params().at("merge_conv.weight").provenance, Provenance::random);
}

TEST(Model, ConfigValidation) {
  ModelConfig c;
  c.blocks = {};
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(ModelConfig::from_json(tiny().to_json()).to_json(), tiny().to_json());
}
