#pragma once

// Layers with explicit forward/backward passes. Activations are
// channel-major (C, N, H, W); each convolution is one GEMM over the batch.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "meshpop/blas.hpp"
#include "meshpop/error.hpp"
#include "meshpop/rng.hpp"

namespace meshpop::nn {

// Output size of a convolution or pooling window along one axis.
inline int conv_out_size(int n_in, int pad, int kernel, int stride) {
  if (stride < 1 || kernel < 1 || pad < 0 || n_in < 1 || n_in + 2 * pad < kernel)
    throw DomainError("conv_out_size(" + std::to_string(n_in) + ", " + std::to_string(pad) + ", " +
                      std::to_string(kernel) + ", " + std::to_string(stride) + ") is undefined");
  return (n_in + 2 * pad - kernel) / stride + 1;
}

enum class Mode { train, eval };
enum class Provenance { pretrained, random };

template <typename T>
struct Act {
  int c = 0, n = 0, h = 0, w = 0;
  std::vector<T> d;

  Act() = default;
  Act(int c_, int n_, int h_, int w_, T fill = T(0))
      : c(c_), n(n_), h(h_), w(w_), d(static_cast<std::size_t>(c_) * n_ * h_ * w_, fill) {}
  std::size_t plane() const { return static_cast<std::size_t>(n) * h * w; }
  std::size_t size() const { return d.size(); }
  T* channel(int ch) { return d.data() + ch * plane(); }
  const T* channel(int ch) const { return d.data() + ch * plane(); }
};

template <typename T>
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;
  Provenance provenance = Provenance::random;

  std::size_t numel() const { return value.size(); }
};

// Ordered parameter registry. Indices are stable once registered.
template <typename T>
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::vector<int> shape, bool trainable) {
    if (index_.count(name)) throw Error("duplicate parameter name " + name);
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    NamedTensor<T> t;
    t.name = name;
    t.shape = std::move(shape);
    t.value.assign(n, T(0));
    t.grad.assign(trainable ? n : 0, T(0));
    t.trainable = trainable;
    index_[name] = tensors_.size();
    tensors_.push_back(std::move(t));
    return tensors_.size() - 1;
  }

  NamedTensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  const NamedTensor<T>& operator[](std::size_t i) const { return tensors_[i]; }
  NamedTensor<T>& at(const std::string& name) { return tensors_.at(find(name)); }
  const NamedTensor<T>& at(const std::string& name) const { return tensors_.at(find(name)); }
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t size() const { return tensors_.size(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  void zero_grad() {
    for (auto& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), T(0));
  }

 private:
  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return it->second;
  }
  std::vector<NamedTensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, int cin, int cout, int kernel, int stride, int pad)
      : cin_(cin), cout_(cout), k_(kernel), s_(stride), p_(pad) {
    weight_ = ps.add(name + ".weight", {cout, cin, kernel, kernel}, true);
  }

  int out_size(int n) const { return conv_out_size(n, p_, k_, s_); }
  std::size_t weight_index() const { return weight_; }

  Act<T> forward(ParamStore<T>& ps, const Act<T>& x, Mode mode) {
    if (x.c != cin_) throw ShapeError("conv expects " + std::to_string(cin_) + " channels, got " + std::to_string(x.c));
    const int ho = out_size(x.h), wo = out_size(x.w);
    Act<T> y(cout_, x.n, ho, wo);
    const T* w = ps[weight_].value.data();
    const int kk = cin_ * k_ * k_;
    const int ld = static_cast<int>(y.plane());
    if (pointwise()) {
      gemm<T>(false, false, cout_, ld, cin_, T(1), w, cin_, x.d.data(), ld, T(0), y.d.data(), ld);
    } else {
      const int per = ho * wo;
      for (int n0 = 0; n0 < x.n; n0 += chunk(x.n, per)) {
        const int nc = std::min(chunk(x.n, per), x.n - n0);
        im2col(x, n0, nc, ho, wo);
        gemm<T>(false, false, cout_, nc * per, kk, T(1), w, kk, cols_.data(), nc * per, T(0),
                y.d.data() + static_cast<std::size_t>(n0) * per, ld);
      }
    }
    if (mode == Mode::train) input_ = x;
    else input_ = Act<T>();
    return y;
  }

  Act<T> backward(ParamStore<T>& ps, const Act<T>& dy) {
    const Act<T>& x = input_;
    if (x.d.empty()) throw Error("conv backward without a train-mode forward");
    Act<T> dx(x.c, x.n, x.h, x.w);
    const T* w = ps[weight_].value.data();
    T* dw = ps[weight_].grad.data();
    const int kk = cin_ * k_ * k_;
    const int ld = static_cast<int>(dy.plane());
    if (pointwise()) {
      gemm<T>(false, true, cout_, cin_, ld, T(1), dy.d.data(), ld, x.d.data(), ld, T(1), dw, cin_);
      gemm<T>(true, false, cin_, ld, cout_, T(1), w, cin_, dy.d.data(), ld, T(0), dx.d.data(), ld);
    } else {
      const int per = dy.h * dy.w;
      for (int n0 = 0; n0 < x.n; n0 += chunk(x.n, per)) {
        const int nc = std::min(chunk(x.n, per), x.n - n0);
        const T* dyc = dy.d.data() + static_cast<std::size_t>(n0) * per;
        im2col(x, n0, nc, dy.h, dy.w);
        gemm<T>(false, true, cout_, kk, nc * per, T(1), dyc, ld, cols_.data(), nc * per, T(1), dw, kk);
        gemm<T>(true, false, kk, nc * per, cout_, T(1), w, kk, dyc, ld, T(0), cols_.data(), nc * per);
        col2im(dx, n0, nc, dy.h, dy.w);
      }
    }
    input_ = Act<T>();
    return dx;
  }

 private:
  bool pointwise() const { return k_ == 1 && s_ == 1 && p_ == 0; }

  // Samples per im2col chunk, bounding the column buffer to ~16M entries.
  int chunk(int n, int per) const {
    const std::size_t budget = std::size_t{1} << 24;
    const std::size_t row = static_cast<std::size_t>(cin_) * k_ * k_ * per;
    return std::max(1, std::min(n, static_cast<int>(budget / std::max<std::size_t>(row, 1))));
  }

  void im2col(const Act<T>& x, int n0, int nc, int ho, int wo) {
    const std::size_t ncols = static_cast<std::size_t>(nc) * ho * wo;
    cols_.resize(static_cast<std::size_t>(cin_) * k_ * k_ * ncols);
    const std::size_t xplane = static_cast<std::size_t>(x.h) * x.w;
    for (int ci = 0; ci < cin_; ++ci) {
      for (int kh = 0; kh < k_; ++kh) {
        for (int kw = 0; kw < k_; ++kw) {
          T* dst = cols_.data() + ((static_cast<std::size_t>(ci) * k_ + kh) * k_ + kw) * ncols;
          for (int n = 0; n < nc; ++n) {
            const T* src = x.channel(ci) + static_cast<std::size_t>(n0 + n) * xplane;
            for (int oh = 0; oh < ho; ++oh) {
              const int ih = oh * s_ - p_ + kh;
              if (ih < 0 || ih >= x.h) {
                std::fill(dst, dst + wo, T(0));
                dst += wo;
                continue;
              }
              const T* srow = src + static_cast<std::size_t>(ih) * x.w;
              for (int ow = 0; ow < wo; ++ow) {
                const int iw = ow * s_ - p_ + kw;
                *dst++ = (iw >= 0 && iw < x.w) ? srow[iw] : T(0);
              }
            }
          }
        }
      }
    }
  }

  void col2im(Act<T>& dx, int n0, int nc, int ho, int wo) const {
    const std::size_t ncols = static_cast<std::size_t>(nc) * ho * wo;
    const std::size_t xplane = static_cast<std::size_t>(dx.h) * dx.w;
    for (int ci = 0; ci < cin_; ++ci) {
      for (int kh = 0; kh < k_; ++kh) {
        for (int kw = 0; kw < k_; ++kw) {
          const T* src = cols_.data() + ((static_cast<std::size_t>(ci) * k_ + kh) * k_ + kw) * ncols;
          for (int n = 0; n < nc; ++n) {
            T* dst = dx.channel(ci) + static_cast<std::size_t>(n0 + n) * xplane;
            for (int oh = 0; oh < ho; ++oh) {
              const int ih = oh * s_ - p_ + kh;
              if (ih < 0 || ih >= dx.h) {
                src += wo;
                continue;
              }
              T* drow = dst + static_cast<std::size_t>(ih) * dx.w;
              for (int ow = 0; ow < wo; ++ow, ++src) {
                const int iw = ow * s_ - p_ + kw;
                if (iw >= 0 && iw < dx.w) drow[iw] += *src;
              }
            }
          }
        }
      }
    }
  }

  int cin_ = 0, cout_ = 0, k_ = 1, s_ = 1, p_ = 0;
  std::size_t weight_ = 0;
  Act<T> input_;
  std::vector<T> cols_;
};

// Batch normalization with an optional fused ReLU.
template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParamStore<T>& ps, const std::string& name, int channels, bool relu, double momentum, double eps)
      : c_(channels), relu_(relu), momentum_(momentum), eps_(eps) {
    gamma_ = ps.add(name + ".weight", {channels}, true);
    beta_ = ps.add(name + ".bias", {channels}, true);
    mean_ = ps.add(name + ".running_mean", {channels}, false);
    var_ = ps.add(name + ".running_var", {channels}, false);
    std::fill(ps[gamma_].value.begin(), ps[gamma_].value.end(), T(1));
    std::fill(ps[var_].value.begin(), ps[var_].value.end(), T(1));
  }

  Act<T> forward(ParamStore<T>& ps, const Act<T>& x, Mode mode) {
    if (x.c != c_) throw ShapeError("batch norm channel mismatch");
    Act<T> y(x.c, x.n, x.h, x.w);
    const std::size_t m = x.plane();
    const T* gamma = ps[gamma_].value.data();
    const T* beta = ps[beta_].value.data();
    T* rmean = ps[mean_].value.data();
    T* rvar = ps[var_].value.data();
    if (mode == Mode::train) {
      xhat_ = Act<T>(x.c, x.n, x.h, x.w);
      inv_std_.assign(c_, T(0));
    } else {
      xhat_ = Act<T>();
    }
    for (int ch = 0; ch < c_; ++ch) {
      const T* xc = x.channel(ch);
      T* yc = y.channel(ch);
      double mean, inv_std;
      if (mode == Mode::train) {
        double sum = 0.0;
        for (std::size_t i = 0; i < m; ++i) sum += xc[i];
        mean = sum / static_cast<double>(m);
        double sq = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double d = xc[i] - mean;
          sq += d * d;
        }
        const double var = sq / static_cast<double>(m);
        inv_std = 1.0 / std::sqrt(var + eps_);
        inv_std_[ch] = static_cast<T>(inv_std);
        const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
        rmean[ch] = static_cast<T>((1.0 - momentum_) * rmean[ch] + momentum_ * mean);
        rvar[ch] = static_cast<T>((1.0 - momentum_) * rvar[ch] + momentum_ * unbiased);
        T* xh = xhat_.channel(ch);
        const T mu = static_cast<T>(mean), is = static_cast<T>(inv_std);
        for (std::size_t i = 0; i < m; ++i) {
          xh[i] = (xc[i] - mu) * is;
          const T v = gamma[ch] * xh[i] + beta[ch];
          yc[i] = relu_ && v < T(0) ? T(0) : v;
        }
      } else {
        mean = rmean[ch];
        inv_std = 1.0 / std::sqrt(static_cast<double>(rvar[ch]) + eps_);
        const T scale = static_cast<T>(gamma[ch] * inv_std);
        const T shift = static_cast<T>(beta[ch] - gamma[ch] * mean * inv_std);
        for (std::size_t i = 0; i < m; ++i) {
          const T v = xc[i] * scale + shift;
          yc[i] = relu_ && v < T(0) ? T(0) : v;
        }
      }
    }
    return y;
  }

  Act<T> backward(ParamStore<T>& ps, const Act<T>& dy) {
    if (xhat_.d.empty()) throw Error("batch norm backward without a train-mode forward");
    Act<T> dx(dy.c, dy.n, dy.h, dy.w);
    const std::size_t m = dy.plane();
    const T* gamma = ps[gamma_].value.data();
    const T* beta = ps[beta_].value.data();
    T* dgamma = ps[gamma_].grad.data();
    T* dbeta = ps[beta_].grad.data();
    std::vector<T> g(m);
    for (int ch = 0; ch < c_; ++ch) {
      const T* xh = xhat_.channel(ch);
      const T* dyc = dy.channel(ch);
      double sg = 0.0, sgx = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        T gi = dyc[i];
        if (relu_ && gamma[ch] * xh[i] + beta[ch] <= T(0)) gi = T(0);
        g[i] = gi;
        sg += gi;
        sgx += static_cast<double>(gi) * xh[i];
      }
      dgamma[ch] += static_cast<T>(sgx);
      dbeta[ch] += static_cast<T>(sg);
      const double k = static_cast<double>(gamma[ch]) * inv_std_[ch];
      const double mean_g = sg / static_cast<double>(m), mean_gx = sgx / static_cast<double>(m);
      T* dxc = dx.channel(ch);
      for (std::size_t i = 0; i < m; ++i) dxc[i] = static_cast<T>(k * (g[i] - mean_g - xh[i] * mean_gx));
    }
    xhat_ = Act<T>();
    return dx;
  }

 private:
  int c_ = 0;
  bool relu_ = false;
  double momentum_ = 0.1, eps_ = 1e-5;
  std::size_t gamma_ = 0, beta_ = 0, mean_ = 0, var_ = 0;
  Act<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class MaxPool {
 public:
  MaxPool(int kernel = 3, int stride = 2, int pad = 1) : k_(kernel), s_(stride), p_(pad) {}

  int out_size(int n) const { return conv_out_size(n, p_, k_, s_); }

  Act<T> forward(const Act<T>& x, Mode mode) {
    const int ho = out_size(x.h), wo = out_size(x.w);
    Act<T> y(x.c, x.n, ho, wo);
    const bool keep = mode == Mode::train;
    if (keep) {
      argmax_.assign(y.size(), 0);
      in_shape_ = {x.c, x.n, x.h, x.w};
    }
    const std::size_t xplane = static_cast<std::size_t>(x.h) * x.w;
    std::size_t o = 0;
    for (int ch = 0; ch < x.c; ++ch) {
      for (int n = 0; n < x.n; ++n) {
        const std::size_t base = (static_cast<std::size_t>(ch) * x.n + n) * xplane;
        for (int oh = 0; oh < ho; ++oh) {
          for (int ow = 0; ow < wo; ++ow, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::uint32_t arg = 0;
            for (int kh = 0; kh < k_; ++kh) {
              const int ih = oh * s_ - p_ + kh;
              if (ih < 0 || ih >= x.h) continue;
              for (int kw = 0; kw < k_; ++kw) {
                const int iw = ow * s_ - p_ + kw;
                if (iw < 0 || iw >= x.w) continue;
                const std::uint32_t idx = static_cast<std::uint32_t>(ih * x.w + iw);
                if (x.d[base + idx] > best) {
                  best = x.d[base + idx];
                  arg = idx;
                }
              }
            }
            y.d[o] = best;
            if (keep) argmax_[o] = arg;
          }
        }
      }
    }
    return y;
  }

  Act<T> backward(const Act<T>& dy) {
    Act<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    const std::size_t xplane = static_cast<std::size_t>(dx.h) * dx.w;
    const std::size_t yplane = static_cast<std::size_t>(dy.h) * dy.w;
    for (std::size_t o = 0; o < dy.size(); ++o) {
      const std::size_t slice = o / yplane;
      dx.d[slice * xplane + argmax_[o]] += dy.d[o];
    }
    return dx;
  }

 private:
  int k_, s_, p_;
  std::vector<std::uint32_t> argmax_;
  std::array<int, 4> in_shape_{};
};

// Fully connected layer on row-major (N, in) inputs.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out) : in_(in), out_(out) {
    weight_ = ps.add(name + ".weight", {out, in}, true);
    bias_ = ps.add(name + ".bias", {out}, true);
  }

  std::vector<T> forward(ParamStore<T>& ps, const std::vector<T>& x, int n, Mode mode) {
    if (x.size() != static_cast<std::size_t>(n) * in_) throw ShapeError("linear input size mismatch");
    std::vector<T> y(static_cast<std::size_t>(n) * out_);
    const T* b = ps[bias_].value.data();
    for (int i = 0; i < n; ++i) std::copy(b, b + out_, y.begin() + static_cast<std::ptrdiff_t>(i) * out_);
    gemm<T>(false, true, n, out_, in_, T(1), x.data(), in_, ps[weight_].value.data(), in_, T(1), y.data(), out_);
    if (mode == Mode::train) input_ = x;
    else input_.clear();
    n_ = n;
    return y;
  }

  std::vector<T> backward(ParamStore<T>& ps, const std::vector<T>& dy) {
    std::vector<T> dx(static_cast<std::size_t>(n_) * in_);
    gemm<T>(true, false, out_, in_, n_, T(1), dy.data(), out_, input_.data(), in_, T(1), ps[weight_].grad.data(), in_);
    T* db = ps[bias_].grad.data();
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < out_; ++j) db[j] += dy[static_cast<std::size_t>(i) * out_ + j];
    gemm<T>(false, false, n_, in_, out_, T(1), dy.data(), out_, ps[weight_].value.data(), in_, T(0), dx.data(), in_);
    input_.clear();
    return dx;
  }

 private:
  int in_ = 0, out_ = 0, n_ = 0;
  std::size_t weight_ = 0, bias_ = 0;
  std::vector<T> input_;
};

// Inverted dropout: kept units are scaled by 1/(1-p) during training, so
// evaluation is the identity. The mask is a function of the seed only.
template <typename T>
class Dropout {
 public:
  explicit Dropout(double p = 0.0) : p_(p) {}

  std::vector<T> forward(const std::vector<T>& x, Mode mode, std::uint64_t seed) {
    if (mode == Mode::eval || p_ <= 0.0) {
      mask_.assign(x.size(), T(1));
      return x;
    }
    Rng rng(seed);
    const T keep = static_cast<T>(1.0 / (1.0 - p_));
    mask_.resize(x.size());
    std::vector<T> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask_[i] = rng.uniform() < p_ ? T(0) : keep;
      y[i] = x[i] * mask_[i];
    }
    return y;
  }

  std::vector<T> backward(const std::vector<T>& dy) const {
    std::vector<T> dx(dy.size());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask_[i];
    return dx;
  }

 private:
  double p_;
  std::vector<T> mask_;
};

}  // namespace meshpop::nn
