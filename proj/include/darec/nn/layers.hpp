#ifndef DAREC_NN_LAYERS_HPP_
#define DAREC_NN_LAYERS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "darec/common.hpp"
#include "darec/rng.hpp"
#include "darec/tensor.hpp"

namespace darec::nn {

// Minimal CPU training stack: layers cache what their backward pass needs,
// gradients accumulate into Param::grad, and all dense math runs through
// Eigen. Everything is deterministic given the seeds handed to init().

template <class S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, std::vector<std::size_t> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}

  std::size_t size() const { return value.size(); }
};

template <class S>
inline std::uint64_t checksum_params(const std::vector<Param<S>*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* p : params)
    h = fnv1a64(p->value.data(), p->value.size() * sizeof(S), h);
  return h;
}

template <class S>
inline std::size_t count_params(const std::vector<Param<S>*>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->size();
  return n;
}

template <class S>
inline void set_trainable(const std::vector<Param<S>*>& params, bool trainable) {
  for (auto* p : params) p->trainable = trainable;
}

template <class S>
inline void fill_he_normal(Tensor<S>& t, std::size_t fan_in, RandomStream& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.vec()) v = static_cast<S>(rng.normal(0.0, stddev));
}

template <class S>
inline void fill_glorot_uniform(Tensor<S>& t, std::size_t fan_in, std::size_t fan_out,
                                RandomStream& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.vec()) v = static_cast<S>(rng.uniform(-limit, limit));
}

/// Structural description of a layer, for architecture conformance checks.
struct LayerInfo {
  std::string kind;
  std::size_t kernel = 0;
  std::size_t stride = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
};

template <class S>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<S> forward(const Tensor<S>& x, bool train) = 0;
  virtual Tensor<S> backward(const Tensor<S>& gy) = 0;
  virtual std::vector<Param<S>*> params() { return {}; }
  virtual LayerInfo info() const = 0;
};

template <class S>
using LayerPtr = std::unique_ptr<Layer<S>>;

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

template <class S>
class Dense : public Layer<S> {
 public:
  Dense(std::string name, std::size_t in_features, std::size_t out_features)
      : in_(in_features),
        out_(out_features),
        weight_(name + ".weight", {out_features, in_features}),
        bias_(name + ".bias", {out_features}) {}

  void init(RandomStream& rng) { fill_he_normal(weight_.value, in_, rng); }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    const std::size_t n = x.dim(0);
    if (x.size() != n * in_) throw InvalidInputError("Dense: input feature mismatch");
    if (train) input_ = x;
    Tensor<S> y({n, out_});
    auto xm = x.as_matrix(n, in_);
    auto wm = weight_.value.as_matrix(out_, in_);
    auto ym = y.as_matrix(n, out_);
    ym.noalias() = xm * wm.transpose();
    auto bv = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(
        bias_.value.data(), static_cast<Eigen::Index>(out_));
    ym.rowwise() += bv;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    const std::size_t n = gy.dim(0);
    auto gym = gy.as_matrix(n, out_);
    auto xm = input_.as_matrix(n, in_);
    auto wm = weight_.value.as_matrix(out_, in_);
    if (weight_.trainable) {
      auto gw = weight_.grad.as_matrix(out_, in_);
      gw.noalias() += gym.transpose() * xm;
      auto gb = Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(
          bias_.grad.data(), static_cast<Eigen::Index>(out_));
      gb += gym.colwise().sum();
    }
    Tensor<S> gx({n, in_});
    gx.as_matrix(n, in_).noalias() = gym * wm;
    return gx;
  }

  std::vector<Param<S>*> params() override { return {&weight_, &bias_}; }
  LayerInfo info() const override { return {"dense", 0, 0, in_, out_}; }

  Param<S>& weight() { return weight_; }
  Param<S>& bias() { return bias_; }

 private:
  std::size_t in_, out_;
  Param<S> weight_, bias_;
  Tensor<S> input_;
};

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class S>
class ReLU : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    Tensor<S> y = x;
    for (auto& v : y.vec()) v = v > S(0) ? v : S(0);
    if (train) mask_ = x;
    return y;
  }
  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (mask_[i] <= S(0)) gx[i] = S(0);
    return gx;
  }
  LayerInfo info() const override { return {"relu"}; }

 private:
  Tensor<S> mask_;
};

template <class S>
class Sigmoid : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    Tensor<S> y = x;
    for (auto& v : y.vec()) v = S(1) / (S(1) + std::exp(-v));
    if (train) output_ = y;
    return y;
  }
  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i)
      gx[i] *= output_[i] * (S(1) - output_[i]);
    return gx;
  }
  LayerInfo info() const override { return {"sigmoid"}; }

 private:
  Tensor<S> output_;
};

template <class S>
class Tanh : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    Tensor<S> y = x;
    for (auto& v : y.vec()) v = std::tanh(v);
    if (train) output_ = y;
    return y;
  }
  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i)
      gx[i] *= S(1) - output_[i] * output_[i];
    return gx;
  }
  LayerInfo info() const override { return {"tanh"}; }

 private:
  Tensor<S> output_;
};

/// Identity forward; incoming gradient multiplied by -lambda backward.
template <class S>
class GradientReversal : public Layer<S> {
 public:
  explicit GradientReversal(S lambda) : lambda_(lambda) {}

  Tensor<S> forward(const Tensor<S>& x, bool) override { return x; }

  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx = gy;
    for (auto& v : gx.vec()) v *= -lambda_;
    return gx;
  }

  void set_lambda(S lambda) { lambda_ = lambda; }
  S lambda() const { return lambda_; }
  LayerInfo info() const override { return {"gradient_reversal"}; }

 private:
  S lambda_;
};

// ---------------------------------------------------------------------------
// Softmax over the last axis of an (N, K) tensor
// ---------------------------------------------------------------------------

template <class S>
class Softmax : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    const std::size_t n = x.dim(0);
    const std::size_t k = x.size() / n;
    Tensor<S> y = x;
    for (std::size_t r = 0; r < n; ++r) {
      S* row = y.data() + r * k;
      S mx = row[0];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, row[c]);
      S sum = S(0);
      for (std::size_t c = 0; c < k; ++c) {
        row[c] = std::exp(row[c] - mx);
        sum += row[c];
      }
      for (std::size_t c = 0; c < k; ++c) row[c] /= sum;
    }
    if (train) output_ = y;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    const std::size_t n = gy.dim(0);
    const std::size_t k = gy.size() / n;
    Tensor<S> gx = gy;
    for (std::size_t r = 0; r < n; ++r) {
      const S* p = output_.data() + r * k;
      const S* g = gy.data() + r * k;
      S dot = S(0);
      for (std::size_t c = 0; c < k; ++c) dot += p[c] * g[c];
      S* out = gx.data() + r * k;
      for (std::size_t c = 0; c < k; ++c) out[c] = p[c] * (g[c] - dot);
    }
    return gx;
  }

  LayerInfo info() const override { return {"softmax"}; }

 private:
  Tensor<S> output_;
};

// ---------------------------------------------------------------------------
// Convolutions (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride,
                                std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// 3D im2col for one sample. col is (C*k^3, P) row-major with P = out^3,
// output cells linear with x fastest.
template <class S>
void im2col3d(const S* in, std::size_t c_in, std::size_t d, std::size_t k,
              std::size_t stride, std::size_t pad, std::size_t od, S* col) {
  const std::size_t plane = d * d;
  const std::size_t oplane = od * od;
  const std::size_t p_total = od * oplane;
  std::size_t row = 0;
  for (std::size_t c = 0; c < c_in; ++c) {
    const S* chan = in + c * d * plane;
    for (std::size_t kz = 0; kz < k; ++kz)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx, ++row) {
          S* dst = col + row * p_total;
          for (std::size_t oz = 0; oz < od; ++oz) {
            const long iz = static_cast<long>(oz * stride + kz) - static_cast<long>(pad);
            const bool z_ok = iz >= 0 && iz < static_cast<long>(d);
            for (std::size_t oy = 0; oy < od; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const bool y_ok = iy >= 0 && iy < static_cast<long>(d);
              S* out_row = dst + oz * oplane + oy * od;
              if (!z_ok || !y_ok) {
                std::fill(out_row, out_row + od, S(0));
                continue;
              }
              const S* src = chan + static_cast<std::size_t>(iz) * plane +
                             static_cast<std::size_t>(iy) * d;
              for (std::size_t ox = 0; ox < od; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                out_row[ox] = (ix >= 0 && ix < static_cast<long>(d))
                                  ? src[static_cast<std::size_t>(ix)]
                                  : S(0);
              }
            }
          }
        }
  }
}

template <class S>
void col2im3d_add(const S* col, std::size_t c_in, std::size_t d, std::size_t k,
                  std::size_t stride, std::size_t pad, std::size_t od, S* in_grad) {
  const std::size_t plane = d * d;
  const std::size_t oplane = od * od;
  const std::size_t p_total = od * oplane;
  std::size_t row = 0;
  for (std::size_t c = 0; c < c_in; ++c) {
    S* chan = in_grad + c * d * plane;
    for (std::size_t kz = 0; kz < k; ++kz)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx, ++row) {
          const S* src_base = col + row * p_total;
          for (std::size_t oz = 0; oz < od; ++oz) {
            const long iz = static_cast<long>(oz * stride + kz) - static_cast<long>(pad);
            if (iz < 0 || iz >= static_cast<long>(d)) continue;
            for (std::size_t oy = 0; oy < od; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(d)) continue;
              const S* src = src_base + oz * oplane + oy * od;
              S* dst = chan + static_cast<std::size_t>(iz) * plane +
                       static_cast<std::size_t>(iy) * d;
              for (std::size_t ox = 0; ox < od; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix >= 0 && ix < static_cast<long>(d))
                  dst[static_cast<std::size_t>(ix)] += src[ox];
              }
            }
          }
        }
  }
}

// 2D variants; col is (C*k^2, P) with P = oh*ow.
template <class S>
void im2col2d(const S* in, std::size_t c_in, std::size_t h, std::size_t w,
              std::size_t k, std::size_t stride, std::size_t pad, std::size_t oh,
              std::size_t ow, S* col) {
  const std::size_t p_total = oh * ow;
  std::size_t row = 0;
  for (std::size_t c = 0; c < c_in; ++c) {
    const S* chan = in + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx, ++row) {
        S* dst = col + row * p_total;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          S* out_row = dst + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(out_row, out_row + ow, S(0));
            continue;
          }
          const S* src = chan + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            out_row[ox] = (ix >= 0 && ix < static_cast<long>(w))
                              ? src[static_cast<std::size_t>(ix)]
                              : S(0);
          }
        }
      }
  }
}

template <class S>
void col2im2d_add(const S* col, std::size_t c_in, std::size_t h, std::size_t w,
                  std::size_t k, std::size_t stride, std::size_t pad, std::size_t oh,
                  std::size_t ow, S* in_grad) {
  const std::size_t p_total = oh * ow;
  std::size_t row = 0;
  for (std::size_t c = 0; c < c_in; ++c) {
    S* chan = in_grad + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx, ++row) {
        const S* src_base = col + row * p_total;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          const S* src = src_base + oy * ow;
          S* dst = chan + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w))
              dst[static_cast<std::size_t>(ix)] += src[ox];
          }
        }
      }
  }
}

}  // namespace detail

/// 3D convolution over (N, C, D, D, D) tensors.
template <class S>
class Conv3d : public Layer<S> {
 public:
  Conv3d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
         std::size_t stride = 1)
      : in_ch_(in_ch),
        out_ch_(out_ch),
        k_(kernel),
        stride_(stride),
        pad_((kernel - 1) / 2),
        weight_(name + ".weight", {out_ch, in_ch * kernel * kernel * kernel}),
        bias_(name + ".bias", {out_ch}) {}

  void init(RandomStream& rng) {
    fill_he_normal(weight_.value, in_ch_ * k_ * k_ * k_, rng);
  }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    const std::size_t n = x.dim(0);
    if (x.rank() != 5 || x.dim(1) != in_ch_ || x.dim(2) != x.dim(3) || x.dim(3) != x.dim(4))
      throw InvalidInputError("Conv3d: expected (N,C,D,D,D) input");
    d_ = x.dim(2);
    od_ = detail::conv_out_dim(d_, k_, stride_, pad_);
    const std::size_t p = od_ * od_ * od_;
    const std::size_t rows = in_ch_ * k_ * k_ * k_;
    if (train) input_ = x;
    Tensor<S> y({n, out_ch_, od_, od_, od_});
    col_.assign(rows * p, S(0));
    auto wm = weight_.value.as_matrix(out_ch_, rows);
    auto bv = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(
        bias_.value.data(), static_cast<Eigen::Index>(out_ch_));
    for (std::size_t s = 0; s < n; ++s) {
      detail::im2col3d(x.data() + s * in_ch_ * d_ * d_ * d_, in_ch_, d_, k_, stride_,
                       pad_, od_, col_.data());
      MatMap<S> colm(col_.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(p));
      MatMap<S> ym(y.data() + s * out_ch_ * p, static_cast<Eigen::Index>(out_ch_),
                   static_cast<Eigen::Index>(p));
      ym.noalias() = wm * colm;
      ym.colwise() += bv;
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    const std::size_t n = gy.dim(0);
    const std::size_t p = od_ * od_ * od_;
    const std::size_t rows = in_ch_ * k_ * k_ * k_;
    Tensor<S> gx({n, in_ch_, d_, d_, d_});
    auto wm = weight_.value.as_matrix(out_ch_, rows);
    std::vector<S> dcol(rows * p);
    for (std::size_t s = 0; s < n; ++s) {
      ConstMatMap<S> gym(gy.data() + s * out_ch_ * p, static_cast<Eigen::Index>(out_ch_),
                         static_cast<Eigen::Index>(p));
      if (weight_.trainable) {
        detail::im2col3d(input_.data() + s * in_ch_ * d_ * d_ * d_, in_ch_, d_, k_,
                         stride_, pad_, od_, col_.data());
        MatMap<S> colm(col_.data(), static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(p));
        weight_.grad.as_matrix(out_ch_, rows).noalias() += gym * colm.transpose();
        auto gb = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(
            bias_.grad.data(), static_cast<Eigen::Index>(out_ch_));
        gb += gym.rowwise().sum();
      }
      MatMap<S> dcolm(dcol.data(), static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(p));
      dcolm.noalias() = wm.transpose() * gym;
      detail::col2im3d_add(dcol.data(), in_ch_, d_, k_, stride_, pad_, od_,
                           gx.data() + s * in_ch_ * d_ * d_ * d_);
    }
    return gx;
  }

  std::vector<Param<S>*> params() override { return {&weight_, &bias_}; }
  LayerInfo info() const override { return {"conv3d", k_, stride_, in_ch_, out_ch_}; }

 private:
  std::size_t in_ch_, out_ch_, k_, stride_, pad_;
  std::size_t d_ = 0, od_ = 0;
  Param<S> weight_, bias_;
  Tensor<S> input_;
  std::vector<S> col_;
};

/// 2D convolution over (N, C, H, W) tensors.
template <class S>
class Conv2d : public Layer<S> {
 public:
  Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kernel,
         std::size_t stride = 1, std::size_t pad = std::size_t(-1))
      : in_ch_(in_ch),
        out_ch_(out_ch),
        k_(kernel),
        stride_(stride),
        pad_(pad == std::size_t(-1) ? (kernel - 1) / 2 : pad),
        weight_(name + ".weight", {out_ch, in_ch * kernel * kernel}),
        bias_(name + ".bias", {out_ch}) {}

  void init(RandomStream& rng) { fill_he_normal(weight_.value, in_ch_ * k_ * k_, rng); }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    const std::size_t n = x.dim(0);
    if (x.rank() != 4 || x.dim(1) != in_ch_)
      throw InvalidInputError("Conv2d: expected (N,C,H,W) input");
    h_ = x.dim(2);
    w_ = x.dim(3);
    oh_ = detail::conv_out_dim(h_, k_, stride_, pad_);
    ow_ = detail::conv_out_dim(w_, k_, stride_, pad_);
    const std::size_t p = oh_ * ow_;
    const std::size_t rows = in_ch_ * k_ * k_;
    if (train) input_ = x;
    Tensor<S> y({n, out_ch_, oh_, ow_});
    col_.assign(rows * p, S(0));
    auto wm = weight_.value.as_matrix(out_ch_, rows);
    auto bv = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(
        bias_.value.data(), static_cast<Eigen::Index>(out_ch_));
    for (std::size_t s = 0; s < n; ++s) {
      detail::im2col2d(x.data() + s * in_ch_ * h_ * w_, in_ch_, h_, w_, k_, stride_,
                       pad_, oh_, ow_, col_.data());
      MatMap<S> colm(col_.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(p));
      MatMap<S> ym(y.data() + s * out_ch_ * p, static_cast<Eigen::Index>(out_ch_),
                   static_cast<Eigen::Index>(p));
      ym.noalias() = wm * colm;
      ym.colwise() += bv;
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    const std::size_t n = gy.dim(0);
    const std::size_t p = oh_ * ow_;
    const std::size_t rows = in_ch_ * k_ * k_;
    Tensor<S> gx({n, in_ch_, h_, w_});
    auto wm = weight_.value.as_matrix(out_ch_, rows);
    std::vector<S> dcol(rows * p);
    for (std::size_t s = 0; s < n; ++s) {
      ConstMatMap<S> gym(gy.data() + s * out_ch_ * p, static_cast<Eigen::Index>(out_ch_),
                         static_cast<Eigen::Index>(p));
      if (weight_.trainable) {
        detail::im2col2d(input_.data() + s * in_ch_ * h_ * w_, in_ch_, h_, w_, k_,
                         stride_, pad_, oh_, ow_, col_.data());
        MatMap<S> colm(col_.data(), static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(p));
        weight_.grad.as_matrix(out_ch_, rows).noalias() += gym * colm.transpose();
        auto gb = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(
            bias_.grad.data(), static_cast<Eigen::Index>(out_ch_));
        gb += gym.rowwise().sum();
      }
      MatMap<S> dcolm(dcol.data(), static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(p));
      dcolm.noalias() = wm.transpose() * gym;
      detail::col2im2d_add(dcol.data(), in_ch_, h_, w_, k_, stride_, pad_, oh_, ow_,
                           gx.data() + s * in_ch_ * h_ * w_);
    }
    return gx;
  }

  std::vector<Param<S>*> params() override { return {&weight_, &bias_}; }
  LayerInfo info() const override { return {"conv2d", k_, stride_, in_ch_, out_ch_}; }

 private:
  std::size_t in_ch_, out_ch_, k_, stride_, pad_;
  std::size_t h_ = 0, w_ = 0, oh_ = 0, ow_ = 0;
  Param<S> weight_, bias_;
  Tensor<S> input_;
  std::vector<S> col_;
};

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

/// 2x2x2 max pooling with stride 2 over (N, C, D, D, D).
template <class S>
class MaxPool3d : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    const std::size_t n = x.dim(0), c = x.dim(1), d = x.dim(2);
    if (d % 2 != 0) throw InvalidInputError("MaxPool3d: input depth must be even");
    in_shape_ = x.shape();
    const std::size_t od = d / 2;
    Tensor<S> y({n, c, od, od, od});
    argmax_.assign(y.size(), 0);
    const std::size_t plane = d * d;
    for (std::size_t s = 0; s < n * c; ++s) {
      const S* in = x.data() + s * d * plane;
      S* out = y.data() + s * od * od * od;
      std::size_t* arg = argmax_.data() + s * od * od * od;
      std::size_t o = 0;
      for (std::size_t oz = 0; oz < od; ++oz)
        for (std::size_t oy = 0; oy < od; ++oy)
          for (std::size_t ox = 0; ox < od; ++ox, ++o) {
            S best = -std::numeric_limits<S>::infinity();
            std::size_t best_idx = 0;
            for (std::size_t dz = 0; dz < 2; ++dz)
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) {
                  const std::size_t idx =
                      (2 * oz + dz) * plane + (2 * oy + dy) * d + (2 * ox + dx);
                  if (in[idx] > best) {
                    best = in[idx];
                    best_idx = idx;
                  }
                }
            out[o] = best;
            arg[o] = best_idx;
          }
    }
    (void)train;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx(in_shape_);
    const std::size_t n = in_shape_[0], c = in_shape_[1], d = in_shape_[2];
    const std::size_t od = d / 2;
    const std::size_t ocells = od * od * od;
    for (std::size_t s = 0; s < n * c; ++s) {
      S* dst = gx.data() + s * d * d * d;
      const S* src = gy.data() + s * ocells;
      const std::size_t* arg = argmax_.data() + s * ocells;
      for (std::size_t o = 0; o < ocells; ++o) dst[arg[o]] += src[o];
    }
    return gx;
  }

  LayerInfo info() const override { return {"maxpool3d", 2, 2}; }

 private:
  std::vector<std::size_t> in_shape_;
  std::vector<std::size_t> argmax_;
};

/// General 2D max pooling (used by the residual backbone stem).
template <class S>
class MaxPool2d : public Layer<S> {
 public:
  MaxPool2d(std::size_t kernel, std::size_t stride, std::size_t pad)
      : k_(kernel), stride_(stride), pad_(pad) {}

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    in_shape_ = x.shape();
    const std::size_t oh = detail::conv_out_dim(h, k_, stride_, pad_);
    const std::size_t ow = detail::conv_out_dim(w, k_, stride_, pad_);
    Tensor<S> y({n, c, oh, ow});
    argmax_.assign(y.size(), 0);
    for (std::size_t s = 0; s < n * c; ++s) {
      const S* in = x.data() + s * h * w;
      S* out = y.data() + s * oh * ow;
      std::size_t* arg = argmax_.data() + s * oh * ow;
      std::size_t o = 0;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          S best = -std::numeric_limits<S>::infinity();
          std::size_t best_idx = 0;
          for (std::size_t ky = 0; ky < k_; ++ky) {
            const long iy = static_cast<long>(oy * stride_ + ky) - static_cast<long>(pad_);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < k_; ++kx) {
              const long ix = static_cast<long>(ox * stride_ + kx) - static_cast<long>(pad_);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              const std::size_t idx =
                  static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
              if (in[idx] > best) {
                best = in[idx];
                best_idx = idx;
              }
            }
          }
          out[o] = best;
          arg[o] = best_idx;
        }
    }
    (void)train;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx(in_shape_);
    const std::size_t n = in_shape_[0], c = in_shape_[1], h = in_shape_[2],
                      w = in_shape_[3];
    const std::size_t ocells = gy.size() / (n * c);
    for (std::size_t s = 0; s < n * c; ++s) {
      S* dst = gx.data() + s * h * w;
      const S* src = gy.data() + s * ocells;
      const std::size_t* arg = argmax_.data() + s * ocells;
      for (std::size_t o = 0; o < ocells; ++o) dst[arg[o]] += src[o];
    }
    return gx;
  }

  LayerInfo info() const override { return {"maxpool2d", k_, stride_}; }

 private:
  std::size_t k_, stride_, pad_;
  std::vector<std::size_t> in_shape_;
  std::vector<std::size_t> argmax_;
};

/// Factor-2 trilinear upsampling of (N, C, D, D, D), the 3D reading of the
/// decoder's "bilinear upsampling" stages.
template <class S>
class Upsample3d : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    const std::size_t n = x.dim(0), c = x.dim(1), d = x.dim(2);
    in_shape_ = x.shape();
    const std::size_t od = 2 * d;
    build_axis_table(d, od);
    Tensor<S> y({n, c, od, od, od});
    const std::size_t plane = d * d;
    const std::size_t oplane = od * od;
    for (std::size_t s = 0; s < n * c; ++s) {
      const S* in = x.data() + s * d * plane;
      S* out = y.data() + s * od * oplane;
      for (std::size_t oz = 0; oz < od; ++oz)
        for (std::size_t oy = 0; oy < od; ++oy)
          for (std::size_t ox = 0; ox < od; ++ox) {
            const auto& az = axis_[oz];
            const auto& ay = axis_[oy];
            const auto& ax = axis_[ox];
            S acc = S(0);
            for (int cz = 0; cz < 2; ++cz)
              for (int cy = 0; cy < 2; ++cy)
                for (int cx = 0; cx < 2; ++cx) {
                  const S wgt = az.w[cz] * ay.w[cy] * ax.w[cx];
                  if (wgt == S(0)) continue;
                  acc += wgt * in[az.idx[cz] * plane + ay.idx[cy] * d + ax.idx[cx]];
                }
            out[oz * oplane + oy * od + ox] = acc;
          }
    }
    (void)train;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx(in_shape_);
    const std::size_t n = in_shape_[0], c = in_shape_[1], d = in_shape_[2];
    const std::size_t od = 2 * d;
    const std::size_t plane = d * d;
    const std::size_t oplane = od * od;
    for (std::size_t s = 0; s < n * c; ++s) {
      S* dst = gx.data() + s * d * plane;
      const S* src = gy.data() + s * od * oplane;
      for (std::size_t oz = 0; oz < od; ++oz)
        for (std::size_t oy = 0; oy < od; ++oy)
          for (std::size_t ox = 0; ox < od; ++ox) {
            const S g = src[oz * oplane + oy * od + ox];
            if (g == S(0)) continue;
            const auto& az = axis_[oz];
            const auto& ay = axis_[oy];
            const auto& ax = axis_[ox];
            for (int cz = 0; cz < 2; ++cz)
              for (int cy = 0; cy < 2; ++cy)
                for (int cx = 0; cx < 2; ++cx) {
                  const S wgt = az.w[cz] * ay.w[cy] * ax.w[cx];
                  if (wgt == S(0)) continue;
                  dst[az.idx[cz] * plane + ay.idx[cy] * d + ax.idx[cx]] += wgt * g;
                }
          }
    }
    return gx;
  }

  LayerInfo info() const override { return {"upsample3d", 0, 2}; }

 private:
  struct AxisEntry {
    std::size_t idx[2];
    S w[2];
  };

  void build_axis_table(std::size_t d, std::size_t od) {
    if (axis_.size() == od && axis_d_ == d) return;
    axis_.resize(od);
    axis_d_ = d;
    for (std::size_t o = 0; o < od; ++o) {
      // Half-pixel-center mapping: src = (o + 0.5)/2 - 0.5.
      const double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      const double f = std::floor(src);
      double w1 = src - f;
      long i0 = static_cast<long>(f);
      long i1 = i0 + 1;
      i0 = std::min(std::max(i0, 0l), static_cast<long>(d) - 1);
      i1 = std::min(std::max(i1, 0l), static_cast<long>(d) - 1);
      axis_[o].idx[0] = static_cast<std::size_t>(i0);
      axis_[o].idx[1] = static_cast<std::size_t>(i1);
      axis_[o].w[0] = static_cast<S>(1.0 - w1);
      axis_[o].w[1] = static_cast<S>(w1);
    }
  }

  std::vector<std::size_t> in_shape_;
  std::vector<AxisEntry> axis_;
  std::size_t axis_d_ = 0;
};

/// (N, C, H, W) -> (N, C) mean over the spatial plane.
template <class S>
class GlobalAvgPool2d : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    in_shape_ = x.shape();
    Tensor<S> y({n, c});
    const S scale = S(1) / static_cast<S>(h * w);
    for (std::size_t s = 0; s < n * c; ++s) {
      const S* in = x.data() + s * h * w;
      S acc = S(0);
      for (std::size_t i = 0; i < h * w; ++i) acc += in[i];
      y[s] = acc * scale;
    }
    (void)train;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx(in_shape_);
    const std::size_t hw = in_shape_[2] * in_shape_[3];
    const S scale = S(1) / static_cast<S>(hw);
    for (std::size_t s = 0; s < gy.size(); ++s) {
      S* dst = gx.data() + s * hw;
      const S g = gy[s] * scale;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = g;
    }
    return gx;
  }

  LayerInfo info() const override { return {"global_avg_pool2d"}; }

 private:
  std::vector<std::size_t> in_shape_;
};

/// Collapses all axes after the batch axis.
template <class S>
class Flatten : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    in_shape_ = x.shape();
    Tensor<S> y = x;
    y.reshape({x.dim(0), x.size() / x.dim(0)});
    (void)train;
    return y;
  }
  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx = gy;
    gx.reshape(in_shape_);
    return gx;
  }
  LayerInfo info() const override { return {"flatten"}; }

 private:
  std::vector<std::size_t> in_shape_;
};

/// Reshapes (N, F) to (N, dims...).
template <class S>
class Unflatten : public Layer<S> {
 public:
  explicit Unflatten(std::vector<std::size_t> dims) : dims_(std::move(dims)) {}

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    std::vector<std::size_t> shape{x.dim(0)};
    shape.insert(shape.end(), dims_.begin(), dims_.end());
    Tensor<S> y = x;
    y.reshape(std::move(shape));
    (void)train;
    return y;
  }
  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> gx = gy;
    gx.reshape({gy.dim(0), gy.size() / gy.dim(0)});
    return gx;
  }
  LayerInfo info() const override { return {"unflatten"}; }

 private:
  std::vector<std::size_t> dims_;
};

// ---------------------------------------------------------------------------
// Batch normalization (2D). Training mode uses batch statistics and updates
// running estimates; inference uses the running estimates.
// ---------------------------------------------------------------------------

template <class S>
class BatchNorm2d : public Layer<S> {
 public:
  BatchNorm2d(std::string name, std::size_t channels, double momentum = 0.1,
              double eps = 1e-5)
      : c_(channels),
        momentum_(momentum),
        eps_(eps),
        gamma_(name + ".gamma", {channels}),
        beta_(name + ".beta", {channels}),
        running_mean_(name + ".running_mean", {channels}),
        running_var_(name + ".running_var", {channels}) {
    gamma_.value.fill(S(1));
    running_var_.value.fill(S(1));
    running_mean_.trainable = false;
    running_var_.trainable = false;
  }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (x.dim(1) != c_) throw InvalidInputError("BatchNorm2d: channel mismatch");
    in_shape_ = x.shape();
    const std::size_t hw = h * w;
    const std::size_t count = n * hw;
    Tensor<S> y(x.shape());
    if (train) {
      xhat_ = Tensor<S>(x.shape());
      inv_std_.assign(c_, S(0));
      for (std::size_t ch = 0; ch < c_; ++ch) {
        double mean = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          const S* in = x.data() + (s * c_ + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) mean += in[i];
        }
        mean /= static_cast<double>(count);
        double var = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          const S* in = x.data() + (s * c_ + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            const double d = in[i] - mean;
            var += d * d;
          }
        }
        var /= static_cast<double>(count);
        const S istd = static_cast<S>(1.0 / std::sqrt(var + eps_));
        inv_std_[ch] = istd;
        const S g = gamma_.value[ch], b = beta_.value[ch];
        const S m = static_cast<S>(mean);
        for (std::size_t s = 0; s < n; ++s) {
          const S* in = x.data() + (s * c_ + ch) * hw;
          S* xh = xhat_.data() + (s * c_ + ch) * hw;
          S* out = y.data() + (s * c_ + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            xh[i] = (in[i] - m) * istd;
            out[i] = g * xh[i] + b;
          }
        }
        const double unbiased =
            count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1)
                      : var;
        running_mean_.value[ch] = static_cast<S>(
            (1.0 - momentum_) * running_mean_.value[ch] + momentum_ * mean);
        running_var_.value[ch] = static_cast<S>(
            (1.0 - momentum_) * running_var_.value[ch] + momentum_ * unbiased);
      }
    } else {
      for (std::size_t ch = 0; ch < c_; ++ch) {
        const S istd =
            static_cast<S>(1.0 / std::sqrt(static_cast<double>(running_var_.value[ch]) + eps_));
        const S m = running_mean_.value[ch];
        const S g = gamma_.value[ch], b = beta_.value[ch];
        for (std::size_t s = 0; s < n; ++s) {
          const S* in = x.data() + (s * c_ + ch) * hw;
          S* out = y.data() + (s * c_ + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) out[i] = g * (in[i] - m) * istd + b;
        }
      }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    const std::size_t n = in_shape_[0], h = in_shape_[2], w = in_shape_[3];
    const std::size_t hw = h * w;
    const double count = static_cast<double>(n * hw);
    Tensor<S> gx(in_shape_);
    for (std::size_t ch = 0; ch < c_; ++ch) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const S* g = gy.data() + (s * c_ + ch) * hw;
        const S* xh = xhat_.data() + (s * c_ + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_g += g[i];
          sum_gx += static_cast<double>(g[i]) * xh[i];
        }
      }
      if (gamma_.trainable) {
        gamma_.grad[ch] += static_cast<S>(sum_gx);
        beta_.grad[ch] += static_cast<S>(sum_g);
      }
      const double gamma = gamma_.value[ch];
      const double istd = inv_std_[ch];
      const double mean_g = sum_g / count;
      const double mean_gx = sum_gx / count;
      for (std::size_t s = 0; s < n; ++s) {
        const S* g = gy.data() + (s * c_ + ch) * hw;
        const S* xh = xhat_.data() + (s * c_ + ch) * hw;
        S* out = gx.data() + (s * c_ + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i)
          out[i] = static_cast<S>(gamma * istd * (g[i] - mean_g - xh[i] * mean_gx));
      }
    }
    return gx;
  }

  std::vector<Param<S>*> params() override {
    return {&gamma_, &beta_, &running_mean_, &running_var_};
  }
  LayerInfo info() const override { return {"batchnorm2d", 0, 0, c_, c_}; }

 private:
  std::size_t c_;
  double momentum_, eps_;
  Param<S> gamma_, beta_, running_mean_, running_var_;
  std::vector<std::size_t> in_shape_;
  Tensor<S> xhat_;
  std::vector<S> inv_std_;
};

// ---------------------------------------------------------------------------
// Sequential container
// ---------------------------------------------------------------------------

template <class S>
class Sequential : public Layer<S> {
 public:
  Sequential() = default;

  template <class L, class... Args>
  L* emplace(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L* raw = layer.get();
    layers_.push_back(std::move(layer));
    return raw;
  }

  void append(LayerPtr<S> layer) { layers_.push_back(std::move(layer)); }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    Tensor<S> cur = x;
    for (auto& l : layers_) cur = l->forward(cur, train);
    return cur;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    Tensor<S> cur = gy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      cur = (*it)->backward(cur);
    return cur;
  }

  std::vector<Param<S>*> params() override {
    std::vector<Param<S>*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }

  LayerInfo info() const override { return {"sequential"}; }

  std::size_t layer_count() const { return layers_.size(); }
  Layer<S>& layer(std::size_t i) { return *layers_[i]; }
  const Layer<S>& layer(std::size_t i) const { return *layers_[i]; }

  /// Info records of all contained layers, in order.
  std::vector<LayerInfo> stage_infos() const {
    std::vector<LayerInfo> out;
    out.reserve(layers_.size());
    for (const auto& l : layers_) out.push_back(l->info());
    return out;
  }

 private:
  std::vector<LayerPtr<S>> layers_;
};

}  // namespace darec::nn

#endif  // DAREC_NN_LAYERS_HPP_
