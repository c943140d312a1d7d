#ifndef DAREC_NN_ADAM_HPP_
#define DAREC_NN_ADAM_HPP_

#include <cmath>
#include <cstdint>
#include <vector>

#include "darec/common.hpp"
#include "darec/nn/layers.hpp"
#include "darec/tensor.hpp"

namespace darec::nn {

/// Adam with bias correction. Moment buffers are kept per registered
/// parameter and can be serialized so a resumed run continues bitwise.
template <class S>
class Adam {
 public:
  Adam(std::vector<Param<S>*> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->grad.zero();
  }

  void step() {
    ++t_;
    const S bc1 = static_cast<S>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const S bc2 = static_cast<S>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    const S lr = static_cast<S>(lr_);
    const S b1 = static_cast<S>(beta1_);
    const S b2 = static_cast<S>(beta2_);
    const S eps = static_cast<S>(eps_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param<S>& p = *params_[i];
      if (!p.trainable) continue;
      S* m = m_[i].data();
      S* v = v_[i].data();
      S* val = p.value.data();
      const S* g = p.grad.data();
      const std::size_t n = p.size();
      for (std::size_t j = 0; j < n; ++j) {
        m[j] = b1 * m[j] + (S(1) - b1) * g[j];
        v[j] = b2 * v[j] + (S(1) - b2) * g[j] * g[j];
        const S mhat = m[j] / bc1;
        const S vhat = v[j] / bc2;
        val[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t step_count() const { return t_; }
  const std::vector<Param<S>*>& params() const { return params_; }

  /// Raw little-endian dump of step count plus both moment buffers.
  std::vector<unsigned char> serialize_state() const {
    std::vector<unsigned char> out;
    append_le<std::int64_t>(out, t_);
    append_le<std::uint64_t>(out, params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      append_le<std::uint64_t>(out, params_[i]->size());
      const auto dump = [&](const Tensor<S>& t) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
        out.insert(out.end(), bytes, bytes + t.size() * sizeof(S));
      };
      dump(m_[i]);
      dump(v_[i]);
    }
    return out;
  }

  void restore_state(const std::vector<unsigned char>& bytes) {
    std::size_t off = 0;
    const auto need = [&](std::size_t n) {
      if (off + n > bytes.size()) throw CheckpointError("optimizer state truncated");
    };
    need(16);
    t_ = read_le<std::int64_t>(bytes.data() + off);
    off += 8;
    const auto count = read_le<std::uint64_t>(bytes.data() + off);
    off += 8;
    if (count != params_.size())
      throw CheckpointError("optimizer state has wrong parameter count");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      need(8);
      const auto n = read_le<std::uint64_t>(bytes.data() + off);
      off += 8;
      if (n != params_[i]->size())
        throw CheckpointError("optimizer state has wrong parameter size");
      const std::size_t nbytes = static_cast<std::size_t>(n) * sizeof(S);
      need(2 * nbytes);
      std::memcpy(m_[i].data(), bytes.data() + off, nbytes);
      off += nbytes;
      std::memcpy(v_[i].data(), bytes.data() + off, nbytes);
      off += nbytes;
    }
  }

 private:
  std::vector<Param<S>*> params_;
  std::vector<Tensor<S>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

}  // namespace darec::nn

#endif  // DAREC_NN_ADAM_HPP_
