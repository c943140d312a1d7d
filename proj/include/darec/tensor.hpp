#ifndef DAREC_TENSOR_HPP_
#define DAREC_TENSOR_HPP_

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "darec/common.hpp"

namespace darec {

template <class S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<MatrixRM<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const MatrixRM<S>>;

/// Allocator pinning buffers to a fixed 64-byte boundary. Eigen selects
/// vector kernels from runtime pointer alignment, so unpinned heap addresses
/// make summation order (and the last ulps) vary from run to run. Pinning
/// every tensor keeps repeated runs bitwise identical.
template <class T>
struct TensorAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  TensorAllocator() = default;
  template <class U>
  TensorAllocator(const TensorAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(kAlign));
  }
  template <class U>
  bool operator==(const TensorAllocator<U>&) const { return true; }
  template <class U>
  bool operator!=(const TensorAllocator<U>&) const { return false; }
};

template <class S>
using TensorVec = std::vector<S, TensorAllocator<S>>;

/// Dense row-major tensor over a flat buffer. The NN stack treats shapes as
/// (channels, spatial...) per sample and maps slices into Eigen for GEMM.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), S(0));
  }

  Tensor(std::initializer_list<std::size_t> shape)
      : Tensor(std::vector<std::size_t>(shape)) {}

  static Tensor full(std::vector<std::size_t> shape, S value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  TensorVec<S>& vec() { return data_; }
  const TensorVec<S>& vec() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(S(0)); }

  /// Total element count implied by a shape vector.
  static std::size_t numel_of(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

  void reshape(std::vector<std::size_t> shape) {
    if (numel_of(shape) != data_.size())
      throw InvalidInputError("tensor reshape changes element count");
    shape_ = std::move(shape);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const S& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  /// Eigen view of the whole buffer as a rows x cols row-major matrix.
  MatMap<S> as_matrix(std::size_t rows, std::size_t cols) {
    if (rows * cols != data_.size())
      throw InvalidInputError("tensor matrix view dimension mismatch");
    return MatMap<S>(data_.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
  }

  ConstMatMap<S> as_matrix(std::size_t rows, std::size_t cols) const {
    if (rows * cols != data_.size())
      throw InvalidInputError("tensor matrix view dimension mismatch");
    return ConstMatMap<S>(data_.data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(cols));
  }

 private:
  std::vector<std::size_t> shape_;
  TensorVec<S> data_;
};

}  // namespace darec

#endif  // DAREC_TENSOR_HPP_
