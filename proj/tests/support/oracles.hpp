#ifndef DAREC_TESTS_SUPPORT_ORACLES_HPP_
#define DAREC_TESTS_SUPPORT_ORACLES_HPP_

// Independent reference implementations used to validate the library.
// Everything here is written the dumb O(n*m) way on purpose.

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "darec/geometry.hpp"
#include "darec/rng.hpp"
#include "darec/tensor.hpp"

namespace testsupport {

inline double oracle_directed(const std::vector<darec::Point3>& from,
                              const std::vector<darec::Point3>& to,
                              darec::ChamferNorm norm) {
  double acc = 0.0;
  for (const auto& x : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& y : to) {
      const double dx = x[0] - y[0], dy = x[1] - y[1], dz = x[2] - y[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    acc += norm == darec::ChamferNorm::kEuclidean ? std::sqrt(best) : best;
  }
  return acc / static_cast<double>(from.size());
}

inline double oracle_chamfer(const darec::PointCloud& a, const darec::PointCloud& b,
                             darec::ChamferNorm norm = darec::ChamferNorm::kEuclidean) {
  return oracle_directed(a.points, b.points, norm) +
         oracle_directed(b.points, a.points, norm);
}

inline double oracle_iou(const darec::VoxelGrid& a, const darec::VoxelGrid& b,
                         double threshold) {
  std::size_t inter = 0, uni = 0;
  const std::size_t d = a.resolution();
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < d; ++i) {
        const bool oa = a.at(i, j, k) >= static_cast<float>(threshold);
        const bool ob = b.at(i, j, k) >= static_cast<float>(threshold);
        if (oa && ob) ++inter;
        if (oa || ob) ++uni;
      }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline darec::PointCloud random_cloud(darec::RandomStream& rng, std::size_t n,
                                      double lo = -1.0, double hi = 1.0) {
  darec::PointCloud pc;
  pc.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    pc.points.push_back({rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)});
  return pc;
}

inline darec::VoxelGrid random_grid(darec::RandomStream& rng, std::size_t res,
                                    double fill_prob, bool binary = true) {
  darec::VoxelGrid g(res);
  for (auto& v : g.values())
    v = binary ? (rng.bernoulli(fill_prob) ? 1.0f : 0.0f)
               : static_cast<float>(rng.uniform());
  return g;
}

// Direct (non-im2col) convolutions for checking the GEMM path.

template <class S>
darec::Tensor<S> oracle_conv2d(const darec::Tensor<S>& x, const darec::Tensor<S>& w,
                               const darec::Tensor<S>& b, std::size_t in_ch,
                               std::size_t out_ch, std::size_t k, std::size_t stride,
                               std::size_t pad) {
  const std::size_t n = x.dim(0), h = x.dim(2), ww = x.dim(3);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (ww + 2 * pad - k) / stride + 1;
  darec::Tensor<S> y({n, out_ch, oh, ow});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oc = 0; oc < out_ch; ++oc)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b[oc];
          for (std::size_t ic = 0; ic < in_ch; ++ic)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(h) || ix < 0 ||
                    ix >= static_cast<long>(ww))
                  continue;
                const S xv = x[((s * in_ch + ic) * h + static_cast<std::size_t>(iy)) * ww +
                               static_cast<std::size_t>(ix)];
                const S wv = w[(oc * in_ch + ic) * k * k + ky * k + kx];
                acc += static_cast<double>(xv) * wv;
              }
          y[((s * out_ch + oc) * oh + oy) * ow + ox] = static_cast<S>(acc);
        }
  return y;
}

template <class S>
darec::Tensor<S> oracle_conv3d(const darec::Tensor<S>& x, const darec::Tensor<S>& w,
                               const darec::Tensor<S>& b, std::size_t in_ch,
                               std::size_t out_ch, std::size_t k, std::size_t stride,
                               std::size_t pad) {
  const std::size_t n = x.dim(0), d = x.dim(2);
  const std::size_t od = (d + 2 * pad - k) / stride + 1;
  darec::Tensor<S> y({n, out_ch, od, od, od});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oc = 0; oc < out_ch; ++oc)
      for (std::size_t oz = 0; oz < od; ++oz)
        for (std::size_t oy = 0; oy < od; ++oy)
          for (std::size_t ox = 0; ox < od; ++ox) {
            double acc = b[oc];
            for (std::size_t ic = 0; ic < in_ch; ++ic)
              for (std::size_t kz = 0; kz < k; ++kz)
                for (std::size_t ky = 0; ky < k; ++ky)
                  for (std::size_t kx = 0; kx < k; ++kx) {
                    const long iz = static_cast<long>(oz * stride + kz) - static_cast<long>(pad);
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (iz < 0 || iz >= static_cast<long>(d) || iy < 0 ||
                        iy >= static_cast<long>(d) || ix < 0 || ix >= static_cast<long>(d))
                      continue;
                    const S xv =
                        x[(((s * in_ch + ic) * d + static_cast<std::size_t>(iz)) * d +
                           static_cast<std::size_t>(iy)) *
                              d +
                          static_cast<std::size_t>(ix)];
                    const S wv = w[((oc * in_ch + ic) * k + kz) * k * k + ky * k + kx];
                    acc += static_cast<double>(xv) * wv;
                  }
            y[(((s * out_ch + oc) * od + oz) * od + oy) * od + ox] = static_cast<S>(acc);
          }
  return y;
}

}  // namespace testsupport

#endif  // DAREC_TESTS_SUPPORT_ORACLES_HPP_
