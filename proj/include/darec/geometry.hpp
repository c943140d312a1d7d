#ifndef DAREC_GEOMETRY_HPP_
#define DAREC_GEOMETRY_HPP_

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "darec/common.hpp"
#include "darec/kdtree.hpp"
#include "darec/rng.hpp"

namespace darec {

// ---------------------------------------------------------------------------
// 3D representations. The canonical frame is the cube [-1,1]^3: voxel grids
// span it and point clouds are expressed in it. Chamfer magnitudes quoted
// anywhere in the project assume this frame.
// ---------------------------------------------------------------------------

/// Real-valued occupancy on a cubic lattice. Linear index runs x fastest:
/// cell (i,j,k) lives at i + d*(j + d*k).
class VoxelGrid {
 public:
  VoxelGrid() = default;

  explicit VoxelGrid(std::size_t resolution)
      : resolution_(resolution), values_(resolution * resolution * resolution, 0.0f) {
    if (resolution < 2) throw InvalidInputError("voxel resolution must be >= 2");
  }

  std::size_t resolution() const { return resolution_; }
  std::size_t cell_count() const { return values_.size(); }

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return i + resolution_ * (j + resolution_ * k);
  }

  float& at(std::size_t i, std::size_t j, std::size_t k) {
    return values_[index(i, j, k)];
  }
  float at(std::size_t i, std::size_t j, std::size_t k) const {
    return values_[index(i, j, k)];
  }

  std::vector<float>& values() { return values_; }
  const std::vector<float>& values() const { return values_; }

  bool is_binary() const {
    for (float v : values_)
      if (v != 0.0f && v != 1.0f) return false;
    return true;
  }

  bool values_in_unit_interval() const {
    for (float v : values_)
      if (!(v >= 0.0f && v <= 1.0f)) return false;
    return true;
  }

  std::size_t occupied_count(float threshold = 0.5f) const {
    std::size_t n = 0;
    for (float v : values_) n += (v >= threshold) ? 1 : 0;
    return n;
  }

  /// Cell edge length in the canonical frame.
  double cell_width() const { return 2.0 / static_cast<double>(resolution_); }

  /// Center of cell (i,j,k) in the canonical frame.
  Point3 cell_center(std::size_t i, std::size_t j, std::size_t k) const {
    const double w = cell_width();
    return {-1.0 + (static_cast<double>(i) + 0.5) * w,
            -1.0 + (static_cast<double>(j) + 0.5) * w,
            -1.0 + (static_cast<double>(k) + 0.5) * w};
  }

 private:
  std::size_t resolution_ = 0;
  std::vector<float> values_;
};

/// Unordered set of 3D points in the canonical frame. Any permutation of the
/// points denotes the same shape.
struct PointCloud {
  std::vector<Point3> points;

  std::size_t count() const { return points.size(); }
  bool empty() const { return points.empty(); }

  bool all_finite() const {
    for (const auto& p : points)
      for (double c : p)
        if (!std::isfinite(c)) return false;
    return true;
  }
};

using ShapeRep = std::variant<VoxelGrid, PointCloud>;

// ---------------------------------------------------------------------------
// Chamfer distance
// ---------------------------------------------------------------------------

enum class ChamferNorm {
  kEuclidean,  // the definition used everywhere by default
  kSquared,    // optional variant; never the default
};

namespace detail {

inline void require_valid_cloud(const PointCloud& p, const char* which) {
  if (p.empty())
    throw InvalidInputError(std::string("chamfer_distance: empty point cloud ") + which);
  if (!p.all_finite())
    throw InvalidInputError(std::string("chamfer_distance: non-finite coordinate in ") + which);
}

/// Mean over `from` of the nearest-neighbor distance into `to`.
/// Accumulates in source index order so accelerated and brute-force paths
/// sum identically.
inline double directed_mean_nn(const std::vector<Point3>& from,
                               const std::vector<Point3>& to, ChamferNorm norm) {
  constexpr std::size_t kBruteForceLimit = 24;
  double acc = 0.0;
  if (to.size() <= kBruteForceLimit) {
    for (const auto& x : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& y : to) best = std::min(best, squared_distance(x, y));
      acc += norm == ChamferNorm::kEuclidean ? std::sqrt(best) : best;
    }
  } else {
    KdTree3 tree(to);
    for (const auto& x : from) {
      const double best = tree.nearest(x).squared_dist;
      acc += norm == ChamferNorm::kEuclidean ? std::sqrt(best) : best;
    }
  }
  return acc / static_cast<double>(from.size());
}

}  // namespace detail

/// Symmetric mean nearest-neighbor distance between two point clouds:
///   (1/|P1|) sum_x min_y ||x-y|| + (1/|P2|) sum_y min_x ||y-x||
/// with plain Euclidean norms by default.
inline double chamfer_distance(const PointCloud& p1, const PointCloud& p2,
                               ChamferNorm norm = ChamferNorm::kEuclidean) {
  detail::require_valid_cloud(p1, "P1");
  detail::require_valid_cloud(p2, "P2");
  return detail::directed_mean_nn(p1.points, p2.points, norm) +
         detail::directed_mean_nn(p2.points, p1.points, norm);
}

// ---------------------------------------------------------------------------
// Voxel IoU
// ---------------------------------------------------------------------------

/// Intersection over union of the two grids binarized at `threshold`
/// (value >= threshold counts as occupied). Two empty binarized grids have
/// IoU 1 by definition.
inline double voxel_iou(const VoxelGrid& a, const VoxelGrid& b, double threshold = 0.5) {
  if (a.resolution() != b.resolution())
    throw InvalidInputError("voxel_iou: resolution mismatch");
  if (!(threshold > 0.0 && threshold < 1.0))
    throw InvalidInputError("voxel_iou: threshold must lie in (0,1)");
  const float t = static_cast<float>(threshold);
  std::size_t inter = 0, uni = 0;
  const auto& va = a.values();
  const auto& vb = b.values();
  for (std::size_t n = 0; n < va.size(); ++n) {
    const bool oa = va[n] >= t;
    const bool ob = vb[n] >= t;
    inter += (oa && ob) ? 1 : 0;
    uni += (oa || ob) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Isosurface sampling
// ---------------------------------------------------------------------------

namespace detail {

struct ExposedFace {
  std::size_t i, j, k;
  int direction;  // 0:-x 1:+x 2:-y 3:+y 4:-z 5:+z
};

/// Exposed faces of the grid binarized at `threshold`: faces of occupied
/// cells whose 6-neighbor is unoccupied or outside the grid.
inline std::vector<ExposedFace> exposed_faces(const VoxelGrid& v, float threshold) {
  static constexpr int kOffsets[6][3] = {{-1, 0, 0}, {1, 0, 0},  {0, -1, 0},
                                         {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
  const std::size_t d = v.resolution();
  std::vector<ExposedFace> faces;
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < d; ++i) {
        if (v.at(i, j, k) < threshold) continue;
        for (int f = 0; f < 6; ++f) {
          const long ni = static_cast<long>(i) + kOffsets[f][0];
          const long nj = static_cast<long>(j) + kOffsets[f][1];
          const long nk = static_cast<long>(k) + kOffsets[f][2];
          const bool outside = ni < 0 || nj < 0 || nk < 0 ||
                               ni >= static_cast<long>(d) ||
                               nj >= static_cast<long>(d) ||
                               nk >= static_cast<long>(d);
          if (outside || v.at(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj),
                              static_cast<std::size_t>(nk)) < threshold) {
            faces.push_back({i, j, k, f});
          }
        }
      }
  return faces;
}

}  // namespace detail

/// Samples `n_points` points uniformly over the exposed faces of the surface
/// voxels, mapped into the canonical [-1,1]^3 frame. Deterministic given seed.
inline PointCloud sample_isosurface(const VoxelGrid& v, double threshold,
                                    std::size_t n_points, std::uint64_t seed) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw InvalidInputError("sample_isosurface: threshold must lie in (0,1)");
  if (n_points == 0) throw InvalidInputError("sample_isosurface: n_points must be positive");
  const auto faces = detail::exposed_faces(v, static_cast<float>(threshold));
  if (faces.empty())
    throw EmptyShapeError("sample_isosurface: grid has no occupied cells at threshold");

  RandomStream rng = RandomStream::derived(seed, "geometry.isosurface");
  const double w = v.cell_width();
  PointCloud cloud;
  cloud.points.reserve(n_points);
  for (std::size_t n = 0; n < n_points; ++n) {
    const auto& f = faces[rng.uniform_index(faces.size())];
    const double u0 = rng.uniform();
    const double u1 = rng.uniform();
    // Cell min corner in the canonical frame.
    const double x0 = -1.0 + static_cast<double>(f.i) * w;
    const double y0 = -1.0 + static_cast<double>(f.j) * w;
    const double z0 = -1.0 + static_cast<double>(f.k) * w;
    Point3 p{};
    switch (f.direction) {
      case 0: p = {x0, y0 + u0 * w, z0 + u1 * w}; break;
      case 1: p = {x0 + w, y0 + u0 * w, z0 + u1 * w}; break;
      case 2: p = {x0 + u0 * w, y0, z0 + u1 * w}; break;
      case 3: p = {x0 + u0 * w, y0 + w, z0 + u1 * w}; break;
      case 4: p = {x0 + u0 * w, y0 + u1 * w, z0}; break;
      default: p = {x0 + u0 * w, y0 + u1 * w, z0 + w}; break;
    }
    cloud.points.push_back(p);
  }
  return cloud;
}

// ---------------------------------------------------------------------------
// Pair evaluation
// ---------------------------------------------------------------------------

struct EvalConfig {
  double threshold = 0.5;          // binarization threshold for voxel grids
  std::size_t n_points = 2500;     // isosurface samples for voxel->cloud CD
  std::uint64_t seed = 0;          // isosurface sampling seed
  bool allow_voxel_to_cloud = true;
  ChamferNorm norm = ChamferNorm::kEuclidean;
};

struct PairMetrics {
  std::optional<double> iou;  // present only when both sides are voxel grids
  double chamfer = 0.0;
};

/// IoU (voxel pairs only) and Chamfer distance for one predicted/ground-truth
/// pair. Voxel grids are converted to clouds with sample_isosurface before CD.
inline PairMetrics evaluate_pair(const ShapeRep& pred, const ShapeRep& gt,
                                 const EvalConfig& cfg = {}) {
  const bool pred_voxel = std::holds_alternative<VoxelGrid>(pred);
  const bool gt_voxel = std::holds_alternative<VoxelGrid>(gt);
  if (pred_voxel != gt_voxel && !cfg.allow_voxel_to_cloud)
    throw InvalidInputError("evaluate_pair: representation kinds differ and conversion is disabled");

  PairMetrics out;
  if (pred_voxel && gt_voxel)
    out.iou = voxel_iou(std::get<VoxelGrid>(pred), std::get<VoxelGrid>(gt), cfg.threshold);

  const auto to_cloud = [&cfg](const ShapeRep& shape) -> PointCloud {
    if (std::holds_alternative<PointCloud>(shape)) return std::get<PointCloud>(shape);
    return sample_isosurface(std::get<VoxelGrid>(shape), cfg.threshold, cfg.n_points, cfg.seed);
  };
  out.chamfer = chamfer_distance(to_cloud(pred), to_cloud(gt), cfg.norm);
  return out;
}

// ---------------------------------------------------------------------------
// Metric aggregation
// ---------------------------------------------------------------------------

/// Per-sample metric values plus aggregate means.
struct MetricReport {
  struct Entry {
    std::string id;
    std::optional<double> iou;
    double chamfer = 0.0;
  };

  std::vector<Entry> entries;

  void add(std::string id, std::optional<double> iou, double chamfer) {
    entries.push_back({std::move(id), iou, chamfer});
  }

  std::size_t size() const { return entries.size(); }

  double mean_chamfer() const {
    if (entries.empty()) throw InvalidInputError("MetricReport: no entries");
    double acc = 0.0;
    for (const auto& e : entries) acc += e.chamfer;
    return acc / static_cast<double>(entries.size());
  }

  /// Mean over entries carrying an IoU value; absent if none do.
  std::optional<double> mean_iou() const {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& e : entries)
      if (e.iou) {
        acc += *e.iou;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return acc / static_cast<double>(n);
  }
};

}  // namespace darec

#endif  // DAREC_GEOMETRY_HPP_
