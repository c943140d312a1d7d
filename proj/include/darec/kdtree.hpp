#ifndef DAREC_KDTREE_HPP_
#define DAREC_KDTREE_HPP_

#include <algorithm>
#include <array>
#include <cstddef>
#include <limits>
#include <vector>

#include "darec/common.hpp"

namespace darec {

using Point3 = std::array<double, 3>;

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Static 3D kd-tree for exact nearest-neighbor queries. Splits on the axis
/// of maximum extent at the median. Tie handling in the median selection may
/// vary the tree layout but never the returned distances.
class KdTree3 {
 public:
  explicit KdTree3(const std::vector<Point3>& points) : points_(points) {
    if (points_.empty()) throw InvalidInputError("kd-tree over empty point set");
    index_.resize(points_.size());
    for (std::size_t i = 0; i < index_.size(); ++i) index_[i] = i;
    nodes_.reserve(2 * points_.size());
    root_ = build(0, index_.size());
  }

  struct Nearest {
    std::size_t index;
    double squared_dist;
  };

  Nearest nearest(const Point3& q) const {
    Nearest best{index_[0], std::numeric_limits<double>::infinity()};
    search(root_, q, best);
    return best;
  }

 private:
  static constexpr std::size_t kLeafSize = 8;

  struct Node {
    int axis = -1;          // -1 marks a leaf
    double split = 0.0;
    std::size_t begin = 0;  // leaf range into index_
    std::size_t end = 0;
    int left = -1;
    int right = -1;
  };

  int build(std::size_t begin, std::size_t end) {
    Node node;
    if (end - begin <= kLeafSize) {
      node.begin = begin;
      node.end = end;
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size() - 1);
    }
    Point3 lo{std::numeric_limits<double>::infinity(),
              std::numeric_limits<double>::infinity(),
              std::numeric_limits<double>::infinity()};
    Point3 hi{-std::numeric_limits<double>::infinity(),
              -std::numeric_limits<double>::infinity(),
              -std::numeric_limits<double>::infinity()};
    for (std::size_t i = begin; i < end; ++i) {
      const Point3& p = points_[index_[i]];
      for (int a = 0; a < 3; ++a) {
        lo[static_cast<std::size_t>(a)] = std::min(lo[static_cast<std::size_t>(a)], p[static_cast<std::size_t>(a)]);
        hi[static_cast<std::size_t>(a)] = std::max(hi[static_cast<std::size_t>(a)], p[static_cast<std::size_t>(a)]);
      }
    }
    int axis = 0;
    double extent = hi[0] - lo[0];
    for (int a = 1; a < 3; ++a) {
      const double e = hi[static_cast<std::size_t>(a)] - lo[static_cast<std::size_t>(a)];
      if (e > extent) {
        extent = e;
        axis = a;
      }
    }
    if (extent == 0.0) {
      // All points coincide; keep them in one leaf.
      node.begin = begin;
      node.end = end;
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size() - 1);
    }
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(index_.begin() + static_cast<std::ptrdiff_t>(begin),
                     index_.begin() + static_cast<std::ptrdiff_t>(mid),
                     index_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) {
                       return points_[a][static_cast<std::size_t>(axis)] <
                              points_[b][static_cast<std::size_t>(axis)];
                     });
    node.axis = axis;
    node.split = points_[index_[mid]][static_cast<std::size_t>(axis)];
    nodes_.push_back(node);
    const int self = static_cast<int>(nodes_.size() - 1);
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[static_cast<std::size_t>(self)].left = left;
    nodes_[static_cast<std::size_t>(self)].right = right;
    return self;
  }

  void search(int node_id, const Point3& q, Nearest& best) const {
    const Node& node = nodes_[static_cast<std::size_t>(node_id)];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const double d2 = squared_distance(q, points_[index_[i]]);
        if (d2 < best.squared_dist) {
          best.squared_dist = d2;
          best.index = index_[i];
        }
      }
      return;
    }
    const double delta = q[static_cast<std::size_t>(node.axis)] - node.split;
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    search(near, q, best);
    if (delta * delta < best.squared_dist) search(far, q, best);
  }

  const std::vector<Point3>& points_;
  std::vector<std::size_t> index_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace darec

#endif  // DAREC_KDTREE_HPP_
