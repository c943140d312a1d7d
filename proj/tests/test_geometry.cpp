#include "darec/geometry.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "darec/rng.hpp"
#include "support/oracles.hpp"

using namespace darec;
using testsupport::oracle_chamfer;
using testsupport::oracle_iou;
using testsupport::random_cloud;
using testsupport::random_grid;

namespace {

PointCloud cloud(std::initializer_list<Point3> pts) {
  PointCloud pc;
  pc.points = pts;
  return pc;
}

TEST(Chamfer, SingletonPair) {
  const auto a = cloud({{0, 0, 0}});
  const auto b = cloud({{1, 0, 0}});
  EXPECT_DOUBLE_EQ(chamfer_distance(a, b), 2.0);
}

TEST(Chamfer, TwoToOne) {
  const auto a = cloud({{0, 0, 0}, {2, 0, 0}});
  const auto b = cloud({{1, 0, 0}});
  EXPECT_DOUBLE_EQ(chamfer_distance(a, b), 2.0);
}

TEST(Chamfer, SquaredVariantScalesQuadratically) {
  const auto a = cloud({{0, 0, 0}});
  const auto b = cloud({{3, 0, 0}});
  EXPECT_DOUBLE_EQ(chamfer_distance(a, b, ChamferNorm::kEuclidean), 6.0);
  EXPECT_DOUBLE_EQ(chamfer_distance(a, b, ChamferNorm::kSquared), 18.0);
}

TEST(Chamfer, IdentityIsZero) {
  RandomStream rng(7);
  const auto a = random_cloud(rng, 100);
  EXPECT_DOUBLE_EQ(chamfer_distance(a, a), 0.0);
}

TEST(Chamfer, Symmetry) {
  RandomStream rng(11);
  for (int it = 0; it < 20; ++it) {
    const auto a = random_cloud(rng, 1 + rng.uniform_index(80));
    const auto b = random_cloud(rng, 1 + rng.uniform_index(80));
    EXPECT_EQ(chamfer_distance(a, b), chamfer_distance(b, a));
  }
}

TEST(Chamfer, MatchesBruteForceOracle) {
  RandomStream rng(42);
  for (int it = 0; it < 1000; ++it) {
    const std::size_t na = 1 + rng.uniform_index(60);
    const std::size_t nb = 1 + rng.uniform_index(60);
    const auto a = random_cloud(rng, na);
    const auto b = random_cloud(rng, nb);
    const auto norm = rng.bernoulli(0.5) ? ChamferNorm::kEuclidean : ChamferNorm::kSquared;
    const double expected = oracle_chamfer(a, b, norm);
    const double got = chamfer_distance(a, b, norm);
    ASSERT_NEAR(got, expected, 1e-12 * std::max(1.0, std::abs(expected)))
        << "iteration " << it << " sizes " << na << "," << nb;
  }
}

TEST(Chamfer, LargeCloudsAgreeWithOracle) {
  // Forces the tree-accelerated path on both directions.
  RandomStream rng(43);
  for (int it = 0; it < 10; ++it) {
    const auto a = random_cloud(rng, 500);
    const auto b = random_cloud(rng, 700);
    const double expected = oracle_chamfer(a, b);
    ASSERT_NEAR(chamfer_distance(a, b), expected, 1e-12 * std::max(1.0, expected));
  }
}

TEST(Chamfer, DuplicatePointsAndCoincidentClouds) {
  const auto a = cloud({{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}});
  const auto b = cloud({{0.5, 0.5, 0.5}});
  EXPECT_DOUBLE_EQ(chamfer_distance(a, b), 0.0);
}

TEST(Chamfer, RejectsEmptyClouds) {
  const auto a = cloud({{0, 0, 0}});
  PointCloud empty;
  EXPECT_THROW(chamfer_distance(a, empty), InvalidInputError);
  EXPECT_THROW(chamfer_distance(empty, a), InvalidInputError);
}

TEST(Chamfer, RejectsNonFiniteCoordinates) {
  const auto a = cloud({{0, 0, 0}});
  auto b = cloud({{1, 0, 0}});
  b.points[0][1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(chamfer_distance(a, b), InvalidInputError);
  b.points[0][1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(chamfer_distance(a, b), InvalidInputError);
}

TEST(Chamfer, TranslationInvariant) {
  RandomStream rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    PointCloud a, b;
    for (int i = 0; i < 40; ++i) {
      a.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
      b.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    }
    const Point3 t = {rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    PointCloud at = a, bt = b;
    for (auto& p : at.points)
      for (int c = 0; c < 3; ++c) p[static_cast<std::size_t>(c)] += t[static_cast<std::size_t>(c)];
    for (auto& p : bt.points)
      for (int c = 0; c < 3; ++c) p[static_cast<std::size_t>(c)] += t[static_cast<std::size_t>(c)];
    const double d0 = chamfer_distance(a, b);
    const double d1 = chamfer_distance(at, bt);
    EXPECT_NEAR(d1, d0, 1e-9 * std::max(1.0, d0));
  }
}

TEST(VoxelIou, KnownThirdOverlap) {
  VoxelGrid a(4), b(4);
  a.at(0, 0, 0) = 1.0f;
  a.at(1, 0, 0) = 1.0f;
  b.at(1, 0, 0) = 1.0f;
  b.at(1, 1, 0) = 1.0f;
  EXPECT_DOUBLE_EQ(voxel_iou(a, b), 1.0 / 3.0);
}

TEST(VoxelIou, IdentityDisjointEmpty) {
  RandomStream rng(3);
  const auto a = random_grid(rng, 8, 0.4);
  EXPECT_DOUBLE_EQ(voxel_iou(a, a), 1.0);

  VoxelGrid c(4), d(4);
  c.at(0, 0, 0) = 1.0f;
  d.at(3, 3, 3) = 1.0f;
  EXPECT_DOUBLE_EQ(voxel_iou(c, d), 0.0);

  VoxelGrid e1(4), e2(4);
  EXPECT_DOUBLE_EQ(voxel_iou(e1, e2), 1.0);
}

TEST(VoxelIou, ThresholdBoundaryCountsAsOccupied) {
  VoxelGrid a(2), b(2);
  a.at(0, 0, 0) = 0.5f;
  b.at(0, 0, 0) = 0.5f;
  EXPECT_DOUBLE_EQ(voxel_iou(a, b, 0.5), 1.0);
  // Just below the threshold is unoccupied.
  b.at(0, 0, 0) = 0.4999f;
  EXPECT_DOUBLE_EQ(voxel_iou(a, b, 0.5), 0.0);
}

TEST(VoxelIou, MatchesCountingOracle) {
  RandomStream rng(99);
  for (int it = 0; it < 200; ++it) {
    const bool binary = rng.bernoulli(0.5);
    const auto a = random_grid(rng, 16, rng.uniform(0.05, 0.6), binary);
    const auto b = random_grid(rng, 16, rng.uniform(0.05, 0.6), binary);
    const double t = rng.uniform(0.1, 0.9);
    ASSERT_DOUBLE_EQ(voxel_iou(a, b, t), oracle_iou(a, b, t));
  }
}

TEST(VoxelIou, RejectsMismatchedResolutionAndBadThreshold) {
  VoxelGrid a(4), b(8);
  EXPECT_THROW(voxel_iou(a, b), InvalidInputError);
  VoxelGrid c(4);
  EXPECT_THROW(voxel_iou(a, c, 0.0), InvalidInputError);
  EXPECT_THROW(voxel_iou(a, c, 1.0), InvalidInputError);
  EXPECT_THROW(voxel_iou(a, c, -0.3), InvalidInputError);
}

TEST(VoxelGrid, GeometryHelpers) {
  VoxelGrid g(16);
  EXPECT_DOUBLE_EQ(g.cell_width(), 0.125);
  const auto c0 = g.cell_center(0, 0, 0);
  EXPECT_DOUBLE_EQ(c0[0], -0.9375);
  EXPECT_DOUBLE_EQ(c0[1], -0.9375);
  EXPECT_DOUBLE_EQ(c0[2], -0.9375);
  const auto c15 = g.cell_center(15, 15, 15);
  EXPECT_DOUBLE_EQ(c15[0], 0.9375);
  EXPECT_THROW(VoxelGrid(1), InvalidInputError);
}

TEST(Isosurface, SingleCellFaceBalance) {
  VoxelGrid g(8);
  g.at(3, 3, 3) = 1.0f;
  const auto pc = sample_isosurface(g, 0.5, 600, 1234);
  ASSERT_EQ(pc.count(), 600u);

  const auto center = g.cell_center(3, 3, 3);
  const double half = g.cell_width() / 2.0;
  int face_counts[6] = {0, 0, 0, 0, 0, 0};
  for (const auto& p : pc.points) {
    int face = -1;
    const double eps = 1e-12;
    if (std::abs(p[0] - (center[0] - half)) < eps) face = 0;
    else if (std::abs(p[0] - (center[0] + half)) < eps) face = 1;
    else if (std::abs(p[1] - (center[1] - half)) < eps) face = 2;
    else if (std::abs(p[1] - (center[1] + half)) < eps) face = 3;
    else if (std::abs(p[2] - (center[2] - half)) < eps) face = 4;
    else if (std::abs(p[2] - (center[2] + half)) < eps) face = 5;
    ASSERT_GE(face, 0) << "sample not on any face plane of the occupied cell";
    ++face_counts[face];
    // Tangential coordinates stay inside the face.
    for (int ax = 0; ax < 3; ++ax) {
      EXPECT_GE(p[ax], center[ax] - half - 1e-12);
      EXPECT_LE(p[ax], center[ax] + half + 1e-12);
    }
  }
  // 600 samples over 6 equal-area faces: expectation 100, sd ~9.1; allow 5 sd.
  for (int f = 0; f < 6; ++f) {
    EXPECT_GT(face_counts[f], 54) << "face " << f;
    EXPECT_LT(face_counts[f], 146) << "face " << f;
  }
}

TEST(Isosurface, InteriorFacesNeverSampled) {
  // Solid 3x3x3 block: samples must lie on the block's outer hull.
  VoxelGrid g(8);
  for (std::size_t k = 2; k <= 4; ++k)
    for (std::size_t j = 2; j <= 4; ++j)
      for (std::size_t i = 2; i <= 4; ++i) g.at(i, j, k) = 1.0f;
  const auto pc = sample_isosurface(g, 0.5, 2000, 7);
  const double w = g.cell_width();
  const double lo = -1.0 + 2.0 * w;   // min face plane of cell index 2
  const double hi = -1.0 + 5.0 * w;   // max face plane of cell index 4
  for (const auto& p : pc.points) {
    const bool on_hull = std::abs(p[0] - lo) < 1e-12 || std::abs(p[0] - hi) < 1e-12 ||
                         std::abs(p[1] - lo) < 1e-12 || std::abs(p[1] - hi) < 1e-12 ||
                         std::abs(p[2] - lo) < 1e-12 || std::abs(p[2] - hi) < 1e-12;
    ASSERT_TRUE(on_hull);
    for (int ax = 0; ax < 3; ++ax) {
      ASSERT_GE(p[ax], lo - 1e-12);
      ASSERT_LE(p[ax], hi + 1e-12);
    }
  }
}

TEST(Isosurface, DeterministicPerSeed) {
  RandomStream rng(5);
  const auto g = random_grid(rng, 12, 0.3);
  const auto a = sample_isosurface(g, 0.5, 500, 77);
  const auto b = sample_isosurface(g, 0.5, 500, 77);
  ASSERT_EQ(a.count(), b.count());
  for (std::size_t i = 0; i < a.count(); ++i) EXPECT_EQ(a.points[i], b.points[i]);
  const auto c = sample_isosurface(g, 0.5, 500, 78);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.count() && !any_diff; ++i)
    any_diff = a.points[i] != c.points[i];
  EXPECT_TRUE(any_diff);
}

TEST(Isosurface, PointsStayInCanonicalFrame) {
  RandomStream rng(6);
  for (int it = 0; it < 10; ++it) {
    const auto g = random_grid(rng, 16, 0.2);
    if (g.occupied_count() == 0) continue;
    const auto pc = sample_isosurface(g, 0.5, 300, it);
    for (const auto& p : pc.points)
      for (int ax = 0; ax < 3; ++ax) {
        ASSERT_GE(p[ax], -1.0);
        ASSERT_LE(p[ax], 1.0);
      }
  }
}

TEST(Isosurface, EmptyGridThrows) {
  VoxelGrid g(8);
  EXPECT_THROW(sample_isosurface(g, 0.5, 100, 0), EmptyShapeError);
}

TEST(EvaluatePair, VoxelVoxelGivesBothMetrics) {
  RandomStream rng(8);
  const auto a = random_grid(rng, 12, 0.3);
  const auto b = random_grid(rng, 12, 0.3);
  EvalConfig cfg;
  cfg.seed = 21;
  const auto m = evaluate_pair(ShapeRep(a), ShapeRep(b), cfg);
  ASSERT_TRUE(m.iou.has_value());
  EXPECT_DOUBLE_EQ(*m.iou, voxel_iou(a, b));
  EXPECT_GT(m.chamfer, 0.0);

  const auto m2 = evaluate_pair(ShapeRep(a), ShapeRep(b), cfg);
  EXPECT_EQ(m.chamfer, m2.chamfer);  // same seed, same sampling
}

TEST(EvaluatePair, CloudCloudHasNoIou) {
  RandomStream rng(9);
  const auto a = random_cloud(rng, 64);
  const auto b = random_cloud(rng, 64);
  const auto m = evaluate_pair(ShapeRep(a), ShapeRep(b), EvalConfig{});
  EXPECT_FALSE(m.iou.has_value());
  EXPECT_NEAR(m.chamfer, oracle_chamfer(a, b), 1e-12);
}

TEST(EvaluatePair, MixedKindsSampleTheVoxelSide) {
  RandomStream rng(10);
  const auto g = random_grid(rng, 12, 0.3);
  const auto pc = random_cloud(rng, 128);
  EvalConfig cfg;
  cfg.n_points = 512;
  const auto m = evaluate_pair(ShapeRep(g), ShapeRep(pc), cfg);
  EXPECT_FALSE(m.iou.has_value());
  EXPECT_GT(m.chamfer, 0.0);

  cfg.allow_voxel_to_cloud = false;
  EXPECT_THROW(evaluate_pair(ShapeRep(g), ShapeRep(pc), cfg), InvalidInputError);
}

TEST(MetricReport, Means) {
  MetricReport r;
  r.add("a", 0.5, 1.0);
  r.add("b", 0.7, 3.0);
  r.add("c", std::nullopt, 2.0);
  EXPECT_DOUBLE_EQ(r.mean_chamfer(), 2.0);
  ASSERT_TRUE(r.mean_iou().has_value());
  EXPECT_DOUBLE_EQ(*r.mean_iou(), 0.6);
}

}  // namespace
