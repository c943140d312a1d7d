#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "darec/geometry.hpp"
#include "darec/nn/adam.hpp"
#include "darec/nn/layers.hpp"
#include "darec/synthdata.hpp"

using namespace darec;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

bool is_binary(const VoxelGrid& g) {
  return std::all_of(g.values().begin(), g.values().end(),
                     [](float v) { return v == 0.0f || v == 1.0f; });
}

}  // namespace

TEST(DegreeTrig, ExactAtAxisAngles) {
  EXPECT_EQ(sind(0.0), 0.0);
  EXPECT_EQ(sind(90.0), 1.0);
  EXPECT_EQ(sind(180.0), 0.0);
  EXPECT_EQ(sind(270.0), -1.0);
  EXPECT_EQ(cosd(0.0), 1.0);
  EXPECT_EQ(cosd(90.0), 0.0);
  EXPECT_EQ(cosd(180.0), -1.0);
  EXPECT_EQ(cosd(270.0), 0.0);
  EXPECT_EQ(sind(360.0), 0.0);
  EXPECT_EQ(sind(-90.0), -1.0);
}

TEST(DegreeTrig, OppositeAnglesNegateExactly) {
  for (const double a : {0.0, 12.25, 37.5, 45.0, 90.0, 133.125, 179.5}) {
    EXPECT_EQ(sind(a + 180.0), -sind(a)) << "a=" << a;
    EXPECT_EQ(cosd(a + 180.0), -cosd(a)) << "a=" << a;
  }
  EXPECT_NEAR(sind(30.0), 0.5, 1e-15);
  EXPECT_NEAR(cosd(60.0), 0.5, 1e-15);
}

TEST(Components, HandCases) {
  VoxelGrid g(4);
  EXPECT_EQ(count_connected_components(g), 0u);
  g.at(0, 0, 0) = 1.0f;
  EXPECT_EQ(count_connected_components(g), 1u);
  g.at(1, 0, 0) = 1.0f;  // face-adjacent
  EXPECT_EQ(count_connected_components(g), 1u);
  g.at(2, 1, 0) = 1.0f;  // edge-adjacent only: separate under 6-connectivity
  EXPECT_EQ(count_connected_components(g), 2u);
  g.at(3, 3, 3) = 1.0f;
  EXPECT_EQ(count_connected_components(g), 3u);
}

TEST(Shapes, BlockIsAFilledBox) {
  // Occupancy must equal the product of the bounding-box extents, i.e. the
  // block is a solid axis-aligned box.
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    ShapeGenConfig cfg;
    cfg.resolution = 8;
    cfg.cloud_points = 64;
    auto [grid, cloud] = generate_shape("block", seed, cfg);
    std::size_t lo[3] = {8, 8, 8}, hi[3] = {0, 0, 0};
    std::size_t count = 0;
    for (std::size_t k = 0; k < 8; ++k)
      for (std::size_t j = 0; j < 8; ++j)
        for (std::size_t i = 0; i < 8; ++i)
          if (grid.at(i, j, k) >= 0.5f) {
            ++count;
            const std::size_t c[3] = {i, j, k};
            for (int a = 0; a < 3; ++a) {
              lo[a] = std::min(lo[a], c[a]);
              hi[a] = std::max(hi[a], c[a]);
            }
          }
    ASSERT_GT(count, 0u);
    const std::size_t extent_product =
        (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1);
    EXPECT_EQ(count, extent_product) << "seed=" << seed;
    EXPECT_EQ(cloud.count(), 64u);
  }
}

TEST(Shapes, DeterministicPerSeed) {
  ShapeGenConfig cfg;
  cfg.resolution = 16;
  cfg.cloud_points = 128;
  for (const auto& cat : shape_categories()) {
    auto [g1, c1] = generate_shape(cat, 42, cfg);
    auto [g2, c2] = generate_shape(cat, 42, cfg);
    EXPECT_EQ(g1.values(), g2.values()) << cat;
    ASSERT_EQ(c1.count(), c2.count());
    EXPECT_EQ(c1.points, c2.points);
    auto [g3, c3] = generate_shape(cat, 43, cfg);
    EXPECT_NE(g1.values(), g3.values()) << cat << ": seed must matter";
  }
}

TEST(Shapes, ChairAssemblesFromManyPartsIntoOnePiece) {
  ShapeGenConfig cfg;
  cfg.resolution = 16;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto parts = generate_shape_parts("chair-like", seed, cfg);
    ASSERT_GE(parts.size(), 5u) << "seed=" << seed;
    std::size_t total = 0;
    for (const auto& p : parts) {
      const auto n = count_connected_components(p);
      EXPECT_GE(n, 1u);
      total += n;
    }
    EXPECT_GE(total, 5u);
    EXPECT_EQ(count_connected_components(union_grids(parts)), 1u) << "seed=" << seed;
  }
}

TEST(Shapes, TableIsOnePiece) {
  ShapeGenConfig cfg;
  cfg.resolution = 16;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto parts = generate_shape_parts("table-like", seed, cfg);
    ASSERT_GE(parts.size(), 5u);
    EXPECT_EQ(count_connected_components(union_grids(parts)), 1u) << "seed=" << seed;
  }
}

TEST(Shapes, AllFamiliesProduceBinaryNonEmptyGrids) {
  ShapeGenConfig cfg;
  cfg.resolution = 16;
  cfg.cloud_points = 64;
  for (const auto& cat : shape_categories())
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      auto [grid, cloud] = generate_shape(cat, seed, cfg);
      EXPECT_TRUE(is_binary(grid)) << cat;
      EXPECT_GT(grid.occupied_count(), 0u) << cat;
      EXPECT_EQ(cloud.count(), 64u);
      for (const auto& p : cloud.points)
        for (const double c : p) EXPECT_LE(std::abs(c), 1.0);
    }
  EXPECT_THROW(generate_shape("boat", 0, cfg), InvalidInputError);
}

TEST(Render, BackgroundIsExactlyWhiteOutsideSilhouette) {
  ShapeGenConfig cfg;
  cfg.resolution = 16;
  auto [grid, cloud] = generate_shape("chair-like", 3, cfg);
  RenderConfig rc;
  const auto img = render(grid, {30.0, 20.0}, rc);
  ASSERT_EQ(img.mask.size(), rc.image_size * rc.image_size);
  std::size_t object_pixels = 0;
  for (std::size_t y = 0; y < rc.image_size; ++y)
    for (std::size_t x = 0; x < rc.image_size; ++x) {
      const bool inside = img.mask[y * rc.image_size + x] != 0;
      object_pixels += inside;
      for (std::size_t c = 0; c < 3; ++c) {
        if (inside)
          EXPECT_LT(img.image.at(c, y, x), 1.0f);
        else
          EXPECT_EQ(img.image.at(c, y, x), 1.0f);
      }
    }
  EXPECT_GT(object_pixels, 0u);
}

TEST(Render, CenteredCellProjectsToCenteredConvexBlob) {
  VoxelGrid g(16);
  // Central 2x2x2 block: symmetric about the origin on every axis.
  for (std::size_t i = 7; i <= 8; ++i)
    for (std::size_t j = 7; j <= 8; ++j)
      for (std::size_t k = 7; k <= 8; ++k) g.at(i, j, k) = 1.0f;
  RenderConfig rc;
  const auto img = render(g, {0.0, 0.0}, rc);
  const std::size_t W = rc.image_size;
  double cx = 0.0, cy = 0.0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < W; ++y)
    for (std::size_t x = 0; x < W; ++x)
      if (img.mask[y * W + x]) {
        cx += static_cast<double>(x);
        cy += static_cast<double>(y);
        ++n;
      }
  ASSERT_GT(n, 0u);
  EXPECT_NEAR(cx / static_cast<double>(n), (static_cast<double>(W) - 1.0) / 2.0, 1e-9);
  EXPECT_NEAR(cy / static_cast<double>(n), (static_cast<double>(W) - 1.0) / 2.0, 1e-9);
  // Convex: occupied pixels are contiguous in every row and column.
  for (std::size_t y = 0; y < W; ++y) {
    std::size_t first = W, last = 0, count = 0;
    for (std::size_t x = 0; x < W; ++x)
      if (img.mask[y * W + x]) {
        first = std::min(first, x);
        last = std::max(last, x);
        ++count;
      }
    if (count > 0) {
      EXPECT_EQ(count, last - first + 1) << "row " << y;
    }
  }
}

TEST(Render, OppositeAzimuthFlipsSilhouette) {
  ShapeGenConfig cfg;
  cfg.resolution = 16;
  RenderConfig rc;
  const std::size_t W = rc.image_size;
  // Mirror-symmetric instance: a chair symmetrized about the y axis.
  auto [raw, cloud] = generate_shape("chair-like", 11, cfg);
  VoxelGrid sym(16);
  for (std::size_t k = 0; k < 16; ++k)
    for (std::size_t j = 0; j < 16; ++j)
      for (std::size_t i = 0; i < 16; ++i)
        sym.at(i, j, k) = std::max(raw.at(i, j, k), raw.at(i, 15 - j, k));

  for (const double az : {0.0, 37.5, 90.0, 122.25}) {
    const auto a = render(sym, {az, 0.0}, rc);
    const auto b = render(sym, {az + 180.0, 0.0}, rc);
    bool equal = true;
    for (std::size_t y = 0; y < W && equal; ++y)
      for (std::size_t x = 0; x < W && equal; ++x)
        equal = b.mask[y * W + (W - 1 - x)] == a.mask[y * W + x];
    EXPECT_TRUE(equal) << "azimuth " << az;
  }
}

TEST(Render, RejectsBadInput) {
  VoxelGrid empty(8);
  EXPECT_THROW(render(empty, {0.0, 0.0}, {}), EmptyShapeError);
  VoxelGrid g(8);
  g.at(4, 4, 4) = 1.0f;
  EXPECT_THROW(render(g, {360.0, 0.0}, {}), InvalidInputError);
  EXPECT_THROW(render(g, {0.0, 95.0}, {}), InvalidInputError);
}

TEST(Render, DeterministicPerView) {
  ShapeGenConfig cfg;
  cfg.resolution = 12;
  auto [grid, cloud] = generate_shape("cylinder-union", 5, cfg);
  RenderConfig rc;
  rc.image_size = 32;
  const auto a = render(grid, {45.0, 25.0}, rc);
  const auto b = render(grid, {45.0, 25.0}, rc);
  EXPECT_EQ(a.image.content_hash(), b.image.content_hash());
  const auto c = render(grid, {46.0, 25.0}, rc);
  EXPECT_NE(a.image.content_hash(), c.image.content_hash());
}

TEST(Naturalize, ZeroStrengthKeepsObjectPixels) {
  ShapeGenConfig cfg;
  cfg.resolution = 16;
  auto [grid, cloud] = generate_shape("table-like", 9, cfg);
  RenderConfig rc;
  rc.image_size = 32;
  const auto rendered = render(grid, {60.0, 30.0}, rc);

  NaturalizeConfig nc;
  nc.texture_strength = 0.0;
  nc.jitter_strength = 0.0;
  nc.noise_strength = 0.0;
  nc.blur_strength = 0.0;
  nc.crop_strength = 0.0;
  const auto nat = naturalize(rendered, 7, nc);
  EXPECT_EQ(nat.domain, Domain::kNatural);
  EXPECT_TRUE(nat.shape_ref.empty());

  bool background_changed = false;
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        if (rendered.mask[y * 32 + x]) {
          EXPECT_EQ(nat.image.at(c, y, x), rendered.image.at(c, y, x));
        } else {
          EXPECT_EQ(nat.image.at(c, y, x), 0.5f);  // flat zero-strength texture
          background_changed = true;
        }
      }
  EXPECT_TRUE(background_changed);
}

TEST(Naturalize, DefaultConfigMovesEveryImage) {
  ShapeGenConfig cfg;
  cfg.resolution = 12;
  RenderConfig rc;
  rc.image_size = 32;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto [grid, cloud] = generate_shape("block", seed, cfg);
    const auto rendered = render(grid, {10.0 + 40.0 * static_cast<double>(seed), 20.0}, rc);
    const auto nat = naturalize(rendered, seed, {});
    EXPECT_GT(image_l2_distance(rendered.image, nat.image), 0.0);
    for (std::size_t i = 0; i < nat.image.pixels().size(); ++i) {
      EXPECT_GE(nat.image.pixels()[i], 0.0f);
      EXPECT_LE(nat.image.pixels()[i], 1.0f);
    }
  }
}

TEST(Naturalize, SeedSensitiveAndDeterministic) {
  ShapeGenConfig cfg;
  cfg.resolution = 12;
  auto [grid, cloud] = generate_shape("chair-like", 21, cfg);
  RenderConfig rc;
  rc.image_size = 32;
  const auto rendered = render(grid, {75.0, 15.0}, rc);
  const auto n1 = naturalize(rendered, 1, {});
  const auto n1b = naturalize(rendered, 1, {});
  const auto n2 = naturalize(rendered, 2, {});
  EXPECT_EQ(n1.image.content_hash(), n1b.image.content_hash());
  EXPECT_NE(n1.image.content_hash(), n2.image.content_hash());
  EXPECT_THROW(naturalize(n1, 3, {}), InvalidInputError);
}

namespace {

DatasetSpec small_spec() {
  DatasetSpec spec;
  spec.n_rendered = 20;
  spec.n_natural = 20;
  spec.seed = 77;
  spec.resolution = 12;
  spec.image_size = 32;
  spec.cloud_points = 128;
  spec.test_fraction = 0.25;
  return spec;
}

}  // namespace

TEST(DatasetBuild, CountsSplitsAndLabels) {
  const auto dir = temp_dir("darec_ds_counts");
  const auto summary = build_dataset(small_spec(), dir);
  EXPECT_EQ(summary.n_rendered, 20);
  EXPECT_EQ(summary.n_natural, 20);

  Dataset ds = Dataset::open(dir);
  EXPECT_EQ(ds.rows().size(), 40u);
  EXPECT_EQ(ds.select(Domain::kRendered, "train").size(), 15u);
  EXPECT_EQ(ds.select(Domain::kRendered, "test").size(), 5u);
  EXPECT_EQ(ds.select(Domain::kNatural, "train").size(), 15u);
  EXPECT_EQ(ds.select(Domain::kNatural, "test").size(), 5u);

  std::set<std::string> train_ids, test_ids;
  for (const auto& row : ds.rows()) {
    (row.split == "train" ? train_ids : test_ids).insert(row.id);
    if (row.domain == Domain::kRendered) {
      EXPECT_FALSE(row.shape_path.empty());
    } else if (row.split == "train") {
      EXPECT_TRUE(row.shape_path.empty());  // unlabeled by construction
    } else {
      EXPECT_FALSE(row.shape_path.empty());  // held-out naturals keep labels
    }
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(dir) / row.image_path));
    if (!row.shape_path.empty()) {
      EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(dir) / row.shape_path));
      const auto& grid = ds.voxels(row);
      EXPECT_TRUE(is_binary(grid));
      EXPECT_EQ(ds.cloud(row).count(), 128u);
    }
    const auto& img = ds.image(row);
    EXPECT_EQ(img.width(), 32u);
  }
  std::vector<std::string> overlap;
  std::set_intersection(train_ids.begin(), train_ids.end(), test_ids.begin(), test_ids.end(),
                        std::back_inserter(overlap));
  EXPECT_TRUE(overlap.empty());
}

TEST(DatasetBuild, RebuildIsByteIdentical) {
  const auto dir1 = temp_dir("darec_ds_rep1");
  const auto dir2 = temp_dir("darec_ds_rep2");
  build_dataset(small_spec(), dir1);
  build_dataset(small_spec(), dir2);
  EXPECT_EQ(read_text(dir1 + "/manifest.jsonl"), read_text(dir2 + "/manifest.jsonl"));
  EXPECT_EQ(read_text(dir1 + "/images/r00003.png"), read_text(dir2 + "/images/r00003.png"));
  EXPECT_EQ(read_text(dir1 + "/images/n00007.png"), read_text(dir2 + "/images/n00007.png"));
  EXPECT_EQ(read_text(dir1 + "/shapes/r00000.dvox"), read_text(dir2 + "/shapes/r00000.dvox"));

  auto other = small_spec();
  other.seed = 78;
  const auto dir3 = temp_dir("darec_ds_rep3");
  build_dataset(other, dir3);
  EXPECT_NE(read_text(dir1 + "/manifest.jsonl"), read_text(dir3 + "/manifest.jsonl"));
}

TEST(DatasetBuild, PairedCloudMatchesVoxelSurface) {
  const auto dir = temp_dir("darec_ds_pairing");
  build_dataset(small_spec(), dir);
  Dataset ds = Dataset::open(dir);
  for (const auto* row : ds.select(Domain::kRendered, "train")) {
    const auto& grid = ds.voxels(*row);
    const auto& cloud = ds.cloud(*row);
    const auto fresh = sample_isosurface(grid, 0.5, cloud.count(), 987654);
    const double face_area = static_cast<double>(detail::exposed_faces(grid, 0.5f).size()) *
                             grid.cell_width() * grid.cell_width();
    const double spacing = std::sqrt(face_area / static_cast<double>(cloud.count()));
    EXPECT_LE(chamfer_distance(cloud, fresh), 2.0 * spacing) << row->id;
  }
}

TEST(DatasetBuild, DomainsArePixelSeparable) {
  // Logistic regression on raw pixels must tell the domains apart; the gap
  // the adaptation stage closes has to exist in the first place.
  const auto dir = temp_dir("darec_ds_separable");
  auto spec = small_spec();
  spec.n_rendered = 60;
  spec.n_natural = 60;
  build_dataset(spec, dir);
  Dataset ds = Dataset::open(dir);

  const auto featurize = [](const Image& img) {
    std::vector<double> f(img.pixels().size() + 1, 1.0);
    for (std::size_t i = 0; i < img.pixels().size(); ++i)
      f[i] = static_cast<double>(img.pixels()[i]) - 0.5;
    return f;  // trailing 1.0 is the bias input
  };

  std::vector<std::vector<double>> xs;
  std::vector<double> ys;
  std::vector<std::vector<double>> xs_test;
  std::vector<double> ys_test;
  for (const auto& row : ds.rows()) {
    const double label = row.domain == Domain::kNatural ? 1.0 : 0.0;
    if (row.split == "train") {
      xs.push_back(featurize(ds.image(row)));
      ys.push_back(label);
    } else {
      xs_test.push_back(featurize(ds.image(row)));
      ys_test.push_back(label);
    }
  }
  const std::size_t dim = xs[0].size();
  nn::Sequential<float> probe;
  auto* l1 = probe.emplace<nn::Dense<float>>("p1", dim, 16);
  probe.emplace<nn::ReLU<float>>();
  auto* l2 = probe.emplace<nn::Dense<float>>("p2", 16, 2);
  RandomStream init(4242);
  l1->init(init);
  l2->init(init);
  nn::Adam<float> opt(probe.params(), 3e-3f);

  Tensor<float> batch({xs.size(), dim});
  for (std::size_t s = 0; s < xs.size(); ++s)
    for (std::size_t i = 0; i < dim; ++i)
      batch[s * dim + i] = static_cast<float>(xs[s][i]);
  for (int epoch = 0; epoch < 300; ++epoch) {
    auto logits = probe.forward(batch, true);
    Tensor<float> dlogits(logits.shape());
    for (std::size_t s = 0; s < xs.size(); ++s) {
      const double m = std::max(logits[2 * s], logits[2 * s + 1]);
      const double e0 = std::exp(static_cast<double>(logits[2 * s]) - m);
      const double e1 = std::exp(static_cast<double>(logits[2 * s + 1]) - m);
      const double p1 = e1 / (e0 + e1);
      const double target = ys[s];
      dlogits[2 * s] = static_cast<float>(((1.0 - p1) - (1.0 - target)) / static_cast<double>(xs.size()));
      dlogits[2 * s + 1] = static_cast<float>((p1 - target) / static_cast<double>(xs.size()));
    }
    opt.zero_grad();
    probe.backward(dlogits);
    opt.step();
  }

  Tensor<float> test_batch({xs_test.size(), dim});
  for (std::size_t s = 0; s < xs_test.size(); ++s)
    for (std::size_t i = 0; i < dim; ++i)
      test_batch[s * dim + i] = static_cast<float>(xs_test[s][i]);
  auto test_logits = probe.forward(test_batch, false);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < xs_test.size(); ++s) {
    const double pred = test_logits[2 * s + 1] > test_logits[2 * s] ? 1.0 : 0.0;
    correct += pred == ys_test[s];
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(xs_test.size());
  EXPECT_GT(acc, 0.9) << "domain gap too small: accuracy " << acc;
}

TEST(DatasetSpecIO, RoundTripAndValidation) {
  auto spec = small_spec();
  spec.categories = {"chair-like", "block"};
  ConfigWriter w;
  spec.to_doc(w);
  ConfigDoc doc = ConfigDoc::parse(w.str(), "<roundtrip>");
  const auto back = DatasetSpec::from_doc(doc, "<roundtrip>");
  EXPECT_EQ(back.n_rendered, spec.n_rendered);
  EXPECT_EQ(back.categories, spec.categories);
  EXPECT_EQ(back.seed, spec.seed);
  EXPECT_EQ(back.test_fraction, spec.test_fraction);
  EXPECT_EQ(back.jitter_strength, spec.jitter_strength);

  ConfigDoc bad = ConfigDoc::parse("unknown_knob = 3\n", "<bad>");
  EXPECT_THROW(DatasetSpec::from_doc(bad, "<bad>"), ConfigError);

  auto invalid = small_spec();
  invalid.test_fraction = 1.5;
  EXPECT_THROW(invalid.validate(), ConfigError);
  invalid = small_spec();
  invalid.categories = {"boat"};
  EXPECT_THROW(invalid.validate(), ConfigError);
  invalid = small_spec();
  invalid.n_rendered = 0;
  EXPECT_THROW(invalid.validate(), ConfigError);
}
