#ifndef DAREC_SYNTHDATA_HPP_
#define DAREC_SYNTHDATA_HPP_

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "darec/common.hpp"
#include "darec/config.hpp"
#include "darec/geometry.hpp"
#include "darec/image.hpp"
#include "darec/rng.hpp"
#include "darec/shape_io.hpp"

namespace darec {

// ---------------------------------------------------------------------------
// Degree trig with exact values at the axis angles. sin(180 deg) through
// radians is ~1e-16, not 0; camera bases built from these would smear what
// should be axis-aligned rays. Reducing to a quadrant first keeps 0/90/180/270
// exact and makes sind(a+180) == -sind(a) bitwise whenever a+180 is exactly
// representable, which the mirror-view tests rely on.
// ---------------------------------------------------------------------------

inline double sind(double deg) {
  double r = std::fmod(deg, 360.0);
  if (r < 0.0) r += 360.0;
  if (r == 0.0 || r == 180.0) return 0.0;
  if (r == 90.0) return 1.0;
  if (r == 270.0) return -1.0;
  constexpr double k = 3.14159265358979323846 / 180.0;
  if (r < 90.0) return std::sin(r * k);
  if (r < 180.0) return std::sin((180.0 - r) * k);
  if (r < 270.0) return -std::sin((r - 180.0) * k);
  return -std::sin((360.0 - r) * k);
}

inline double cosd(double deg) { return sind(deg + 90.0); }

// ---------------------------------------------------------------------------
// Samples and views.
// ---------------------------------------------------------------------------

enum class Domain { kRendered, kNatural };

inline const char* domain_name(Domain d) {
  return d == Domain::kRendered ? "RENDERED" : "NATURAL";
}

inline Domain parse_domain(const std::string& s) {
  if (s == "RENDERED") return Domain::kRendered;
  if (s == "NATURAL") return Domain::kNatural;
  throw InvalidInputError("unknown domain '" + s + "'");
}

struct View {
  double azimuth = 0.0;    // degrees, [0, 360)
  double elevation = 0.0;  // degrees above horizontal
};

struct ImageSample {
  Image image;
  Domain domain = Domain::kRendered;
  std::string shape_ref;  // empty when unlabeled
  std::string category;
  View view;
  // Silhouette from the renderer (1 = object), carried in memory so the
  // naturalize composite does not have to re-derive it from pixel values.
  std::vector<std::uint8_t> mask;
};

// ---------------------------------------------------------------------------
// Grid construction helpers. All in cell-index space of a d^3 grid.
// ---------------------------------------------------------------------------

/// Fills cells [lo, hi) on each axis. Ranges are clamped to the grid.
inline void fill_box(VoxelGrid& g, std::array<long, 3> lo, std::array<long, 3> hi) {
  const long d = static_cast<long>(g.resolution());
  for (int a = 0; a < 3; ++a) {
    lo[static_cast<std::size_t>(a)] = std::max(lo[static_cast<std::size_t>(a)], 0l);
    hi[static_cast<std::size_t>(a)] = std::min(hi[static_cast<std::size_t>(a)], d);
  }
  for (long i = lo[0]; i < hi[0]; ++i)
    for (long j = lo[1]; j < hi[1]; ++j)
      for (long k = lo[2]; k < hi[2]; ++k)
        g.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j),
             static_cast<std::size_t>(k)) = 1.0f;
}

/// Fills a cylinder along `axis`: cells whose cross-section center lies within
/// `radius` (cell units) of (cu, cv), spanning [a_lo, a_hi) along the axis.
/// Cross axes are the other two in increasing order.
inline void fill_cylinder(VoxelGrid& g, int axis, double cu, double cv, double radius,
                          long a_lo, long a_hi) {
  const long d = static_cast<long>(g.resolution());
  const int u = axis == 0 ? 1 : 0;
  const int v = axis == 2 ? 1 : 2;
  a_lo = std::max(a_lo, 0l);
  a_hi = std::min(a_hi, d);
  const double r2 = radius * radius;
  for (long iu = 0; iu < d; ++iu)
    for (long iv = 0; iv < d; ++iv) {
      const double du = static_cast<double>(iu) + 0.5 - cu;
      const double dv = static_cast<double>(iv) + 0.5 - cv;
      if (du * du + dv * dv > r2) continue;
      for (long ia = a_lo; ia < a_hi; ++ia) {
        std::size_t c[3];
        c[static_cast<std::size_t>(axis)] = static_cast<std::size_t>(ia);
        c[static_cast<std::size_t>(u)] = static_cast<std::size_t>(iu);
        c[static_cast<std::size_t>(v)] = static_cast<std::size_t>(iv);
        g.at(c[0], c[1], c[2]) = 1.0f;
      }
    }
}

inline VoxelGrid union_grids(const std::vector<VoxelGrid>& parts) {
  if (parts.empty()) throw InvalidInputError("union_grids: no parts");
  VoxelGrid out(parts[0].resolution());
  for (const auto& p : parts) {
    if (p.resolution() != out.resolution())
      throw InvalidInputError("union_grids: resolution mismatch");
    for (std::size_t i = 0; i < out.cell_count(); ++i)
      out.values()[i] = std::max(out.values()[i], p.values()[i]);
  }
  return out;
}

/// Connected components of the occupied cells under 6-connectivity.
inline std::size_t count_connected_components(const VoxelGrid& g, float threshold = 0.5f) {
  const long d = static_cast<long>(g.resolution());
  std::vector<std::uint8_t> seen(g.cell_count(), 0);
  const auto idx = [d](long i, long j, long k) {
    return static_cast<std::size_t>(i + d * (j + d * k));
  };
  std::size_t components = 0;
  std::deque<std::array<long, 3>> queue;
  for (long k = 0; k < d; ++k)
    for (long j = 0; j < d; ++j)
      for (long i = 0; i < d; ++i) {
        if (seen[idx(i, j, k)] || g.values()[idx(i, j, k)] < threshold) continue;
        ++components;
        seen[idx(i, j, k)] = 1;
        queue.push_back({i, j, k});
        while (!queue.empty()) {
          const auto [ci, cj, ck] = queue.front();
          queue.pop_front();
          static constexpr std::array<std::array<long, 3>, 6> kSteps = {
              {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
          for (const auto& s : kSteps) {
            const long ni = ci + s[0], nj = cj + s[1], nk = ck + s[2];
            if (ni < 0 || nj < 0 || nk < 0 || ni >= d || nj >= d || nk >= d) continue;
            if (seen[idx(ni, nj, nk)] || g.values()[idx(ni, nj, nk)] < threshold) continue;
            seen[idx(ni, nj, nk)] = 1;
            queue.push_back({ni, nj, nk});
          }
        }
      }
  return components;
}

// ---------------------------------------------------------------------------
// Procedural shape families. Each instance is assembled from primitive parts
// that attach face-to-face, so the assembled grid is one connected component
// while the part list stays inspectable.
// ---------------------------------------------------------------------------

struct ShapeGenConfig {
  std::size_t resolution = 16;
  std::size_t cloud_points = 1024;
};

inline const std::vector<std::string>& shape_categories() {
  static const std::vector<std::string> kCats = {"chair-like", "table-like", "block",
                                                 "cylinder-union"};
  return kCats;
}

namespace detail {

inline std::vector<VoxelGrid> make_block(RandomStream& rng, std::size_t d) {
  const long dl = static_cast<long>(d);
  VoxelGrid g(d);
  std::array<long, 3> e{}, lo{};
  for (int a = 0; a < 3; ++a) {
    e[static_cast<std::size_t>(a)] = rng.uniform_int(2, std::max<long>(2, dl / 2));
    lo[static_cast<std::size_t>(a)] =
        rng.uniform_int(0, dl - e[static_cast<std::size_t>(a)]);
  }
  fill_box(g, lo, {lo[0] + e[0], lo[1] + e[1], lo[2] + e[2]});
  return {g};
}

inline std::vector<VoxelGrid> make_cylinder_union(RandomStream& rng, std::size_t d) {
  const long dl = static_cast<long>(d);
  const double dd = static_cast<double>(d);
  const long n = rng.uniform_int(2, 3);
  std::vector<VoxelGrid> parts;
  for (long c = 0; c < n; ++c) {
    VoxelGrid g(d);
    const int axis = static_cast<int>(rng.uniform_index(3));
    const double radius = rng.uniform(std::max(1.0, dd / 8.0), std::max(1.3, dd / 5.0));
    const long len = rng.uniform_int(dl / 2, (3 * dl) / 4);
    const long start = rng.uniform_int(0, dl - len);
    // Centers clustered mid-grid so the union overlaps more often than not.
    const double cu = rng.uniform(dd * 0.35, dd * 0.65);
    const double cv = rng.uniform(dd * 0.35, dd * 0.65);
    fill_cylinder(g, axis, cu, cv, radius, start, start + len);
    parts.push_back(std::move(g));
  }
  return parts;
}

// Seat slab with four legs and a back; arms sometimes. Legs end exactly at
// the seat's bottom layer and the back shares the seat's z range, so the
// union is face-connected.
inline std::vector<VoxelGrid> make_chair(RandomStream& rng, std::size_t d) {
  const long dl = static_cast<long>(d);
  const long thick = std::max<long>(1, dl / 8);
  const long w = rng.uniform_int(std::max<long>(4, dl / 2), std::max<long>(5, (3 * dl) / 4));
  const long dep = rng.uniform_int(std::max<long>(4, dl / 2), std::max<long>(5, (3 * dl) / 4));
  const long x0 = rng.uniform_int(0, dl - w);
  const long y0 = rng.uniform_int(0, dl - dep);
  const long z_seat = rng.uniform_int(dl / 4, dl / 2);
  const long z_top = rng.uniform_int(std::min((3 * dl) / 4, dl - 1), dl - 1) + 1;
  const long z_leg0 = rng.uniform_int(0, std::max<long>(0, dl / 8));

  std::vector<VoxelGrid> parts;
  VoxelGrid seat(d);
  fill_box(seat, {x0, y0, z_seat}, {x0 + w, y0 + dep, z_seat + thick});
  parts.push_back(std::move(seat));

  const std::array<std::array<long, 2>, 4> corners = {
      {{x0, y0}, {x0 + w - thick, y0}, {x0, y0 + dep - thick}, {x0 + w - thick, y0 + dep - thick}}};
  for (const auto& c : corners) {
    VoxelGrid leg(d);
    fill_box(leg, {c[0], c[1], z_leg0}, {c[0] + thick, c[1] + thick, z_seat});
    parts.push_back(std::move(leg));
  }

  VoxelGrid back(d);
  fill_box(back, {x0, y0, z_seat}, {x0 + w, y0 + thick, z_top});
  parts.push_back(std::move(back));

  if (dl >= 12 && w > 2 * thick && rng.bernoulli(0.5)) {
    const long arm_hi = std::min(z_top, z_seat + dl / 3);
    if (z_seat + thick < arm_hi) {
      const long z_arm = rng.uniform_int(z_seat + thick, arm_hi - 1);
      const long arm_len = std::max(thick + 1, (2 * dep) / 3);
      for (const long ax : {x0, x0 + w - thick}) {
        VoxelGrid arm(d);
        fill_box(arm, {ax, y0, z_arm}, {ax + thick, y0 + arm_len, z_arm + thick});
        parts.push_back(std::move(arm));
      }
    }
  }
  return parts;
}

inline std::vector<VoxelGrid> make_table(RandomStream& rng, std::size_t d) {
  const long dl = static_cast<long>(d);
  const long thick = std::max<long>(1, dl / 8);
  const long w = rng.uniform_int(std::max<long>(5, dl / 2), std::max<long>(6, (7 * dl) / 8));
  const long dep = rng.uniform_int(std::max<long>(5, dl / 2), std::max<long>(6, (7 * dl) / 8));
  const long x0 = rng.uniform_int(0, dl - w);
  const long y0 = rng.uniform_int(0, dl - dep);
  const long z_top = rng.uniform_int(dl / 2, std::max<long>(dl / 2, dl - thick - 1));
  const long z_leg0 = rng.uniform_int(0, std::max<long>(0, dl / 8));

  std::vector<VoxelGrid> parts;
  VoxelGrid top(d);
  fill_box(top, {x0, y0, z_top}, {x0 + w, y0 + dep, z_top + thick});
  parts.push_back(std::move(top));

  const std::array<std::array<long, 2>, 4> corners = {
      {{x0, y0}, {x0 + w - thick, y0}, {x0, y0 + dep - thick}, {x0 + w - thick, y0 + dep - thick}}};
  for (const auto& c : corners) {
    VoxelGrid leg(d);
    fill_box(leg, {c[0], c[1], z_leg0}, {c[0] + thick, c[1] + thick, z_top});
    parts.push_back(std::move(leg));
  }

  if (rng.bernoulli(0.35) && z_leg0 + 1 < z_top - 1) {
    const long z_shelf = rng.uniform_int(z_leg0 + 1, z_top - 1);
    VoxelGrid shelf(d);
    fill_box(shelf, {x0, y0, z_shelf}, {x0 + w, y0 + dep, z_shelf + 1});
    parts.push_back(std::move(shelf));
  }
  return parts;
}

}  // namespace detail

/// Primitive parts of one instance, before assembly. Chairs and tables have
/// at least five (seat/top, four legs, plus back or shelf or arms).
inline std::vector<VoxelGrid> generate_shape_parts(const std::string& category,
                                                   std::uint64_t params_seed,
                                                   const ShapeGenConfig& cfg) {
  RandomStream rng = RandomStream::derived(params_seed, "synth.shape." + category);
  if (category == "block") return detail::make_block(rng, cfg.resolution);
  if (category == "cylinder-union") return detail::make_cylinder_union(rng, cfg.resolution);
  if (category == "chair-like") return detail::make_chair(rng, cfg.resolution);
  if (category == "table-like") return detail::make_table(rng, cfg.resolution);
  throw InvalidInputError("unknown category '" + category + "'");
}

/// Assembled instance plus a point cloud sampled from its isosurface.
inline std::pair<VoxelGrid, PointCloud> generate_shape(const std::string& category,
                                                       std::uint64_t params_seed,
                                                       const ShapeGenConfig& cfg) {
  VoxelGrid grid = union_grids(generate_shape_parts(category, params_seed, cfg));
  PointCloud cloud = sample_isosurface(grid, 0.5, cfg.cloud_points,
                                       RandomStream::derive_seed(params_seed, "synth.cloud"));
  return {std::move(grid), std::move(cloud)};
}

// ---------------------------------------------------------------------------
// Orthographic Lambertian renderer. Rays march the voxel grid with a DDA;
// the first occupied cell shades by its entry-face normal against a light
// attached to the camera. Background stays exactly white so the silhouette
// is recoverable from pixels alone.
//
// The ortho half-extent is 9/4: pixel centers then sit at odd multiples of
// 9/(4W) while cell boundaries sit at even multiples of 1/d_v, so axis-
// aligned rays never run exactly along a cell boundary.
// ---------------------------------------------------------------------------

struct RenderConfig {
  std::size_t image_size = 64;
  double ortho_extent = 2.25;
  double albedo = 0.8;
  double ambient = 0.25;
};

namespace detail {

struct RayHit {
  bool hit = false;
  std::array<long, 3> cell{};
  int axis = 0;   // axis of the face the ray entered the cell through
  int step = 0;   // ray direction sign along that axis
};

inline RayHit trace_voxels(const VoxelGrid& g, const std::array<double, 3>& o,
                           const std::array<double, 3>& dir) {
  constexpr double kLo = -1.0, kHi = 1.0;
  const long n = static_cast<long>(g.resolution());
  const double h = g.cell_width();

  double t_enter = -std::numeric_limits<double>::infinity();
  double t_exit = std::numeric_limits<double>::infinity();
  int enter_axis = -1;
  for (int a = 0; a < 3; ++a) {
    const auto ai = static_cast<std::size_t>(a);
    if (dir[ai] == 0.0) {
      if (o[ai] <= kLo || o[ai] >= kHi) return {};
      continue;
    }
    double t0 = (kLo - o[ai]) / dir[ai];
    double t1 = (kHi - o[ai]) / dir[ai];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_enter) {
      t_enter = t0;
      enter_axis = a;
    }
    t_exit = std::min(t_exit, t1);
  }
  if (enter_axis < 0 || t_enter > t_exit || t_exit <= 0.0) return {};

  std::array<long, 3> cell{};
  std::array<long, 3> step{};
  std::array<double, 3> t_max{}, t_delta{};
  for (int a = 0; a < 3; ++a) {
    const auto ai = static_cast<std::size_t>(a);
    if (dir[ai] > 0.0)
      step[ai] = 1;
    else if (dir[ai] < 0.0)
      step[ai] = -1;
    if (a == enter_axis) {
      cell[ai] = dir[ai] > 0.0 ? 0 : n - 1;
    } else {
      const double p = o[ai] + t_enter * dir[ai];
      const long c = static_cast<long>(std::floor((p - kLo) / h));
      cell[ai] = std::min(std::max(c, 0l), n - 1);
    }
    if (dir[ai] != 0.0) {
      const long next_boundary = dir[ai] > 0.0 ? cell[ai] + 1 : cell[ai];
      const double b = kLo + static_cast<double>(next_boundary) * h;
      t_max[ai] = (b - o[ai]) / dir[ai];
      t_delta[ai] = h / std::abs(dir[ai]);
    } else {
      t_max[ai] = std::numeric_limits<double>::infinity();
      t_delta[ai] = std::numeric_limits<double>::infinity();
    }
  }

  int in_axis = enter_axis;
  for (long guard = 0; guard < 3 * n + 3; ++guard) {
    if (g.at(static_cast<std::size_t>(cell[0]), static_cast<std::size_t>(cell[1]),
             static_cast<std::size_t>(cell[2])) >= 0.5f) {
      return {true, cell, in_axis,
              static_cast<int>(step[static_cast<std::size_t>(in_axis)])};
    }
    int m = 0;
    if (t_max[1] < t_max[0]) m = 1;
    if (t_max[2] < t_max[static_cast<std::size_t>(m)]) m = 2;
    const auto mi = static_cast<std::size_t>(m);
    cell[mi] += step[mi];
    if (cell[mi] < 0 || cell[mi] >= n) return {};
    t_max[mi] += t_delta[mi];
    in_axis = m;
  }
  return {};
}

}  // namespace detail

inline ImageSample render(const VoxelGrid& shape, const View& view, const RenderConfig& cfg,
                          const std::string& category = "",
                          const std::string& shape_ref = "") {
  if (shape.occupied_count() == 0) throw EmptyShapeError("render: empty shape");
  if (cfg.image_size == 0) throw InvalidInputError("render: image_size must be positive");
  if (!(view.azimuth >= 0.0 && view.azimuth < 360.0))
    throw InvalidInputError("render: azimuth must lie in [0, 360)");
  if (!(view.elevation > -90.0 && view.elevation < 90.0))
    throw InvalidInputError("render: elevation must lie in (-90, 90)");

  const double ca = cosd(view.azimuth), sa = sind(view.azimuth);
  const double ce = cosd(view.elevation), se = sind(view.elevation);
  // Camera sits along +dir from the origin; rays travel along -dir.
  const std::array<double, 3> fwd = {-ce * ca, -ce * sa, -se};
  const std::array<double, 3> right = {-sa, ca, 0.0};
  const std::array<double, 3> up = {-se * ca, -se * sa, ce};
  // Camera-attached light: entry faces always oppose the ray, so every
  // visible face gets some diffuse term.
  std::array<double, 3> light{};
  for (std::size_t a = 0; a < 3; ++a)
    light[a] = 0.35 * right[a] + 0.45 * up[a] - 0.8 * fwd[a];
  const double ln = std::sqrt(light[0] * light[0] + light[1] * light[1] + light[2] * light[2]);
  for (auto& v : light) v /= ln;

  const std::size_t W = cfg.image_size;
  const double back_off = 4.0;  // start rays well outside the [-1,1] box
  ImageSample out;
  out.image = Image(W, W);
  out.domain = Domain::kRendered;
  out.category = category;
  out.shape_ref = shape_ref;
  out.view = view;
  out.mask.assign(W * W, 0);

  for (std::size_t py = 0; py < W; ++py) {
    for (std::size_t px = 0; px < W; ++px) {
      const double xr = cfg.ortho_extent *
                        (2.0 * static_cast<double>(px) + 1.0 - static_cast<double>(W)) /
                        static_cast<double>(W);
      const double yu = cfg.ortho_extent *
                        (static_cast<double>(W) - 2.0 * static_cast<double>(py) - 1.0) /
                        static_cast<double>(W);
      std::array<double, 3> o{};
      for (std::size_t a = 0; a < 3; ++a)
        o[a] = xr * right[a] + yu * up[a] - back_off * fwd[a];
      const auto hit = detail::trace_voxels(shape, o, fwd);
      if (!hit.hit) {
        for (std::size_t c = 0; c < 3; ++c) out.image.at(c, py, px) = 1.0f;
        continue;
      }
      out.mask[py * W + px] = 1;
      // Entry-face normal: against the travel direction on the entry axis.
      const double ndotl = -static_cast<double>(hit.step) * light[static_cast<std::size_t>(hit.axis)];
      const double shade = cfg.albedo * (cfg.ambient + (1.0 - cfg.ambient) * std::max(0.0, ndotl));
      for (std::size_t c = 0; c < 3; ++c) out.image.at(c, py, px) = static_cast<float>(shade);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic "natural" domain: textured background behind the silhouette,
// then color jitter, additive noise, mild blur, and a random crop-resize.
// Every stage draws from its own derived stream, and zero-strength stages
// are skipped outright so they stay exact identities.
// ---------------------------------------------------------------------------

struct NaturalizeConfig {
  std::size_t bg_texture_count = 8;
  double texture_strength = 1.0;
  double jitter_strength = 0.15;
  double noise_strength = 0.03;
  double blur_strength = 0.5;
  double crop_strength = 0.1;
};

namespace detail {

/// Procedural background texture. Contrast scales with `strength`; zero
/// strength is a uniform mid-gray.
inline Image background_texture(std::size_t index, std::uint64_t seed, std::size_t h,
                                std::size_t w, double strength) {
  RandomStream rng = RandomStream::derived(seed, "naturalize.texture." + std::to_string(index));
  Image img(h, w);
  const auto paint = [&](std::size_t c, std::size_t y, std::size_t x, double v) {
    img.at(c, y, x) = static_cast<float>(
        std::min(1.0, std::max(0.0, 0.5 + strength * (v - 0.5))));
  };
  std::array<double, 3> ca{}, cb{};
  for (auto& v : ca) v = rng.uniform(0.05, 0.85);
  for (auto& v : cb) v = rng.uniform(0.05, 0.85);
  switch (index % 4) {
    case 0: {  // linear gradient
      const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double gx = std::cos(ang), gy = std::sin(ang);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double t = 0.5 + 0.5 * (gx * (2.0 * static_cast<double>(x) / static_cast<double>(w) - 1.0) +
                                        gy * (2.0 * static_cast<double>(y) / static_cast<double>(h) - 1.0));
          for (std::size_t c = 0; c < 3; ++c) paint(c, y, x, ca[c] + t * (cb[c] - ca[c]));
        }
      break;
    }
    case 1: {  // checkerboard
      const std::size_t cell = 1u << rng.uniform_int(2, 4);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const bool odd = ((x / cell) + (y / cell)) % 2 == 1;
          for (std::size_t c = 0; c < 3; ++c) paint(c, y, x, odd ? cb[c] : ca[c]);
        }
      break;
    }
    case 2: {  // value noise, bilinearly upsampled coarse grid
      constexpr std::size_t kCoarse = 5;
      std::array<double, kCoarse * kCoarse> grid{};
      for (auto& v : grid) v = rng.uniform();
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double fy = static_cast<double>(y) / static_cast<double>(h) * (kCoarse - 1);
          const double fx = static_cast<double>(x) / static_cast<double>(w) * (kCoarse - 1);
          const std::size_t y0 = static_cast<std::size_t>(fy);
          const std::size_t x0 = static_cast<std::size_t>(fx);
          const std::size_t y1 = std::min(y0 + 1, kCoarse - 1);
          const std::size_t x1 = std::min(x0 + 1, kCoarse - 1);
          const double wy = fy - static_cast<double>(y0), wx = fx - static_cast<double>(x0);
          const double top = grid[y0 * kCoarse + x0] + wx * (grid[y0 * kCoarse + x1] - grid[y0 * kCoarse + x0]);
          const double bot = grid[y1 * kCoarse + x0] + wx * (grid[y1 * kCoarse + x1] - grid[y1 * kCoarse + x0]);
          const double t = top + wy * (bot - top);
          for (std::size_t c = 0; c < 3; ++c) paint(c, y, x, ca[c] + t * (cb[c] - ca[c]));
        }
      break;
    }
    default: {  // sinusoidal stripes
      const double ang = rng.uniform(0.0, 3.14159265358979323846);
      const double freq = rng.uniform(2.0, 6.0);
      const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double gx = std::cos(ang), gy = std::sin(ang);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double s = gx * static_cast<double>(x) / static_cast<double>(w) +
                           gy * static_cast<double>(y) / static_cast<double>(h);
          const double t = 0.5 + 0.5 * std::sin(2.0 * 3.14159265358979323846 * freq * s + phase);
          for (std::size_t c = 0; c < 3; ++c) paint(c, y, x, ca[c] + t * (cb[c] - ca[c]));
        }
      break;
    }
  }
  return img;
}

}  // namespace detail

inline ImageSample naturalize(const ImageSample& sample, std::uint64_t seed,
                              const NaturalizeConfig& cfg) {
  if (sample.domain != Domain::kRendered)
    throw InvalidInputError("naturalize: input must be RENDERED");
  const std::size_t h = sample.image.height(), w = sample.image.width();

  // Silhouette: renderer-provided when available, else the exact-white test
  // (the renderer keeps object pixels strictly below 1).
  std::vector<std::uint8_t> mask = sample.mask;
  if (mask.size() != h * w) {
    mask.assign(h * w, 0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        mask[y * w + x] = sample.image.at(0, y, x) == 1.0f && sample.image.at(1, y, x) == 1.0f &&
                                  sample.image.at(2, y, x) == 1.0f
                              ? 0
                              : 1;
  }

  RandomStream pick = RandomStream::derived(seed, "naturalize.pick");
  const std::size_t tex_index = pick.uniform_index(std::max<std::size_t>(1, cfg.bg_texture_count));
  const Image bg = detail::background_texture(tex_index, seed, h, w, cfg.texture_strength);

  ImageSample out;
  out.domain = Domain::kNatural;
  out.category = sample.category;
  out.view = sample.view;
  out.image = Image(h, w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out.image.at(c, y, x) = mask[y * w + x] ? sample.image.at(c, y, x) : bg.at(c, y, x);

  if (cfg.jitter_strength > 0.0) {
    RandomStream jr = RandomStream::derived(seed, "naturalize.jitter");
    for (std::size_t c = 0; c < 3; ++c) {
      const double scale = 1.0 + jr.uniform(-cfg.jitter_strength, cfg.jitter_strength);
      const double bias = jr.uniform(-cfg.jitter_strength, cfg.jitter_strength) * 0.5;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double v = static_cast<double>(out.image.at(c, y, x)) * scale + bias;
          out.image.at(c, y, x) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
        }
    }
  }

  if (cfg.noise_strength > 0.0) {
    RandomStream nr = RandomStream::derived(seed, "naturalize.noise");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double v = static_cast<double>(out.image.at(c, y, x)) +
                           nr.uniform(-cfg.noise_strength, cfg.noise_strength);
          out.image.at(c, y, x) = static_cast<float>(std::min(1.0, std::max(0.0, v)));
        }
  }

  if (cfg.blur_strength > 0.0) out.image = box_blur(out.image, cfg.blur_strength);

  if (cfg.crop_strength > 0.0) {
    RandomStream cr = RandomStream::derived(seed, "naturalize.crop");
    const double frac = 1.0 - cr.uniform(0.0, cfg.crop_strength);
    const double ch = frac * static_cast<double>(h);
    const double cw = frac * static_cast<double>(w);
    const double y0 = cr.uniform(0.0, static_cast<double>(h) - ch);
    const double x0 = cr.uniform(0.0, static_cast<double>(w) - cw);
    out.image = crop_resize(out.image, y0, x0, ch, cw);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset build and load.
// ---------------------------------------------------------------------------

struct DatasetSpec {
  std::int64_t n_rendered = 500;
  std::int64_t n_natural = 500;
  std::vector<std::string> categories = shape_categories();
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  std::int64_t resolution = 16;
  std::int64_t image_size = 64;
  std::int64_t cloud_points = 1024;
  double elevation_min = 10.0;
  double elevation_max = 40.0;
  std::int64_t bg_texture_count = 8;
  double texture_strength = 1.0;
  double jitter_strength = 0.15;
  double noise_strength = 0.03;
  double blur_strength = 0.5;
  double crop_strength = 0.1;

  static DatasetSpec from_doc(ConfigDoc& doc, const std::string& origin) {
    DatasetSpec s;
    s.n_rendered = doc.get_int("n_rendered", s.n_rendered);
    s.n_natural = doc.get_int("n_natural", s.n_natural);
    s.categories = doc.get_list("categories", s.categories);
    s.seed = static_cast<std::uint64_t>(doc.get_int("seed", 0));
    s.test_fraction = doc.get_double("test_fraction", s.test_fraction);
    s.resolution = doc.get_int("resolution", s.resolution);
    s.image_size = doc.get_int("image_size", s.image_size);
    s.cloud_points = doc.get_int("cloud_points", s.cloud_points);
    s.elevation_min = doc.get_double("elevation_min", s.elevation_min);
    s.elevation_max = doc.get_double("elevation_max", s.elevation_max);
    s.bg_texture_count = doc.get_int("bg_texture_count", s.bg_texture_count);
    s.texture_strength = doc.get_double("texture_strength", s.texture_strength);
    s.jitter_strength = doc.get_double("jitter_strength", s.jitter_strength);
    s.noise_strength = doc.get_double("noise_strength", s.noise_strength);
    s.blur_strength = doc.get_double("blur_strength", s.blur_strength);
    s.crop_strength = doc.get_double("crop_strength", s.crop_strength);
    doc.reject_unknown_keys(origin);
    s.validate();
    return s;
  }

  void to_doc(ConfigWriter& w) const {
    w.put("n_rendered", n_rendered);
    w.put("n_natural", n_natural);
    w.put_list("categories", categories);
    w.put("seed", static_cast<std::int64_t>(seed));
    w.put("test_fraction", test_fraction);
    w.put("resolution", resolution);
    w.put("image_size", image_size);
    w.put("cloud_points", cloud_points);
    w.put("elevation_min", elevation_min);
    w.put("elevation_max", elevation_max);
    w.put("bg_texture_count", bg_texture_count);
    w.put("texture_strength", texture_strength);
    w.put("jitter_strength", jitter_strength);
    w.put("noise_strength", noise_strength);
    w.put("blur_strength", blur_strength);
    w.put("crop_strength", crop_strength);
  }

  void validate() const {
    if (n_rendered <= 0 || n_natural < 0)
      throw ConfigError("dataset spec: n_rendered must be positive, n_natural non-negative");
    if (categories.empty()) throw ConfigError("dataset spec: categories must be non-empty");
    for (const auto& c : categories) {
      const auto& known = shape_categories();
      if (std::find(known.begin(), known.end(), c) == known.end())
        throw ConfigError("dataset spec: unknown category '" + c + "'");
    }
    if (!(test_fraction >= 0.0 && test_fraction < 1.0))
      throw ConfigError("dataset spec: test_fraction must lie in [0, 1)");
    if (resolution < 2) throw ConfigError("dataset spec: resolution must be >= 2");
    if (image_size < 8) throw ConfigError("dataset spec: image_size must be >= 8");
    if (cloud_points < 1) throw ConfigError("dataset spec: cloud_points must be positive");
    if (!(elevation_min <= elevation_max && elevation_min > -90.0 && elevation_max < 90.0))
      throw ConfigError("dataset spec: elevation range must be ordered and inside (-90, 90)");
    if (bg_texture_count < 1) throw ConfigError("dataset spec: bg_texture_count must be >= 1");
  }

  ShapeGenConfig shape_config() const {
    return {static_cast<std::size_t>(resolution), static_cast<std::size_t>(cloud_points)};
  }
  RenderConfig render_config() const {
    RenderConfig r;
    r.image_size = static_cast<std::size_t>(image_size);
    return r;
  }
  NaturalizeConfig naturalize_config() const {
    NaturalizeConfig n;
    n.bg_texture_count = static_cast<std::size_t>(bg_texture_count);
    n.texture_strength = texture_strength;
    n.jitter_strength = jitter_strength;
    n.noise_strength = noise_strength;
    n.blur_strength = blur_strength;
    n.crop_strength = crop_strength;
    return n;
  }
};

struct ManifestRow {
  std::string id;
  Domain domain = Domain::kRendered;
  std::string split;  // "train" or "test"
  std::string category;
  std::string image_path;        // relative to dataset root
  std::string shape_path;        // relative; empty = unlabeled
  View view;
};

struct BuildSummary {
  std::string manifest_path;
  std::int64_t n_rendered = 0;
  std::int64_t n_natural = 0;
};

namespace detail {

inline nlohmann::json manifest_json(const ManifestRow& row) {
  nlohmann::json j;
  j["id"] = row.id;
  j["domain"] = domain_name(row.domain);
  j["split"] = row.split;
  j["category"] = row.category;
  j["image_path"] = row.image_path;
  if (row.shape_path.empty())
    j["shape_path"] = nullptr;
  else
    j["shape_path"] = row.shape_path;
  j["view"] = {{"azimuth", row.view.azimuth}, {"elevation", row.view.elevation}};
  return j;
}

inline ManifestRow manifest_row(const nlohmann::json& j, const std::string& origin) {
  ManifestRow row;
  try {
    row.id = j.at("id");
    row.domain = parse_domain(j.at("domain"));
    row.split = j.at("split");
    row.category = j.at("category");
    row.image_path = j.at("image_path");
    if (!j.at("shape_path").is_null()) row.shape_path = j.at("shape_path");
    row.view.azimuth = j.at("view").at("azimuth");
    row.view.elevation = j.at("view").at("elevation");
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInputError(origin + ": bad manifest row: " + e.what());
  }
  if (row.split != "train" && row.split != "test")
    throw InvalidInputError(origin + ": bad split '" + row.split + "'");
  return row;
}

inline std::string sample_id(const char* prefix, std::int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%05lld", prefix, static_cast<long long>(i));
  return buf;
}

}  // namespace detail

/// Generates and persists the dataset: PNG images, voxel + point-cloud shape
/// files, and a JSON-lines manifest. Deterministic per spec (byte-identical
/// manifest on rebuild). RENDERED instances and NATURAL instances are drawn
/// from disjoint seed spaces, so no natural image depicts a labeled shape.
inline BuildSummary build_dataset(const DatasetSpec& spec, const std::string& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "shapes");

  {
    ConfigWriter w;
    spec.to_doc(w);
    w.save((fs::path(out_dir) / "dataset.cfg").string());
  }

  const auto gen_cfg = spec.shape_config();
  const auto rend_cfg = spec.render_config();
  const auto nat_cfg = spec.naturalize_config();

  const auto pick_category = [&](RandomStream& r) {
    return spec.categories[r.uniform_index(spec.categories.size())];
  };
  const auto pick_view = [&](RandomStream& r) {
    View v;
    v.azimuth = r.uniform(0.0, 360.0);
    if (v.azimuth >= 360.0) v.azimuth = 0.0;
    v.elevation = r.uniform(spec.elevation_min, spec.elevation_max);
    return v;
  };
  const auto split_of = [](std::int64_t i, std::int64_t n, double test_fraction) {
    const auto n_test = static_cast<std::int64_t>(std::floor(static_cast<double>(n) * test_fraction));
    return i < n - n_test ? "train" : "test";
  };

  std::vector<ManifestRow> rows;
  rows.reserve(static_cast<std::size_t>(spec.n_rendered + spec.n_natural));

  for (std::int64_t i = 0; i < spec.n_rendered; ++i) {
    const std::string id = detail::sample_id("r", i);
    RandomStream meta = RandomStream::derived(spec.seed, "data.meta." + id);
    const std::string category = pick_category(meta);
    const View view = pick_view(meta);
    const std::uint64_t shape_seed = RandomStream::derive_seed(spec.seed, "data.shape." + id);

    auto [grid, cloud] = generate_shape(category, shape_seed, gen_cfg);
    ImageSample img = render(grid, view, rend_cfg, category, id);

    ManifestRow row;
    row.id = id;
    row.domain = Domain::kRendered;
    row.split = split_of(i, spec.n_rendered, spec.test_fraction);
    row.category = category;
    row.image_path = "images/" + id + ".png";
    row.shape_path = "shapes/" + id + ".dvox";
    row.view = view;

    save_png(img.image, (fs::path(out_dir) / row.image_path).string());
    save_voxels(grid, (fs::path(out_dir) / row.shape_path).string());
    save_pointcloud(cloud, (fs::path(out_dir) / "shapes" / (id + ".xyz")).string());
    rows.push_back(std::move(row));
  }

  for (std::int64_t i = 0; i < spec.n_natural; ++i) {
    const std::string id = detail::sample_id("n", i);
    RandomStream meta = RandomStream::derived(spec.seed, "data.meta." + id);
    const std::string category = pick_category(meta);
    const View view = pick_view(meta);
    const std::uint64_t shape_seed = RandomStream::derive_seed(spec.seed, "data.shape." + id);

    auto [grid, cloud] = generate_shape(category, shape_seed, gen_cfg);
    ImageSample rendered = render(grid, view, rend_cfg, category, id);
    ImageSample natural = naturalize(
        rendered, RandomStream::derive_seed(spec.seed, "data.naturalize." + id), nat_cfg);

    ManifestRow row;
    row.id = id;
    row.domain = Domain::kNatural;
    row.split = split_of(i, spec.n_natural, spec.test_fraction);
    row.category = category;
    row.image_path = "images/" + id + ".png";
    row.view = view;
    // Training naturals stay unlabeled; the held-out split keeps its shape
    // for metric computation only.
    if (row.split == "test") {
      row.shape_path = "shapes/" + id + ".dvox";
      save_voxels(grid, (fs::path(out_dir) / row.shape_path).string());
      save_pointcloud(cloud, (fs::path(out_dir) / "shapes" / (id + ".xyz")).string());
    }
    save_png(natural.image, (fs::path(out_dir) / row.image_path).string());
    rows.push_back(std::move(row));
  }

  const std::string manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
  std::ofstream out(manifest_path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot write manifest: " + manifest_path);
  for (const auto& row : rows) out << detail::manifest_json(row).dump() << "\n";
  out.close();

  return {manifest_path, spec.n_rendered, spec.n_natural};
}

/// Read access to a built dataset. Adapter seam: trainers consume this
/// interface, so an external dataset only needs its own implementation.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual const std::vector<ManifestRow>& rows() const = 0;
  virtual const Image& image(const ManifestRow& row) = 0;
  virtual const VoxelGrid& voxels(const ManifestRow& row) = 0;
  virtual const PointCloud& cloud(const ManifestRow& row) = 0;
};

class Dataset : public SampleSource {
 public:
  static Dataset open(const std::string& root) {
    Dataset ds;
    ds.root_ = root;
    const std::string manifest = (std::filesystem::path(root) / "manifest.jsonl").string();
    std::ifstream in(manifest);
    if (!in) throw InvalidInputError("cannot open manifest: " + manifest);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError(manifest + ":" + std::to_string(lineno) + ": " + e.what());
      }
      ds.rows_.push_back(detail::manifest_row(j, manifest));
    }
    return ds;
  }

  const std::string& root() const { return root_; }
  const std::vector<ManifestRow>& rows() const override { return rows_; }

  std::vector<const ManifestRow*> select(Domain domain, const std::string& split) const {
    std::vector<const ManifestRow*> out;
    for (const auto& r : rows_)
      if (r.domain == domain && r.split == split) out.push_back(&r);
    return out;
  }

  DatasetSpec spec() {
    ConfigDoc doc = ConfigDoc::load((std::filesystem::path(root_) / "dataset.cfg").string());
    return DatasetSpec::from_doc(doc, "dataset.cfg");
  }

  const Image& image(const ManifestRow& row) override {
    auto it = images_.find(row.image_path);
    if (it == images_.end())
      it = images_.emplace(row.image_path,
                           load_png((std::filesystem::path(root_) / row.image_path).string()))
               .first;
    return it->second;
  }

  const VoxelGrid& voxels(const ManifestRow& row) override {
    if (row.shape_path.empty())
      throw InvalidInputError("sample '" + row.id + "' has no shape");
    auto it = grids_.find(row.shape_path);
    if (it == grids_.end())
      it = grids_.emplace(row.shape_path,
                          load_voxels((std::filesystem::path(root_) / row.shape_path).string()))
               .first;
    return it->second;
  }

  const PointCloud& cloud(const ManifestRow& row) override {
    if (row.shape_path.empty())
      throw InvalidInputError("sample '" + row.id + "' has no shape");
    std::string path = row.shape_path;
    const auto dot = path.rfind('.');
    path = path.substr(0, dot) + ".xyz";
    auto it = clouds_.find(path);
    if (it == clouds_.end())
      it = clouds_.emplace(path, load_pointcloud((std::filesystem::path(root_) / path).string()))
               .first;
    return it->second;
  }

 private:
  std::string root_;
  std::vector<ManifestRow> rows_;
  std::unordered_map<std::string, Image> images_;
  std::unordered_map<std::string, VoxelGrid> grids_;
  std::unordered_map<std::string, PointCloud> clouds_;
};

}  // namespace darec

#endif  // DAREC_SYNTHDATA_HPP_
