#ifndef DAREC_SHAPE_PRIOR_HPP_
#define DAREC_SHAPE_PRIOR_HPP_

// Stage-1 shape autoencoders. A voxel 3D-conv autoencoder and a point-cloud
// encoder/decoder pair learn the latent shape manifold that the image encoder
// is later pulled onto. Everything here must stay deterministic, and a frozen
// autoencoder must be provably unchanged (checksum) for the second stage.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "darec/checkpoint.hpp"
#include "darec/common.hpp"
#include "darec/geometry.hpp"
#include "darec/kdtree.hpp"
#include "darec/nn/adam.hpp"
#include "darec/nn/layers.hpp"
#include "darec/rng.hpp"

namespace darec {

enum class PriorKind { kVoxel, kPointCloud };

inline const char* prior_kind_name(PriorKind k) {
  return k == PriorKind::kVoxel ? "voxel" : "pointcloud";
}

inline PriorKind parse_prior_kind(const std::string& s) {
  if (s == "voxel") return PriorKind::kVoxel;
  if (s == "pointcloud") return PriorKind::kPointCloud;
  throw InvalidInputError("unknown prior kind: " + s);
}

template <class S>
struct LatentCodeT {
  std::vector<S> values;
  PriorKind kind = PriorKind::kVoxel;

  std::size_t dim() const { return values.size(); }
  bool all_finite() const {
    for (S v : values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

using LatentCode = LatentCodeT<float>;

/// Architecture numbers for one autoencoder. The full profiles are the
/// reference networks; the toy profiles halve channel widths so CPU training
/// stays tractable.
struct PriorProfile {
  PriorKind kind = PriorKind::kVoxel;
  std::size_t latent_dim = 256;

  // voxel pathway
  std::size_t resolution = 32;
  std::vector<std::size_t> conv_widths{32, 64, 128, 256};
  std::vector<std::size_t> conv_kernels{5, 3, 3, 3};

  // point-cloud pathway
  std::vector<std::size_t> point_mlp_widths{64, 128, 1024};
  std::vector<std::size_t> decoder_fc_widths{1024, 512, 256, 128};
  std::size_t decode_points = 2500;

  static PriorProfile voxel_full() { return PriorProfile{}; }

  static PriorProfile voxel_toy() {
    PriorProfile p;
    p.latent_dim = 64;
    p.resolution = 16;
    p.conv_widths = {16, 32, 64, 128};
    return p;
  }

  static PriorProfile point_full() {
    PriorProfile p;
    p.kind = PriorKind::kPointCloud;
    p.latent_dim = 1024;
    return p;
  }

  static PriorProfile point_toy() {
    PriorProfile p;
    p.kind = PriorKind::kPointCloud;
    p.latent_dim = 64;
    p.point_mlp_widths = {32, 64, 64};
    p.decoder_fc_widths = {512, 256, 128, 64};
    p.decode_points = 512;
    return p;
  }

  std::size_t grid_stages() const { return conv_widths.size(); }
  std::size_t bottleneck_side() const { return resolution >> grid_stages(); }

  void validate() const {
    if (latent_dim == 0) throw ConfigError("prior profile: latent_dim must be positive");
    if (kind == PriorKind::kVoxel) {
      if (conv_widths.empty() || conv_widths.size() != conv_kernels.size())
        throw ConfigError("prior profile: conv widths/kernels must be non-empty and match");
      for (std::size_t w : conv_widths)
        if (w == 0) throw ConfigError("prior profile: zero conv width");
      for (std::size_t k : conv_kernels)
        if (k % 2 == 0) throw ConfigError("prior profile: conv kernels must be odd");
      const std::size_t div = std::size_t{1} << conv_widths.size();
      if (resolution < div || resolution % div != 0)
        throw ConfigError("prior profile: resolution must be a multiple of " +
                          std::to_string(div));
    } else {
      if (point_mlp_widths.empty() || decoder_fc_widths.empty())
        throw ConfigError("prior profile: point mlp/decoder widths must be non-empty");
      if (point_mlp_widths.back() != latent_dim)
        throw ConfigError("prior profile: point encoder must end at latent_dim");
      if (decode_points == 0)
        throw ConfigError("prior profile: decode_points must be positive");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = prior_kind_name(kind);
    j["latent_dim"] = latent_dim;
    j["resolution"] = resolution;
    j["conv_widths"] = conv_widths;
    j["conv_kernels"] = conv_kernels;
    j["point_mlp_widths"] = point_mlp_widths;
    j["decoder_fc_widths"] = decoder_fc_widths;
    j["decode_points"] = decode_points;
    return j;
  }

  static PriorProfile from_json(const nlohmann::json& j) {
    PriorProfile p;
    p.kind = parse_prior_kind(j.at("kind").get<std::string>());
    p.latent_dim = j.at("latent_dim").get<std::size_t>();
    p.resolution = j.at("resolution").get<std::size_t>();
    p.conv_widths = j.at("conv_widths").get<std::vector<std::size_t>>();
    p.conv_kernels = j.at("conv_kernels").get<std::vector<std::size_t>>();
    p.point_mlp_widths = j.at("point_mlp_widths").get<std::vector<std::size_t>>();
    p.decoder_fc_widths = j.at("decoder_fc_widths").get<std::vector<std::size_t>>();
    p.decode_points = j.at("decode_points").get<std::size_t>();
    p.validate();
    return p;
  }
};

namespace nn {

/// Max over each sample's block of rows: (B*group, F) -> (B, F). The gradient
/// routes to the argmax row per feature, and the pooled value depends only on
/// the point set, never on point order.
template <class S>
class PointMaxPool : public Layer<S> {
 public:
  void set_group(std::size_t n) {
    if (n == 0) throw InvalidInputError("PointMaxPool: group must be positive");
    group_ = n;
  }
  std::size_t group() const { return group_; }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    if (x.rank() != 2 || x.dim(0) % group_ != 0)
      throw InvalidInputError("PointMaxPool: rows not divisible by group");
    const std::size_t b = x.dim(0) / group_;
    const std::size_t f = x.dim(1);
    rows_ = x.dim(0);
    Tensor<S> y({b, f});
    if (train) argmax_.assign(b * f, 0);
    for (std::size_t s = 0; s < b; ++s) {
      const S* base = x.data() + s * group_ * f;
      S* out = y.data() + s * f;
      for (std::size_t j = 0; j < f; ++j) {
        out[j] = base[j];
        if (train) argmax_[s * f + j] = s * group_;
      }
      for (std::size_t r = 1; r < group_; ++r)
        for (std::size_t j = 0; j < f; ++j) {
          const S v = base[r * f + j];
          if (v > out[j]) {
            out[j] = v;
            if (train) argmax_[s * f + j] = s * group_ + r;
          }
        }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    const std::size_t b = gy.dim(0);
    const std::size_t f = gy.dim(1);
    Tensor<S> gx({rows_, f});
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t j = 0; j < f; ++j)
        gx.data()[argmax_[s * f + j] * f + j] += gy.data()[s * f + j];
    return gx;
  }

  LayerInfo info() const override { return {"point_maxpool"}; }

 private:
  std::size_t group_ = 1;
  std::size_t rows_ = 0;
  std::vector<std::size_t> argmax_;
};

/// Repeats each latent row n times and appends a fixed 2-D patch coordinate:
/// (B, d) -> (B*n, d+2). Coordinates are a Hammersley set over the unit
/// square, so a given latent always decodes to the same points.
template <class S>
class LatentTile : public Layer<S> {
 public:
  explicit LatentTile(std::size_t n_points) : n_(n_points), uv_(n_points) {
    if (n_points == 0) throw InvalidInputError("LatentTile: need at least one point");
    for (std::size_t i = 0; i < n_points; ++i) {
      uv_[i][0] = static_cast<S>((i + 0.5) / static_cast<double>(n_points));
      uv_[i][1] = static_cast<S>(radical_inverse(i));
    }
  }

  Tensor<S> forward(const Tensor<S>& x, bool train) override {
    (void)train;
    const std::size_t b = x.dim(0);
    const std::size_t d = x.dim(1);
    d_ = d;
    Tensor<S> y({b * n_, d + 2});
    for (std::size_t s = 0; s < b; ++s) {
      const S* src = x.data() + s * d;
      for (std::size_t i = 0; i < n_; ++i) {
        S* row = y.data() + (s * n_ + i) * (d + 2);
        std::copy(src, src + d, row);
        row[d] = uv_[i][0];
        row[d + 1] = uv_[i][1];
      }
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& gy) override {
    const std::size_t d = d_;
    const std::size_t b = gy.dim(0) / n_;
    Tensor<S> gx({b, d});
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t i = 0; i < n_; ++i) {
        const S* row = gy.data() + (s * n_ + i) * (d + 2);
        S* dst = gx.data() + s * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += row[j];
      }
    return gx;
  }

  LayerInfo info() const override { return {"latent_tile"}; }
  std::size_t points() const { return n_; }

 private:
  static double radical_inverse(std::size_t i) {
    double v = 0.0;
    for (double base = 0.5; i; i >>= 1, base *= 0.5)
      if (i & 1) v += base;
    return v;
  }

  std::size_t n_;
  std::size_t d_ = 0;
  std::vector<std::array<S, 2>> uv_;
};

}  // namespace nn

namespace detail {

template <class S>
void init_layer_params(nn::Sequential<S>& net, RandomStream& rng) {
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    if (auto* d = dynamic_cast<nn::Dense<S>*>(&net.layer(i)))
      d->init(rng);
    else if (auto* c = dynamic_cast<nn::Conv3d<S>*>(&net.layer(i)))
      c->init(rng);
  }
}

}  // namespace detail

template <class S>
class ShapeAutoencoderT {
 public:
  ShapeAutoencoderT(const PriorProfile& profile, std::uint64_t init_seed)
      : profile_(profile) {
    profile_.validate();
    if (profile_.kind == PriorKind::kVoxel)
      build_voxel();
    else
      build_point();
    RandomStream rng(RandomStream::derive_seed(init_seed, "prior.init"));
    detail::init_layer_params(enc_, rng);
    detail::init_layer_params(dec_, rng);
  }

  ShapeAutoencoderT(ShapeAutoencoderT&&) = default;
  ShapeAutoencoderT& operator=(ShapeAutoencoderT&&) = default;
  ShapeAutoencoderT(const ShapeAutoencoderT&) = delete;
  ShapeAutoencoderT& operator=(const ShapeAutoencoderT&) = delete;

  PriorKind kind() const { return profile_.kind; }
  const PriorProfile& profile() const { return profile_; }
  std::size_t latent_dim() const { return profile_.latent_dim; }
  bool frozen() const { return frozen_; }

  nn::Sequential<S>& encoder() { return enc_; }
  nn::Sequential<S>& decoder() { return dec_; }
  const nn::Sequential<S>& encoder() const { return enc_; }
  const nn::Sequential<S>& decoder() const { return dec_; }

  std::vector<nn::Param<S>*> params() {
    auto out = enc_.params();
    for (auto* p : dec_.params()) out.push_back(p);
    return out;
  }

  /// Rows per sample for the next point-encoder pass (batched training feeds
  /// several clouds as one row block).
  void set_point_group(std::size_t n) {
    if (profile_.kind != PriorKind::kPointCloud)
      throw Error("set_point_group: not a point-cloud autoencoder");
    pool_->set_group(n);
  }

  LatentCodeT<S> encode(const VoxelGrid& grid) {
    if (profile_.kind != PriorKind::kVoxel)
      throw InvalidInputError("encode: voxel input into a point-cloud autoencoder");
    if (grid.resolution() != profile_.resolution)
      throw InvalidInputError("encode: grid resolution " +
                              std::to_string(grid.resolution()) + ", expected " +
                              std::to_string(profile_.resolution));
    for (float v : grid.values())
      if (!std::isfinite(v)) throw InvalidInputError("encode: non-finite voxel value");
    const std::size_t d = profile_.resolution;
    Tensor<S> x({1, 1, d, d, d});
    for (std::size_t i = 0; i < grid.cell_count(); ++i)
      x.data()[i] = static_cast<S>(grid.values()[i]);
    return latent_from(enc_.forward(x, false));
  }

  LatentCodeT<S> encode(const PointCloud& cloud) {
    if (profile_.kind != PriorKind::kPointCloud)
      throw InvalidInputError("encode: point-cloud input into a voxel autoencoder");
    if (cloud.empty()) throw InvalidInputError("encode: empty point cloud");
    if (!cloud.all_finite()) throw InvalidInputError("encode: non-finite point");
    pool_->set_group(cloud.count());
    Tensor<S> x({cloud.count(), 3});
    for (std::size_t i = 0; i < cloud.count(); ++i)
      for (std::size_t a = 0; a < 3; ++a)
        x.data()[i * 3 + a] = static_cast<S>(cloud.points[i][a]);
    return latent_from(enc_.forward(x, false));
  }

  VoxelGrid decode_voxels(const LatentCodeT<S>& z) {
    require_latent(z, PriorKind::kVoxel);
    Tensor<S> y = dec_.forward(latent_to_tensor(z), false);
    VoxelGrid g(profile_.resolution);
    for (std::size_t i = 0; i < g.cell_count(); ++i)
      g.values()[i] = static_cast<float>(y.data()[i]);
    return g;
  }

  PointCloud decode_cloud(const LatentCodeT<S>& z) {
    require_latent(z, PriorKind::kPointCloud);
    Tensor<S> y = dec_.forward(latent_to_tensor(z), false);
    PointCloud c;
    c.points.resize(profile_.decode_points);
    for (std::size_t i = 0; i < c.points.size(); ++i)
      for (std::size_t a = 0; a < 3; ++a)
        c.points[i][a] = static_cast<double>(y.data()[i * 3 + a]);
    return c;
  }

  /// Marks every parameter untrainable and records the checksum the frozen
  /// weights must keep from here on. Calling again is a no-op.
  void freeze() {
    if (frozen_) return;
    for (auto* p : params()) p->trainable = false;
    frozen_ = true;
    checksum_ = live_param_checksum<S>(params());
  }

  std::uint64_t frozen_checksum() const {
    if (!frozen_) throw Error("frozen_checksum: autoencoder is not frozen");
    return checksum_;
  }

  bool verify_frozen() {
    if (!frozen_) throw Error("verify_frozen: autoencoder is not frozen");
    return live_param_checksum<S>(params()) == checksum_;
  }

  std::uint64_t param_checksum() { return live_param_checksum<S>(params()); }

  Checkpoint to_checkpoint() {
    Checkpoint ck;
    ck.meta["model"] = "shape_prior";
    ck.meta["kind"] = prior_kind_name(profile_.kind);
    ck.meta["frozen"] = frozen_;
    if (frozen_) ck.meta["frozen_checksum"] = to_hex(checksum_);
    ck.meta["profile"] = profile_.to_json();
    export_params<S>(params(), ck);
    return ck;
  }

  static ShapeAutoencoderT from_checkpoint(const Checkpoint& ck) {
    if (!ck.meta.contains("model") || ck.meta.at("model") != "shape_prior")
      throw CheckpointError("checkpoint does not hold a shape prior");
    ShapeAutoencoderT ae(PriorProfile::from_json(ck.meta.at("profile")), 0);
    import_params<S>(ck, ae.params());
    if (ck.meta.value("frozen", false)) {
      ae.freeze();
      const std::string want = ck.meta.value("frozen_checksum", "");
      if (!want.empty() && want != to_hex(ae.checksum_))
        throw CheckpointError("frozen parameter checksum mismatch");
    }
    return ae;
  }

  void save(const std::string& path) { save_checkpoint(to_checkpoint(), path); }

  static ShapeAutoencoderT load(const std::string& path) {
    return from_checkpoint(load_checkpoint(path));
  }

 private:
  void build_voxel() {
    const auto& w = profile_.conv_widths;
    const auto& ks = profile_.conv_kernels;
    const std::size_t s = profile_.bottleneck_side();
    const std::size_t flat = w.back() * s * s * s;

    std::size_t in_ch = 1;
    for (std::size_t i = 0; i < w.size(); ++i) {
      enc_.template emplace<nn::Conv3d<S>>("enc.conv" + std::to_string(i), in_ch, w[i],
                                           ks[i]);
      enc_.template emplace<nn::ReLU<S>>();
      enc_.template emplace<nn::MaxPool3d<S>>();
      in_ch = w[i];
    }
    enc_.template emplace<nn::Flatten<S>>();
    enc_.template emplace<nn::Dense<S>>("enc.fc", flat, profile_.latent_dim);

    dec_.template emplace<nn::Dense<S>>("dec.fc", profile_.latent_dim, flat);
    dec_.template emplace<nn::ReLU<S>>();
    dec_.template emplace<nn::Unflatten<S>>(std::vector<std::size_t>{w.back(), s, s, s});
    for (std::size_t i = w.size() - 1; i > 0; --i) {
      dec_.template emplace<nn::Upsample3d<S>>();
      dec_.template emplace<nn::Conv3d<S>>("dec.conv" + std::to_string(i), w[i], w[i - 1],
                                           ks[i]);
      dec_.template emplace<nn::ReLU<S>>();
    }
    dec_.template emplace<nn::Upsample3d<S>>();
    dec_.template emplace<nn::Conv3d<S>>("dec.out", w.front(), 1, ks.front());
    dec_.template emplace<nn::Sigmoid<S>>();
  }

  void build_point() {
    const auto& m = profile_.point_mlp_widths;
    std::size_t in = 3;
    for (std::size_t i = 0; i < m.size(); ++i) {
      enc_.template emplace<nn::Dense<S>>("enc.mlp" + std::to_string(i), in, m[i]);
      enc_.template emplace<nn::ReLU<S>>();
      in = m[i];
    }
    pool_ = enc_.template emplace<nn::PointMaxPool<S>>();

    dec_.template emplace<nn::LatentTile<S>>(profile_.decode_points);
    in = profile_.latent_dim + 2;
    for (std::size_t i = 0; i < profile_.decoder_fc_widths.size(); ++i) {
      const std::size_t out = profile_.decoder_fc_widths[i];
      dec_.template emplace<nn::Dense<S>>("dec.fc" + std::to_string(i), in, out);
      dec_.template emplace<nn::ReLU<S>>();
      in = out;
    }
    dec_.template emplace<nn::Dense<S>>("dec.out", in, 3);
    dec_.template emplace<nn::Tanh<S>>();
  }

  LatentCodeT<S> latent_from(const Tensor<S>& t) {
    return {std::vector<S>(t.data(), t.data() + t.size()), profile_.kind};
  }

  Tensor<S> latent_to_tensor(const LatentCodeT<S>& z) const {
    Tensor<S> x({1, z.dim()});
    std::copy(z.values.begin(), z.values.end(), x.data());
    return x;
  }

  void require_latent(const LatentCodeT<S>& z, PriorKind want) const {
    if (profile_.kind != want || z.kind != profile_.kind)
      throw InvalidInputError("decode: latent kind mismatch");
    if (z.dim() != profile_.latent_dim)
      throw InvalidInputError("decode: latent has dim " + std::to_string(z.dim()) +
                              ", expected " + std::to_string(profile_.latent_dim));
    if (!z.all_finite()) throw InvalidInputError("decode: non-finite latent");
  }

  PriorProfile profile_;
  nn::Sequential<S> enc_;
  nn::Sequential<S> dec_;
  nn::PointMaxPool<S>* pool_ = nullptr;
  bool frozen_ = false;
  std::uint64_t checksum_ = 0;
};

using ShapeAutoencoder = ShapeAutoencoderT<float>;

/// Mean squared occupancy error between two grids of equal resolution.
inline double voxel_occupancy_loss(const VoxelGrid& pred, const VoxelGrid& target) {
  if (pred.resolution() != target.resolution())
    throw InvalidInputError("voxel loss: resolution mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.cell_count(); ++i) {
    const double d =
        static_cast<double>(pred.values()[i]) - static_cast<double>(target.values()[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(pred.cell_count());
}

/// Chamfer loss (mean Euclidean nearest-neighbour distance, both directions)
/// between predicted rows (n, 3) and a target cloud. When dpred is given the
/// gradient w.r.t. the predictions is accumulated into it; coincident pairs
/// contribute zero.
template <class S>
double chamfer_loss_grad(const Tensor<S>& pred, const PointCloud& target,
                         Tensor<S>* dpred) {
  if (pred.rank() != 2 || pred.dim(1) != 3)
    throw InvalidInputError("chamfer loss: predictions must be (n, 3)");
  if (pred.dim(0) == 0) throw InvalidInputError("chamfer loss: no predictions");
  if (target.empty()) throw InvalidInputError("chamfer loss: empty target");
  const std::size_t np = pred.dim(0);
  const std::size_t nt = target.count();

  std::vector<Point3> p(np);
  for (std::size_t i = 0; i < np; ++i)
    for (std::size_t a = 0; a < 3; ++a)
      p[i][a] = static_cast<double>(pred.data()[i * 3 + a]);

  const KdTree3 target_tree(target.points);
  const KdTree3 pred_tree(p);

  double acc = 0.0;
  for (std::size_t i = 0; i < np; ++i) {
    const auto near = target_tree.nearest(p[i]);
    const double dist = std::sqrt(near.squared_dist);
    acc += dist / static_cast<double>(np);
    if (dpred != nullptr && dist > 0.0) {
      const Point3& q = target.points[near.index];
      for (std::size_t a = 0; a < 3; ++a)
        dpred->data()[i * 3 + a] +=
            static_cast<S>((p[i][a] - q[a]) / (dist * static_cast<double>(np)));
    }
  }
  for (std::size_t j = 0; j < nt; ++j) {
    const auto near = pred_tree.nearest(target.points[j]);
    const double dist = std::sqrt(near.squared_dist);
    acc += dist / static_cast<double>(nt);
    if (dpred != nullptr && dist > 0.0) {
      const std::size_t i = near.index;
      for (std::size_t a = 0; a < 3; ++a)
        dpred->data()[i * 3 + a] += static_cast<S>(
            (p[i][a] - target.points[j][a]) / (dist * static_cast<double>(nt)));
    }
  }
  return acc;
}

/// Trailing-window means; the window is truncated at the start of the curve.
inline std::vector<double> smooth_curve(const std::vector<double>& xs,
                                        std::size_t window) {
  if (window == 0) throw InvalidInputError("smooth_curve: window must be positive");
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
    double acc = 0.0;
    for (std::size_t k = lo; k <= i; ++k) acc += xs[k];
    out[i] = acc / static_cast<double>(i + 1 - lo);
  }
  return out;
}

struct PriorTrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  std::size_t max_epochs = 200;

  // Stop once the smoothed epoch loss improves by less than
  // stop_rel_improvement over the last stop_window epochs.
  std::size_t smooth_window = 5;
  std::size_t stop_window = 10;
  double stop_rel_improvement = 0.005;

  std::uint64_t seed = 0;

  // Resume support. Batch order is derived from (seed, epoch index), so a
  // resumed run replays the exact schedule of an uninterrupted one.
  std::size_t start_epoch = 0;
  std::vector<double> resume_losses;
  std::vector<unsigned char> resume_adam_state;

  std::function<void(std::size_t epoch, double loss)> on_epoch;
  std::size_t checkpoint_every = 0;  // epochs; 0 disables
  std::function<void(std::size_t epochs_done, const std::vector<double>& losses,
                     const std::vector<unsigned char>& adam_state)>
      on_checkpoint;
};

struct PriorTrainResult {
  std::vector<double> epoch_losses;
  std::size_t epochs = 0;
  std::size_t steps = 0;
  bool stopped_early = false;
  std::vector<unsigned char> adam_state;
};

namespace detail {

template <class S, class StepFn>
PriorTrainResult prior_epoch_driver(ShapeAutoencoderT<S>& ae, std::size_t n,
                                    const PriorTrainConfig& cfg, StepFn step) {
  if (ae.frozen()) throw Error("train_prior: autoencoder is frozen");
  if (n == 0) throw InvalidInputError("train_prior: no training shapes");
  if (cfg.batch_size == 0) throw ConfigError("train_prior: batch_size must be positive");
  if (cfg.max_epochs == 0) throw ConfigError("train_prior: max_epochs must be positive");
  if (cfg.smooth_window == 0 || cfg.stop_window == 0)
    throw ConfigError("train_prior: smoothing/stop windows must be positive");

  nn::Adam<S> opt(ae.params(), cfg.learning_rate);
  if (!cfg.resume_adam_state.empty()) opt.restore_state(cfg.resume_adam_state);

  PriorTrainResult res;
  res.epoch_losses = cfg.resume_losses;
  std::vector<std::size_t> idx(n);

  for (std::size_t epoch = cfg.start_epoch; epoch < cfg.max_epochs; ++epoch) {
    // The order must be a function of (seed, epoch) alone so a resumed run
    // replays the same schedule; never let one epoch's shuffle leak into the
    // next.
    std::iota(idx.begin(), idx.end(), 0);
    RandomStream order(
        RandomStream::derive_seed(cfg.seed, "prior.train.order." + std::to_string(epoch)));
    order.shuffle(idx);

    double acc = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, n - start);
      opt.zero_grad();
      const double batch_loss = step(idx, start, count);
      if (!std::isfinite(batch_loss))
        throw DivergenceError("training diverged: epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(res.steps) + ", loss " +
                              std::to_string(batch_loss));
      opt.step();
      acc += batch_loss * static_cast<double>(count);
      ++res.steps;
    }
    // The loss alone can look healthy while weights rot: a ReLU maps a NaN
    // pre-activation to zero, hiding the poisoned parameter downstream.
    for (const auto* p : ae.params())
      if (!p->value.all_finite())
        throw DivergenceError("training diverged: epoch " + std::to_string(epoch) +
                              ", non-finite parameter " + p->name);
    res.epoch_losses.push_back(acc / static_cast<double>(n));
    if (cfg.on_epoch) cfg.on_epoch(epoch, res.epoch_losses.back());
    if (cfg.checkpoint_every != 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        cfg.on_checkpoint)
      cfg.on_checkpoint(epoch + 1, res.epoch_losses, opt.serialize_state());

    const std::size_t t = res.epoch_losses.size();
    if (t >= cfg.smooth_window + cfg.stop_window) {
      const auto sm = smooth_curve(res.epoch_losses, cfg.smooth_window);
      const double before = sm[t - 1 - cfg.stop_window];
      const double now = sm[t - 1];
      const double denom = std::max(std::abs(before), 1e-300);
      if ((before - now) / denom < cfg.stop_rel_improvement) {
        res.stopped_early = true;
        break;
      }
    }
  }
  res.epochs = res.epoch_losses.size();
  res.adam_state = opt.serialize_state();
  return res;
}

}  // namespace detail

template <class S>
PriorTrainResult train_prior(ShapeAutoencoderT<S>& ae, const std::vector<VoxelGrid>& shapes,
                             const PriorTrainConfig& cfg) {
  if (ae.kind() != PriorKind::kVoxel)
    throw InvalidInputError("train_prior: voxel shapes into a point-cloud autoencoder");
  const std::size_t d = ae.profile().resolution;
  for (const auto& g : shapes)
    if (g.resolution() != d)
      throw InvalidInputError("train_prior: grid resolution mismatch");
  const std::size_t cells = d * d * d;

  auto step = [&](const std::vector<std::size_t>& idx, std::size_t start,
                  std::size_t count) {
    Tensor<S> x({count, 1, d, d, d});
    for (std::size_t b = 0; b < count; ++b) {
      const auto& v = shapes[idx[start + b]].values();
      S* dst = x.data() + b * cells;
      for (std::size_t i = 0; i < cells; ++i) dst[i] = static_cast<S>(v[i]);
    }
    Tensor<S> pred = ae.decoder().forward(ae.encoder().forward(x, true), true);
    Tensor<S> dpred(pred.shape());
    const double denom = static_cast<double>(count) * static_cast<double>(cells);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double diff =
          static_cast<double>(pred.data()[i]) - static_cast<double>(x.data()[i]);
      acc += diff * diff;
      dpred.data()[i] = static_cast<S>(2.0 * diff / denom);
    }
    ae.encoder().backward(ae.decoder().backward(dpred));
    return acc / denom;
  };
  return detail::prior_epoch_driver(ae, shapes.size(), cfg, step);
}

template <class S>
PriorTrainResult train_prior(ShapeAutoencoderT<S>& ae, const std::vector<PointCloud>& shapes,
                             const PriorTrainConfig& cfg) {
  if (ae.kind() != PriorKind::kPointCloud)
    throw InvalidInputError("train_prior: point clouds into a voxel autoencoder");
  if (shapes.empty()) throw InvalidInputError("train_prior: no training shapes");
  const std::size_t n_in = shapes.front().count();
  for (const auto& c : shapes) {
    if (c.count() != n_in)
      throw InvalidInputError("train_prior: clouds must share a point count");
    if (c.empty() || !c.all_finite())
      throw InvalidInputError("train_prior: empty or non-finite cloud");
  }
  const std::size_t n_dec = ae.profile().decode_points;

  auto step = [&](const std::vector<std::size_t>& idx, std::size_t start,
                  std::size_t count) {
    ae.set_point_group(n_in);
    Tensor<S> x({count * n_in, 3});
    for (std::size_t b = 0; b < count; ++b) {
      const auto& pts = shapes[idx[start + b]].points;
      for (std::size_t i = 0; i < n_in; ++i)
        for (std::size_t a = 0; a < 3; ++a)
          x.data()[(b * n_in + i) * 3 + a] = static_cast<S>(pts[i][a]);
    }
    Tensor<S> pred = ae.decoder().forward(ae.encoder().forward(x, true), true);
    Tensor<S> dpred(pred.shape());
    double acc = 0.0;
    for (std::size_t b = 0; b < count; ++b) {
      Tensor<S> pb({n_dec, 3});
      std::copy(pred.data() + b * n_dec * 3, pred.data() + (b + 1) * n_dec * 3,
                pb.data());
      Tensor<S> db({n_dec, 3});
      acc += chamfer_loss_grad(pb, shapes[idx[start + b]], &db) /
             static_cast<double>(count);
      for (std::size_t i = 0; i < n_dec * 3; ++i)
        dpred.data()[b * n_dec * 3 + i] =
            static_cast<S>(static_cast<double>(db.data()[i]) / count);
    }
    ae.encoder().backward(ae.decoder().backward(dpred));
    return acc;
  };
  return detail::prior_epoch_driver(ae, shapes.size(), cfg, step);
}

}  // namespace darec

#endif  // DAREC_SHAPE_PRIOR_HPP_
