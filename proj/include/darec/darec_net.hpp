#ifndef DAREC_DAREC_NET_HPP_
#define DAREC_DAREC_NET_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "darec/checkpoint.hpp"
#include "darec/image.hpp"
#include "darec/nn/layers.hpp"
#include "darec/resnet.hpp"
#include "darec/shape_prior.hpp"
#include "darec/synthdata.hpp"

namespace darec {

// ---------------------------------------------------------------------------
// Profiles and weights
// ---------------------------------------------------------------------------

enum class BackboneKind { kSmallCnn, kResidual50 };

inline const char* backbone_kind_name(BackboneKind k) {
  return k == BackboneKind::kSmallCnn ? "small_cnn" : "residual50";
}

inline BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "small_cnn") return BackboneKind::kSmallCnn;
  if (s == "residual50") return BackboneKind::kResidual50;
  throw ConfigError("unknown backbone kind '" + s + "'");
}

/// Balance weights for the two adversarial terms. Both sides of each term
/// are scaled by the same weight, so a zero weight removes the term (and its
/// head's training) from the objective entirely.
struct LossWeights {
  double lambda_img = 0.001;
  double lambda_shape = 0.001;

  static LossWeights defaults_for(PriorKind kind) {
    if (kind == PriorKind::kPointCloud) return {0.01, 0.01};
    return {0.001, 0.001};
  }

  nlohmann::json to_json() const {
    return {{"lambda_img", lambda_img}, {"lambda_shape", lambda_shape}};
  }
  static LossWeights from_json(const nlohmann::json& j) {
    LossWeights w;
    w.lambda_img = j.at("lambda_img").get<double>();
    w.lambda_shape = j.at("lambda_shape").get<double>();
    if (w.lambda_img < 0.0 || w.lambda_shape < 0.0)
      throw ConfigError("loss weights must be nonnegative");
    return w;
  }
};

struct EncoderProfile {
  BackboneKind backbone = BackboneKind::kSmallCnn;
  std::size_t image_size = 64;
  std::size_t latent_dim = 256;
  // Small-CNN stage widths; one stride-2 stage per entry. Ignored by the
  // residual backbone, whose shape is fixed.
  std::vector<std::size_t> conv_widths = {32, 64, 128, 256};

  static EncoderProfile small_full() { return {}; }

  static EncoderProfile small_toy() {
    EncoderProfile p;
    p.latent_dim = 64;
    p.conv_widths = {16, 32, 64, 128};
    return p;
  }

  static EncoderProfile residual_full() {
    EncoderProfile p;
    p.backbone = BackboneKind::kResidual50;
    p.image_size = 224;
    return p;
  }

  void validate() const {
    if (latent_dim == 0) throw ConfigError("encoder profile: latent_dim must be positive");
    if (backbone == BackboneKind::kSmallCnn) {
      if (conv_widths.empty())
        throw ConfigError("encoder profile: small CNN needs at least one stage");
      const std::size_t factor = std::size_t(1) << conv_widths.size();
      if (image_size < factor || image_size % factor != 0)
        throw ConfigError("encoder profile: image size must be a positive multiple of " +
                          std::to_string(factor));
    } else {
      if (image_size < 32 || image_size % 32 != 0)
        throw ConfigError("encoder profile: residual backbone needs a multiple of 32");
    }
  }

  nlohmann::json to_json() const {
    return {{"backbone", backbone_kind_name(backbone)},
            {"image_size", image_size},
            {"latent_dim", latent_dim},
            {"conv_widths", conv_widths}};
  }
  static EncoderProfile from_json(const nlohmann::json& j) {
    EncoderProfile p;
    p.backbone = parse_backbone_kind(j.at("backbone").get<std::string>());
    p.image_size = j.at("image_size").get<std::size_t>();
    p.latent_dim = j.at("latent_dim").get<std::size_t>();
    p.conv_widths = j.at("conv_widths").get<std::vector<std::size_t>>();
    p.validate();
    return p;
  }
};

// ---------------------------------------------------------------------------
// Batch packing
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> pack_images(const std::vector<const Image*>& imgs, std::size_t expect_size) {
  if (imgs.empty()) return Tensor<S>();
  Tensor<S> out({imgs.size(), 3, expect_size, expect_size});
  S* dst = out.data();
  for (const Image* img : imgs) {
    if (img->height() != expect_size || img->width() != expect_size)
      throw InvalidInputError("pack_images: image is " + std::to_string(img->height()) +
                              "x" + std::to_string(img->width()) + ", expected " +
                              std::to_string(expect_size));
    for (float v : img->pixels()) *dst++ = static_cast<S>(v);
  }
  return out;
}

template <class S>
Tensor<S> pack_voxel_grids(const std::vector<const VoxelGrid*>& grids,
                           std::size_t resolution) {
  if (grids.empty()) return Tensor<S>();
  Tensor<S> out({grids.size(), 1, resolution, resolution, resolution});
  S* dst = out.data();
  for (const VoxelGrid* g : grids) {
    if (g->resolution() != resolution)
      throw InvalidInputError("pack_voxel_grids: resolution mismatch");
    for (float v : g->values()) *dst++ = static_cast<S>(v);
  }
  return out;
}

namespace detail {

template <class S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  std::vector<std::size_t> shape = a.shape();
  if (b.rank() != a.rank() ||
      !std::equal(shape.begin() + 1, shape.end(), b.shape().begin() + 1))
    throw InvalidInputError("concat_rows: trailing dimensions differ");
  shape[0] += b.dim(0);
  Tensor<S> out(std::move(shape));
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  return out;
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& t, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> shape = t.shape();
  const std::size_t row = t.size() / t.dim(0);
  shape[0] = end - begin;
  Tensor<S> out(std::move(shape));
  std::copy(t.data() + begin * row, t.data() + end * row, out.data());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Image encoder f
// ---------------------------------------------------------------------------

template <class S>
class ImageEncoderT {
 public:
  ImageEncoderT(EncoderProfile profile, std::uint64_t init_seed)
      : profile_(std::move(profile)) {
    profile_.validate();
    if (profile_.backbone == BackboneKind::kSmallCnn) {
      std::size_t in = 3;
      for (std::size_t i = 0; i < profile_.conv_widths.size(); ++i) {
        net_.template emplace<nn::Conv2d<S>>("enc.conv" + std::to_string(i), in,
                                             profile_.conv_widths[i], 3, 2, 1);
        net_.template emplace<nn::ReLU<S>>();
        in = profile_.conv_widths[i];
      }
      net_.template emplace<nn::GlobalAvgPool2d<S>>();
      net_.template emplace<nn::Dense<S>>("head", in, profile_.latent_dim);
    } else {
      nn::build_residual50(net_, profile_.latent_dim);
    }
    RandomStream rng(RandomStream::derive_seed(init_seed, "stage2.init.encoder"));
    for (std::size_t i = 0; i < net_.layer_count(); ++i) {
      if (auto* d = dynamic_cast<nn::Dense<S>*>(&net_.layer(i))) d->init(rng);
      if (auto* c = dynamic_cast<nn::Conv2d<S>*>(&net_.layer(i))) c->init(rng);
      if (auto* b = dynamic_cast<nn::Bottleneck2d<S>*>(&net_.layer(i))) b->init(rng);
    }
  }

  const EncoderProfile& profile() const { return profile_; }
  nn::Sequential<S>& net() { return net_; }
  const nn::Sequential<S>& net() const { return net_; }
  std::vector<nn::Param<S>*> params() { return net_.params(); }

  Tensor<S> forward(const Tensor<S>& x, bool train) {
    if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != profile_.image_size ||
        x.dim(3) != profile_.image_size)
      throw InvalidInputError("image encoder: expected (N,3," +
                              std::to_string(profile_.image_size) + "," +
                              std::to_string(profile_.image_size) + ") input");
    return net_.forward(x, train);
  }

  Tensor<S> backward(const Tensor<S>& gcodes) { return net_.backward(gcodes); }

  /// Loads matching parameters by name from an external checkpoint,
  /// e.g. classification-pretrained backbone weights. Head parameters
  /// ("head.*") are left as-is when the checkpoint lacks them, mirroring
  /// classifier-head replacement. Every backbone parameter must be present.
  std::size_t load_backbone(const Checkpoint& ck) {
    std::size_t loaded = 0;
    for (auto* p : net_.params()) {
      const bool is_head = p->name.rfind("head.", 0) == 0;
      bool found = false;
      for (const auto& [name, values] : ck.params) {
        if (name != p->name) continue;
        if (values.size() != p->size())
          throw CheckpointError("backbone parameter '" + name + "' has " +
                                std::to_string(values.size()) + " values, expected " +
                                std::to_string(p->size()));
        for (std::size_t i = 0; i < values.size(); ++i)
          p->value.data()[i] = static_cast<S>(values[i]);
        found = true;
        ++loaded;
        break;
      }
      if (!found && !is_head)
        throw CheckpointError("backbone parameter '" + p->name +
                              "' missing from checkpoint");
    }
    return loaded;
  }

 private:
  EncoderProfile profile_;
  nn::Sequential<S> net_;
};

using ImageEncoder = ImageEncoderT<float>;

// ---------------------------------------------------------------------------
// Domain discriminator
// ---------------------------------------------------------------------------

template <class S>
class DiscriminatorT {
 public:
  DiscriminatorT(const std::string& name, std::size_t input_dim, std::size_t hidden,
                 std::uint64_t init_seed)
      : input_dim_(input_dim), hidden_(hidden) {
    net_.template emplace<nn::Dense<S>>(name + ".fc1", input_dim, hidden);
    net_.template emplace<nn::ReLU<S>>();
    net_.template emplace<nn::Dense<S>>(name + ".fc2", hidden, hidden);
    net_.template emplace<nn::ReLU<S>>();
    net_.template emplace<nn::Dense<S>>(name + ".out", hidden, 2);
    net_.template emplace<nn::Softmax<S>>();
    RandomStream rng(RandomStream::derive_seed(init_seed, "stage2.init." + name));
    for (std::size_t i = 0; i < net_.layer_count(); ++i)
      if (auto* d = dynamic_cast<nn::Dense<S>*>(&net_.layer(i))) d->init(rng);
  }

  std::size_t input_dim() const { return input_dim_; }
  std::size_t hidden() const { return hidden_; }
  nn::Sequential<S>& net() { return net_; }
  std::vector<nn::Param<S>*> params() { return net_.params(); }

  /// (B, input_dim) codes to (B, 2) class probabilities; column 0 is the
  /// positive class (image embedding), column 1 the other side.
  Tensor<S> forward(const Tensor<S>& codes, bool train) {
    if (codes.rank() != 2 || codes.dim(1) != input_dim_)
      throw InvalidInputError("discriminator: expected (N," +
                              std::to_string(input_dim_) + ") codes");
    return net_.forward(codes, train);
  }

  Tensor<S> backward(const Tensor<S>& dprobs) { return net_.backward(dprobs); }

 private:
  std::size_t input_dim_, hidden_;
  nn::Sequential<S> net_;
};

using Discriminator = DiscriminatorT<float>;

// ---------------------------------------------------------------------------
// Adversarial two-sided classification loss
// ---------------------------------------------------------------------------

/// Value and per-side terms of
///   -mean log probs[i, 0] over the first n_pos rows
///   -mean log probs[i, 1] over the remaining rows.
/// When dprobs is given it is seeded (scaled by weight) for a backward pass
/// through the softmax. Probabilities are floored at 1e-12 so a saturated
/// discriminator yields a large finite loss rather than infinity.
struct DomainLossTerms {
  double pos_term = 0.0;
  double neg_term = 0.0;
  double total = 0.0;
};

template <class S>
DomainLossTerms domain_confusion_loss(const Tensor<S>& probs, std::size_t n_pos,
                                      Tensor<S>* dprobs = nullptr,
                                      double weight = 1.0) {
  const std::size_t n = probs.dim(0);
  if (n_pos == 0 || n_pos >= n)
    throw InvalidInputError("domain loss: both sides of the batch must be non-empty");
  const std::size_t n_neg = n - n_pos;
  constexpr double kFloor = 1e-12;
  DomainLossTerms out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = i < n_pos;
    const double p = std::max(static_cast<double>(probs[i * 2 + (pos ? 0 : 1)]), kFloor);
    const double term = -std::log(p) / static_cast<double>(pos ? n_pos : n_neg);
    (pos ? out.pos_term : out.neg_term) += term;
    if (dprobs)
      (*dprobs)[i * 2 + (pos ? 0 : 1)] = static_cast<S>(
          -weight / (static_cast<double>(pos ? n_pos : n_neg) * p));
  }
  out.total = out.pos_term + out.neg_term;
  return out;
}

// ---------------------------------------------------------------------------
// Stage-2 model
// ---------------------------------------------------------------------------

template <class S>
struct Stage2BatchT {
  Tensor<S> rendered;                       // (Br,3,H,W), labeled
  Tensor<S> natural;                        // (Bn,3,H,W)
  Tensor<S> voxel_targets;                  // (Br,1,d,d,d), voxel profile
  std::vector<PointCloud> cloud_targets;    // point profile, Br entries
  Tensor<S> manifold_voxels;                // (Bm,1,d,d,d)
  std::vector<PointCloud> manifold_clouds;  // point profile, Bm entries
};

using Stage2Batch = Stage2BatchT<float>;

struct StepOptions {
  bool use_img = true;
  bool use_shape = true;
  // The shape-manifold term as written feeds only rendered-image embeddings;
  // this flag adds the natural ones to its image side.
  bool natural_in_shape = false;
  LossWeights weights;
};

struct StepLosses {
  double rec = 0.0;
  double img = 0.0;
  double shape = 0.0;
  double objective = 0.0;
};

/// Image-to-shape reconstruction model: encoder f into the frozen prior's
/// latent space, decoding through D*, with two domain discriminators coupled
/// by gradient reversal. The prior must outlive the model and stay frozen.
/// Training mutates layer caches, so a model instance is not concurrency-safe.
template <class S>
class Stage2ModelT {
 public:
  Stage2ModelT(EncoderProfile eprof, std::size_t disc_hidden,
               ShapeAutoencoderT<S>* prior, std::uint64_t init_seed)
      : encoder_(std::move(eprof), init_seed),
        disc_img_("disc_img", encoder_.profile().latent_dim, disc_hidden, init_seed),
        disc_shape_("disc_shape", encoder_.profile().latent_dim, disc_hidden, init_seed),
        grl_img_(S(1)),
        grl_shape_(S(1)),
        prior_(prior),
        disc_hidden_(disc_hidden) {
    if (!prior_) throw ConfigError("stage-2 model: missing shape prior");
    if (!prior_->frozen()) throw ConfigError("stage-2 model: shape prior must be frozen");
    if (prior_->latent_dim() != encoder_.profile().latent_dim)
      throw ConfigError("stage-2 model: encoder latent_dim " +
                        std::to_string(encoder_.profile().latent_dim) +
                        " != prior latent_dim " + std::to_string(prior_->latent_dim()));
  }

  Stage2ModelT(Stage2ModelT&&) = default;
  Stage2ModelT& operator=(Stage2ModelT&&) = default;

  ImageEncoderT<S>& encoder() { return encoder_; }
  DiscriminatorT<S>& disc_img() { return disc_img_; }
  DiscriminatorT<S>& disc_shape() { return disc_shape_; }
  ShapeAutoencoderT<S>& prior() { return *prior_; }
  const ShapeAutoencoderT<S>& prior() const { return *prior_; }
  PriorKind kind() const { return prior_->kind(); }

  /// Every stage-2 parameter (encoder and both discriminators); the frozen
  /// prior's parameters are deliberately absent.
  std::vector<nn::Param<S>*> params() {
    std::vector<nn::Param<S>*> out = encoder_.params();
    for (auto* p : disc_img_.params()) out.push_back(p);
    for (auto* p : disc_shape_.params()) out.push_back(p);
    return out;
  }

  void zero_grads() {
    for (auto* p : params()) p->grad.zero();
  }

  LatentCodeT<S> embed_image(const Image& img) {
    const Tensor<S> x = pack_images<S>({&img}, encoder_.profile().image_size);
    const Tensor<S> codes = encoder_.forward(x, false);
    LatentCodeT<S> z;
    z.kind = prior_->kind();
    z.values.assign(codes.data(), codes.data() + codes.size());
    if (!z.all_finite()) throw DivergenceError("embed_image: non-finite code");
    return z;
  }

  LatentCodeT<S> embed_image(const ImageSample& s) { return embed_image(s.image); }

  VoxelGrid reconstruct_voxels(const Image& img) {
    return prior_->decode_voxels(embed_image(img));
  }
  VoxelGrid reconstruct_voxels(const ImageSample& s) { return reconstruct_voxels(s.image); }

  PointCloud reconstruct_cloud(const Image& img) {
    return prior_->decode_cloud(embed_image(img));
  }
  PointCloud reconstruct_cloud(const ImageSample& s) { return reconstruct_cloud(s.image); }

  /// One training step's forward and backward passes: accumulates gradients
  /// for every stage-2 parameter (the caller owns the optimizer). The image
  /// encoder runs once over rendered and natural images together; each loss
  /// term contributes to the code gradients, the adversarial ones through
  /// gradient reversal, and a single encoder backward distributes them.
  StepLosses training_step(const Stage2BatchT<S>& batch, const StepOptions& opts) {
    return run_batch(batch, opts, true);
  }

  /// Loss values only, no gradient accumulation. train_mode selects
  /// batch-statistics normalization so values match what training_step
  /// differentiates.
  StepLosses compute_losses(const Stage2BatchT<S>& batch, const StepOptions& opts,
                            bool train_mode = false) {
    return run_batch(batch, opts, false, train_mode);
  }

  Checkpoint to_checkpoint(const std::string& prior_path) {
    Checkpoint ck;
    ck.meta["model"] = "darec_stage2";
    ck.meta["kind"] = prior_kind_name(prior_->kind());
    ck.meta["encoder_profile"] = encoder_.profile().to_json();
    ck.meta["disc_hidden"] = disc_hidden_;
    ck.meta["prior"] = {{"path", prior_path},
                        {"frozen_checksum", to_hex(prior_->frozen_checksum())}};
    export_params<S>(params(), ck);
    return ck;
  }

  static Stage2ModelT from_checkpoint(const Checkpoint& ck, ShapeAutoencoderT<S>* prior) {
    if (!ck.meta.contains("model") || ck.meta.at("model") != "darec_stage2")
      throw CheckpointError("checkpoint does not hold a stage-2 model");
    if (!prior || !prior->frozen())
      throw CheckpointError("stage-2 load needs the frozen shape prior");
    const std::string want = ck.meta.at("prior").at("frozen_checksum").get<std::string>();
    if (want != to_hex(prior->frozen_checksum()))
      throw CheckpointError("stage-2 checkpoint references a different frozen prior (" +
                            want + " != " + to_hex(prior->frozen_checksum()) + ")");
    if (ck.meta.at("kind").get<std::string>() != prior_kind_name(prior->kind()))
      throw CheckpointError("stage-2 checkpoint representation kind mismatch");
    Stage2ModelT model(EncoderProfile::from_json(ck.meta.at("encoder_profile")),
                       ck.meta.at("disc_hidden").get<std::size_t>(), prior, 0);
    import_params<S>(ck, model.params());
    return model;
  }

  static std::string prior_path_of(const Checkpoint& ck) {
    return ck.meta.at("prior").at("path").get<std::string>();
  }

 private:
  StepLosses run_batch(const Stage2BatchT<S>& batch, const StepOptions& opts,
                       bool with_grads, bool train_mode = true) {
    const bool train = with_grads || train_mode;
    const std::size_t br = batch.rendered.empty() ? 0 : batch.rendered.dim(0);
    const std::size_t bn = batch.natural.empty() ? 0 : batch.natural.dim(0);
    if (br == 0) throw InvalidInputError("training step: no labeled rendered samples");
    if (opts.use_img && bn == 0)
      throw InvalidInputError("image-domain loss: empty natural batch");
    validate_targets(batch, br);

    const Tensor<S> images = detail::concat_rows(batch.rendered, batch.natural);
    const Tensor<S> codes = encoder_.forward(images, train);
    Tensor<S> dcodes(codes.shape());

    StepLosses out;
    out.rec = reconstruction_term(codes, batch, br, with_grads ? &dcodes : nullptr);

    if (opts.use_img) {
      Tensor<S> dprobs(std::vector<std::size_t>{br + bn, 2});
      const Tensor<S> probs = disc_img_.forward(codes, train);
      const auto terms = domain_confusion_loss<S>(probs, br, with_grads ? &dprobs : nullptr,
                                                  opts.weights.lambda_img);
      out.img = terms.total;
      if (with_grads && opts.weights.lambda_img != 0.0) {
        const Tensor<S> dimg = grl_img_.backward(disc_img_.backward(dprobs));
        for (std::size_t i = 0; i < dcodes.size(); ++i) dcodes[i] += dimg[i];
      }
    }

    if (opts.use_shape) {
      out.shape = shape_term(codes, batch, br, bn, opts, with_grads ? &dcodes : nullptr,
                             train);
    }

    if (with_grads) encoder_.backward(dcodes);
    out.objective = out.rec - opts.weights.lambda_img * out.img -
                    opts.weights.lambda_shape * out.shape;
    return out;
  }

  void validate_targets(const Stage2BatchT<S>& batch, std::size_t br) const {
    if (prior_->kind() == PriorKind::kVoxel) {
      if (batch.voxel_targets.empty() || batch.voxel_targets.dim(0) != br)
        throw InvalidInputError("training step: need one voxel target per rendered image");
    } else {
      if (batch.cloud_targets.size() != br)
        throw InvalidInputError("training step: need one cloud target per rendered image");
    }
  }

  double reconstruction_term(const Tensor<S>& codes, const Stage2BatchT<S>& batch,
                             std::size_t br, Tensor<S>* dcodes) {
    const Tensor<S> rcodes = detail::slice_rows(codes, 0, br);
    Tensor<S> pred = prior_->decoder().forward(rcodes, dcodes != nullptr);
    double loss = 0.0;
    Tensor<S> dpred(pred.shape());
    if (prior_->kind() == PriorKind::kVoxel) {
      const std::size_t cells = pred.size() / br;
      const double scale = 1.0 / static_cast<double>(br * cells);
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const double diff =
            static_cast<double>(pred[i]) - static_cast<double>(batch.voxel_targets[i]);
        loss += diff * diff * scale;
        dpred[i] = static_cast<S>(2.0 * diff * scale);
      }
    } else {
      const std::size_t n_dec = pred.dim(0) / br;
      for (std::size_t s = 0; s < br; ++s) {
        Tensor<S> slice({n_dec, 3});
        std::copy(pred.data() + s * n_dec * 3, pred.data() + (s + 1) * n_dec * 3,
                  slice.data());
        Tensor<S> dslice(slice.shape());
        loss += chamfer_loss_grad<S>(slice, batch.cloud_targets[s],
                                     dcodes ? &dslice : nullptr) /
                static_cast<double>(br);
        if (dcodes)
          for (std::size_t i = 0; i < dslice.size(); ++i)
            dpred[s * n_dec * 3 + i] = dslice[i] / static_cast<S>(br);
      }
    }
    if (dcodes) {
      const Tensor<S> drec = prior_->decoder().backward(dpred);
      for (std::size_t i = 0; i < drec.size(); ++i) (*dcodes)[i] += drec[i];
    }
    return loss;
  }

  double shape_term(const Tensor<S>& codes, const Stage2BatchT<S>& batch, std::size_t br,
                    std::size_t bn, const StepOptions& opts, Tensor<S>* dcodes,
                    bool train) {
    const std::size_t bi = opts.natural_in_shape ? br + bn : br;
    const Tensor<S> image_side = detail::slice_rows(codes, 0, bi);
    const Tensor<S> manifold = encode_manifold(batch);
    if (manifold.empty())
      throw InvalidInputError("shape-manifold loss: empty shape batch");
    const Tensor<S> both = detail::concat_rows(image_side, manifold);
    const Tensor<S> probs = disc_shape_.forward(both, train);
    Tensor<S> dprobs(probs.shape());
    const auto terms = domain_confusion_loss<S>(probs, bi, dcodes ? &dprobs : nullptr,
                                                opts.weights.lambda_shape);
    if (dcodes && opts.weights.lambda_shape != 0.0) {
      const Tensor<S> dall = disc_shape_.backward(dprobs);
      // Manifold rows come from the frozen encoder; their input gradients
      // are dropped, matching the no-gradient-to-E* contract.
      const Tensor<S> dimage =
          grl_shape_.backward(detail::slice_rows(dall, 0, bi));
      for (std::size_t i = 0; i < dimage.size(); ++i) (*dcodes)[i] += dimage[i];
    }
    return terms.total;
  }

  Tensor<S> encode_manifold(const Stage2BatchT<S>& batch) {
    if (prior_->kind() == PriorKind::kVoxel) {
      if (batch.manifold_voxels.empty()) return Tensor<S>();
      return prior_->encoder().forward(batch.manifold_voxels, false);
    }
    if (batch.manifold_clouds.empty()) return Tensor<S>();
    const std::size_t n_in = batch.manifold_clouds.front().count();
    Tensor<S> pts({batch.manifold_clouds.size() * n_in, 3});
    S* dst = pts.data();
    for (const PointCloud& c : batch.manifold_clouds) {
      if (c.count() != n_in)
        throw InvalidInputError("shape-manifold loss: clouds must have uniform size");
      for (const auto& p : c.points)
        for (double v : p) *dst++ = static_cast<S>(v);
    }
    prior_->set_point_group(n_in);
    return prior_->encoder().forward(pts, false);
  }

  ImageEncoderT<S> encoder_;
  DiscriminatorT<S> disc_img_;
  DiscriminatorT<S> disc_shape_;
  nn::GradientReversal<S> grl_img_, grl_shape_;
  ShapeAutoencoderT<S>* prior_;
  std::size_t disc_hidden_;
};

using Stage2Model = Stage2ModelT<float>;

}  // namespace darec

#endif  // DAREC_DAREC_NET_HPP_
