#ifndef DAREC_TRAINER_HPP_
#define DAREC_TRAINER_HPP_

// Two-stage experiment driver. Stage 1 fits the shape autoencoder on the
// labeled shape set and freezes it; stage 2 trains the image encoder against
// the frozen manifold under the configured loss switches, evaluating held-out
// splits at a fixed cadence. Runs append line-delimited JSON records so two
// runs can be compared event by event.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "darec/checkpoint.hpp"
#include "darec/common.hpp"
#include "darec/config.hpp"
#include "darec/darec_net.hpp"
#include "darec/geometry.hpp"
#include "darec/nn/adam.hpp"
#include "darec/rng.hpp"
#include "darec/shape_prior.hpp"
#include "darec/synthdata.hpp"

namespace darec {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// One document drives both stages plus the ablation grid. Zero / empty /
/// negative-one fields mean "use the profile or representation default"; the
/// resolved_* accessors apply those defaults. Serialization round-trips
/// losslessly, sentinels included.
struct ExperimentConfig {
  PriorKind kind = PriorKind::kVoxel;
  std::string profile = "toy";  // "toy" | "full" (reference-scale widths)
  std::string data_dir;         // dataset root produced by build_dataset
  std::string out_dir = "run";
  std::uint64_t seed = 0;

  // stage 1
  std::int64_t stage1_epochs = 0;  // 0: default 200, early stopping applies
  std::int64_t stage1_batch = 16;
  double stage1_lr = 0.0;  // 0: representation default
  std::int64_t stage1_checkpoint_every = 25;  // epochs between resume points

  // stage 2
  std::int64_t stage2_steps = 0;   // 0: profile default
  std::int64_t stage2_batch = 16;  // per-domain sub-batch size
  double stage2_lr = 0.0;          // 0: representation default
  double lambda_img = -1.0;        // <0: representation default
  double lambda_shape = -1.0;
  bool use_img = true;
  bool use_shape = true;
  bool natural_in_shape = false;
  std::int64_t eval_every = 0;  // steps between held-out evals; 0: default
  std::int64_t eval_limit = 0;  // cap samples per eval split; 0: all

  // architecture overrides; zero / empty means profile default
  std::string backbone;  // "small_cnn" | "residual50"
  std::int64_t latent_dim = 0;
  std::int64_t disc_hidden = 0;
  std::int64_t decode_points = 0;

  std::int64_t ablation_seeds = 3;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  bool toy() const { return profile == "toy"; }

  double resolved_stage1_lr() const {
    if (stage1_lr > 0.0) return stage1_lr;
    return kind == PriorKind::kVoxel ? 1e-4 : 1e-5;
  }
  double resolved_stage2_lr() const {
    if (stage2_lr > 0.0) return stage2_lr;
    return kind == PriorKind::kVoxel ? 1e-4 : 1e-5;
  }
  std::size_t resolved_stage1_epochs() const {
    return stage1_epochs > 0 ? static_cast<std::size_t>(stage1_epochs) : 200;
  }
  std::size_t resolved_stage2_steps() const {
    if (stage2_steps > 0) return static_cast<std::size_t>(stage2_steps);
    return toy() ? 5000 : 50000;
  }
  std::size_t resolved_eval_every() const {
    if (eval_every > 0) return static_cast<std::size_t>(eval_every);
    return toy() ? 500 : 2500;
  }
  std::size_t resolved_disc_hidden() const {
    if (disc_hidden > 0) return static_cast<std::size_t>(disc_hidden);
    return toy() ? 128 : 1024;
  }

  LossWeights resolved_weights() const {
    LossWeights w = LossWeights::defaults_for(kind);
    if (lambda_img >= 0.0) w.lambda_img = lambda_img;
    if (lambda_shape >= 0.0) w.lambda_shape = lambda_shape;
    return w;
  }

  StepOptions step_options() const {
    StepOptions o;
    o.use_img = use_img;
    o.use_shape = use_shape;
    o.natural_in_shape = natural_in_shape;
    o.weights = resolved_weights();
    return o;
  }

  /// Prior architecture, bound to the dataset's grid resolution.
  PriorProfile prior_profile(const DatasetSpec& data) const {
    PriorProfile p;
    if (kind == PriorKind::kVoxel)
      p = toy() ? PriorProfile::voxel_toy() : PriorProfile::voxel_full();
    else
      p = toy() ? PriorProfile::point_toy() : PriorProfile::point_full();
    if (kind == PriorKind::kVoxel)
      p.resolution = static_cast<std::size_t>(data.resolution);
    if (latent_dim > 0) {
      p.latent_dim = static_cast<std::size_t>(latent_dim);
      if (kind == PriorKind::kPointCloud)
        p.point_mlp_widths.back() = p.latent_dim;
    }
    if (decode_points > 0) p.decode_points = static_cast<std::size_t>(decode_points);
    p.validate();
    return p;
  }

  /// Image encoder matching the prior's latent width and the dataset's
  /// image size.
  EncoderProfile encoder_profile(const DatasetSpec& data) const {
    const BackboneKind bk = backbone.empty()
                                ? (toy() ? BackboneKind::kSmallCnn : BackboneKind::kResidual50)
                                : parse_backbone_kind(backbone);
    EncoderProfile e;
    if (bk == BackboneKind::kResidual50)
      e = EncoderProfile::residual_full();
    else
      e = toy() ? EncoderProfile::small_toy() : EncoderProfile::small_full();
    e.image_size = static_cast<std::size_t>(data.image_size);
    e.latent_dim = prior_profile(data).latent_dim;
    e.validate();
    return e;
  }

  void validate() const {
    if (profile != "toy" && profile != "full")
      throw ConfigError("experiment config: profile must be 'toy' or 'full', got '" +
                        profile + "'");
    if (data_dir.empty())
      throw ConfigError("experiment config: 'data' (dataset root) is required");
    if (stage1_batch <= 0 || stage2_batch <= 0)
      throw ConfigError("experiment config: batch sizes must be positive");
    if (stage1_epochs < 0 || stage2_steps < 0 || eval_every < 0 || eval_limit < 0 ||
        stage1_checkpoint_every < 0 || latent_dim < 0 || disc_hidden < 0 ||
        decode_points < 0)
      throw ConfigError("experiment config: counts must be non-negative");
    if (stage1_lr < 0.0 || stage2_lr < 0.0)
      throw ConfigError("experiment config: learning rates must be non-negative");
    if ((lambda_img < 0.0 && lambda_img != -1.0) ||
        (lambda_shape < 0.0 && lambda_shape != -1.0))
      throw ConfigError("experiment config: loss weights must be non-negative");
    if (ablation_seeds <= 0)
      throw ConfigError("experiment config: ablation_seeds must be positive");
    if (!backbone.empty()) parse_backbone_kind(backbone);
  }

  static ExperimentConfig from_doc(ConfigDoc& doc, const std::string& origin) {
    ExperimentConfig c;
    c.kind = parse_prior_kind(doc.get_string("kind", prior_kind_name(c.kind)));
    c.profile = doc.get_string("profile", c.profile);
    c.data_dir = doc.get_string("data", "");
    c.out_dir = doc.get_string("out", c.out_dir);
    c.seed = static_cast<std::uint64_t>(doc.get_int("seed", 0));

    c.stage1_epochs = doc.get_int("stage1_epochs", c.stage1_epochs);
    c.stage1_batch = doc.get_int("stage1_batch", c.stage1_batch);
    c.stage1_lr = doc.get_double("stage1_lr", c.stage1_lr);
    c.stage1_checkpoint_every =
        doc.get_int("stage1_checkpoint_every", c.stage1_checkpoint_every);

    c.stage2_steps = doc.get_int("stage2_steps", c.stage2_steps);
    c.stage2_batch = doc.get_int("stage2_batch", c.stage2_batch);
    c.stage2_lr = doc.get_double("stage2_lr", c.stage2_lr);
    if (doc.has("lambda_img")) c.lambda_img = doc.get_double("lambda_img");
    if (doc.has("lambda_shape")) c.lambda_shape = doc.get_double("lambda_shape");

    // The reconstruction term is never ablated; the key is accepted so a
    // switch table can be written out in full, but only as 'true'.
    if (doc.has("use_rec") && !doc.get_bool("use_rec"))
      throw ConfigError(origin + ": the reconstruction term cannot be switched off");
    c.use_img = doc.get_bool("use_img", c.use_img);
    c.use_shape = doc.get_bool("use_shape", c.use_shape);
    c.natural_in_shape = doc.get_bool("natural_in_shape", c.natural_in_shape);
    c.eval_every = doc.get_int("eval_every", c.eval_every);
    c.eval_limit = doc.get_int("eval_limit", c.eval_limit);

    c.backbone = doc.get_string("backbone", "");
    c.latent_dim = doc.get_int("latent_dim", c.latent_dim);
    c.disc_hidden = doc.get_int("disc_hidden", c.disc_hidden);
    c.decode_points = doc.get_int("decode_points", c.decode_points);
    c.ablation_seeds = doc.get_int("ablation_seeds", c.ablation_seeds);

    doc.reject_unknown_keys(origin);
    c.validate();
    return c;
  }

  void to_doc(ConfigWriter& w) const {
    w.put("kind", prior_kind_name(kind));
    w.put("profile", profile);
    w.put("data", data_dir);
    w.put("out", out_dir);
    w.put("seed", static_cast<std::int64_t>(seed));
    w.put("stage1_epochs", stage1_epochs);
    w.put("stage1_batch", stage1_batch);
    w.put("stage1_lr", stage1_lr);
    w.put("stage1_checkpoint_every", stage1_checkpoint_every);
    w.put("stage2_steps", stage2_steps);
    w.put("stage2_batch", stage2_batch);
    w.put("stage2_lr", stage2_lr);
    if (lambda_img >= 0.0) w.put("lambda_img", lambda_img);
    if (lambda_shape >= 0.0) w.put("lambda_shape", lambda_shape);
    w.put("use_img", use_img);
    w.put("use_shape", use_shape);
    w.put("natural_in_shape", natural_in_shape);
    w.put("eval_every", eval_every);
    w.put("eval_limit", eval_limit);
    if (!backbone.empty()) w.put("backbone", backbone);
    w.put("latent_dim", latent_dim);
    w.put("disc_hidden", disc_hidden);
    w.put("decode_points", decode_points);
    w.put("ablation_seeds", ablation_seeds);
  }

  std::string to_text() const {
    ConfigWriter w;
    to_doc(w);
    return w.str();
  }

  static ExperimentConfig from_text(const std::string& text,
                                    const std::string& origin = "<config>") {
    ConfigDoc doc = ConfigDoc::parse(text, origin);
    return from_doc(doc, origin);
  }

  static ExperimentConfig load(const std::string& path) {
    ConfigDoc doc = ConfigDoc::load(path);
    return from_doc(doc, path);
  }

  void save(const std::string& path) const {
    ConfigWriter w;
    to_doc(w);
    w.save(path);
  }
};

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

/// Append-only line-delimited JSON log. Events are whatever the caller puts
/// in; the drivers below emit config / epoch / step / checkpoint / eval /
/// done events. Wall-clock lives only under the keys "unix_time" and
/// "wall_seconds" so records of identical runs compare equal once those are
/// stripped.
class RunRecord {
 public:
  /// fresh=true truncates any previous file; a resumed run appends.
  explicit RunRecord(std::string path, bool fresh = true) : path_(std::move(path)) {
    if (fresh) {
      std::ofstream out(path_, std::ios::trunc);
      if (!out) throw IoError("cannot open run record: " + path_);
    }
  }

  const std::string& path() const { return path_; }

  void append(const nlohmann::json& event) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to run record: " + path_);
    out << event.dump() << "\n";
    if (!out) throw IoError("write failed: " + path_);
  }

  static std::vector<nlohmann::json> load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open run record: " + path);
    std::vector<nlohmann::json> events;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        events.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ":" + std::to_string(lineno) + ": bad record line: " +
                      e.what());
      }
    }
    return events;
  }

  /// Event-by-event equality modulo wall-clock fields.
  static bool equivalent(std::vector<nlohmann::json> a, std::vector<nlohmann::json> b) {
    auto strip = [](std::vector<nlohmann::json>& events) {
      for (auto& e : events) {
        e.erase("unix_time");
        e.erase("wall_seconds");
      }
    };
    strip(a);
    strip(b);
    return a == b;
  }

 private:
  std::string path_;
};

namespace detail {

inline std::string join_path(const std::string& a, const std::string& b) {
  return (std::filesystem::path(a) / b).string();
}

inline std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot hash: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  return to_hex(fnv1a64(bytes.data(), bytes.size()));
}

inline std::int64_t unix_now() {
  return std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline nlohmann::json config_event(const ExperimentConfig& cfg, const std::string& stage,
                                   const std::string& data_root) {
  nlohmann::json j;
  j["event"] = "config";
  j["stage"] = stage;
  j["config"] = cfg.to_text();
  j["library_version"] = kVersion;
  j["manifest_hash"] = file_hash_hex(join_path(data_root, "manifest.jsonl"));
  j["unix_time"] = unix_now();
  return j;
}

inline std::vector<unsigned char> doubles_to_bytes(const std::vector<double>& xs) {
  std::vector<unsigned char> out(xs.size() * sizeof(double));
  if (!xs.empty()) std::memcpy(out.data(), xs.data(), out.size());
  return out;
}

inline std::vector<double> bytes_to_doubles(const std::vector<unsigned char>& bytes) {
  if (bytes.size() % sizeof(double) != 0)
    throw CheckpointError("loss history blob has a truncated double");
  std::vector<double> out(bytes.size() / sizeof(double));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

inline const std::vector<unsigned char>* find_blob(const Checkpoint& ck,
                                                   const std::string& name) {
  for (const auto& [n, bytes] : ck.blobs)
    if (n == name) return &bytes;
  return nullptr;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

/// Chamfer score charged to a prediction whose thresholded grid is empty: the
/// diameter of the canonical frame, an upper bound on any real distance in
/// [-1,1]^3, so an all-empty model can never win selection while the split
/// mean stays defined.
inline constexpr double kEmptyPredictionChamfer = 3.4641016151377544;

/// Reconstruct-and-score over manifest rows. The supplier maps a row to a
/// predicted shape; ground truth comes from the dataset. Per-sample surface
/// sampling is seeded from (ecfg.seed, row id) alone, so a report depends
/// only on the checkpoint, the manifest, and ecfg.
template <class ReconstructFn>
MetricReport evaluate_split(Dataset& data, PriorKind kind,
                            const std::vector<const ManifestRow*>& rows,
                            ReconstructFn&& reconstruct, const EvalConfig& ecfg = {},
                            std::size_t limit = 0) {
  MetricReport report;
  const std::size_t n = limit == 0 ? rows.size() : std::min(limit, rows.size());
  for (std::size_t i = 0; i < n; ++i) {
    const ManifestRow& row = *rows[i];
    EvalConfig per = ecfg;
    per.seed = RandomStream::derive_seed(ecfg.seed, "eval." + row.id);
    const ShapeRep pred = reconstruct(row);
    if (kind == PriorKind::kVoxel) {
      const VoxelGrid& gt = data.voxels(row);
      try {
        const PairMetrics m = evaluate_pair(pred, ShapeRep(gt), per);
        report.add(row.id, m.iou, m.chamfer);
      } catch (const EmptyShapeError&) {
        report.add(row.id, voxel_iou(std::get<VoxelGrid>(pred), gt, per.threshold),
                   kEmptyPredictionChamfer);
      }
    } else {
      const PointCloud& gt = data.cloud(row);
      const PairMetrics m = evaluate_pair(pred, ShapeRep(gt), per);
      report.add(row.id, m.iou, m.chamfer);
    }
  }
  return report;
}

namespace detail {

template <class ModelT>
MetricReport evaluate_model(ModelT& model, Dataset& data,
                            const std::vector<const ManifestRow*>& rows,
                            const EvalConfig& ecfg, std::size_t limit) {
  return evaluate_split(data, model.kind(), rows,
                        [&](const ManifestRow& row) -> ShapeRep {
                          if (model.kind() == PriorKind::kVoxel)
                            return ShapeRep(model.reconstruct_voxels(data.image(row)));
                          return ShapeRep(model.reconstruct_cloud(data.image(row)));
                        },
                        ecfg, limit);
}

}  // namespace detail

/// Score a persisted stage-2 checkpoint on one (domain, split) of a dataset.
/// The prior is found through the path stored in the checkpoint unless
/// prior_path overrides it.
inline MetricReport evaluate_checkpoint(const std::string& ckpt_path,
                                        const std::string& data_dir, Domain domain,
                                        const std::string& split,
                                        const EvalConfig& ecfg = {},
                                        std::size_t limit = 0,
                                        const std::string& prior_path = "") {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const std::string pp = prior_path.empty() ? Stage2Model::prior_path_of(ck) : prior_path;
  ShapeAutoencoder prior = ShapeAutoencoder::load(pp);
  Stage2Model model = Stage2Model::from_checkpoint(ck, &prior);
  Dataset data = Dataset::open(data_dir);
  const auto rows = data.select(domain, split);
  if (rows.empty())
    throw InvalidInputError(std::string("evaluate_checkpoint: no rows for ") +
                            domain_name(domain) + "/" + split);
  return detail::evaluate_model(model, data, rows, ecfg, limit);
}

// ---------------------------------------------------------------------------
// Stage 1: fit and freeze the shape prior
// ---------------------------------------------------------------------------

struct Stage1Hooks {
  // Called after each epoch is logged; throwing aborts the run, which the
  // partial checkpoint then survives.
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

struct Stage1Result {
  std::string checkpoint_path;
  std::string record_path;
  PriorTrainResult train;  // empty when an existing checkpoint was reused
  bool resumed = false;
  bool reused = false;
};

/// Train the shape autoencoder on the labeled training shapes, freeze it and
/// persist it with the config echo. A partial checkpoint is written every
/// stage1_checkpoint_every epochs; rerunning after an interruption resumes
/// from it and replays the identical trajectory. A finished checkpoint
/// trained under the identical config is reused as is.
inline Stage1Result run_stage1(const ExperimentConfig& cfg, const Stage1Hooks& hooks = {}) {
  cfg.validate();
  Dataset data = Dataset::open(cfg.data_dir);
  const DatasetSpec spec = data.spec();
  std::filesystem::create_directories(cfg.out_dir);

  Stage1Result res;
  res.checkpoint_path = detail::join_path(cfg.out_dir, "prior.dckp");
  res.record_path = detail::join_path(cfg.out_dir, "stage1-record.jsonl");
  const std::string partial_path = detail::join_path(cfg.out_dir, "prior-partial.dckp");

  if (std::filesystem::exists(res.checkpoint_path)) {
    const Checkpoint ck = load_checkpoint(res.checkpoint_path);
    if (ck.meta.value("experiment_config", "") != cfg.to_text())
      throw ConfigError("run_stage1: " + res.checkpoint_path +
                        " was trained under a different config; use a fresh output "
                        "directory");
    res.reused = true;
    return res;
  }

  std::optional<Checkpoint> partial;
  if (std::filesystem::exists(partial_path)) {
    partial = load_checkpoint(partial_path);
    if (partial->meta.value("experiment_config", "") != cfg.to_text())
      throw ConfigError("run_stage1: " + partial_path +
                        " belongs to a run with a different config; use a fresh "
                        "output directory");
  }

  ShapeAutoencoder ae = partial ? ShapeAutoencoder::from_checkpoint(*partial)
                                : ShapeAutoencoder(cfg.prior_profile(spec), cfg.seed);

  PriorTrainConfig tc;
  tc.batch_size = static_cast<std::size_t>(cfg.stage1_batch);
  tc.learning_rate = cfg.resolved_stage1_lr();
  tc.max_epochs = cfg.resolved_stage1_epochs();
  tc.seed = cfg.seed;
  tc.checkpoint_every = static_cast<std::size_t>(cfg.stage1_checkpoint_every);
  if (partial) {
    tc.start_epoch = partial->meta.at("epochs_done").get<std::size_t>();
    const auto* losses = detail::find_blob(*partial, "epoch_losses");
    const auto* adam = detail::find_blob(*partial, "adam_state");
    if (losses == nullptr || adam == nullptr)
      throw CheckpointError("run_stage1: partial checkpoint lacks training state");
    tc.resume_losses = detail::bytes_to_doubles(*losses);
    tc.resume_adam_state = *adam;
    res.resumed = true;
  }

  RunRecord record(res.record_path, /*fresh=*/!res.resumed);
  record.append(detail::config_event(cfg, "prior", data.root()));

  tc.on_epoch = [&](std::size_t epoch, double loss) {
    record.append({{"event", "epoch"}, {"epoch", epoch}, {"loss", loss}});
    if (hooks.on_epoch) hooks.on_epoch(epoch, loss);
  };
  tc.on_checkpoint = [&](std::size_t epochs_done, const std::vector<double>& losses,
                         const std::vector<unsigned char>& adam_state) {
    Checkpoint ck = ae.to_checkpoint();
    ck.meta["experiment_config"] = cfg.to_text();
    ck.meta["epochs_done"] = epochs_done;
    ck.blobs.emplace_back("epoch_losses", detail::doubles_to_bytes(losses));
    ck.blobs.emplace_back("adam_state", adam_state);
    const std::string tmp = partial_path + ".tmp";
    save_checkpoint(ck, tmp);
    std::filesystem::rename(tmp, partial_path);
    record.append(
        {{"event", "checkpoint"}, {"epochs_done", epochs_done}, {"path", "prior-partial.dckp"}});
  };

  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = data.select(Domain::kRendered, "train");
  if (rows.empty())
    throw InvalidInputError("run_stage1: dataset has no labeled training shapes");

  if (cfg.kind == PriorKind::kVoxel) {
    std::vector<VoxelGrid> shapes;
    shapes.reserve(rows.size());
    for (const auto* row : rows) shapes.push_back(data.voxels(*row));
    res.train = train_prior(ae, shapes, tc);
  } else {
    std::vector<PointCloud> clouds;
    clouds.reserve(rows.size());
    for (const auto* row : rows) clouds.push_back(data.cloud(*row));
    res.train = train_prior(ae, clouds, tc);
  }

  ae.freeze();
  Checkpoint ck = ae.to_checkpoint();
  ck.meta["experiment_config"] = cfg.to_text();
  save_checkpoint(ck, res.checkpoint_path);
  std::error_code ec;
  std::filesystem::remove(partial_path, ec);

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record.append({{"event", "done"},
                 {"epochs", res.train.epochs},
                 {"steps", res.train.steps},
                 {"stopped_early", res.train.stopped_early},
                 {"checkpoint", "prior.dckp"},
                 {"final_loss", res.train.epoch_losses.back()},
                 {"wall_seconds", wall}});
  return res;
}

// ---------------------------------------------------------------------------
// Stage 2: adversarial reconstruction training
// ---------------------------------------------------------------------------

struct Stage2Hooks {
  std::function<void(std::size_t step, const StepLosses&)> on_step;
  std::function<void(std::size_t step, Domain domain, const MetricReport&)> on_eval;
};

struct Stage2Result {
  std::string best_checkpoint;   // lowest held-out RENDERED chamfer
  std::string final_checkpoint;  // after the last step
  std::string record_path;
  double best_chamfer = std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::size_t steps = 0;
};

/// Run the reconstruction-network loop against a frozen prior. Evaluates the
/// held-out NATURAL (reporting metric) and RENDERED splits before training,
/// every eval_every steps and after the last step; each eval names the
/// checkpoint file it scored. Model selection uses the RENDERED split only:
/// natural labels play no role in training or selection.
inline Stage2Result run_stage2(const ExperimentConfig& cfg, const std::string& prior_ckpt,
                               const Stage2Hooks& hooks = {}) {
  cfg.validate();
  Dataset data = Dataset::open(cfg.data_dir);
  const DatasetSpec spec = data.spec();
  std::filesystem::create_directories(cfg.out_dir);

  // The loader recomputes the parameter checksum against the stored one, so
  // a tampered or stale prior fails here, before any training.
  ShapeAutoencoder prior = ShapeAutoencoder::load(prior_ckpt);
  if (!prior.frozen())
    throw CheckpointError("run_stage2: prior checkpoint is not frozen");
  if (prior.kind() != cfg.kind)
    throw ConfigError(std::string("run_stage2: prior represents ") +
                      prior_kind_name(prior.kind()) + ", config wants " +
                      prior_kind_name(cfg.kind));
  if (cfg.latent_dim > 0 &&
      static_cast<std::size_t>(cfg.latent_dim) != prior.latent_dim())
    throw ConfigError("run_stage2: latent_dim " + std::to_string(cfg.latent_dim) +
                      " does not match prior latent width " +
                      std::to_string(prior.latent_dim()));
  if (cfg.kind == PriorKind::kVoxel &&
      prior.profile().resolution != static_cast<std::size_t>(spec.resolution))
    throw ConfigError("run_stage2: prior decodes " +
                      std::to_string(prior.profile().resolution) +
                      "^3 grids but the dataset stores " +
                      std::to_string(spec.resolution) + "^3");

  EncoderProfile eprof = cfg.encoder_profile(spec);
  eprof.latent_dim = prior.latent_dim();  // the manifold fixes the embedding width
  Stage2Model model(eprof, cfg.resolved_disc_hidden(), &prior, cfg.seed);
  nn::Adam<float> opt(model.params(), cfg.resolved_stage2_lr());

  const auto rendered = data.select(Domain::kRendered, "train");
  const auto naturals = data.select(Domain::kNatural, "train");
  const auto held_rendered = data.select(Domain::kRendered, "test");
  const auto held_natural = data.select(Domain::kNatural, "test");
  if (rendered.empty() || naturals.empty())
    throw InvalidInputError("run_stage2: dataset lacks training rows in one domain");
  if (held_rendered.empty() || held_natural.empty())
    throw InvalidInputError("run_stage2: dataset lacks held-out rows in one domain");

  const std::size_t B = static_cast<std::size_t>(cfg.stage2_batch);
  const std::size_t steps = cfg.resolved_stage2_steps();
  const std::size_t cadence = cfg.resolved_eval_every();
  const StepOptions opts = cfg.step_options();
  const std::string prior_abs = std::filesystem::absolute(prior_ckpt).string();

  Stage2Result res;
  res.record_path = detail::join_path(cfg.out_dir, "stage2-record.jsonl");
  res.steps = steps;
  RunRecord record(res.record_path);
  record.append(detail::config_event(cfg, "recon", data.root()));

  // Batch composition is a function of (seed, step) alone: it never depends
  // on the loss switches, so ablation rows sharing a seed see identical data.
  auto build_batch = [&](std::size_t step) {
    RandomStream rs(
        RandomStream::derive_seed(cfg.seed, "stage2.batch." + std::to_string(step)));
    auto pick = [&](const std::vector<const ManifestRow*>& pool) {
      std::vector<const ManifestRow*> out(B);
      for (std::size_t j = 0; j < B; ++j) out[j] = pool[rs.uniform_index(pool.size())];
      return out;
    };
    const auto r = pick(rendered);
    const auto n = pick(naturals);
    const auto m = pick(rendered);  // manifold shapes come from the labeled pool

    Stage2Batch batch;
    std::vector<const Image*> imgs(B);
    for (std::size_t j = 0; j < B; ++j) imgs[j] = &data.image(*r[j]);
    batch.rendered = pack_images<float>(imgs, static_cast<std::size_t>(spec.image_size));
    for (std::size_t j = 0; j < B; ++j) imgs[j] = &data.image(*n[j]);
    batch.natural = pack_images<float>(imgs, static_cast<std::size_t>(spec.image_size));
    if (cfg.kind == PriorKind::kVoxel) {
      std::vector<const VoxelGrid*> grids(B);
      for (std::size_t j = 0; j < B; ++j) grids[j] = &data.voxels(*r[j]);
      batch.voxel_targets =
          pack_voxel_grids<float>(grids, static_cast<std::size_t>(spec.resolution));
      for (std::size_t j = 0; j < B; ++j) grids[j] = &data.voxels(*m[j]);
      batch.manifold_voxels =
          pack_voxel_grids<float>(grids, static_cast<std::size_t>(spec.resolution));
    } else {
      for (std::size_t j = 0; j < B; ++j) batch.cloud_targets.push_back(data.cloud(*r[j]));
      for (std::size_t j = 0; j < B; ++j)
        batch.manifold_clouds.push_back(data.cloud(*m[j]));
    }
    return batch;
  };

  auto run_eval = [&](std::size_t step) {
    char name[40];
    std::snprintf(name, sizeof(name), "ckpt-%06zu.dckp", step);
    const std::string path = detail::join_path(cfg.out_dir, name);
    Checkpoint ck = model.to_checkpoint(prior_abs);
    ck.meta["experiment_config"] = cfg.to_text();
    ck.meta["step"] = step;
    save_checkpoint(ck, path);
    res.final_checkpoint = path;

    for (const auto& [domain, rows] :
         {std::pair{Domain::kNatural, &held_natural},
          std::pair{Domain::kRendered, &held_rendered}}) {
      const MetricReport rep = detail::evaluate_model(
          model, data, *rows, EvalConfig{}, static_cast<std::size_t>(cfg.eval_limit));
      nlohmann::json ev{{"event", "eval"},     {"step", step},
                        {"checkpoint", name},  {"domain", domain_name(domain)},
                        {"split", "test"},     {"n", rep.size()},
                        {"mean_chamfer", rep.mean_chamfer()}};
      if (const auto iou = rep.mean_iou()) ev["mean_iou"] = *iou;
      nlohmann::json entries = nlohmann::json::array();
      for (const auto& e : rep.entries) {
        nlohmann::json row{{"id", e.id}, {"chamfer", e.chamfer}};
        if (e.iou) row["iou"] = *e.iou;
        entries.push_back(std::move(row));
      }
      ev["entries"] = std::move(entries);
      record.append(ev);
      if (hooks.on_eval) hooks.on_eval(step, domain, rep);
      if (domain == Domain::kRendered && rep.mean_chamfer() < res.best_chamfer) {
        res.best_chamfer = rep.mean_chamfer();
        res.best_step = step;
        res.best_checkpoint = path;
      }
    }
  };

  const auto t0 = std::chrono::steady_clock::now();
  run_eval(0);
  for (std::size_t step = 1; step <= steps; ++step) {
    const Stage2Batch batch = build_batch(step);
    model.zero_grads();
    const StepLosses losses = model.training_step(batch, opts);
    if (!std::isfinite(losses.objective) || !std::isfinite(losses.rec)) {
      record.append({{"event", "diverged"},
                     {"step", step},
                     {"rec", losses.rec},
                     {"img", losses.img},
                     {"shape", losses.shape}});
      throw DivergenceError("run_stage2: non-finite loss at step " +
                            std::to_string(step) + " (rec " + std::to_string(losses.rec) +
                            ")");
    }
    opt.step();
    record.append({{"event", "step"},
                   {"step", step},
                   {"rec", losses.rec},
                   {"img", losses.img},
                   {"shape", losses.shape},
                   {"objective", losses.objective}});
    if (hooks.on_step) hooks.on_step(step, losses);
    if (step % cadence == 0 || step == steps) {
      for (const auto* p : model.params())
        if (!p->value.all_finite()) {
          record.append({{"event", "diverged"}, {"step", step}, {"param", p->name}});
          throw DivergenceError("run_stage2: non-finite parameter " + p->name +
                                " at step " + std::to_string(step));
        }
      if (step % cadence == 0 && step != steps) run_eval(step);
    }
  }
  run_eval(steps);

  if (!prior.verify_frozen())
    throw Error("run_stage2: frozen prior changed during training");

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record.append({{"event", "done"},
                 {"steps", steps},
                 {"best_step", res.best_step},
                 {"best_checkpoint", std::filesystem::path(res.best_checkpoint)
                                         .filename()
                                         .string()},
                 {"best_chamfer", res.best_chamfer},
                 {"prior_verified", true},
                 {"wall_seconds", wall}});
  return res;
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string label;  // "rec", "rec+shape", "rec+img", "rec+img+shape"
  bool use_img = false;
  bool use_shape = false;
  std::vector<std::uint64_t> seeds;
  std::vector<double> chamfer;  // held-out NATURAL mean per seed
  std::vector<double> iou;      // voxel runs only
  double mean_chamfer = 0.0;
  double stdev_chamfer = 0.0;
  std::optional<double> mean_iou;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string prior_checkpoint;
  std::string table_path;  // ablation.json
  std::string csv_path;    // ablation.csv
};

/// Reference-scale results for the same four switch rows, recorded in the
/// emitted table for context only and never asserted anywhere.
inline constexpr double kAblationReferenceVoxel[4] = {0.220, 0.196, 0.156, 0.140};
inline constexpr double kAblationReferencePoint[4] = {0.148, 0.140, 0.129, 0.112};

/// Run the four loss-switch rows, each across ablation_seeds seeds, over one
/// shared frozen prior. Each row reports mean and sample stdev of held-out
/// NATURAL chamfer at the per-run best checkpoint (selected on RENDERED).
inline AblationResult run_ablation(const ExperimentConfig& cfg,
                                   const Stage2Hooks& hooks = {}) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);

  ExperimentConfig s1 = cfg;
  s1.out_dir = detail::join_path(cfg.out_dir, "stage1");
  const Stage1Result prior = run_stage1(s1);

  struct RowDef {
    const char* label;
    const char* dir;
    bool img, shape;
  };
  constexpr RowDef defs[4] = {{"rec", "rec", false, false},
                              {"rec+shape", "rec_shape", false, true},
                              {"rec+img", "rec_img", true, false},
                              {"rec+img+shape", "rec_img_shape", true, true}};

  AblationResult out;
  out.prior_checkpoint = prior.checkpoint_path;
  for (const RowDef& def : defs) {
    AblationRow row;
    row.label = def.label;
    row.use_img = def.img;
    row.use_shape = def.shape;
    for (std::int64_t k = 0; k < cfg.ablation_seeds; ++k) {
      ExperimentConfig rc = cfg;
      rc.use_img = def.img;
      rc.use_shape = def.shape;
      rc.seed = cfg.seed + static_cast<std::uint64_t>(k);
      rc.out_dir = detail::join_path(detail::join_path(cfg.out_dir, def.dir),
                                     "seed" + std::to_string(rc.seed));
      const Stage2Result r2 = run_stage2(rc, prior.checkpoint_path, hooks);
      const MetricReport rep = evaluate_checkpoint(
          r2.best_checkpoint, cfg.data_dir, Domain::kNatural, "test", EvalConfig{},
          static_cast<std::size_t>(cfg.eval_limit));
      row.seeds.push_back(rc.seed);
      row.chamfer.push_back(rep.mean_chamfer());
      if (const auto iou = rep.mean_iou()) row.iou.push_back(*iou);
    }
    const double n = static_cast<double>(row.chamfer.size());
    double mean = 0.0;
    for (const double c : row.chamfer) mean += c;
    mean /= n;
    double var = 0.0;
    for (const double c : row.chamfer) var += (c - mean) * (c - mean);
    row.mean_chamfer = mean;
    row.stdev_chamfer = n > 1.0 ? std::sqrt(var / (n - 1.0)) : 0.0;
    if (!row.iou.empty()) {
      double mi = 0.0;
      for (const double v : row.iou) mi += v;
      row.mean_iou = mi / static_cast<double>(row.iou.size());
    }
    out.rows.push_back(std::move(row));
  }

  nlohmann::json table;
  table["representation"] = prior_kind_name(cfg.kind);
  table["config"] = cfg.to_text();
  table["rows"] = nlohmann::json::array();
  for (const AblationRow& row : out.rows) {
    nlohmann::json r{{"label", row.label},
                     {"use_img", row.use_img},
                     {"use_shape", row.use_shape},
                     {"seeds", row.seeds},
                     {"chamfer_per_seed", row.chamfer},
                     {"mean_chamfer", row.mean_chamfer},
                     {"stdev_chamfer", row.stdev_chamfer}};
    if (row.mean_iou) r["mean_iou"] = *row.mean_iou;
    table["rows"].push_back(std::move(r));
  }
  table["reference"] = {
      {"voxel_chamfer", std::vector<double>(kAblationReferenceVoxel,
                                            kAblationReferenceVoxel + 4)},
      {"pointcloud_chamfer",
       std::vector<double>(kAblationReferencePoint, kAblationReferencePoint + 4)},
      {"note", "full-scale reference results for these four rows; context only, "
               "never asserted"}};

  out.table_path = detail::join_path(cfg.out_dir, "ablation.json");
  {
    std::ofstream f(out.table_path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + out.table_path);
    f << table.dump(2) << "\n";
  }
  out.csv_path = detail::join_path(cfg.out_dir, "ablation.csv");
  {
    std::ofstream f(out.csv_path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + out.csv_path);
    f << "label,use_img,use_shape,n_seeds,mean_chamfer,stdev_chamfer,mean_iou\n";
    for (const AblationRow& row : out.rows) {
      char line[160];
      std::snprintf(line, sizeof(line), "%s,%d,%d,%zu,%.9f,%.9f,", row.label.c_str(),
                    row.use_img ? 1 : 0, row.use_shape ? 1 : 0, row.seeds.size(),
                    row.mean_chamfer, row.stdev_chamfer);
      f << line;
      if (row.mean_iou) {
        std::snprintf(line, sizeof(line), "%.9f", *row.mean_iou);
        f << line;
      }
      f << "\n";
    }
  }
  return out;
}

}  // namespace darec

#endif  // DAREC_TRAINER_HPP_
