#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pal/attention.hpp"
#include "pal/data.hpp"
#include "pal/embed.hpp"
#include "pal/error.hpp"
#include "pal/objective.hpp"
#include "pal/rng.hpp"

namespace pal {

// ---------------------------------------------------------------------------
// Model and configuration
// ---------------------------------------------------------------------------

// The full trainable state: embedding head (both stages), cosine classifier
// (stage 1 only) and the shared attention projections (stage 2 only).
struct PalModel {
  EmbeddingHead head;
  CosineClassifier clf;
  HalParams hal;
  std::size_t d_raw = 0;
  std::size_t d = 0;

  // Named views over every trainable matrix. SGD, hashing and checkpointing
  // all go through this map, so the stage separation (which stage updates
  // which parameters) is carried entirely by gradient keys.
  std::map<std::string, Matrix*> params() {
    std::map<std::string, Matrix*> m;
    m.emplace("head.w1", &head.w1);
    if (head.b1.rows() > 0) m.emplace("head.b1", &head.b1);
    if (head.w2.rows() > 0) m.emplace("head.w2", &head.w2);
    if (head.b2.rows() > 0) m.emplace("head.b2", &head.b2);
    m.emplace("clf.weight", &clf.weight);
    m.emplace("hal.w_q", &hal.w_q);
    m.emplace("hal.w_k", &hal.w_k);
    m.emplace("hal.w_v", &hal.w_v);
    return m;
  }
  std::map<std::string, const Matrix*> params() const {
    std::map<std::string, const Matrix*> m;
    for (auto& [k, v] : const_cast<PalModel*>(this)->params()) m.emplace(k, v);
    return m;
  }
};

// One optimization stage: initial rate, multiplicative decay applied at each
// listed epoch, and the epoch count.
struct StageConfig {
  double lr0 = 0.0;
  double decay_factor = 0.1;
  std::vector<std::size_t> decay_epochs;
  std::size_t epochs = 0;
};

struct TrainConfig {
  // stage 1: supervised pretraining over all meta-training classes
  StageConfig stage1{0.001, 0.1, {30, 60}, 70};
  std::size_t batch_size = 32;
  double clf_scale = 1.0;

  // stage 2: episodic meta-training
  StageConfig stage2{0.0001, 0.1, {15, 30}, 35};
  std::size_t episodes_per_epoch = 200;
  std::size_t val_episodes = 100;

  // episode shape
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query = 5;
  std::size_t segments = 8;

  // stage-2 objective
  double lambda = 1.0;
  double scale = 1.0;  // cosine scale shared by both episode losses
  PccMode pcc_mode = PccMode::Exp;
  bool hal = true;  // ablation switch: false bypasses attention entirely

  // model shape
  std::size_t d = 64;
  std::size_t hidden = 0;  // 0 = single linear layer
  bool bias = false;

  void validate() const {
    auto check_stage = [](const StageConfig& s, const char* name) {
      if (!(s.lr0 >= 0.0) || !std::isfinite(s.lr0))
        throw ConfigError(std::string(name) + ": learning rate must be finite and >= 0");
      if (!(s.decay_factor > 0.0) || !std::isfinite(s.decay_factor))
        throw ConfigError(std::string(name) + ": decay factor must be positive");
      for (std::size_t i = 0; i < s.decay_epochs.size(); ++i) {
        if (i > 0 && s.decay_epochs[i] <= s.decay_epochs[i - 1])
          throw ConfigError(std::string(name) + ": decay epochs must be strictly increasing");
        if (s.decay_epochs[i] >= s.epochs && s.epochs > 0)
          throw ConfigError(std::string(name) + ": decay epoch " +
                            std::to_string(s.decay_epochs[i]) + " outside 0.." +
                            std::to_string(s.epochs - 1));
      }
    };
    check_stage(stage1, "stage1");
    check_stage(stage2, "stage2");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (way == 0 || shot == 0 || query == 0 || segments == 0)
      throw ConfigError("episode shape values must be positive");
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
      throw ConfigError("lambda must be finite and >= 0");
    if (!(scale > 0.0) || !std::isfinite(scale))
      throw ConfigError("cosine scale must be finite and positive");
    if (!(clf_scale >= 0.0) || !std::isfinite(clf_scale))
      throw ConfigError("classifier scale must be finite and >= 0");
    if (d == 0) throw ConfigError("embedding dimension must be positive");
  }
};

// lr at epoch e is lr0 shrunk once per decay point <= e
inline double learning_rate(const StageConfig& s, std::size_t epoch) {
  double lr = s.lr0;
  for (std::size_t p : s.decay_epochs)
    if (p <= epoch) lr *= s.decay_factor;
  return lr;
}

inline PalModel create_model(std::size_t d_raw, std::size_t classes,
                             const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  PalModel m;
  m.d_raw = d_raw;
  m.d = cfg.d;
  m.head = cfg.hidden > 0
               ? EmbeddingHead::rectified(d_raw, cfg.hidden, cfg.d, rng, cfg.bias)
               : EmbeddingHead::linear(d_raw, cfg.d, rng, cfg.bias);
  m.clf = CosineClassifier::create(classes, cfg.d, rng, cfg.clf_scale);
  m.hal = HalParams::create(cfg.d, rng);
  return m;
}

// gradient descent over exactly the keys present in grads
inline void apply_sgd(PalModel& model, const Gradients& grads, double lr) {
  auto params = model.params();
  for (const auto& [name, grad] : grads) {
    auto it = params.find(name);
    if (it == params.end())
      throw PreconditionError("gradient for unknown parameter '" + name + "'");
    check_same_shape(*it->second, grad, "apply_sgd");
    accumulate(*it->second, scaled(grad, -lr));
  }
}

// ---------------------------------------------------------------------------
// Episode plumbing
// ---------------------------------------------------------------------------

// Raw sampled clips of one episode, labels episode-local.
struct EpisodeClips {
  std::vector<Matrix> support_frames;  // each segments x d_raw
  std::vector<Matrix> query_frames;
  std::vector<std::uint32_t> support_labels;
  std::vector<std::uint32_t> query_labels;
  std::size_t way = 0;
};

inline EpisodeClips make_clips(const Dataset& ds, const Episode& ep,
                               std::size_t segments, Rng& rng) {
  EpisodeClips clips;
  clips.way = ep.way;
  clips.support_labels = ep.support_labels;
  clips.query_labels = ep.query_labels;
  clips.support_frames.reserve(ep.support_indices.size());
  clips.query_frames.reserve(ep.query_indices.size());
  for (std::size_t i : ep.support_indices)
    clips.support_frames.push_back(sample_frames(ds.sample(i), segments, rng));
  for (std::size_t i : ep.query_indices)
    clips.query_frames.push_back(sample_frames(ds.sample(i), segments, rng));
  return clips;
}

struct EpisodeOptions {
  bool hal = true;
  double lambda = 1.0;
  PccMode mode = PccMode::Exp;
  double scale = 1.0;
};

struct EpisodeResult {
  double total = 0.0;
  double meta = 0.0;
  double pcc = 0.0;
  double accuracy = 0.0;        // fraction of queries classified correctly
  Gradients grads;              // head.* (+ hal.* when attention is on)
  SeparationMetrics sep_pre;    // support geometry before attention
  SeparationMetrics sep_post;   // and after (equal when attention is off)
};

// Full stage-2 graph for one episode: embed every clip, pool frames into
// video features, run both attention paths (optionally bypassed), form
// prototypes, evaluate the combined objective, and push gradients back
// through attention and embedding into the parameter space.
inline EpisodeResult episode_loss(const PalModel& model, const EpisodeClips& clips,
                                  const EpisodeOptions& opt) {
  const std::size_t ns = clips.support_frames.size();
  const std::size_t nq = clips.query_frames.size();
  if (ns == 0 || nq == 0)
    throw PreconditionError("episode requires support and query clips");

  // forward: clips -> video-level features
  std::vector<HeadCache> s_caches(ns), q_caches(nq);
  std::vector<Matrix> s_feats(ns), q_feats(nq);
  Matrix xs(ns, model.d), xq(nq, model.d);
  for (std::size_t i = 0; i < ns; ++i) {
    s_feats[i] = head_forward(model.head, clips.support_frames[i], &s_caches[i]);
    for (std::size_t r = 0; r < s_feats[i].rows(); ++r)
      for (std::size_t c = 0; c < model.d; ++c)
        xs(i, c) += s_feats[i](r, c) / static_cast<double>(s_feats[i].rows());
  }
  for (std::size_t i = 0; i < nq; ++i) {
    q_feats[i] = head_forward(model.head, clips.query_frames[i], &q_caches[i]);
    for (std::size_t r = 0; r < q_feats[i].rows(); ++r)
      for (std::size_t c = 0; c < model.d; ++c)
        xq(i, c) += q_feats[i](r, c) / static_cast<double>(q_feats[i].rows());
  }

  // attention (or bypass)
  HalCaches caches;
  EpisodeFeatures ef;
  ef.way = clips.way;
  ef.support_labels = clips.support_labels;
  ef.query_labels = clips.query_labels;
  ef.xs_ctx = opt.hal ? self_attend(model.hal, xs, &caches.self) : xs;
  ef.xq_ctx = opt.hal ? cross_attend(model.hal, xq, xs, &caches.cross) : xq;

  EpisodeResult out;
  out.sep_pre = separation_metrics(xs, clips.support_labels, clips.way);
  out.sep_post = opt.hal ? separation_metrics(ef.xs_ctx, clips.support_labels, clips.way)
                         : out.sep_pre;

  // objective
  Prototypes protos = compute_prototypes(ef);
  CombinedLoss loss = combined_loss(ef, protos, opt.lambda, opt.mode, opt.scale);
  out.total = loss.total;
  out.meta = loss.meta;
  out.pcc = loss.pcc;
  std::size_t correct = 0;
  for (std::size_t j = 0; j < nq; ++j) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < clips.way; ++c)
      if (loss.probs(j, c) > loss.probs(j, arg)) arg = c;
    if (arg == clips.query_labels[j]) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(nq);

  // backward: objective -> (attention ->) video features -> head
  Matrix d_xs, d_xq;
  if (opt.hal) {
    Gradients hal_g = hal_backward(model.hal, xs, xq, loss.grads.at("xs_ctx"),
                                   loss.grads.at("xq_ctx"), &caches);
    d_xs = std::move(hal_g.at("xs"));
    d_xq = std::move(hal_g.at("xq"));
    hal_g.erase("xs");
    hal_g.erase("xq");
    merge(out.grads, hal_g);
  } else {
    d_xs = loss.grads.at("xs_ctx");
    d_xq = loss.grads.at("xq_ctx");
  }

  auto back_through_video = [&](const Matrix& d_stack, std::size_t row,
                                const std::vector<Matrix>& feats,
                                const std::vector<HeadCache>& cache_list,
                                std::size_t i) {
    const std::size_t t = feats[i].rows();
    Matrix d_feat(t, model.d);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < model.d; ++c)
        d_feat(r, c) = d_stack(row, c) / static_cast<double>(t);
    merge(out.grads, head_backward(model.head, cache_list[i], d_feat));
  };
  for (std::size_t i = 0; i < ns; ++i) back_through_video(d_xs, i, s_feats, s_caches, i);
  for (std::size_t i = 0; i < nq; ++i) back_through_video(d_xq, i, q_feats, q_caches, i);
  return out;
}

// ---------------------------------------------------------------------------
// Training logs
// ---------------------------------------------------------------------------

struct TrainLogRow {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_meta = 0.0;
  double loss_pcc = 0.0;
  double loss_total = 0.0;
  double val_acc = -1.0;  // -1 when no validation split was supplied
};

inline void write_training_log(const std::vector<TrainLogRow>& rows,
                               const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open for writing: " + path);
  out << "epoch,lr,loss_meta,loss_pcc,loss_total,val_acc\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.epoch,
                  r.lr, r.loss_meta, r.loss_pcc, r.loss_total, r.val_acc);
    out << buf;
  }
  if (!out) throw Error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Stage 1: supervised pretraining
// ---------------------------------------------------------------------------

inline std::vector<TrainLogRow> pretrain(PalModel& model, const Dataset& ds,
                                         const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (ds.split() != Split::MetaTrain)
    throw PreconditionError(std::string("pretraining expects the meta-train split, got ") +
                            split_name(ds.split()));
  if (ds.samples().empty()) throw PreconditionError("pretraining dataset is empty");
  if (model.clf.class_count() != ds.classes().size())
    throw PreconditionError("classifier has " + std::to_string(model.clf.class_count()) +
                            " classes but the dataset has " +
                            std::to_string(ds.classes().size()));

  std::vector<TrainLogRow> log;
  std::vector<std::size_t> order(ds.samples().size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  double last_finite = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t epoch = 0; epoch < cfg.stage1.epochs; ++epoch) {
    const double lr = learning_rate(cfg.stage1, epoch);
    rng.shuffle(order);
    double epoch_loss = 0.0;
    double epoch_correct = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<LabeledClip> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const VideoSample& v = ds.sample(order[i]);
        batch.push_back({sample_frames(v, cfg.segments, rng),
                         static_cast<std::uint32_t>(ds.class_index(v.label))});
      }
      PretrainResult res = pretrain_loss(model.head, model.clf, batch);
      if (!std::isfinite(res.loss))
        throw NumericError("pretraining diverged at epoch " + std::to_string(epoch) +
                           ", batch starting at sample " + std::to_string(start) +
                           "; last finite loss " + std::to_string(last_finite));
      last_finite = res.loss;
      epoch_loss += res.loss * static_cast<double>(end - start);
      epoch_correct += res.accuracy * static_cast<double>(end - start);
      apply_sgd(model, res.grads, lr);
    }
    TrainLogRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.loss_total = epoch_loss / static_cast<double>(order.size());
    // stage 1 has no episodic losses; the val_acc column carries the
    // training accuracy so the CSV schema stays uniform across stages
    row.val_acc = epoch_correct / static_cast<double>(order.size());
    log.push_back(row);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query = 5;
  std::size_t segments = 8;
  std::size_t episodes = 1000;
  bool hal = true;
  double lambda = 1.0;
  PccMode mode = PccMode::Exp;
  double scale = 1.0;
};

struct EvalReport {
  std::size_t episodes = 0;
  double accuracy = 0.0;
  double ci_half_width = 0.0;  // normal-approximation 95% interval
  double loss_meta = 0.0;
  double loss_pcc = 0.0;
  double intra_spread_pre = 0.0;
  double intra_spread_post = 0.0;
  double inter_proto_cos_pre = 0.0;
  double inter_proto_cos_post = 0.0;
};

namespace detail {

inline std::size_t eval_thread_count(std::size_t episodes) {
  std::size_t n = 0;
  if (const char* env = std::getenv("PAL_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || v == 0)
      throw ConfigError("PAL_THREADS must be a positive integer, got '" +
                        std::string(env) + "'");
    n = static_cast<std::size_t>(v);
  } else {
    n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }
  return std::min(n, std::max<std::size_t>(1, episodes));
}

}  // namespace detail

// Frozen-model evaluation over independently seeded episodes. Each episode
// derives its own random stream from its index, so the report is identical
// for any thread count (PAL_THREADS caps the worker pool).
inline EvalReport evaluate(const PalModel& model, const Dataset& ds,
                           const EvalOptions& opt, const Rng& rng) {
  if (opt.episodes == 0) throw PreconditionError("evaluation needs at least one episode");

  struct PerEpisode {
    double acc, meta, pcc, intra_pre, intra_post, inter_pre, inter_post;
  };
  std::vector<PerEpisode> results(opt.episodes);
  const EpisodeOptions ep_opt{opt.hal, opt.lambda, opt.mode, opt.scale};

  auto run_episode = [&](std::size_t index) {
    Rng er = rng.child(index);
    Episode ep = sample_episode(ds, opt.way, opt.shot, opt.query, er);
    EpisodeClips clips = make_clips(ds, ep, opt.segments, er);

    // forward-only evaluation: reuse the episode graph, ignore its gradients
    EpisodeResult res = episode_loss(model, clips, ep_opt);
    results[index] = {res.accuracy,          res.meta,
                      res.pcc,               res.sep_pre.intra_spread,
                      res.sep_post.intra_spread, res.sep_pre.inter_proto_cos,
                      res.sep_post.inter_proto_cos};
  };

  const std::size_t workers = detail::eval_thread_count(opt.episodes);
  if (workers <= 1) {
    for (std::size_t i = 0; i < opt.episodes; ++i) run_episode(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < opt.episodes; i += workers) run_episode(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (const auto& err : errors)
      if (err) std::rethrow_exception(err);
  }

  EvalReport report;
  report.episodes = opt.episodes;
  const double n = static_cast<double>(opt.episodes);
  for (const auto& r : results) {
    report.accuracy += r.acc;
    report.loss_meta += r.meta;
    report.loss_pcc += r.pcc;
    report.intra_spread_pre += r.intra_pre;
    report.intra_spread_post += r.intra_post;
    report.inter_proto_cos_pre += r.inter_pre;
    report.inter_proto_cos_post += r.inter_post;
  }
  report.accuracy /= n;
  report.loss_meta /= n;
  report.loss_pcc /= n;
  report.intra_spread_pre /= n;
  report.intra_spread_post /= n;
  report.inter_proto_cos_pre /= n;
  report.inter_proto_cos_post /= n;
  if (opt.episodes > 1) {
    double var = 0.0;
    for (const auto& r : results) {
      const double dev = r.acc - report.accuracy;
      var += dev * dev;
    }
    var /= n - 1.0;
    report.ci_half_width = 1.96 * std::sqrt(var / n);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Stage 2: episodic meta-training
// ---------------------------------------------------------------------------

// One SGD step per episode on the head (and attention parameters when
// enabled); the stage-1 classifier never appears in the episodic graph.
// When a validation split is given, the model with the best validation
// accuracy across epochs is kept; the same validation episodes are replayed
// every epoch so the selection is comparable.
inline std::vector<TrainLogRow> meta_train(PalModel& model, const Dataset& ds_train,
                                           const Dataset* ds_val,
                                           const TrainConfig& cfg, Rng& rng,
                                           bool train_hal = true) {
  cfg.validate();
  if (ds_train.split() != Split::MetaTrain)
    throw PreconditionError(std::string("meta-training expects the meta-train split, got ") +
                            split_name(ds_train.split()));

  const EpisodeOptions ep_opt{cfg.hal, cfg.lambda, cfg.pcc_mode, cfg.scale};
  EvalOptions val_opt;
  val_opt.way = cfg.way;
  val_opt.shot = cfg.shot;
  val_opt.query = cfg.query;
  val_opt.segments = cfg.segments;
  val_opt.episodes = cfg.val_episodes;
  val_opt.hal = cfg.hal;
  val_opt.lambda = cfg.lambda;
  val_opt.mode = cfg.pcc_mode;
  val_opt.scale = cfg.scale;
  const Rng val_rng = rng.child(0x76616c);  // fixed stream, replayed per epoch

  std::vector<TrainLogRow> log;
  std::optional<PalModel> best;
  double best_acc = -1.0;
  double last_finite = std::numeric_limits<double>::quiet_NaN();

  // The untrained starting point competes in model selection too: when no
  // epoch improves on it, meta-training degrades nothing.
  if (ds_val && cfg.stage2.epochs > 0) {
    best_acc = evaluate(model, *ds_val, val_opt, val_rng).accuracy;
    best = model;
  }

  for (std::size_t epoch = 0; epoch < cfg.stage2.epochs; ++epoch) {
    const double lr = learning_rate(cfg.stage2, epoch);
    double sum_meta = 0.0, sum_pcc = 0.0, sum_total = 0.0;
    for (std::size_t e = 0; e < cfg.episodes_per_epoch; ++e) {
      Episode ep = sample_episode(ds_train, cfg.way, cfg.shot, cfg.query, rng);
      EpisodeClips clips = make_clips(ds_train, ep, cfg.segments, rng);
      EpisodeResult res = episode_loss(model, clips, ep_opt);
      if (!std::isfinite(res.total))
        throw NumericError("meta-training diverged at epoch " + std::to_string(epoch) +
                           ", episode " + std::to_string(e) + "; last finite loss " +
                           std::to_string(last_finite));
      last_finite = res.total;
      sum_meta += res.meta;
      sum_pcc += res.pcc;
      sum_total += res.total;
      if (!train_hal) {
        res.grads.erase("hal.w_q");
        res.grads.erase("hal.w_k");
        res.grads.erase("hal.w_v");
      }
      apply_sgd(model, res.grads, lr);
    }

    TrainLogRow row;
    row.epoch = epoch;
    row.lr = lr;
    if (cfg.episodes_per_epoch > 0) {
      const double n = static_cast<double>(cfg.episodes_per_epoch);
      row.loss_meta = sum_meta / n;
      row.loss_pcc = sum_pcc / n;
      row.loss_total = sum_total / n;
    }
    if (ds_val) {
      row.val_acc = evaluate(model, *ds_val, val_opt, val_rng).accuracy;
      if (row.val_acc > best_acc) {
        best_acc = row.val_acc;
        best = model;
      }
    }
    log.push_back(row);
  }
  if (best) model = std::move(*best);
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Binary, little-endian: magic "FSCK", version u32=1, stage tag u8
// (1 = pretrained, 2 = meta-trained), config fingerprint u64, block count
// u32; then per parameter block: name length u32, name bytes, rows u32,
// cols u32, rows*cols f64 values row-major. clf.scale travels as a 1x1
// block so a checkpoint restores the complete model.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// hash of everything that determines parameter shapes and scoring, used to
// refuse checkpoints that do not match the resuming configuration
inline std::uint64_t model_fingerprint(std::size_t d_raw, std::size_t classes,
                                       const TrainConfig& cfg) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "d_raw=%zu;classes=%zu;d=%zu;hidden=%zu;bias=%d;clf_scale=%.17g",
                d_raw, classes, cfg.d, cfg.hidden, cfg.bias ? 1 : 0, cfg.clf_scale);
  return fnv1a(buf);
}

// content hash over every parameter matrix (order-fixed), for cheap
// "did anything mutate" checks
inline std::uint64_t model_hash(const PalModel& model) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix_bytes = [&h](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, m] : model.params()) {
    mix_bytes(name.data(), name.size());
    for (std::size_t i = 0; i < m->rows(); ++i)
      mix_bytes(m->row(i).data(), m->cols() * sizeof(double));
  }
  mix_bytes(&model.clf.scale, sizeof(double));
  return h;
}

constexpr std::uint8_t kStagePretrained = 1;
constexpr std::uint8_t kStageMetaTrained = 2;

inline void save_checkpoint(const PalModel& model, const std::string& path,
                            std::uint8_t stage, std::uint64_t fingerprint) {
  detail::ByteWriter w(path);
  w.bytes("FSCK", 4);
  w.u32(1);  // format version
  w.u8(stage);
  w.u64(fingerprint);

  std::map<std::string, const Matrix*> blocks = model.params();
  Matrix scale_block(1, 1, model.clf.scale);
  blocks.emplace("clf.scale", &scale_block);
  w.u32(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& [name, m] : blocks) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(m->rows()));
    w.u32(static_cast<std::uint32_t>(m->cols()));
    for (std::size_t i = 0; i < m->rows(); ++i)
      for (std::size_t j = 0; j < m->cols(); ++j) w.f64((*m)(i, j));
  }
  w.close();
}

struct LoadedCheckpoint {
  PalModel model;
  std::uint8_t stage = 0;
  std::uint64_t fingerprint = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  detail::ByteReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "FSCK")
    throw FormatError("bad checkpoint magic", 0);
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);

  LoadedCheckpoint out;
  out.stage = r.u8();
  if (out.stage != kStagePretrained && out.stage != kStageMetaTrained)
    throw FormatError("unknown stage tag " + std::to_string(out.stage), 8);
  out.fingerprint = r.u64();

  const std::uint32_t count = r.u32();
  std::map<std::string, Matrix> blocks;
  for (std::uint32_t b = 0; b < count; ++b) {
    const std::size_t name_at = r.offset();
    const std::uint32_t name_len = r.u32();
    if (name_len == 0 || name_len > 256)
      throw FormatError("implausible parameter name length", name_at);
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows == 0 || cols == 0 || static_cast<std::uint64_t>(rows) * cols > (1ULL << 28))
      throw FormatError("implausible parameter shape for '" + name + "'", name_at);
    Matrix m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = r.f64();
    if (!blocks.emplace(std::move(name), std::move(m)).second)
      throw FormatError("duplicate parameter block", name_at);
  }

  auto take = [&](const std::string& name, bool required) {
    auto it = blocks.find(name);
    if (it == blocks.end()) {
      if (required) throw FormatError("checkpoint is missing block '" + name + "'", 0);
      return Matrix();
    }
    Matrix m = std::move(it->second);
    blocks.erase(it);
    return m;
  };
  PalModel& model = out.model;
  model.head.w1 = take("head.w1", true);
  model.head.b1 = take("head.b1", false);
  model.head.w2 = take("head.w2", false);
  model.head.b2 = take("head.b2", false);
  model.clf.weight = take("clf.weight", true);
  Matrix scale = take("clf.scale", true);
  if (scale.rows() != 1 || scale.cols() != 1)
    throw FormatError("clf.scale block must be 1x1", 0);
  model.clf.scale = scale(0, 0);
  try {
    model.hal = HalParams::from_matrices(take("hal.w_q", true), take("hal.w_k", true),
                                         take("hal.w_v", true));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("inconsistent attention blocks: ") + e.what(), 0);
  }
  if (!blocks.empty())
    throw FormatError("unexpected parameter block '" + blocks.begin()->first + "'", 0);
  model.d_raw = model.head.in_dim();
  model.d = model.head.out_dim();
  if (model.clf.weight.cols() != model.d || model.hal.w_q.rows() != model.d)
    throw FormatError("parameter blocks disagree on the embedding dimension", 0);
  return out;
}

}  // namespace pal
