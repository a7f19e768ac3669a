#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pal/error.hpp"
#include "pal/gradients.hpp"
#include "pal/matrix.hpp"
#include "pal/rng.hpp"

namespace pal {

// Trainable per-frame embedding head: either a single linear map
// d_raw -> d, or linear -> rectifier -> linear with one hidden layer.
// Bias rows are 1 x width and may be empty (disabled).
struct EmbeddingHead {
  Matrix w1;  // d_raw x h (two-layer) or d_raw x d (single-layer)
  Matrix b1;  // 1 x h / 1 x d, empty when bias is disabled
  Matrix w2;  // h x d, empty for the single-layer head
  Matrix b2;  // 1 x d, empty when bias is disabled or single-layer

  bool two_layer() const { return w2.rows() > 0; }
  bool has_bias() const { return b1.rows() > 0; }
  std::size_t in_dim() const { return w1.rows(); }
  std::size_t out_dim() const { return two_layer() ? w2.cols() : w1.cols(); }

  static EmbeddingHead linear(std::size_t d_raw, std::size_t d, Rng& rng,
                              bool bias = false) {
    if (d_raw == 0 || d == 0)
      throw PreconditionError("embedding head dimensions must be positive");
    EmbeddingHead h;
    h.w1 = Matrix::gaussian(d_raw, d, 1.0 / std::sqrt(static_cast<double>(d_raw)), rng);
    if (bias) h.b1 = Matrix(1, d);
    return h;
  }

  static EmbeddingHead rectified(std::size_t d_raw, std::size_t hidden,
                                 std::size_t d, Rng& rng, bool bias = false) {
    if (d_raw == 0 || hidden == 0 || d == 0)
      throw PreconditionError("embedding head dimensions must be positive");
    EmbeddingHead h;
    h.w1 = Matrix::gaussian(d_raw, hidden, 1.0 / std::sqrt(static_cast<double>(d_raw)), rng);
    h.w2 = Matrix::gaussian(hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    if (bias) {
      h.b1 = Matrix(1, hidden);
      h.b2 = Matrix(1, d);
    }
    return h;
  }

  static EmbeddingHead identity(std::size_t d) {
    EmbeddingHead h;
    h.w1 = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i) h.w1(i, i) = 1.0;
    return h;
  }
};

// Cosine classifier over all pretraining classes: one weight row per class,
// scores are scale * cosine(feature, w_z).
struct CosineClassifier {
  Matrix weight;  // Z x d
  double scale = 1.0;

  std::size_t class_count() const { return weight.rows(); }

  static CosineClassifier create(std::size_t classes, std::size_t d, Rng& rng,
                                 double scale = 1.0) {
    if (classes == 0 || d == 0)
      throw PreconditionError("classifier dimensions must be positive");
    if (!(scale >= 0.0) || !std::isfinite(scale))
      throw PreconditionError("classifier scale must be finite and non-negative");
    CosineClassifier c;
    c.weight = Matrix::gaussian(classes, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    c.scale = scale;
    return c;
  }
};

namespace detail {

inline void add_bias_rows(Matrix& m, const Matrix& bias) {
  if (bias.rows() == 0) return;
  if (bias.cols() != m.cols())
    throw ShapeError("bias width " + std::to_string(bias.cols()) +
                     " does not match activation width " + std::to_string(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += bias(0, j);
}

inline Matrix column_sums_row(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(0, j) += m(i, j);
  return out;
}

}  // namespace detail

// Intermediate activations captured by head_forward for the backward pass.
struct HeadCache {
  Matrix input;   // T x d_raw
  Matrix pre1;    // T x h, pre-rectifier (two-layer only)
  Matrix hidden;  // T x h, post-rectifier (two-layer only)
};

inline Matrix head_forward(const EmbeddingHead& head, const Matrix& frames,
                           HeadCache* cache = nullptr) {
  if (frames.rows() == 0)
    throw PreconditionError("head_forward requires at least one frame");
  if (frames.cols() != head.in_dim())
    throw ShapeError("frame width " + std::to_string(frames.cols()) +
                     " does not match head input dimension " +
                     std::to_string(head.in_dim()));
  Matrix h0 = matmul(frames, head.w1);
  detail::add_bias_rows(h0, head.b1);
  if (cache) cache->input = frames;
  if (!head.two_layer()) return h0;
  if (cache) cache->pre1 = h0;
  Matrix act = h0;
  for (std::size_t i = 0; i < act.rows(); ++i)
    for (std::size_t j = 0; j < act.cols(); ++j)
      if (act(i, j) < 0.0) act(i, j) = 0.0;
  if (cache) cache->hidden = act;
  Matrix out = matmul(act, head.w2);
  detail::add_bias_rows(out, head.b2);
  return out;
}

// Gradients of the head parameters given d(loss)/d(output); keys follow the
// "head.*" convention shared with the trainer. Optionally also returns the
// gradient with respect to the input frames.
inline Gradients head_backward(const EmbeddingHead& head, const HeadCache& cache,
                               const Matrix& d_out, Matrix* d_frames = nullptr) {
  Gradients g;
  if (head.two_layer()) {
    if (d_out.cols() != head.w2.cols() || d_out.rows() != cache.hidden.rows())
      throw ShapeError("upstream gradient shape " + shape_str(d_out) +
                       " does not match head output");
    auto [d_hidden, d_w2] = matmul_backward(cache.hidden, head.w2, d_out);
    g.emplace("head.w2", std::move(d_w2));
    if (head.b2.rows() > 0) g.emplace("head.b2", detail::column_sums_row(d_out));
    // rectifier: zero where the pre-activation was clipped
    for (std::size_t i = 0; i < d_hidden.rows(); ++i)
      for (std::size_t j = 0; j < d_hidden.cols(); ++j)
        if (cache.pre1(i, j) <= 0.0) d_hidden(i, j) = 0.0;
    auto [d_in, d_w1] = matmul_backward(cache.input, head.w1, d_hidden);
    g.emplace("head.w1", std::move(d_w1));
    if (head.b1.rows() > 0) g.emplace("head.b1", detail::column_sums_row(d_hidden));
    if (d_frames) *d_frames = std::move(d_in);
  } else {
    if (d_out.cols() != head.w1.cols() || d_out.rows() != cache.input.rows())
      throw ShapeError("upstream gradient shape " + shape_str(d_out) +
                       " does not match head output");
    auto [d_in, d_w1] = matmul_backward(cache.input, head.w1, d_out);
    g.emplace("head.w1", std::move(d_w1));
    if (head.b1.rows() > 0) g.emplace("head.b1", detail::column_sums_row(d_out));
    if (d_frames) *d_frames = std::move(d_in);
  }
  return g;
}

// Per-frame embeddings plus the frame-mean video-level feature.
inline std::pair<Matrix, Matrix> embed_video(const EmbeddingHead& head,
                                             const Matrix& frames) {
  Matrix frame_feats = head_forward(head, frames);
  std::vector<std::size_t> all(frame_feats.rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Matrix video_feat = mean_rows(frame_feats, {all});
  return {std::move(frame_feats), std::move(video_feat)};
}

// Video-level class probabilities: per-frame cosine scores against every
// class weight are averaged across frames first, then passed through a
// softmax. The score/average order is observable (cosine is nonlinear) and
// is pinned by regression tests.
inline std::pair<Matrix, Matrix> pretrain_scores(const EmbeddingHead& head,
                                                 const CosineClassifier& clf,
                                                 const Matrix& frames) {
  Matrix frame_feats = head_forward(head, frames);
  Matrix frame_scores = cosine_rows(frame_feats, clf.weight);  // T x Z
  for (std::size_t i = 0; i < frame_scores.rows(); ++i)
    for (std::size_t j = 0; j < frame_scores.cols(); ++j)
      frame_scores(i, j) *= clf.scale;
  std::vector<std::size_t> all(frame_scores.rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  Matrix video_scores = mean_rows(frame_scores, {all});  // 1 x Z
  Matrix probs = row_softmax(video_scores);
  return {std::move(probs), std::move(video_scores)};
}

struct LabeledClip {
  Matrix frames;  // T x d_raw
  std::uint32_t label = 0;
};

struct PretrainResult {
  double loss = 0.0;
  double accuracy = 0.0;
  Gradients grads;  // keys: head.*, clf.weight
};

// Mean cross-entropy of the video-level probabilities over a batch, with
// analytic gradients for the head and classifier weights.
inline PretrainResult pretrain_loss(const EmbeddingHead& head,
                                    const CosineClassifier& clf,
                                    const std::vector<LabeledClip>& batch) {
  if (batch.empty()) throw PreconditionError("pretrain_loss requires a non-empty batch");
  const std::size_t z = clf.class_count();
  for (const auto& clip : batch)
    if (clip.label >= z)
      throw PreconditionError("label " + std::to_string(clip.label) +
                              " out of range for " + std::to_string(z) + " classes");
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  PretrainResult result;
  std::size_t correct = 0;
  for (const auto& clip : batch) {
    HeadCache cache;
    Matrix frame_feats = head_forward(head, clip.frames, &cache);
    Matrix cos = cosine_rows(frame_feats, clf.weight);  // T x Z
    const std::size_t t = cos.rows();
    Matrix video_scores(1, z);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < z; ++j) video_scores(0, j) += clf.scale * cos(i, j);
    for (std::size_t j = 0; j < z; ++j) video_scores(0, j) /= static_cast<double>(t);
    Matrix probs = row_softmax(video_scores);

    const double p_true = probs(0, clip.label);
    if (!(p_true > 0.0))
      throw NumericError("vanishing probability for the true class");
    result.loss += -std::log(p_true) * inv_b;
    std::size_t arg = 0;
    for (std::size_t j = 1; j < z; ++j)
      if (probs(0, j) > probs(0, arg)) arg = j;
    if (arg == clip.label) ++correct;

    // d loss / d video_scores = (p - onehot) / B
    Matrix d_scores(1, z);
    for (std::size_t j = 0; j < z; ++j)
      d_scores(0, j) = (probs(0, j) - (j == clip.label ? 1.0 : 0.0)) * inv_b;
    // each frame's score row contributed 1/T of the video score
    Matrix d_cos(t, z);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < z; ++j)
        d_cos(i, j) = d_scores(0, j) * clf.scale / static_cast<double>(t);
    CosineGrads cg = cosine_rows_backward(frame_feats, clf.weight, cos, d_cos);
    accumulate(result.grads, "clf.weight", cg.db);
    merge(result.grads, head_backward(head, cache, cg.da));
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(batch.size());
  return result;
}

}  // namespace pal
