#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "pal/error.hpp"
#include "pal/gradients.hpp"
#include "pal/matrix.hpp"
#include "pal/rng.hpp"

namespace pal {

// Shared projection weights for the hybrid attention stage. One set of
// query/key/value matrices serves both the support self-attention and the
// query-to-support cross-attention, so their gradients accumulate
// contributions from both paths. The residual connection adds the attended
// aggregate back onto the input, which requires the latent width to equal
// the feature width; from_matrices enforces that square shape.
struct HalParams {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;

  std::size_t dim() const { return w_q.rows(); }

  static HalParams from_matrices(Matrix wq, Matrix wk, Matrix wv) {
    auto square = [](const Matrix& m, const char* name) {
      if (m.rows() == 0 || m.rows() != m.cols())
        throw ConfigError(std::string(name) + " must be square (feature and latent "
                          "widths must match for the residual), got " + shape_str(m));
      if (!m.all_finite())
        throw ConfigError(std::string(name) + " contains non-finite entries");
    };
    square(wq, "w_q");
    square(wk, "w_k");
    square(wv, "w_v");
    if (!wq.same_shape(wk) || !wq.same_shape(wv))
      throw ConfigError("projection matrices disagree in shape: " + shape_str(wq) +
                        ", " + shape_str(wk) + ", " + shape_str(wv));
    HalParams p;
    p.w_q = std::move(wq);
    p.w_k = std::move(wk);
    p.w_v = std::move(wv);
    return p;
  }

  // Query/key projections start at unit fan-in scale; the value projection
  // starts near zero so the residual initially passes features through
  // almost unchanged.
  // Identity-seeded: W_Q = W_K = I makes the initial logits the plain
  // scaled dot product of the attended features, and W_V = eps*I makes
  // value mixing start as gentle smoothing toward attended rows. A random
  // init instead buries the similarity signal (xW_Q)(x'W_K)^T under the
  // variance of the random metric, leaving gradient descent a dead
  // attention pattern to escape; seeding with a working one lets training
  // refine all three maps independently. Perturbations of scale s keep the
  // three matrices from starting on a perfectly symmetric saddle.
  static HalParams create(std::size_t d, Rng& rng) {
    if (d == 0) throw ConfigError("attention dimension must be positive");
    const double s = 0.01 / std::sqrt(static_cast<double>(d));
    Matrix wq = Matrix::gaussian(d, d, s, rng);
    Matrix wk = Matrix::gaussian(d, d, s, rng);
    Matrix wv = Matrix::gaussian(d, d, s, rng);
    for (std::size_t i = 0; i < d; ++i) {
      wq(i, i) += 1.0;
      wk(i, i) += 1.0;
      wv(i, i) += 0.1;
    }
    return from_matrices(wq, wk, wv);
  }
};

// Forward intermediates captured for the backward pass.
struct AttentionCache {
  Matrix queries;  // rows(a) x d
  Matrix keys;     // rows(b) x d
  Matrix values;   // rows(b) x d
  Matrix attn;     // rows(a) x rows(b), rows sum to 1
};

namespace detail {

// Shared attention body: a + softmax(a Wq (b Wk)^T / sqrt(d)) (b Wv).
inline Matrix attend(const HalParams& p, const Matrix& a, const Matrix& b,
                     AttentionCache* cache) {
  if (a.rows() == 0 || b.rows() == 0)
    throw PreconditionError("attention requires non-empty inputs");
  if (a.cols() != p.dim() || b.cols() != p.dim())
    throw ShapeError("attention inputs " + shape_str(a) + " and " + shape_str(b) +
                     " do not match projection dimension " + std::to_string(p.dim()));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.dim()));
  Matrix q = matmul(a, p.w_q);
  Matrix k = matmul(b, p.w_k);
  Matrix v = matmul(b, p.w_v);
  Matrix logits = matmul(q, transpose(k));
  for (std::size_t i = 0; i < logits.rows(); ++i)
    for (std::size_t j = 0; j < logits.cols(); ++j) logits(i, j) *= inv_sqrt_d;
  Matrix attn = row_softmax(logits);
  Matrix out = matmul(attn, v);
  accumulate(out, a);
  if (cache) {
    cache->queries = std::move(q);
    cache->keys = std::move(k);
    cache->values = std::move(v);
    cache->attn = attn;
  }
  return out;
}

struct AttendGrads {
  Matrix d_a;   // gradient wrt the attending rows
  Matrix d_b;   // gradient wrt the attended-to rows
  Matrix d_wq;
  Matrix d_wk;
  Matrix d_wv;
};

inline AttendGrads attend_backward(const HalParams& p, const Matrix& a,
                                   const Matrix& b, const AttentionCache& cache,
                                   const Matrix& d_out) {
  if (!d_out.same_shape(a))
    throw ShapeError("upstream gradient " + shape_str(d_out) +
                     " does not match attention output " + shape_str(a));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.dim()));

  // out = a + attn * v
  AttendGrads g;
  g.d_a = d_out;  // residual path
  auto [d_attn, d_v] = matmul_backward(cache.attn, cache.values, d_out);
  Matrix d_logits = row_softmax_backward(cache.attn, d_attn);
  for (std::size_t i = 0; i < d_logits.rows(); ++i)
    for (std::size_t j = 0; j < d_logits.cols(); ++j) d_logits(i, j) *= inv_sqrt_d;
  // logits (pre-scale) = q k^T
  Matrix d_q = matmul(d_logits, cache.keys);
  Matrix d_k = matmul(transpose(d_logits), cache.queries);

  auto [d_a_q, d_wq] = matmul_backward(a, p.w_q, d_q);
  auto [d_b_k, d_wk] = matmul_backward(b, p.w_k, d_k);
  auto [d_b_v, d_wv] = matmul_backward(b, p.w_v, d_v);
  accumulate(g.d_a, d_a_q);
  g.d_b = d_b_k;
  accumulate(g.d_b, d_b_v);
  g.d_wq = std::move(d_wq);
  g.d_wk = std::move(d_wk);
  g.d_wv = std::move(d_wv);
  return g;
}

}  // namespace detail

// Support self-attention with residual: every support row attends over all
// support rows (itself included).
inline Matrix self_attend(const HalParams& p, const Matrix& xs,
                          AttentionCache* cache = nullptr) {
  return detail::attend(p, xs, xs, cache);
}

// Query-to-support cross-attention with residual: keys and values come from
// the support rows only, so each query row is transformed independently.
inline Matrix cross_attend(const HalParams& p, const Matrix& xq, const Matrix& xs,
                           AttentionCache* cache = nullptr) {
  return detail::attend(p, xq, xs, cache);
}

struct HalCaches {
  AttentionCache self;
  AttentionCache cross;
};

// Reverse pass through both attention paths. Projection gradients sum the
// self and cross contributions because the matrices are shared. Keys:
// hal.w_q, hal.w_k, hal.w_v, xs, xq. Caches from the forward pass may be
// supplied; otherwise the forward intermediates are recomputed.
inline Gradients hal_backward(const HalParams& p, const Matrix& xs, const Matrix& xq,
                              const Matrix& d_self_out, const Matrix& d_cross_out,
                              const HalCaches* caches = nullptr) {
  HalCaches local;
  if (!caches) {
    detail::attend(p, xs, xs, &local.self);
    detail::attend(p, xq, xs, &local.cross);
    caches = &local;
  }
  detail::AttendGrads self_g = detail::attend_backward(p, xs, xs, caches->self, d_self_out);
  detail::AttendGrads cross_g = detail::attend_backward(p, xq, xs, caches->cross, d_cross_out);

  Gradients g;
  // self-attention: the support rows act as queries, keys and values at once
  Matrix d_xs = self_g.d_a;
  accumulate(d_xs, self_g.d_b);
  accumulate(d_xs, cross_g.d_b);  // cross path reads support for keys/values
  g.emplace("xs", std::move(d_xs));
  g.emplace("xq", cross_g.d_a);
  Matrix d_wq = self_g.d_wq;
  accumulate(d_wq, cross_g.d_wq);
  Matrix d_wk = self_g.d_wk;
  accumulate(d_wk, cross_g.d_wk);
  Matrix d_wv = self_g.d_wv;
  accumulate(d_wv, cross_g.d_wv);
  g.emplace("hal.w_q", std::move(d_wq));
  g.emplace("hal.w_k", std::move(d_wk));
  g.emplace("hal.w_v", std::move(d_wv));
  return g;
}

}  // namespace pal
