#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pal/error.hpp"
#include "pal/gradients.hpp"
#include "pal/matrix.hpp"

namespace pal {

// Attended episode features with episode-local labels in 0..way-1.
struct EpisodeFeatures {
  Matrix xs_ctx;  // NK x d support features (post attention)
  Matrix xq_ctx;  // NQ x d query features (post attention)
  std::vector<std::uint32_t> support_labels;
  std::vector<std::uint32_t> query_labels;
  std::size_t way = 0;
};

// Class prototypes: row c is the mean of the class-c support rows.
struct Prototypes {
  Matrix w;  // way x d
};

// How the prototype-centered loss treats cosine similarities: Literal keeps
// the raw cosines (sums clamped below to stay inside the log's domain), Exp
// exponentiates them first so numerator and denominator are always positive.
enum class PccMode { Exp, Literal };

inline std::string pcc_mode_name(PccMode mode) {
  return mode == PccMode::Exp ? "exp" : "literal";
}

inline PccMode pcc_mode_from_name(const std::string& name) {
  if (name == "exp") return PccMode::Exp;
  if (name == "literal") return PccMode::Literal;
  throw ConfigError("unknown pcc mode '" + name + "' (expected exp or literal)");
}

namespace detail {

// Rows of each class, in input order; validates label range. require_all
// additionally rejects classes that received no rows.
inline RowGroups class_groups(const std::vector<std::uint32_t>& labels,
                              std::size_t way, bool require_all,
                              const char* what) {
  if (way == 0) throw PreconditionError("episode way must be positive");
  RowGroups groups(way);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= way)
      throw PreconditionError(std::string(what) + " label " +
                              std::to_string(labels[i]) + " out of range for " +
                              std::to_string(way) + "-way episode");
    groups[labels[i]].push_back(i);
  }
  if (require_all)
    for (std::size_t c = 0; c < way; ++c)
      if (groups[c].empty())
        throw PreconditionError("class " + std::to_string(c) + " has no " +
                                what + " rows");
  return groups;
}

constexpr double kLiteralClamp = 1e-6;

}  // namespace detail

inline Prototypes compute_prototypes(const EpisodeFeatures& ef) {
  if (ef.xs_ctx.rows() != ef.support_labels.size())
    throw ShapeError("support feature rows " + std::to_string(ef.xs_ctx.rows()) +
                     " do not match label count " +
                     std::to_string(ef.support_labels.size()));
  RowGroups groups = detail::class_groups(ef.support_labels, ef.way, true, "support");
  const std::size_t k = groups[0].size();
  for (std::size_t c = 1; c < ef.way; ++c)
    if (groups[c].size() != k)
      throw PreconditionError("unbalanced support set: class 0 has " +
                              std::to_string(k) + " rows, class " +
                              std::to_string(c) + " has " +
                              std::to_string(groups[c].size()));
  return Prototypes{mean_rows(ef.xs_ctx, groups)};
}

struct QueryLoss {
  double loss = 0.0;
  Matrix probs;  // NQ x way, rows sum to 1
};

// Cross-entropy of each query against the cosine-softmax over prototypes,
// averaged over queries.
inline QueryLoss query_centered_loss(const EpisodeFeatures& ef,
                                     const Prototypes& protos,
                                     double scale = 1.0) {
  if (protos.w.rows() != ef.way)
    throw ShapeError("prototype count " + std::to_string(protos.w.rows()) +
                     " does not match way " + std::to_string(ef.way));
  if (ef.xq_ctx.rows() != ef.query_labels.size())
    throw ShapeError("query feature rows do not match label count");
  if (ef.xq_ctx.rows() == 0)
    throw PreconditionError("query_centered_loss requires at least one query");
  detail::class_groups(ef.query_labels, ef.way, false, "query");

  Matrix cos = cosine_rows(ef.xq_ctx, protos.w);
  Matrix scores = scaled(cos, scale);
  QueryLoss out;
  out.probs = row_softmax(scores);
  const std::size_t nq = ef.xq_ctx.rows();
  for (std::size_t j = 0; j < nq; ++j) {
    const double p = out.probs(j, ef.query_labels[j]);
    if (!(p > 0.0)) throw NumericError("vanishing query probability");
    out.loss -= std::log(p);
  }
  out.loss /= static_cast<double>(nq);
  return out;
}

// Per-class contrast of query similarities against the class prototype:
// -log of (same-class mass / total mass), averaged over classes.
inline double prototype_centered_loss(const EpisodeFeatures& ef,
                                      const Prototypes& protos, PccMode mode,
                                      double scale = 1.0) {
  if (protos.w.rows() != ef.way)
    throw ShapeError("prototype count does not match way");
  if (ef.xq_ctx.rows() != ef.query_labels.size())
    throw ShapeError("query feature rows do not match label count");
  RowGroups groups = detail::class_groups(ef.query_labels, ef.way, true, "query");

  Matrix cos = cosine_rows(protos.w, ef.xq_ctx);  // way x NQ
  double loss = 0.0;
  for (std::size_t c = 0; c < ef.way; ++c) {
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < cos.cols(); ++j) {
      const double v = mode == PccMode::Exp ? std::exp(scale * cos(c, j)) : cos(c, j);
      den += v;
      if (ef.query_labels[j] == c) num += v;
    }
    if (mode == PccMode::Literal) {
      num = std::max(num, detail::kLiteralClamp);
      den = std::max(den, detail::kLiteralClamp);
    }
    loss -= std::log(num / den);
  }
  return loss / static_cast<double>(ef.way);
}

struct CombinedLoss {
  double total = 0.0;
  double meta = 0.0;
  double pcc = 0.0;
  Matrix probs;     // query-centered probabilities, NQ x way
  Gradients grads;  // keys: xs_ctx, xq_ctx
};

// Weighted sum of the query-centered and prototype-centered losses with
// analytic gradients through the prototypes back to the attended features.
// The supplied prototypes must be consistent with ef (defense against a
// stale or foreign prototype matrix).
inline CombinedLoss combined_loss(const EpisodeFeatures& ef, const Prototypes& protos,
                                  double lambda, PccMode mode = PccMode::Exp,
                                  double scale = 1.0) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw PreconditionError("lambda must be finite and non-negative");
  Prototypes check = compute_prototypes(ef);
  if (!check.w.same_shape(protos.w) || max_abs_diff(check.w, protos.w) > 1e-12)
    throw PreconditionError("prototypes are not the class means of the support rows");
  RowGroups support_groups = detail::class_groups(ef.support_labels, ef.way, true, "support");

  CombinedLoss out;
  const std::size_t nq = ef.xq_ctx.rows();

  // query-centered piece
  Matrix cos_q = cosine_rows(ef.xq_ctx, protos.w);  // NQ x way
  Matrix probs = row_softmax(scaled(cos_q, scale));
  for (std::size_t j = 0; j < nq; ++j) {
    const double p = probs(j, ef.query_labels[j]);
    if (!(p > 0.0)) throw NumericError("vanishing query probability");
    out.meta -= std::log(p);
  }
  out.meta /= static_cast<double>(nq);
  Matrix d_cos_q(nq, ef.way);
  for (std::size_t j = 0; j < nq; ++j)
    for (std::size_t c = 0; c < ef.way; ++c)
      d_cos_q(j, c) = scale *
                      (probs(j, c) - (ef.query_labels[j] == c ? 1.0 : 0.0)) /
                      static_cast<double>(nq);
  CosineGrads qg = cosine_rows_backward(ef.xq_ctx, protos.w, cos_q, d_cos_q);
  Matrix d_xq = qg.da;
  Matrix d_protos = qg.db;
  out.probs = std::move(probs);

  // prototype-centered piece
  if (lambda > 0.0) {
    detail::class_groups(ef.query_labels, ef.way, true, "query");
    Matrix cos_p = cosine_rows(protos.w, ef.xq_ctx);  // way x NQ
    Matrix d_cos_p(ef.way, nq);
    const double inv_n = 1.0 / static_cast<double>(ef.way);
    for (std::size_t c = 0; c < ef.way; ++c) {
      double num = 0.0, den = 0.0;
      for (std::size_t j = 0; j < nq; ++j) {
        const double v =
            mode == PccMode::Exp ? std::exp(scale * cos_p(c, j)) : cos_p(c, j);
        den += v;
        if (ef.query_labels[j] == c) num += v;
      }
      const bool num_clamped = mode == PccMode::Literal && num < detail::kLiteralClamp;
      const bool den_clamped = mode == PccMode::Literal && den < detail::kLiteralClamp;
      const double num_eff = num_clamped ? detail::kLiteralClamp : num;
      const double den_eff = den_clamped ? detail::kLiteralClamp : den;
      out.pcc -= inv_n * std::log(num_eff / den_eff);
      for (std::size_t j = 0; j < nq; ++j) {
        const double dv =
            inv_n * ((den_clamped ? 0.0 : 1.0 / den_eff) -
                     (ef.query_labels[j] == c && !num_clamped ? 1.0 / num_eff : 0.0));
        d_cos_p(c, j) =
            mode == PccMode::Exp ? dv * scale * std::exp(scale * cos_p(c, j)) : dv;
      }
    }
    CosineGrads pg = cosine_rows_backward(protos.w, ef.xq_ctx, cos_p, d_cos_p);
    accumulate(d_protos, scaled(pg.da, lambda));
    accumulate(d_xq, scaled(pg.db, lambda));
  }

  out.total = out.meta + lambda * out.pcc;
  out.grads.emplace("xq_ctx", std::move(d_xq));
  out.grads.emplace("xs_ctx",
                    mean_rows_backward(d_protos, ef.xs_ctx.rows(), support_groups));
  return out;
}

// Geometry of an attended (or raw) support set: how tightly each class
// clusters around its centroid, and how similar the class centroids are to
// one another. Norms are floored rather than rejected so the metrics stay
// defined on degenerate inputs.
struct SeparationMetrics {
  double intra_spread = 0.0;     // mean over classes of mean(1 - cos(row, centroid))
  double inter_proto_cos = 0.0;  // mean pairwise cosine between class centroids
};

inline SeparationMetrics separation_metrics(const Matrix& xs,
                                            const std::vector<std::uint32_t>& labels,
                                            std::size_t way) {
  if (xs.rows() != labels.size())
    throw ShapeError("feature rows do not match label count");
  RowGroups groups = detail::class_groups(labels, way, true, "support");
  Matrix centroids = mean_rows(xs, groups);

  auto safe_cos = [](std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
  };

  SeparationMetrics m;
  for (std::size_t c = 0; c < way; ++c) {
    double spread = 0.0;
    for (std::size_t i : groups[c])
      spread += 1.0 - safe_cos(xs.row(i), centroids.row(c));
    m.intra_spread += spread / static_cast<double>(groups[c].size());
  }
  m.intra_spread /= static_cast<double>(way);

  std::size_t pairs = 0;
  for (std::size_t a = 0; a < way; ++a)
    for (std::size_t b = a + 1; b < way; ++b) {
      m.inter_proto_cos += safe_cos(centroids.row(a), centroids.row(b));
      ++pairs;
    }
  if (pairs > 0) m.inter_proto_cos /= static_cast<double>(pairs);
  return m;
}

}  // namespace pal
