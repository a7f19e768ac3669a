#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "pal/error.hpp"
#include "pal/rng.hpp"

namespace pal {

// Dense row-major matrix of doubles. Value semantics; every operation below
// is a pure function of its inputs.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m;
    m.rows_ = rows.size();
    m.cols_ = rows.size() ? rows.begin()->size() : 0;
    m.data_.reserve(m.rows_ * m.cols_);
    for (const auto& r : rows) {
      if (r.size() != m.cols_) throw ShapeError("from_rows: ragged row lengths");
      m.data_.insert(m.data_.end(), r.begin(), r.end());
    }
    return m;
  }

  static Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (auto& x : m.data_) x = stddev * rng.normal();
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const double& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// ---------------------------------------------------------------------------
// Elementwise helpers
// ---------------------------------------------------------------------------

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "add");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "sub");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

inline Matrix scaled(const Matrix& a, double s) {
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= s;
  return c;
}

// acc += m, allocating acc to m's shape if empty.
inline void accumulate(Matrix& acc, const Matrix& m) {
  if (acc.empty()) {
    acc = m;
    return;
  }
  check_same_shape(acc, m, "accumulate");
  for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += m.data()[i];
}

inline double sum(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i];
  return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a) + " * " + shape_str(b));
  Matrix c(a.rows(), b.cols());
  // i-k-j order keeps the inner loop contiguous in both b and c
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.data() + i * c.cols();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.data() + k * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

struct MatmulGrads {
  Matrix da, db;
};

// Reverse rule for c = a*b: da = dc * b^T, db = a^T * dc.
inline MatmulGrads matmul_backward(const Matrix& a, const Matrix& b, const Matrix& d_out) {
  if (d_out.rows() != a.rows() || d_out.cols() != b.cols())
    throw ShapeError("matmul_backward: upstream shape " + shape_str(d_out) + " does not match " +
                     std::to_string(a.rows()) + "x" + std::to_string(b.cols()));
  return {matmul(d_out, transpose(b)), matmul(transpose(a), d_out)};
}

// ---------------------------------------------------------------------------
// row_softmax
// ---------------------------------------------------------------------------

inline Matrix row_softmax(const Matrix& a) {
  if (a.empty()) throw PreconditionError("row_softmax: empty input");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(i, j) = std::exp(a(i, j) - mx);
      denom += out(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= denom;
  }
  return out;
}

// Reverse rule through a row-wise softmax, expressed in terms of the
// forward output s: dx_ij = s_ij * (g_ij - sum_k g_ik s_ik).
inline Matrix row_softmax_backward(const Matrix& softmax_out, const Matrix& d_out) {
  check_same_shape(softmax_out, d_out, "row_softmax_backward");
  Matrix dx(softmax_out.rows(), softmax_out.cols());
  for (std::size_t i = 0; i < softmax_out.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < softmax_out.cols(); ++j) dot += d_out(i, j) * softmax_out(i, j);
    for (std::size_t j = 0; j < softmax_out.cols(); ++j)
      dx(i, j) = softmax_out(i, j) * (d_out(i, j) - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// cosine_rows
// ---------------------------------------------------------------------------

namespace detail {
inline std::vector<double> row_norms_checked(const Matrix& m, const char* side) {
  std::vector<double> norms(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) s += m(i, j) * m(i, j);
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0)
      throw DegenerateInputError(std::string("cosine_rows: zero-norm ") + side + " row " +
                                 std::to_string(i));
  }
  return norms;
}
}  // namespace detail

// out[i][j] = <a_i, b_j> / (|a_i| |b_j|). Zero-norm rows are an error here;
// the backward pass floors norms at 1e-12 in denominators only.
inline Matrix cosine_rows(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw ShapeError("cosine_rows: column counts differ, " + shape_str(a) + " vs " + shape_str(b));
  const auto na = detail::row_norms_checked(a, "left");
  const auto nb = detail::row_norms_checked(b, "right");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) dot += a(i, k) * b(j, k);
      out(i, j) = dot / (na[i] * nb[j]);
    }
  return out;
}

struct CosineGrads {
  Matrix da, db;
};

// Reverse rule for c_ij = cos(a_i, b_j):
//   da_i += g_ij * (b_j / (|a_i||b_j|) - c_ij * a_i / |a_i|^2)
//   db_j += g_ij * (a_i / (|a_i||b_j|) - c_ij * b_j / |b_j|^2)
inline CosineGrads cosine_rows_backward(const Matrix& a, const Matrix& b, const Matrix& cos_out,
                                        const Matrix& d_out) {
  constexpr double kNormFloor = 1e-12;
  if (d_out.rows() != a.rows() || d_out.cols() != b.rows())
    throw ShapeError("cosine_rows_backward: upstream shape " + shape_str(d_out) +
                     " does not match " + std::to_string(a.rows()) + "x" +
                     std::to_string(b.rows()));
  check_same_shape(cos_out, d_out, "cosine_rows_backward");
  std::vector<double> na(a.rows()), nb(b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * a(i, k);
    na[i] = std::max(std::sqrt(s), kNormFloor);
  }
  for (std::size_t j = 0; j < b.rows(); ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < b.cols(); ++k) s += b(j, k) * b(j, k);
    nb[j] = std::max(std::sqrt(s), kNormFloor);
  }
  CosineGrads g{Matrix(a.rows(), a.cols()), Matrix(b.rows(), b.cols())};
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double gij = d_out(i, j);
      if (gij == 0.0) continue;
      const double inv = 1.0 / (na[i] * nb[j]);
      const double cij = cos_out(i, j);
      for (std::size_t k = 0; k < a.cols(); ++k) {
        g.da(i, k) += gij * (b(j, k) * inv - cij * a(i, k) / (na[i] * na[i]));
        g.db(j, k) += gij * (a(i, k) * inv - cij * b(j, k) / (nb[j] * nb[j]));
      }
    }
  return g;
}

// ---------------------------------------------------------------------------
// mean_rows
// ---------------------------------------------------------------------------

using RowGroups = std::vector<std::vector<std::size_t>>;

// One output row per group: the arithmetic mean of the selected input rows.
inline Matrix mean_rows(const Matrix& a, const RowGroups& groups) {
  Matrix out(groups.size(), a.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw PreconditionError("mean_rows: empty group " + std::to_string(g));
    for (std::size_t idx : groups[g]) {
      if (idx >= a.rows())
        throw PreconditionError("mean_rows: row index " + std::to_string(idx) + " out of range");
      for (std::size_t j = 0; j < a.cols(); ++j) out(g, j) += a(idx, j);
    }
    const double inv = 1.0 / static_cast<double>(groups[g].size());
    for (std::size_t j = 0; j < a.cols(); ++j) out(g, j) *= inv;
  }
  return out;
}

// Distributes 1/|group| of each group's upstream row to its members.
inline Matrix mean_rows_backward(const Matrix& d_out, std::size_t input_rows,
                                 const RowGroups& groups) {
  if (d_out.rows() != groups.size())
    throw ShapeError("mean_rows_backward: upstream rows " + std::to_string(d_out.rows()) +
                     " vs group count " + std::to_string(groups.size()));
  Matrix dx(input_rows, d_out.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double inv = 1.0 / static_cast<double>(groups[g].size());
    for (std::size_t idx : groups[g])
      for (std::size_t j = 0; j < d_out.cols(); ++j) dx(idx, j) += inv * d_out(g, j);
  }
  return dx;
}

}  // namespace pal
