#pragma once

// Dense and sparse kernels shared by the rest of the library: thin QR,
// Moore-Penrose pseudoinverse, truncated SVD, soft-thresholding and
// top-q magnitude projection. Everything here is a pure function.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrsc/error.hpp"

namespace lrsc {

using DenseMatrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline bool all_finite(const DenseMatrix& m) { return m.allFinite(); }

inline void require_finite(const DenseMatrix& m, const std::string& what) {
  if (!m.allFinite()) throw PreconditionError(what + " contains NaN or Inf");
}

struct Triplet {
  std::size_t row = 0;
  std::size_t col = 0;
  double value = 0.0;

  friend bool operator==(const Triplet&, const Triplet&) = default;
};

// Coordinate-format sparse matrix. Triplets are kept in canonical row-major
// order with no duplicates and no explicit zeros.
class SparseMatrix {
public:
  SparseMatrix() = default;
  SparseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {}

  SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Triplet> triplets)
      : rows_(rows), cols_(cols), triplets_(std::move(triplets)) {
    std::sort(triplets_.begin(), triplets_.end(), [](const Triplet& a, const Triplet& b) {
      return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    for (std::size_t i = 0; i < triplets_.size(); ++i) {
      const auto& t = triplets_[i];
      if (t.row >= rows_ || t.col >= cols_)
        throw PreconditionError("sparse triplet (" + std::to_string(t.row) + "," +
                                std::to_string(t.col) + ") out of range");
      if (t.value == 0.0) throw PreconditionError("sparse triplet stores an explicit zero");
      if (!std::isfinite(t.value)) throw PreconditionError("sparse triplet value is not finite");
      if (i > 0 && triplets_[i - 1].row == t.row && triplets_[i - 1].col == t.col)
        throw PreconditionError("duplicate sparse triplet (" + std::to_string(t.row) + "," +
                                std::to_string(t.col) + ")");
    }
  }

  static SparseMatrix from_dense(const DenseMatrix& m) {
    SparseMatrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        if (m(r, c) != 0.0)
          out.triplets_.push_back({static_cast<std::size_t>(r), static_cast<std::size_t>(c), m(r, c)});
    return out;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t nnz() const noexcept { return triplets_.size(); }
  const std::vector<Triplet>& triplets() const noexcept { return triplets_; }

  DenseMatrix to_dense() const {
    DenseMatrix m = DenseMatrix::Zero(static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_));
    for (const auto& t : triplets_) m(static_cast<Eigen::Index>(t.row), static_cast<Eigen::Index>(t.col)) = t.value;
    return m;
  }

  // y = S x
  Vector apply(const Vector& x) const {
    if (static_cast<std::size_t>(x.size()) != cols_) throw PreconditionError("sparse apply: length mismatch");
    Vector y = Vector::Zero(static_cast<Eigen::Index>(rows_));
    for (const auto& t : triplets_)
      y(static_cast<Eigen::Index>(t.row)) += t.value * x(static_cast<Eigen::Index>(t.col));
    return y;
  }

  friend bool operator==(const SparseMatrix&, const SparseMatrix&) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Triplet> triplets_;
};

struct QrResult {
  DenseMatrix q;  // n x m, orthonormal columns
  DenseMatrix r;  // m x m, upper triangular, nonnegative diagonal
};

// Thin Householder QR with the sign of each column chosen so that diag(R) >= 0.
inline QrResult qr_thin(const DenseMatrix& m) {
  const Eigen::Index n = m.rows();
  const Eigen::Index k = m.cols();
  if (n < k) throw PreconditionError("qr_thin needs rows >= cols, got " + std::to_string(n) + "x" + std::to_string(k));
  require_finite(m, "qr_thin input");

  QrResult out;
  if (k == 0) {
    out.q = DenseMatrix(n, 0);
    out.r = DenseMatrix(0, 0);
    return out;
  }
  Eigen::HouseholderQR<DenseMatrix> qr(m);
  out.q = qr.householderQ() * DenseMatrix::Identity(n, k);
  out.r = qr.matrixQR().topRows(k).template triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < k; ++j) {
    if (out.r(j, j) < 0.0) {
      out.r.row(j) *= -1.0;
      out.q.col(j) *= -1.0;
    }
  }
  return out;
}

struct SvdResult {
  DenseMatrix u;       // rows x m
  Vector singular;     // m, descending
  DenseMatrix v;       // cols x m
};

// Rank-m truncation of the singular value decomposition; U diag(s) V^T is the
// best rank-m approximation of `w` in Frobenius norm.
inline SvdResult truncated_svd(const DenseMatrix& w, std::size_t m) {
  const auto full = static_cast<std::size_t>(std::min(w.rows(), w.cols()));
  if (m < 1 || m > full)
    throw PreconditionError("truncated_svd rank " + std::to_string(m) + " outside [1, " + std::to_string(full) + "]");
  require_finite(w, "truncated_svd input");
  Eigen::BDCSVD<DenseMatrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto k = static_cast<Eigen::Index>(m);
  return {svd.matrixU().leftCols(k), svd.singularValues().head(k), svd.matrixV().leftCols(k)};
}

// Moore-Penrose pseudoinverse. Singular values below
// 1e-12 * max(rows, cols) * sigma_max are treated as zero.
inline DenseMatrix pseudoinverse(const DenseMatrix& a) {
  require_finite(a, "pseudoinverse input");
  if (a.size() == 0) return DenseMatrix::Zero(a.cols(), a.rows());
  Eigen::BDCSVD<DenseMatrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double cutoff = 1e-12 * static_cast<double>(std::max(a.rows(), a.cols())) * s(0);
  Vector inv = Vector::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > cutoff) inv(i) = 1.0 / s(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

inline double soft_threshold(double x, double tau) {
  if (!(tau >= 0.0)) throw PreconditionError("soft_threshold needs tau >= 0");
  const double mag = std::abs(x) - tau;
  if (mag <= 0.0) return 0.0;
  return x > 0.0 ? mag : -mag;
}

// Entrywise shrinkage sign(x) * max(|x| - tau, 0).
inline DenseMatrix soft_threshold(const DenseMatrix& m, double tau) {
  if (!(tau >= 0.0)) throw PreconditionError("soft_threshold needs tau >= 0");
  return m.unaryExpr([tau](double x) { return soft_threshold(x, tau); });
}

// Keeps the q largest-magnitude entries. Equal magnitudes are resolved in
// favour of the earlier row-major position.
inline SparseMatrix top_q_project(const DenseMatrix& m, std::size_t q) {
  const auto rows = static_cast<std::size_t>(m.rows());
  const auto cols = static_cast<std::size_t>(m.cols());
  std::vector<std::size_t> order;
  order.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      if (m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) != 0.0) order.push_back(r * cols + c);

  auto at = [&](std::size_t flat) {
    return std::abs(m(static_cast<Eigen::Index>(flat / cols), static_cast<Eigen::Index>(flat % cols)));
  };
  auto before = [&](std::size_t a, std::size_t b) {
    const double ma = at(a), mb = at(b);
    return ma != mb ? ma > mb : a < b;
  };
  if (order.size() > q) {
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(q), order.end(), before);
    order.resize(q);
  }

  std::vector<Triplet> kept;
  kept.reserve(order.size());
  for (std::size_t flat : order) {
    const std::size_t r = flat / cols, c = flat % cols;
    kept.push_back({r, c, m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c))});
  }
  return SparseMatrix(rows, cols, std::move(kept));
}

}  // namespace lrsc
