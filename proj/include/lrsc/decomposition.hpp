#pragma once

#include <cstddef>
#include <memory>
#include <string>

#include "lrsc/matrixcore.hpp"

namespace lrsc {

// Factors of one compressed layer: W ~ U [V_common; V_individual] + S.
// `v_common` points at the block shared by every member of the group, so all
// members of one group see the same storage.
struct Decomposition {
  std::string layer;
  DenseMatrix u;                                   // n x (m_common + m_individual)
  std::shared_ptr<const DenseMatrix> v_common;     // m_common x p, shared
  DenseMatrix v_individual;                        // m_individual x p
  SparseMatrix s;                                  // n x p
  std::size_t rank_budget = 0;                     // m_t
  std::size_t card_budget = 0;                     // q_t

  std::size_t rows() const { return static_cast<std::size_t>(u.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(v_individual.cols()); }
  std::size_t common_rank() const { return v_common ? static_cast<std::size_t>(v_common->rows()) : 0; }
  std::size_t individual_rank() const { return static_cast<std::size_t>(v_individual.rows()); }
  std::size_t rank() const { return common_rank() + individual_rank(); }

  DenseMatrix v() const {
    DenseMatrix out(static_cast<Eigen::Index>(rank()), v_individual.cols());
    const auto mc = static_cast<Eigen::Index>(common_rank());
    if (mc > 0) out.topRows(mc) = *v_common;
    out.bottomRows(v_individual.rows()) = v_individual;
    return out;
  }

  DenseMatrix low_rank() const {
    if (rank() == 0) return DenseMatrix::Zero(u.rows(), v_individual.cols());
    return u * v();
  }

  // U V + S materialized densely.
  DenseMatrix dense() const {
    DenseMatrix out = low_rank();
    for (const auto& t : s.triplets())
      out(static_cast<Eigen::Index>(t.row), static_cast<Eigen::Index>(t.col)) += t.value;
    return out;
  }
};

}  // namespace lrsc
