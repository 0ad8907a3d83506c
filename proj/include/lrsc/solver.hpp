#pragma once

// Low-rank + sparse decomposition of one layer or a group of layers that
// share a common block of right factors:
//
//   W_t ~ U_t [V_common; V_t] + S_t
//
// minimizing, per layer, the sample-normalized data term
// 1/(2s) ||Y_t - (L_t + S_t) X_t||_F^2 plus lambda_t ||W_t - L_t - S_t||_F^2,
// and, across the group, a depth-weighted distance between the individual
// blocks V_t. Weight-only problems use X = I, Y = W, s = 1.
//
// Each epoch runs, in order: greedy rank growth, a per-layer QR update of U
// followed by one diagonally preconditioned step on V, the common-block
// update, the similarity step on the individual blocks and finally one
// proximal step on every S_t followed by projection onto its cardinality
// budget.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lrsc/decomposition.hpp"
#include "lrsc/error.hpp"
#include "lrsc/layermodel.hpp"
#include "lrsc/matrixcore.hpp"

namespace lrsc {

enum class Mode { single, independent, shared, micik };
enum class DataTerm { calibration, weight_only };
enum class SimilaritySign { attract, repel };
enum class CommonUpdate { consensus, carry };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::single: return "single";
    case Mode::independent: return "independent";
    case Mode::shared: return "shared";
    case Mode::micik: return "micik";
  }
  return "?";
}
inline const char* to_string(DataTerm d) { return d == DataTerm::calibration ? "calibration" : "weight_only"; }
inline const char* to_string(SimilaritySign s) { return s == SimilaritySign::attract ? "attract" : "repel"; }
inline const char* to_string(CommonUpdate c) { return c == CommonUpdate::consensus ? "consensus" : "carry"; }

struct SolverConfig {
  Mode mode = Mode::micik;
  DataTerm data_term = DataTerm::calibration;
  double eta = 0.0;            // lambda = 10^eta * E_max(X X^T / s)
  double lambda2 = 0.13;       // l1 weight on S
  double lambda_theta = 1e-3;  // similarity weight, micik mode only
  SimilaritySign similarity_sign = SimilaritySign::attract;
  std::vector<std::size_t> rank{1};         // m_t; a single value applies to every member
  double common_ratio = 0.5;                // m_common = round(ratio * min_t m_t)
  std::vector<std::size_t> cardinality{0};  // q_t; a single value applies to every member
  std::size_t epochs = 30;
  std::size_t delta_m = 1;
  bool enforce_cardinality = true;
  CommonUpdate common_update = CommonUpdate::consensus;
  std::uint64_t seed = 0;

  std::size_t rank_for(std::size_t t) const { return pick(rank, t, "rank"); }
  std::size_t card_for(std::size_t t) const { return pick(cardinality, t, "cardinality"); }
  double effective_lambda_theta() const { return mode == Mode::micik ? lambda_theta : 0.0; }
  double similarity_factor() const { return similarity_sign == SimilaritySign::attract ? 1.0 : -1.0; }

private:
  static std::size_t pick(const std::vector<std::size_t>& v, std::size_t t, const char* what) {
    if (v.empty()) throw ConfigError(std::string(what) + " is not set");
    if (v.size() == 1) return v.front();
    if (t >= v.size()) throw ConfigError(std::string(what) + " has no entry for member " + std::to_string(t));
    return v[t];
  }
};

struct GroupDecomposition {
  std::vector<Decomposition> members;
  std::shared_ptr<const DenseMatrix> v_common;
  std::vector<std::pair<std::size_t, double>> objective_trace;  // (epoch, objective)
  std::vector<double> lambdas;
  SolverConfig config;
  std::size_t reinitialized_columns = 0;
};

// lambda = 10^eta * largest eigenvalue of X X^T / s.
inline double compute_lambda(const DenseMatrix& x, double eta) {
  if (x.rows() < 1 || x.cols() < 1) throw PreconditionError("compute_lambda needs a non-empty X");
  require_finite(x, "compute_lambda X");
  const DenseMatrix gram = x * x.transpose() / static_cast<double>(x.cols());
  Eigen::SelfAdjointEigenSolver<DenseMatrix> eig(gram, Eigen::EigenvaluesOnly);
  return std::pow(10.0, eta) * eig.eigenvalues().maxCoeff();
}

inline double compute_lambda_weight_only(double eta) { return std::pow(10.0, eta); }

// Depth-proximity weight: 1/(j-i) for i < j, zero otherwise.
inline double theta_weight(std::size_t i, std::size_t j) {
  if (i < 1 || j < 1) throw PreconditionError("theta_weight indices are 1-based");
  return i < j ? 1.0 / static_cast<double>(j - i) : 0.0;
}

// Per-layer quantities that stay fixed during a solve.
class LayerProblem {
public:
  static LayerProblem weight_only(const DenseMatrix& w, double lambda) {
    LayerProblem p(w, lambda);
    p.cross_ = w;
    p.diag_ = Vector::Constant(w.cols(), 1.0 + 2.0 * lambda);
    return p;
  }

  static LayerProblem calibrated(const DenseMatrix& w, const DenseMatrix& x, const DenseMatrix& y, double lambda) {
    if (x.rows() != w.cols() || y.rows() != w.rows() || x.cols() != y.cols() || x.cols() < 1)
      throw PreconditionError("calibration shapes do not match the weight matrix");
    LayerProblem p(w, lambda);
    p.x_ = &x;
    p.y_ = &y;
    p.samples_ = static_cast<double>(x.cols());
    p.gram_ = x * x.transpose() / p.samples_;
    p.cross_ = y * x.transpose() / p.samples_;
    DenseMatrix a = lambda * DenseMatrix::Identity(w.cols(), w.cols()) + *p.gram_;
    p.a_pinv_ = pseudoinverse(a);
    p.diag_ = p.gram_->diagonal().array() + 2.0 * lambda;
    return p;
  }

  const DenseMatrix& w() const noexcept { return *w_; }
  double lambda() const noexcept { return lambda_; }
  double samples() const noexcept { return samples_; }
  bool has_calibration() const noexcept { return x_ != nullptr; }
  const DenseMatrix& x() const { return *x_; }
  const DenseMatrix& y() const { return *y_; }
  // (X X^T / s)_jj + 2 lambda: the exact diagonal of the V and S Hessians.
  const Vector& hessian_diagonal() const noexcept { return diag_; }

  // M (X X^T / s); identity for weight-only problems.
  DenseMatrix times_gram(const DenseMatrix& m) const { return gram_ ? DenseMatrix(m * *gram_) : m; }
  // Y X^T / s; W for weight-only problems.
  const DenseMatrix& cross() const noexcept { return cross_; }

  // B = lambda (W - S) + (Y X^T - S X X^T) / s
  DenseMatrix b_matrix(const DenseMatrix& s) const { return lambda_ * (*w_ - s) + (cross_ - times_gram(s)); }

  // B A^+ with A = lambda I + X X^T / s.
  DenseMatrix times_a_pinv(const DenseMatrix& b) const {
    if (a_pinv_) return b * *a_pinv_;
    const double a = lambda_ + 1.0;
    return a > 0.0 ? DenseMatrix(b / a) : DenseMatrix::Zero(b.rows(), b.cols());
  }

  // 1/(2s) ||Y - M X||^2 + lambda ||W - M||^2 for M = U V + S.
  double objective(const DenseMatrix& m) const {
    const double weight_term = lambda_ * (*w_ - m).squaredNorm();
    if (!x_) return 0.5 * (*w_ - m).squaredNorm() + weight_term;
    return 0.5 * (*y_ - m * *x_).squaredNorm() / samples_ + weight_term;
  }

private:
  LayerProblem(const DenseMatrix& w, double lambda) : w_(&w), lambda_(lambda) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw PreconditionError("lambda must be finite and >= 0");
    require_finite(w, "weight matrix");
  }

  const DenseMatrix* w_;
  const DenseMatrix* x_ = nullptr;
  const DenseMatrix* y_ = nullptr;
  double lambda_;
  double samples_ = 1.0;
  std::optional<DenseMatrix> gram_;
  std::optional<DenseMatrix> a_pinv_;
  DenseMatrix cross_;
  Vector diag_;
};

struct QrUpdate {
  DenseMatrix u;
  DenseMatrix v;
  std::size_t reinitialized = 0;  // degenerate columns replaced
};

struct QrUpdateOptions {
  // Rotate the QR basis by the polar factor of R so that U matches the row
  // order of V_prev (orthogonal Procrustes). Used when part of V is shared.
  bool align_to_previous = false;
  std::uint64_t seed = 0;
};

namespace detail {

inline bool orthonormalize_against(Vector& v, const DenseMatrix& basis, Eigen::Index used) {
  for (int pass = 0; pass < 2; ++pass)
    for (Eigen::Index j = 0; j < used; ++j) v -= basis.col(j).dot(v) * basis.col(j);
  const double norm = v.norm();
  if (!(norm > 1e-10)) return false;
  v /= norm;
  return true;
}

inline DenseMatrix polar_factor(const DenseMatrix& r) {
  Eigen::JacobiSVD<DenseMatrix> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

inline DenseMatrix scale_columns(const DenseMatrix& m, const Vector& inv_scale) {
  return m.array().rowwise() / inv_scale.transpose().array();
}

}  // namespace detail

// U = Q from QR(B V_prev^T), V = U^T (B A^+). Columns of B V_prev^T that
// vanish are re-seeded from the leading left singular vectors of the part of
// W - S the remaining columns do not explain (random directions as a last
// resort), keeping U orthonormal.
inline QrUpdate update_U_V_qr(const LayerProblem& lp, const DenseMatrix& s, const DenseMatrix& v_prev,
                              const QrUpdateOptions& opts = {}) {
  const DenseMatrix& w = lp.w();
  if (s.rows() != w.rows() || s.cols() != w.cols() || v_prev.cols() != w.cols())
    throw PreconditionError("update_U_V_qr: inconsistent dimensions");
  if (v_prev.rows() > w.rows()) throw PreconditionError("update_U_V_qr: rank exceeds row count");

  const DenseMatrix b = lp.b_matrix(s);
  const DenseMatrix ba = lp.times_a_pinv(b);
  const Eigen::Index m = v_prev.rows();
  QrResult qr = qr_thin(b * v_prev.transpose());

  QrUpdate out;
  if (m > 0) {
    const double top = qr.r.diagonal().cwiseAbs().maxCoeff();
    const double tol = 1e-12 * top;
    std::vector<Eigen::Index> bad;
    for (Eigen::Index j = 0; j < m; ++j)
      if (qr.r(j, j) <= tol) bad.push_back(j);
    if (!bad.empty()) {
      // Good columns first so candidates can be orthogonalized against them.
      DenseMatrix basis(w.rows(), m);
      Eigen::Index used = 0;
      for (Eigen::Index j = 0; j < m; ++j)
        if (std::find(bad.begin(), bad.end(), j) == bad.end()) basis.col(used++) = qr.q.col(j);
      DenseMatrix residual = w - s;
      if (used > 0) residual -= basis.leftCols(used) * (basis.leftCols(used).transpose() * residual);
      std::vector<Vector> candidates;
      if (residual.norm() > 0.0) {
        const auto k = std::min<std::size_t>(bad.size(), static_cast<std::size_t>(std::min(w.rows(), w.cols())));
        SvdResult svd = truncated_svd(residual, k);
        for (Eigen::Index j = 0; j < svd.u.cols(); ++j) candidates.emplace_back(svd.u.col(j));
      }
      std::mt19937_64 rng(opts.seed);
      std::normal_distribution<double> normal;
      std::size_t next = 0;
      for (Eigen::Index j : bad) {
        Vector v;
        bool ok = false;
        while (next < candidates.size() && !ok) {
          v = candidates[next++];
          ok = detail::orthonormalize_against(v, basis, used);
        }
        while (!ok) {
          v = Vector::NullaryExpr(w.rows(), [&] { return normal(rng); });
          ok = detail::orthonormalize_against(v, basis, used);
        }
        basis.col(used++) = v;
        qr.q.col(j) = v;
      }
      out.reinitialized = bad.size();
    }
    if (opts.align_to_previous) {
      qr.q = qr.q * detail::polar_factor(qr.q.transpose() * (b * v_prev.transpose()));
    }
  }
  out.u = std::move(qr.q);
  out.v = out.u.transpose() * ba;
  return out;
}

// Gradient of the single-layer objective with respect to V.
inline DenseMatrix gradient_V(const LayerProblem& lp, const DenseMatrix& u, const DenseMatrix& v, const DenseMatrix& s) {
  const DenseMatrix m = u * v + s;
  return u.transpose() * (lp.times_gram(m) - lp.cross()) + 2.0 * lp.lambda() * (u.transpose() * (m - lp.w()));
}

// Gradient of the single-layer objective (without the l1 term) with respect to S.
inline DenseMatrix gradient_S(const LayerProblem& lp, const DenseMatrix& u, const DenseMatrix& v, const DenseMatrix& s) {
  const DenseMatrix m = u * v + s;
  return (lp.times_gram(m) - lp.cross()) + 2.0 * lp.lambda() * (m - lp.w());
}

// One Jacobi-preconditioned step V <- V - G / D, D the Hessian diagonal.
inline DenseMatrix gradient_step_V(const LayerProblem& lp, const DenseMatrix& u, const DenseMatrix& v,
                                   const DenseMatrix& s) {
  const Vector& d = lp.hessian_diagonal();
  if ((d.array() <= 0.0).any()) throw PreconditionError("gradient_step_V: zero preconditioner entry");
  if (v.rows() == 0) return v;
  return v - detail::scale_columns(gradient_V(lp, u, v, s), d);
}

// Proximal step on S: soft-threshold with per-column step 1/D_j, then keep
// the q largest entries when the budget is enforced. Returns the dense view.
inline DenseMatrix update_S_dense(const LayerProblem& lp, const DenseMatrix& u, const DenseMatrix& v,
                                  const DenseMatrix& s, double lambda2, std::size_t q, bool enforce_cardinality) {
  if (!(lambda2 >= 0.0)) throw PreconditionError("update_S: lambda2 must be >= 0");
  const Vector& d = lp.hessian_diagonal();
  if ((d.array() <= 0.0).any()) throw PreconditionError("update_S: step size undefined (zero denominator)");
  const DenseMatrix g = gradient_S(lp, u, v, s);
  DenseMatrix next(s.rows(), s.cols());
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    const double step = 1.0 / d(j);
    for (Eigen::Index i = 0; i < s.rows(); ++i) next(i, j) = soft_threshold(s(i, j) - step * g(i, j), step * lambda2);
  }
  if (enforce_cardinality) return top_q_project(next, q).to_dense();
  return next;
}

inline SparseMatrix update_S(const LayerProblem& lp, const DenseMatrix& u, const DenseMatrix& v, const DenseMatrix& s,
                             double lambda2, std::size_t q, bool enforce_cardinality) {
  return SparseMatrix::from_dense(update_S_dense(lp, u, v, s, lambda2, q, enforce_cardinality));
}

// V_t <- V_t - sign * 2 lambda_theta * sum_j (theta_tj + theta_jt)(V_t - V_j),
// evaluated from the incoming blocks (simultaneous update) on their common
// leading rows.
inline std::vector<DenseMatrix> apply_similarity_step(std::vector<DenseMatrix> blocks, double lambda_theta,
                                                      SimilaritySign sign) {
  const std::size_t count = blocks.size();
  if (count < 2 || lambda_theta == 0.0) return blocks;
  Eigen::Index rows = blocks.front().rows();
  for (const auto& b : blocks) {
    rows = std::min(rows, b.rows());
    if (b.cols() != blocks.front().cols()) throw PreconditionError("similarity step: blocks differ in width");
  }
  if (rows == 0) return blocks;

  std::vector<DenseMatrix> old;
  old.reserve(count);
  for (const auto& b : blocks) old.emplace_back(b.topRows(rows));
  const double scale = (sign == SimilaritySign::attract ? 1.0 : -1.0) * 2.0 * lambda_theta;
  for (std::size_t t = 0; t < count; ++t) {
    DenseMatrix pull = DenseMatrix::Zero(rows, old[t].cols());
    for (std::size_t j = 0; j < count; ++j) {
      const double weight = theta_weight(t + 1, j + 1) + theta_weight(j + 1, t + 1);
      if (weight != 0.0) pull += weight * (old[t] - old[j]);
    }
    blocks[t].topRows(rows) = old[t] - scale * pull;
  }
  return blocks;
}

// Ranks used in each epoch: 1, 1 + dm, 1 + 2 dm, ... capped at the target.
inline std::vector<std::size_t> greedy_rank_schedule(std::size_t target, std::size_t delta_m, std::size_t epochs) {
  if (target < 1) throw PreconditionError("greedy_rank_schedule needs a target rank >= 1");
  if (delta_m < 1) throw PreconditionError("greedy_rank_schedule needs delta_m >= 1");
  std::vector<std::size_t> out;
  out.reserve(epochs);
  std::size_t r = 1;
  for (std::size_t k = 0; k < epochs; ++k) {
    out.push_back(std::min(r, target));
    if (r < target) r += delta_m;
  }
  return out;
}

inline double similarity_penalty(const std::vector<DenseMatrix>& blocks) {
  if (blocks.size() < 2) return 0.0;
  Eigen::Index rows = blocks.front().rows();
  for (const auto& b : blocks) rows = std::min(rows, b.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < blocks.size(); ++i)
    for (std::size_t j = i + 1; j < blocks.size(); ++j)
      total += theta_weight(i + 1, j + 1) * (blocks[i].topRows(rows) - blocks[j].topRows(rows)).squaredNorm();
  return total;
}

namespace detail {

struct Plan {
  std::size_t common = 0;
  std::vector<std::size_t> individual;
  std::vector<std::size_t> card;
  bool use_calibration = false;
};

inline Plan plan_group(const LayerGroup& group, const SolverConfig& cfg) {
  if (group.size() == 0) throw ConfigError("empty group");
  if (cfg.mode == Mode::single && group.size() != 1) throw ConfigError("single mode takes exactly one layer");
  if (!(cfg.eta > -3.0 && cfg.eta < 3.0)) throw ConfigError("eta must lie in (-3, 3)");
  if (!(cfg.lambda2 >= 0.0)) throw ConfigError("lambda2 must be >= 0");
  if (!(cfg.lambda_theta >= 0.0)) throw ConfigError("lambda_theta must be >= 0");
  if (!(cfg.common_ratio >= 0.0 && cfg.common_ratio <= 1.0)) throw ConfigError("common_ratio must lie in [0, 1]");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.delta_m < 1) throw ConfigError("delta_m must be >= 1");
  if (cfg.rank.size() > 1 && cfg.rank.size() != group.size())
    throw ConfigError("per-layer rank list has " + std::to_string(cfg.rank.size()) + " entries for " +
                      std::to_string(group.size()) + " layers");
  if (cfg.cardinality.size() > 1 && cfg.cardinality.size() != group.size())
    throw ConfigError("per-layer cardinality list does not match the group size");

  Plan plan;
  const std::size_t p = group.cols();
  std::size_t min_rank = SIZE_MAX;
  for (std::size_t t = 0; t < group.size(); ++t) {
    const auto& m = group.members()[t];
    const std::size_t n = static_cast<std::size_t>(m.w.rows());
    const std::size_t r = cfg.rank_for(t);
    if (r < 1) throw ConfigError("rank for '" + m.source + "' must be >= 1");
    if (r > std::min(n, p))
      throw ConfigError("rank " + std::to_string(r) + " exceeds min(n, p) = " + std::to_string(std::min(n, p)) +
                        " for '" + m.source + "'");
    const std::size_t q = cfg.card_for(t);
    if (q > n * p) throw ConfigError("cardinality " + std::to_string(q) + " exceeds n*p for '" + m.source + "'");
    plan.card.push_back(q);
    min_rank = std::min(min_rank, r);
  }
  // A one-member group has nothing to share and is compressed individually.
  if ((cfg.mode == Mode::shared || cfg.mode == Mode::micik) && group.size() > 1)
    plan.common = static_cast<std::size_t>(std::llround(cfg.common_ratio * static_cast<double>(min_rank)));
  for (std::size_t t = 0; t < group.size(); ++t) plan.individual.push_back(cfg.rank_for(t) - plan.common);
  plan.use_calibration = cfg.data_term == DataTerm::calibration && group.has_calibration();
  return plan;
}

inline DenseMatrix stack(const DenseMatrix& top, const DenseMatrix& bottom) {
  DenseMatrix out(top.rows() + bottom.rows(), bottom.cols());
  if (top.rows() > 0) out.topRows(top.rows()) = top;
  if (bottom.rows() > 0) out.bottomRows(bottom.rows()) = bottom;
  return out;
}

}  // namespace detail

// Objective of a (partial) group state. `v_individual` blocks are compared on
// their common leading rows.
inline double group_objective(const std::vector<LayerProblem>& problems, const std::vector<DenseMatrix>& u,
                              const DenseMatrix& v_common, const std::vector<DenseMatrix>& v_individual,
                              const std::vector<DenseMatrix>& s, double lambda_theta, SimilaritySign sign) {
  double total = 0.0;
  for (std::size_t t = 0; t < problems.size(); ++t) {
    const DenseMatrix v = detail::stack(v_common, v_individual[t]);
    const DenseMatrix m = (v.rows() > 0 ? DenseMatrix(u[t] * v) : DenseMatrix::Zero(s[t].rows(), s[t].cols())) + s[t];
    total += problems[t].objective(m);
  }
  if (lambda_theta != 0.0)
    total += (sign == SimilaritySign::attract ? 1.0 : -1.0) * lambda_theta * similarity_penalty(v_individual);
  return total;
}

inline std::vector<LayerProblem> make_problems(const LayerGroup& group, const SolverConfig& cfg) {
  const bool cal = cfg.data_term == DataTerm::calibration && group.has_calibration();
  std::vector<LayerProblem> out;
  for (std::size_t t = 0; t < group.size(); ++t) {
    const auto& w = group.members()[t].w;
    if (cal) {
      const auto& c = group.calibration()[t];
      out.push_back(LayerProblem::calibrated(w, c.x, c.y, compute_lambda(c.x, cfg.eta)));
    } else {
      out.push_back(LayerProblem::weight_only(w, compute_lambda_weight_only(cfg.eta)));
    }
  }
  return out;
}

inline GroupDecomposition decompose_group(const LayerGroup& group, const SolverConfig& cfg) {
  const detail::Plan plan = detail::plan_group(group, cfg);
  const std::vector<LayerProblem> problems = make_problems(group, cfg);
  const std::size_t count = group.size();
  const auto p = static_cast<Eigen::Index>(group.cols());
  const auto common = static_cast<Eigen::Index>(plan.common);
  const double lambda_theta = cfg.effective_lambda_theta();

  DenseMatrix v_common(common, p);
  if (common > 0) v_common = truncated_svd(group.members().front().w, plan.common).v.transpose();

  std::vector<DenseMatrix> u(count), v_ind(count, DenseMatrix(0, p)), s(count);
  std::vector<std::vector<std::size_t>> schedule(count);
  for (std::size_t t = 0; t < count; ++t) {
    const auto& w = group.members()[t].w;
    u[t] = DenseMatrix(w.rows(), 0);
    s[t] = DenseMatrix::Zero(w.rows(), w.cols());
    schedule[t] = plan.individual[t] > 0 ? greedy_rank_schedule(plan.individual[t], cfg.delta_m, cfg.epochs)
                                         : std::vector<std::size_t>(cfg.epochs, 0);
  }

  GroupDecomposition out;
  out.config = cfg;
  for (const auto& lp : problems) out.lambdas.push_back(lp.lambda());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Greedy growth: new individual rows from the residual's leading right
    // singular vectors.
    for (std::size_t t = 0; t < count; ++t) {
      const auto need = static_cast<Eigen::Index>(schedule[t][epoch]) - v_ind[t].rows();
      if (need <= 0) continue;
      const auto& w = group.members()[t].w;
      DenseMatrix residual = w - s[t];
      const DenseMatrix v = detail::stack(v_common, v_ind[t]);
      if (u[t].cols() == v.rows() && v.rows() > 0) residual -= u[t] * v;
      const SvdResult svd = truncated_svd(residual, static_cast<std::size_t>(need));
      v_ind[t] = detail::stack(v_ind[t], svd.v.transpose());
    }

    DenseMatrix weighted_sum, weight_total;
    if (cfg.common_update == CommonUpdate::consensus && common > 0) {
      weighted_sum = DenseMatrix::Zero(common, p);
      weight_total = DenseMatrix::Zero(1, p);
    }
    const DenseMatrix v_common_start = v_common;
    for (std::size_t t = 0; t < count; ++t) {
      const DenseMatrix& carried = cfg.common_update == CommonUpdate::carry ? v_common : v_common_start;
      const DenseMatrix v_prev = detail::stack(carried, v_ind[t]);
      QrUpdate qr = update_U_V_qr(problems[t], s[t], v_prev, {common > 0, cfg.seed + epoch * count + t});
      out.reinitialized_columns += qr.reinitialized;
      u[t] = std::move(qr.u);
      if (common > 0) qr.v.topRows(common) = carried;
      const DenseMatrix v = gradient_step_V(problems[t], u[t], qr.v, s[t]);
      v_ind[t] = v.bottomRows(v.rows() - common);
      if (common == 0) continue;
      if (cfg.common_update == CommonUpdate::carry) {
        v_common = v.topRows(common);
      } else {
        const Vector& d = problems[t].hessian_diagonal();
        weighted_sum += v.topRows(common) * d.asDiagonal();
        weight_total += d.transpose();
      }
    }
    if (cfg.common_update == CommonUpdate::consensus && common > 0)
      v_common = weighted_sum.array().rowwise() / weight_total.row(0).array();

    if (lambda_theta != 0.0 && count > 1) v_ind = apply_similarity_step(std::move(v_ind), lambda_theta, cfg.similarity_sign);

    for (std::size_t t = 0; t < count; ++t) {
      const DenseMatrix v = detail::stack(v_common, v_ind[t]);
      s[t] = update_S_dense(problems[t], u[t], v, s[t], cfg.lambda2, plan.card[t], cfg.enforce_cardinality);
    }

    out.objective_trace.emplace_back(
        epoch + 1, group_objective(problems, u, v_common, v_ind, s, lambda_theta, cfg.similarity_sign));
  }

  out.v_common = std::make_shared<const DenseMatrix>(std::move(v_common));
  for (std::size_t t = 0; t < count; ++t) {
    Decomposition d;
    d.layer = group.members()[t].source;
    d.u = std::move(u[t]);
    d.v_common = out.v_common;
    d.v_individual = std::move(v_ind[t]);
    d.s = SparseMatrix::from_dense(s[t]);
    d.rank_budget = cfg.rank_for(t);
    d.card_budget = plan.card[t];
    out.members.push_back(std::move(d));
  }
  return out;
}

// Single-layer decomposition: the group solver on a one-member group.
inline GroupDecomposition decompose_single(const LayerMatrix& layer, const std::optional<Calibration>& calibration,
                                           SolverConfig cfg) {
  if (cfg.mode != Mode::single) throw ConfigError("decompose_single needs mode = single");
  LayerGroup group({layer}, 1, static_cast<std::size_t>(layer.w.cols()));
  if (calibration) group.set_calibration({*calibration});
  return decompose_group(group, cfg);
}

inline GroupDecomposition decompose_single(const DenseMatrix& w, const SolverConfig& cfg,
                                           const std::optional<Calibration>& calibration = std::nullopt) {
  LayerMatrix layer{"layer", w, 1, LayerShape::fully_connected(static_cast<std::size_t>(w.rows()),
                                                              static_cast<std::size_t>(w.cols())), 1};
  return decompose_single(layer, calibration, cfg);
}

// Full objective of a finished decomposition against its group.
inline double objective_value(const LayerGroup& group, const GroupDecomposition& gd, const SolverConfig& cfg) {
  if (gd.members.size() != group.size()) throw PreconditionError("objective_value: member count mismatch");
  const std::vector<LayerProblem> problems = make_problems(group, cfg);
  std::vector<DenseMatrix> u, v_ind, s;
  for (std::size_t t = 0; t < group.size(); ++t) {
    const auto& d = gd.members[t];
    if (d.rows() != static_cast<std::size_t>(group.members()[t].w.rows()) || d.cols() != group.cols())
      throw PreconditionError("objective_value: shape mismatch for '" + d.layer + "'");
    u.push_back(d.u);
    v_ind.push_back(d.v_individual);
    s.push_back(d.s.to_dense());
  }
  const DenseMatrix v_common = gd.v_common ? *gd.v_common : DenseMatrix(0, static_cast<Eigen::Index>(group.cols()));
  return group_objective(problems, u, v_common, v_ind, s, cfg.effective_lambda_theta(), cfg.similarity_sign);
}

}  // namespace lrsc
