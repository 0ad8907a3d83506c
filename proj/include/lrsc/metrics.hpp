#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrsc/decomposition.hpp"
#include "lrsc/error.hpp"
#include "lrsc/layermodel.hpp"
#include "lrsc/matrixcore.hpp"
#include "lrsc/solver.hpp"

namespace lrsc {

inline double compression_rate(double original, double compressed) {
  if (!(compressed >= 1.0)) throw PreconditionError("compression_rate needs a compressed count >= 1");
  return original / compressed;
}

// One decimal, the way rates are tabulated ("5.4").
inline std::string format_rate(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", rate);
  return buf;
}

struct LayerParameters {
  std::string name;
  std::uint64_t original = 0;
  double compressed = 0.0;   // exact own parameters + pro-rata share of the common block
  double closed_form = 0.0;  // (m_individual + m_common/T)(n + p) + q
  double rate = 0.0;
};

struct ParameterCount {
  std::vector<LayerParameters> per_layer;
  std::uint64_t total_original = 0;
  std::uint64_t total_compressed = 0;  // common block counted exactly once
  double total_closed_form = 0.0;
  double rate() const { return compression_rate(static_cast<double>(total_original), static_cast<double>(total_compressed)); }
};

// Exact storage of a group decomposition: per layer n*(m_common + m_t) for U,
// m_t*p for the individual rows and card(S); the m_common*p common block once
// per group.
inline ParameterCount parameter_count(const GroupDecomposition& gd) {
  ParameterCount out;
  if (gd.members.empty()) return out;
  const double count = static_cast<double>(gd.members.size());
  const std::uint64_t common = gd.members.front().common_rank();
  const std::uint64_t p = gd.members.front().cols();
  for (const auto& d : gd.members) {
    const std::uint64_t n = d.rows();
    const std::uint64_t ind = d.individual_rank();
    const std::uint64_t q = d.s.nnz();
    const std::uint64_t own = n * (common + ind) + ind * p + q;
    LayerParameters row;
    row.name = d.layer;
    row.original = n * p;
    row.compressed = static_cast<double>(own) + static_cast<double>(common * p) / count;
    row.closed_form = (static_cast<double>(ind) + static_cast<double>(common) / count) * static_cast<double>(n + p) +
                      static_cast<double>(q);
    row.rate = compression_rate(static_cast<double>(row.original), row.compressed);
    out.total_original += row.original;
    out.total_compressed += own;
    out.total_closed_form += row.closed_form;
    out.per_layer.push_back(std::move(row));
  }
  out.total_compressed += common * p;
  return out;
}

// ||W - (UV + S)||_F / ||W||_F.
inline double reconstruction_error(const DenseMatrix& w, const Decomposition& d) {
  if (static_cast<std::size_t>(w.rows()) != d.rows() || static_cast<std::size_t>(w.cols()) != d.cols())
    throw PreconditionError("reconstruction_error: shape mismatch for '" + d.layer + "'");
  const double diff = (w - d.dense()).norm();
  const double base = w.norm();
  if (base == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / base;
}

// ||Y - (UV + S) X||_F / ||Y||_F on calibration pairs.
inline double output_error(const Calibration& cal, const Decomposition& d) {
  if (static_cast<std::size_t>(cal.x.rows()) != d.cols() || static_cast<std::size_t>(cal.y.rows()) != d.rows())
    throw PreconditionError("output_error: shape mismatch for '" + d.layer + "'");
  const double diff = (cal.y - d.dense() * cal.x).norm();
  const double base = cal.y.norm();
  if (base == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / base;
}

// U (V x) + S x, the low-rank and sparse paths evaluated separately.
inline Vector apply_compressed(const Decomposition& d, const Vector& x) {
  if (static_cast<std::size_t>(x.size()) != d.cols()) throw PreconditionError("apply_compressed: input length mismatch");
  Vector low = Vector::Zero(static_cast<Eigen::Index>(d.rows()));
  if (d.rank() > 0) {
    Vector vx(static_cast<Eigen::Index>(d.rank()));
    const auto mc = static_cast<Eigen::Index>(d.common_rank());
    if (mc > 0) vx.head(mc) = *d.v_common * x;
    vx.tail(d.v_individual.rows()) = d.v_individual * x;
    low = d.u * vx;
  }
  const Vector sparse = d.s.apply(x);
  return low + sparse;
}

struct Correspondence {
  std::size_t index_a = 0;
  std::size_t index_b = 0;
  double distance = 0.0;
  friend bool operator==(const Correspondence&, const Correspondence&) = default;
};

namespace detail {

// Per-filter rows used for correspondence search; depth-chunked to the gcd of
// both depths when they differ.
inline DenseMatrix filter_rows(const LayerTensor& t, std::size_t g) {
  LayerMatrix m = flatten_layer(t);
  if (t.shape.kind == LayerKind::conv && g != t.shape.depth) m = chunk_layer(m, g);
  return m.w;
}

}  // namespace detail

// Mutual nearest filters under Euclidean distance; ties go to the lower
// index. Sorted by distance, then index_a, then index_b.
inline std::vector<Correspondence> find_correspondences(const LayerTensor& a, const LayerTensor& b) {
  a.validate();
  b.validate();
  if (a.shape.kind != b.shape.kind) throw AnalysisError("layers '" + a.name + "' and '" + b.name + "' differ in kind");
  std::size_t g = 0;
  if (a.shape.kind == LayerKind::conv) {
    if (a.shape.kernel_h != b.shape.kernel_h || a.shape.kernel_w != b.shape.kernel_w)
      throw AnalysisError("receptive fields differ: " + std::to_string(a.shape.kernel_h) + "x" +
                          std::to_string(a.shape.kernel_w) + " vs " + std::to_string(b.shape.kernel_h) + "x" +
                          std::to_string(b.shape.kernel_w));
    g = std::gcd(a.shape.depth, b.shape.depth);
  } else if (a.shape.depth != b.shape.depth) {
    throw AnalysisError("fully connected layers differ in input width");
  }
  const DenseMatrix fa = detail::filter_rows(a, g);
  const DenseMatrix fb = detail::filter_rows(b, g);

  const Eigen::Index na = fa.rows(), nb = fb.rows();
  DenseMatrix dist(na, nb);
  for (Eigen::Index i = 0; i < na; ++i)
    for (Eigen::Index j = 0; j < nb; ++j) dist(i, j) = (fa.row(i) - fb.row(j)).norm();

  std::vector<Eigen::Index> best_b(static_cast<std::size_t>(na)), best_a(static_cast<std::size_t>(nb));
  for (Eigen::Index i = 0; i < na; ++i) dist.row(i).minCoeff(&best_b[static_cast<std::size_t>(i)]);
  for (Eigen::Index j = 0; j < nb; ++j) dist.col(j).minCoeff(&best_a[static_cast<std::size_t>(j)]);

  std::vector<Correspondence> out;
  for (Eigen::Index i = 0; i < na; ++i) {
    const Eigen::Index j = best_b[static_cast<std::size_t>(i)];
    if (best_a[static_cast<std::size_t>(j)] == i)
      out.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), dist(i, j)});
  }
  std::sort(out.begin(), out.end(), [](const Correspondence& x, const Correspondence& y) {
    if (x.distance != y.distance) return x.distance < y.distance;
    if (x.index_a != y.index_a) return x.index_a < y.index_a;
    return x.index_b < y.index_b;
  });
  return out;
}

struct ReportRow {
  std::string name;
  std::uint64_t original_params = 0;
  double compressed_params = 0.0;
  double rate = 0.0;
  std::optional<double> recon_error;
  std::optional<double> output_error;
  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct ReportTotals {
  std::uint64_t original_params = 0;
  std::uint64_t compressed_params = 0;
  double rate = 0.0;
  friend bool operator==(const ReportTotals&, const ReportTotals&) = default;
};

struct TraceEntry {
  std::size_t group = 0;
  std::size_t epoch = 0;
  double value = 0.0;
  friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

inline constexpr const char* kToolVersion = "1.0.0";

struct CompressionReport {
  std::string tool_version = kToolVersion;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::vector<ReportRow> per_layer;
  ReportTotals totals;
  std::vector<TraceEntry> objective_trace;
  friend bool operator==(const CompressionReport&, const CompressionReport&) = default;
};

inline ReportRow make_row(std::string name, std::uint64_t original, double compressed) {
  return {std::move(name), original, compressed, compression_rate(static_cast<double>(original), compressed), {}, {}};
}

// Totals as sums of the per-layer rows. Compressed counts in rows may carry a
// pro-rata share of a common block; their sum is rounded to whole parameters.
inline ReportTotals sum_rows(const std::vector<ReportRow>& rows) {
  ReportTotals t;
  double compressed = 0.0;
  for (const auto& r : rows) {
    t.original_params += r.original_params;
    compressed += r.compressed_params;
  }
  t.compressed_params = static_cast<std::uint64_t>(std::llround(compressed));
  if (!rows.empty()) t.rate = compression_rate(static_cast<double>(t.original_params), static_cast<double>(t.compressed_params));
  return t;
}

inline nlohmann::ordered_json config_to_json(const SolverConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(c.mode);
  j["data_term"] = to_string(c.data_term);
  j["eta"] = c.eta;
  j["lambda2"] = c.lambda2;
  j["lambda_theta"] = c.lambda_theta;
  j["similarity_sign"] = to_string(c.similarity_sign);
  j["rank"] = c.rank;
  j["common_ratio"] = c.common_ratio;
  j["cardinality"] = c.cardinality;
  j["epochs"] = c.epochs;
  j["delta_m"] = c.delta_m;
  j["enforce_cardinality"] = c.enforce_cardinality;
  j["common_update"] = to_string(c.common_update);
  j["seed"] = c.seed;
  return j;
}

}  // namespace lrsc
