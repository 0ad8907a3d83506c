#pragma once

// Command implementations behind the `lrsc` executable. Each command takes
// parsed options, writes machine output to `out` and progress to `log`, and
// returns the process exit code: 0 success, 1 verification failed,
// 2 domain error, 3 input/parse error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lrsc/error.hpp"
#include "lrsc/layermodel.hpp"
#include "lrsc/metrics.hpp"
#include "lrsc/solver.hpp"
#include "lrsc/storage.hpp"

namespace lrsc::cli {

struct CompressOptions {
  std::string input;
  std::string output;  // prefix: writes <output>.mcwb and <output>.report.json
  SolverConfig solver;
  std::size_t max_group = 4;
};

struct VerifyOptions {
  std::string decomposition;
  std::string model;
  std::optional<std::string> report;  // defaults to <decomposition stem>.report.json when present
  std::size_t probes = 16;
};

struct AnalyzeOptions {
  std::string model;
  std::string layer_a;
  std::string layer_b;
  std::size_t top = 100;
  std::optional<std::string> csv_path;
};

// Runs `fn`, mapping library errors to their exit codes.
inline int guarded(const std::function<int()>& fn, std::ostream& log) {
  try {
    return fn();
  } catch (const Error& e) {
    log << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return 2;
  }
}

inline std::string humanize_count(double v) {
  char buf[32];
  if (v >= 1e6)
    std::snprintf(buf, sizeof buf, "%.3gM", v / 1e6);
  else if (v >= 1e3)
    std::snprintf(buf, sizeof buf, "%.3gk", v / 1e3);
  else
    std::snprintf(buf, sizeof buf, "%.0f", v);
  return buf;
}

inline std::string format_real(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

namespace detail {

struct ModelLayer {
  LayerTensor tensor;
  std::optional<Calibration> calibration;
};

inline std::vector<ModelLayer> load_model(const Container& c) {
  std::vector<ModelLayer> out;
  for (auto& t : layers_from_container(c)) {
    ModelLayer m{std::move(t), std::nullopt};
    const auto* x = find_entry(c, m.tensor.name + ".X");
    const auto* y = find_entry(c, m.tensor.name + ".Y");
    if ((x == nullptr) != (y == nullptr))
      throw Error("layer '" + m.tensor.name + "' has only one of .X / .Y", 3);
    if (x) {
      Calibration cal{to_matrix(*x), to_matrix(*y)};
      if (!cal.x.allFinite() || !cal.y.allFinite())
        throw Error("calibration of '" + m.tensor.name + "' contains NaN or Inf", 3);
      m.calibration = std::move(cal);
    }
    out.push_back(std::move(m));
  }
  if (out.empty()) throw Error("model container has no '<layer>.W' entries", 3);
  return out;
}

inline const ModelLayer* find_layer(const std::vector<ModelLayer>& layers, const std::string& name) {
  for (const auto& l : layers)
    if (l.tensor.name == name) return &l;
  return nullptr;
}

// Matrix view of `layer` with the given chunk factor (1 = unchunked).
inline DenseMatrix layer_matrix(const LayerTensor& layer, std::size_t chunk_factor) {
  LayerMatrix m = flatten_layer(layer);
  if (chunk_factor == 1) return m.w;
  if (layer.shape.kind != LayerKind::conv || layer.shape.depth % chunk_factor != 0)
    throw Error("chunk factor " + std::to_string(chunk_factor) + " is invalid for '" + layer.name + "'", 3);
  return chunk_layer(m, layer.shape.depth / chunk_factor).w;
}

}  // namespace detail

inline int cmd_compress(const CompressOptions& opts, std::ostream& log) {
  const Container model = load_container(opts.input);
  const auto layers = detail::load_model(model);
  std::vector<LayerTensor> tensors;
  for (const auto& l : layers) tensors.push_back(l.tensor);

  std::vector<LayerGroup> groups;
  if (opts.solver.mode == Mode::single) {
    for (const auto& t : tensors) groups.push_back(singleton_group(t));
  } else {
    groups = group_layers(tensors, opts.max_group);
  }

  // Attach calibration where every member has it and the group is unchunked.
  if (opts.solver.data_term == DataTerm::calibration) {
    for (auto& g : groups) {
      std::vector<Calibration> cal;
      for (const auto& m : g.members()) {
        const auto* l = detail::find_layer(layers, m.source);
        if (l->calibration) cal.push_back(*l->calibration);
      }
      if (cal.empty()) continue;
      if (g.chunked()) {
        log << "[lrsc] group of '" << g.members().front().source
            << "' is depth-chunked; calibration ignored, solving weight-only\n";
        continue;
      }
      if (cal.size() != g.size()) {
        log << "[lrsc] group of '" << g.members().front().source
            << "' has calibration for only some members; solving weight-only\n";
        continue;
      }
      g.set_calibration(std::move(cal));
    }
  }

  // Check every group before doing any work.
  for (const auto& g : groups) lrsc::detail::plan_group(g, opts.solver);

  Container out;
  CompressionReport report;
  report.config = config_to_json(opts.solver);
  report.config["max_group"] = opts.max_group;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    log << "[lrsc] group " << gi << ": " << g.size() << " layer(s), p = " << g.cols()
        << (g.has_calibration() ? ", calibrated" : ", weight-only") << "\n";
    const GroupDecomposition gd = decompose_group(g, opts.solver);
    if (gd.reinitialized_columns > 0)
      log << "[lrsc] group " << gi << ": reinitialized " << gd.reinitialized_columns << " degenerate U column(s)\n";
    const ParameterCount counts = parameter_count(gd);
    for (std::size_t t = 0; t < g.size(); ++t) {
      const auto& d = gd.members[t];
      const auto& m = g.members()[t];
      out.push_back(matrix_entry(d.layer + ".U", d.u));
      out.push_back(matrix_entry(d.layer + ".Vc", *d.v_common));
      out.push_back(matrix_entry(d.layer + ".Vi", d.v_individual));
      out.push_back({d.layer + ".S", d.s});
      out.push_back({d.layer + ".budget",
                     DenseTensor{{5},
                                 {static_cast<double>(d.rank_budget), static_cast<double>(d.common_rank()),
                                  static_cast<double>(d.card_budget), static_cast<double>(gi),
                                  static_cast<double>(m.chunk_factor)}}});
      ReportRow row;
      row.name = d.layer;
      row.original_params = counts.per_layer[t].original;
      row.compressed_params = counts.per_layer[t].compressed;
      row.rate = counts.per_layer[t].rate;
      row.recon_error = reconstruction_error(m.w, d);
      if (g.has_calibration()) row.output_error = output_error(g.calibration()[t], d);
      report.per_layer.push_back(std::move(row));
    }
    for (const auto& [epoch, value] : gd.objective_trace) report.objective_trace.push_back({gi, epoch, value});
    log << "[lrsc] group " << gi << ": objective " << format_real(gd.objective_trace.front().second) << " -> "
        << format_real(gd.objective_trace.back().second) << "\n";
  }
  report.totals = sum_rows(report.per_layer);

  save_container(opts.output + ".mcwb", out);
  std::ofstream rep(opts.output + ".report.json", std::ios::trunc);
  if (!rep) throw Error("cannot write '" + opts.output + ".report.json'", 3);
  rep << write_report(report);
  log << "[lrsc] total " << report.totals.original_params << " -> " << report.totals.compressed_params
      << " parameters (" << format_rate(report.totals.rate) << "X)\n";
  return 0;
}

inline std::string default_report_path(const std::string& decomposition) {
  const std::string suffix = ".mcwb";
  std::string stem = decomposition;
  if (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)
    stem.resize(stem.size() - suffix.size());
  return stem + ".report.json";
}

inline int cmd_verify(const VerifyOptions& opts, std::ostream& out, std::ostream& log) {
  const Container dec = load_container(opts.decomposition);
  const auto layers = detail::load_model(load_container(opts.model));

  std::optional<CompressionReport> report;
  const std::string report_path = opts.report.value_or(default_report_path(opts.decomposition));
  if (opts.report || std::ifstream(report_path).good()) {
    std::ifstream in(report_path);
    if (!in) throw Error("cannot open report '" + report_path + "'", 3);
    std::stringstream buf;
    buf << in.rdbuf();
    report = read_report(buf.str());
    log << "[lrsc] cross-checking against " << report_path << "\n";
  }

  std::vector<std::string> names;
  for (const auto& e : dec)
    if (e.name.size() > 2 && e.name.compare(e.name.size() - 2, 2, ".U") == 0) names.push_back(e.name.substr(0, e.name.size() - 2));
  {
    std::vector<std::string> a = names, b;
    for (const auto& l : layers) b.push_back(l.tensor.name);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    if (a != b) throw Error("decomposition and model cover different layer sets", 2);
  }

  auto entry = [&](const std::string& name) -> const ContainerEntry& {
    const auto* e = find_entry(dec, name);
    if (!e) throw Error("decomposition is missing entry '" + name + "'", 3);
    return *e;
  };

  std::map<std::size_t, DenseMatrix> group_common;
  std::size_t failures = 0;
  std::mt19937_64 rng(0);
  std::normal_distribution<double> normal;
  for (const auto& name : names) {
    std::vector<std::string> problems;
    const auto& layer = *detail::find_layer(layers, name);
    const auto& budget_entry = entry(name + ".budget");
    if (!budget_entry.is_dense() || budget_entry.dense().data.size() != 5)
      throw Error("entry '" + name + ".budget' must hold 5 values", 3);
    const auto& budget = budget_entry.dense().data;
    const auto rank_budget = static_cast<std::size_t>(budget[0]);
    const auto card_budget = static_cast<std::size_t>(budget[2]);
    const auto group = static_cast<std::size_t>(budget[3]);
    const auto chunk_factor = static_cast<std::size_t>(budget[4]);

    const DenseMatrix w = detail::layer_matrix(layer.tensor, chunk_factor);
    Decomposition d;
    d.layer = name;
    d.u = to_matrix(entry(name + ".U"));
    d.v_common = std::make_shared<const DenseMatrix>(to_matrix(entry(name + ".Vc")));
    d.v_individual = to_matrix(entry(name + ".Vi"));
    const auto& s_entry = entry(name + ".S");
    if (s_entry.is_dense()) throw Error("entry '" + name + ".S' must be sparse", 3);
    d.s = s_entry.sparse();
    d.rank_budget = rank_budget;
    d.card_budget = card_budget;

    const auto n = w.rows(), p = w.cols();
    const bool shapes_ok = d.u.rows() == n && d.v_common->cols() == p && d.v_individual.cols() == p &&
                           d.u.cols() == d.v_common->rows() + d.v_individual.rows() &&
                           static_cast<Eigen::Index>(d.s.rows()) == n && static_cast<Eigen::Index>(d.s.cols()) == p;
    if (!shapes_ok) {
      out << "FAIL " << name << ": factor shapes do not match the layer\n";
      ++failures;
      continue;
    }
    if (d.rank() > rank_budget) problems.push_back("rank " + std::to_string(d.rank()) + " exceeds budget " + std::to_string(rank_budget));
    if (d.s.nnz() > card_budget)
      problems.push_back("card(S) " + std::to_string(d.s.nnz()) + " exceeds budget " + std::to_string(card_budget));
    if (d.rank() > 0) {
      const double ortho = (d.u.transpose() * d.u - DenseMatrix::Identity(d.u.cols(), d.u.cols())).cwiseAbs().maxCoeff();
      if (ortho > 1e-8) problems.push_back("U columns not orthonormal (" + format_real(ortho) + ")");
    }
    auto [it, fresh] = group_common.try_emplace(group, *d.v_common);
    if (!fresh && it->second != *d.v_common) problems.push_back("common block differs from other members of group " + std::to_string(group));

    const DenseMatrix dense = d.dense();
    double worst_probe = 0.0;
    for (std::size_t k = 0; k < opts.probes; ++k) {
      const Vector x = Vector::NullaryExpr(p, [&] { return normal(rng); });
      const Vector ref = dense * x;
      const double scale = std::max(ref.norm(), 1e-300);
      worst_probe = std::max(worst_probe, (apply_compressed(d, x) - ref).norm() / scale);
    }
    if (worst_probe > 1e-10) problems.push_back("inference path disagrees with dense product (" + format_real(worst_probe) + ")");

    const double recon = reconstruction_error(w, d);
    std::optional<double> out_err;
    if (layer.calibration && chunk_factor == 1) out_err = output_error(*layer.calibration, d);
    if (report) {
      const auto row = std::find_if(report->per_layer.begin(), report->per_layer.end(),
                                    [&](const ReportRow& r) { return r.name == name; });
      if (row == report->per_layer.end()) {
        problems.push_back("layer missing from report");
      } else {
        if (!row->recon_error || std::abs(*row->recon_error - recon) > 1e-12)
          problems.push_back("recon_error " + format_real(recon) + " differs from report");
        if (row->output_error && (!out_err || std::abs(*row->output_error - *out_err) > 1e-12))
          problems.push_back("output_error differs from report");
      }
    }

    if (problems.empty()) {
      out << "PASS " << name << " recon_error=" << format_real(recon);
      if (out_err) out << " output_error=" << format_real(*out_err);
      out << " rank=" << d.rank() << " card=" << d.s.nnz() << "\n";
    } else {
      ++failures;
      out << "FAIL " << name << ":";
      for (const auto& msg : problems) out << " " << msg << ";";
      out << "\n";
    }
  }
  out << (failures == 0 ? "verify: all " : "verify: ") << (failures == 0 ? names.size() : failures)
      << (failures == 0 ? " layer(s) passed\n" : " layer(s) failed\n");
  return failures == 0 ? 0 : 1;
}

inline int cmd_analyze(const AnalyzeOptions& opts, std::ostream& out, std::ostream& log) {
  const auto layers = detail::load_model(load_container(opts.model));
  const auto* a = detail::find_layer(layers, opts.layer_a);
  const auto* b = detail::find_layer(layers, opts.layer_b);
  if (!a) throw Error("unknown layer '" + opts.layer_a + "'", 2);
  if (!b) throw Error("unknown layer '" + opts.layer_b + "'", 2);

  const auto pairs = find_correspondences(a->tensor, b->tensor);
  const std::size_t shown = std::min(opts.top, pairs.size());

  std::ofstream file;
  if (opts.csv_path) {
    file.open(*opts.csv_path, std::ios::trunc);
    if (!file) throw Error("cannot write '" + *opts.csv_path + "'", 3);
  }
  std::ostream& csv = opts.csv_path ? static_cast<std::ostream&>(file) : out;
  csv << "index_a,index_b,distance\n";
  for (std::size_t i = 0; i < shown; ++i)
    csv << pairs[i].index_a << "," << pairs[i].index_b << "," << format_real(pairs[i].distance) << "\n";

  log << "[lrsc] " << pairs.size() << " mutual-nearest pairs between '" << opts.layer_a << "' and '" << opts.layer_b
      << "', " << shown << " written\n";
  if (shown > 0) {
    double sum = 0.0;
    for (std::size_t i = 0; i < shown; ++i) sum += pairs[i].distance;
    log << "[lrsc] distance min " << format_real(pairs.front().distance) << " mean "
        << format_real(sum / static_cast<double>(shown)) << " median " << format_real(pairs[shown / 2].distance)
        << " max " << format_real(pairs[shown - 1].distance) << "\n";
  }
  return 0;
}

inline void render_report(const CompressionReport& r, std::ostream& out) {
  auto line = [&](const std::string& a, const std::string& b, const std::string& c, const std::string& d) {
    out << std::left << std::setw(24) << a << std::right << std::setw(10) << b << std::setw(10) << c << std::setw(10) << d
        << "\n";
  };
  line("Layer", "#W(O)", "#W(C)", "R");
  if (r.per_layer.empty()) return;
  for (const auto& row : r.per_layer)
    line(row.name, humanize_count(static_cast<double>(row.original_params)), humanize_count(row.compressed_params),
         format_rate(row.rate) + "X");
  line("Total", humanize_count(static_cast<double>(r.totals.original_params)),
       humanize_count(static_cast<double>(r.totals.compressed_params)), format_rate(r.totals.rate) + "X");
}

inline int cmd_report(const std::string& path, std::ostream& out) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'", 3);
  std::stringstream buf;
  buf << in.rdbuf();
  render_report(read_report(buf.str()), out);
  return 0;
}

}  // namespace lrsc::cli
