// lrsc: compress, verify, analyze and report on layer weight containers.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lrsc/cli.hpp"

namespace {

template <typename E>
CLI::Option* add_enum(CLI::App* app, const std::string& flag, E& target, const std::map<std::string, E>& names,
                      const std::string& help) {
  return app->add_option(flag, target, help)->transform(CLI::CheckedTransformer(names, CLI::ignore_case))->capture_default_str();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Appends `--key value` for every `key = value` line of the file named by
// --config whose key was not given on the command line, so flags win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw lrsc::Error("cannot open config file '" + path + "'", 3);
  auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  std::vector<std::string> extra;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw lrsc::Error("config line '" + line + "' is not key = value", 3);
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    const std::string flag = "--" + key;
    if (given(flag)) continue;
    if (key == "no-enforce-cardinality" || key == "enforce-cardinality") {
      const bool on = value == "true" || value == "1";
      if ((key == "no-enforce-cardinality") == on && !given("--no-enforce-cardinality"))
        extra.push_back("--no-enforce-cardinality");
      continue;
    }
    extra.push_back(flag);
    extra.push_back(value);
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace lrsc;
  CLI::App app{"Low-rank plus sparse compression of network layer weights"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  cli::CompressOptions compress;
  SolverConfig& sc = compress.solver;
  auto* c = app.add_subcommand("compress", "Decompose every layer group of a model container");
  std::string config_path;
  c->add_option("--config", config_path, "File of key = value lines (keys are flag names); flags override it");
  c->add_option("--in", compress.input, "Model container (.mcwb)")->required();
  c->add_option("--out", compress.output, "Output prefix; writes <out>.mcwb and <out>.report.json")->required();
  add_enum(c, "--mode", sc.mode,
           {{"single", Mode::single}, {"independent", Mode::independent}, {"shared", Mode::shared}, {"micik", Mode::micik}},
           "single | independent | shared | micik");
  add_enum(c, "--data-term", sc.data_term, {{"calibration", DataTerm::calibration}, {"weight_only", DataTerm::weight_only}},
           "calibration (uses <layer>.X/.Y when present) | weight_only");
  c->add_option("--eta", sc.eta, "lambda = 10^eta * largest eigenvalue of XX^T/s")->capture_default_str();
  c->add_option("--lambda2", sc.lambda2, "l1 weight on the sparse part")->capture_default_str();
  c->add_option("--lambda-theta", sc.lambda_theta, "Similarity weight (micik only)")->capture_default_str();
  add_enum(c, "--similarity-sign", sc.similarity_sign,
           {{"attract", SimilaritySign::attract}, {"repel", SimilaritySign::repel}}, "attract | repel");
  c->add_option("--rank", sc.rank, "Target rank per layer (one value, or one per layer of every group)")
      ->required()
      ->delimiter(',');
  c->add_option("--common-ratio", sc.common_ratio, "Common rank = round(ratio * smallest rank in the group)")
      ->capture_default_str();
  c->add_option("--card", sc.cardinality, "Nonzero budget of the sparse part per layer")->delimiter(',')->capture_default_str();
  c->add_option("--epochs", sc.epochs, "Outer iterations")->capture_default_str();
  c->add_option("--delta-m", sc.delta_m, "Rank growth per epoch")->capture_default_str();
  c->add_flag("--no-enforce-cardinality{false}", sc.enforce_cardinality, "Keep every soft-thresholded entry of S");
  add_enum(c, "--common-update", sc.common_update, {{"consensus", CommonUpdate::consensus}, {"carry", CommonUpdate::carry}},
           "consensus | carry");
  c->add_option("--seed", sc.seed, "Seed for degenerate-column reinitialization")->capture_default_str();
  c->add_option("--max-group", compress.max_group, "Largest number of layers per group")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  cli::VerifyOptions verify;
  auto* v = app.add_subcommand("verify", "Check a decomposition against its model and report");
  v->add_option("--decomposition,--in", verify.decomposition, "Decomposition container")->required();
  v->add_option("--model", verify.model, "Model container")->required();
  v->add_option("--report", verify.report, "Report to cross-check (default: <decomposition>.report.json if present)");
  v->add_option("--probes", verify.probes, "Random probes per layer")->capture_default_str();

  cli::AnalyzeOptions analyze;
  auto* a = app.add_subcommand("analyze", "Mutual-nearest filter correspondences between two layers");
  a->add_option("--in", analyze.model, "Model container")->required();
  a->add_option("--layer-a", analyze.layer_a, "First layer")->required();
  a->add_option("--layer-b", analyze.layer_b, "Second layer")->required();
  a->add_option("--top", analyze.top, "Pairs to emit")->capture_default_str();
  a->add_option("--out", analyze.csv_path, "CSV path (default: standard output)");

  std::string report_path;
  auto* r = app.add_subcommand("report", "Print a report as a table");
  r->add_option("report", report_path, "Report JSON")->required();

  try {
    std::vector<std::string> args = expand_config({argv, argv + argc});
    std::reverse(args.begin(), args.end());
    args.pop_back();  // program name
    app.parse(args);
  } catch (const lrsc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 3;
  }

  return cli::guarded(
      [&] {
        if (*c) return cli::cmd_compress(compress, std::cerr);
        if (*v) return cli::cmd_verify(verify, std::cout, std::cerr);
        if (*a) return cli::cmd_analyze(analyze, std::cout, std::cerr);
        return cli::cmd_report(report_path, std::cout);
      },
      std::cerr);
}
