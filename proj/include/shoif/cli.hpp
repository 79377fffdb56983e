#pragma once

// Subcommands of the `shoif` tool. run_cli takes the output streams so the
// tests can drive it in-process.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

#include "shoif/inference.hpp"
#include "shoif/io.hpp"
#include "shoif/ustats.hpp"

namespace shoif {

enum ExitCode : int { kExitOk = 0, kExitInternal = 1, kExitValidation = 2, kExitSingular = 3 };

inline int exit_code_for(ErrorKind kind) { return kind == ErrorKind::SingularGram ? kExitSingular : kExitValidation; }

inline void emit_error(std::ostream& err, const std::string& kind, const std::string& message,
                       const std::string& pointer = "") {
  json j{{"error", kind}, {"message", message}};
  if (!pointer.empty()) j["pointer"] = pointer;
  err << j.dump() << "\n";
}

// Seed precedence: SHOIF_SEED, then the flag or config value.
inline std::uint64_t effective_seed(std::uint64_t given) {
  const char* env = std::getenv("SHOIF_SEED");
  if (!env || !*env) return given;
  std::uint64_t v = 0;
  const std::string s(env);
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    fail(ErrorKind::ValidationError, "SHOIF_SEED: '" + s + "' is not a 64-bit unsigned integer");
  return v;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::ValidationError, "cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::ValidationError, path + ": " + e.what());
  }
}

// --dict accepts inline JSON or a path to a JSON file.
inline Dictionary load_dictionary_arg(const std::string& arg) {
  json j;
  const auto first = arg.find_first_not_of(" \t\n");
  if (first != std::string::npos && arg[first] == '{') {
    try {
      j = json::parse(arg);
    } catch (const json::parse_error& e) {
      fail(ErrorKind::ValidationError, std::string("--dict: ") + e.what());
    }
  } else {
    j = read_json_file(arg);
  }
  return dictionary_from_json(j, "/dict");
}

struct LoadedInputs {
  FunctionalSpec spec;
  ObservationSet data;
  NuisanceValues nuisance;
  Dictionary dict;
};

inline LoadedInputs load_inputs(const std::string& data_path, const std::string& nuisance_path,
                                const std::string& functional, const std::string& dict_arg) {
  LoadedInputs in;
  in.spec = FunctionalSpec{functional_from_string(functional)};
  in.data = read_dataset_csv(data_path);
  validate_observations(in.spec, in.data);
  in.nuisance = read_nuisance_csv(nuisance_path);
  validate_nuisance(in.spec, in.nuisance, in.data.n());
  in.dict = load_dictionary_arg(dict_arg);
  if (in.dict.d != in.data.X.cols())
    fail(ErrorKind::ValidationError, "/dict/d = " + std::to_string(in.dict.d) + " but the dataset has " +
                                         std::to_string(in.data.X.cols()) + " covariate columns");
  return in;
}

inline void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text << "\n";
    return;
  }
  std::ofstream f(path);
  if (!f) fail(ErrorKind::ValidationError, "cannot write '" + path + "'");
  f << text << "\n";
}

struct EstimateArgs {
  std::string data, nuisance, functional = "treated-mean", dict, convention = "canonical", out, kernel_csv;
  int order = 2;
  double rank_tolerance = kDefaultRankTolerance;
};

inline int cmd_estimate(const EstimateArgs& a, std::ostream& out) {
  const LoadedInputs in = load_inputs(a.data, a.nuisance, a.functional, a.dict);
  const Convention conv = convention_from_string(a.convention);
  const EstimateReport rep = estimate(in.spec, in.nuisance, in.data, in.dict, a.order, conv, a.rank_tolerance);
  if (!a.kernel_csv.empty()) {
    const Residuals r = compute_residuals(in.spec, in.nuisance, in.data);
    const StableKernel sk(evaluate_basis(in.dict, in.data.X), r.S, a.rank_tolerance);
    write_matrix_csv(a.kernel_csv, kernel_weighted_matrix(sk));
  }
  write_text(a.out, to_json(rep).dump(2), out);
  return kExitOk;
}

struct SimulateArgs {
  std::string config, out = ".";
  int parallel = 1;
};

inline int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  ExperimentConfig cfg = experiment_config_from_json(read_json_file(a.config));
  cfg.seed = effective_seed(cfg.seed);
  if (a.parallel < 1) fail(ErrorKind::ValidationError, "--parallel must be >= 1");
  cfg.parallel = a.parallel;
  const ExperimentResult res = run_experiment(cfg);
  std::filesystem::create_directories(a.out);
  const std::filesystem::path dir(a.out);
  write_results_csv((dir / "results.csv").string(), res);
  json summary{{"seed", cfg.seed}, {"replications", cfg.replications}, {"grid", json::array()}};
  for (const GridSummary& s : res.summaries) summary["grid"].push_back(to_json(s));
  write_text((dir / "summary.json").string(), summary.dump(2), out);
  out << json{{"results", (dir / "results.csv").string()}, {"summary", (dir / "summary.json").string()}}.dump()
      << "\n";
  return kExitOk;
}

struct IdentitiesArgs {
  int max_m = 8;
  std::string out;
};

inline int cmd_identities(const IdentitiesArgs& a, std::ostream& out) {
  const std::vector<IdentityCheck> checks = run_identity_suite(a.max_m);
  bool all = true;
  json list = json::array();
  for (const IdentityCheck& c : checks) {
    all = all && c.pass;
    list.push_back({{"suite", c.suite},
                    {"label", c.label},
                    {"expected", c.expected},
                    {"actual", c.actual},
                    {"pass", c.pass},
                    {"nonzero_expected", c.nonzero_expected}});
  }
  write_text(a.out, json{{"max_m", a.max_m}, {"all_pass", all}, {"checks", list}}.dump(2), out);
  return all ? kExitOk : kExitValidation;
}

struct TestBiasArgs {
  std::string data, nuisance, functional = "treated-mean", dict, delta = "0", out;
  double alpha = 0.05;
  int order = 2;
  int bootstrap_B = 200;
  std::uint64_t seed = 0;
  bool two_sided_magnitude = false;
  double rank_tolerance = kDefaultRankTolerance;
  int threads = 1;
};

inline double parse_delta(const std::string& s) {
  if (s == "inf" || s == "+inf" || s == "cap" || s == "infinity") return std::numeric_limits<double>::infinity();
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    fail(ErrorKind::ValidationError, "--delta: '" + s + "' is not a number");
  return v;
}

// Bias estimate of psi_1 at order m: the negated sum of reported corrections.
inline double bias_estimate(const CorrectionResult& c) {
  double s = 0.0;
  for (const auto& [j, v] : c.by_order) s += v;
  return -s;
}

inline int cmd_test_bias(const TestBiasArgs& a, std::ostream& out) {
  const LoadedInputs in = load_inputs(a.data, a.nuisance, a.functional, a.dict);
  BiasTestConfig cfg;
  cfg.alpha = a.alpha;
  cfg.delta = parse_delta(a.delta);
  cfg.order = a.order;
  cfg.bootstrap_B = a.bootstrap_B;
  cfg.seed = effective_seed(a.seed);
  cfg.two_sided_magnitude = a.two_sided_magnitude;
  validate(cfg);

  const Residuals r = compute_residuals(in.spec, in.nuisance, in.data);
  const double se_psi1 = plug_in_se(r.first_order);
  const double corr =
      bias_estimate(shoif_correction(in.spec, in.nuisance, in.data, in.dict, cfg.order, Convention::Canonical,
                                     a.rank_tolerance));
  const ResampleStatistic stat = [&](const std::vector<Eigen::Index>& rows) {
    const ObservationSet d = subset(in.data, rows);
    const NuisanceValues v = subset(in.nuisance, rows);
    return bias_estimate(shoif_correction(in.spec, v, d, in.dict, cfg.order, Convention::Canonical, a.rank_tolerance));
  };
  const BootstrapResult boot = bootstrap_se(stat, in.data.n(), cfg.bootstrap_B, cfg.seed, a.threads);
  const BiasTestResult res = bias_test(corr, boot.se, se_psi1, cfg);
  json j{{"reject", res.reject},          {"statistic", res.statistic},        {"correction", corr},
         {"se_correction", boot.se},      {"se_psi1", se_psi1},                {"alpha", cfg.alpha},
         {"order", cfg.order},            {"bootstrap_B", cfg.bootstrap_B},    {"seed", cfg.seed},
         {"resamples_rejected", boot.rejected}, {"two_sided_magnitude", cfg.two_sided_magnitude}};
  j["delta"] = std::isinf(cfg.delta) ? json("inf") : json(cfg.delta);
  write_text(a.out, j.dump(2), out);
  return kExitOk;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Stable higher-order influence function estimators"};
  app.require_subcommand(1);

  EstimateArgs est;
  auto* e = app.add_subcommand("estimate", "Estimate psi_1 and the order-j corrections");
  e->add_option("--data", est.data, "dataset CSV (x1..xd, a, y)")->required();
  e->add_option("--nuisance", est.nuisance, "nuisance CSV (a_hat, b_hat)")->required();
  e->add_option("--functional", est.functional, "treated-mean | ecc");
  e->add_option("--dict", est.dict, "dictionary JSON, inline or a path")->required();
  e->add_option("--order", est.order, "highest order m");
  e->add_option("--convention", est.convention, "canonical | s31");
  e->add_option("--rank-tolerance", est.rank_tolerance);
  e->add_option("--dump-kernel", est.kernel_csv, "write the weighted kernel matrix as CSV (debug)");
  e->add_option("--out", est.out, "report path; stdout when omitted");

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Run a Monte Carlo experiment");
  s->add_option("--config", sim.config)->required();
  s->add_option("--parallel", sim.parallel);
  s->add_option("--out", sim.out, "output directory");

  IdentitiesArgs ids;
  auto* i = app.add_subcommand("identities", "Check the combinatorial identities in exact arithmetic");
  i->add_option("--max-m", ids.max_m);
  i->add_option("--out", ids.out);

  TestBiasArgs tb;
  auto* t = app.add_subcommand("test-bias", "Test whether the first-order bias exceeds delta standard errors");
  t->add_option("--data", tb.data)->required();
  t->add_option("--nuisance", tb.nuisance)->required();
  t->add_option("--functional", tb.functional);
  t->add_option("--dict", tb.dict)->required();
  t->add_option("--alpha", tb.alpha);
  t->add_option("--delta", tb.delta, "threshold; 'inf' or 'cap' never rejects");
  t->add_option("--order", tb.order);
  t->add_option("--bootstrap-B", tb.bootstrap_B);
  t->add_option("--seed", tb.seed);
  t->add_flag("--two-sided-magnitude", tb.two_sided_magnitude);
  t->add_option("--rank-tolerance", tb.rank_tolerance);
  t->add_option("--threads", tb.threads);
  t->add_option("--out", tb.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help() << "\n";
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All) << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    emit_error(err, "ArgumentError", ex.what());
    return kExitValidation;
  }

  try {
    if (*e) return cmd_estimate(est, out);
    if (*s) return cmd_simulate(sim, out);
    if (*i) return cmd_identities(ids, out);
    if (*t) return cmd_test_bias(tb, out);
  } catch (const ConfigError& ex) {
    emit_error(err, to_string(ex.kind()), ex.what(), ex.pointer());
    return kExitValidation;
  } catch (const Error& ex) {
    emit_error(err, to_string(ex.kind()), ex.what());
    return exit_code_for(ex.kind());
  } catch (const std::exception& ex) {
    emit_error(err, "InternalError", ex.what());
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace shoif
