#pragma once

// CSV ingestion, 17-digit serialization and JSON (de)serialization of
// dictionaries, designs, experiment configs and reports.

#include <Eigen/Dense>
#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "shoif/dictionary.hpp"
#include "shoif/errors.hpp"
#include "shoif/estimators.hpp"
#include "shoif/oracle.hpp"
#include "shoif/simharness.hpp"

namespace shoif {

using json = nlohmann::json;

// Shortest representation is not required; 17 significant digits round-trip.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_cell(const std::string& s, size_t line, const std::string& field) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v))
    fail(ErrorKind::ValidationError,
         "line " + std::to_string(line) + ", field " + field + ": '" + s + "' is not a finite number");
  return v;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::ValidationError, "cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (t.header.empty()) {
      t.header = cells;
      continue;
    }
    if (cells.size() != t.header.size())
      fail(ErrorKind::ValidationError, path + ": line " + std::to_string(lineno) + " has " +
                                           std::to_string(cells.size()) + " fields, header has " +
                                           std::to_string(t.header.size()));
    std::vector<double> row(cells.size());
    for (size_t c = 0; c < cells.size(); ++c) row[c] = parse_cell(cells[c], lineno, t.header[c]);
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) fail(ErrorKind::ValidationError, path + ": missing header");
  return t;
}

}  // namespace detail

// Columns x1..xd, a, y.
inline ObservationSet read_dataset_csv(const std::string& path) {
  const detail::CsvTable t = detail::read_csv(path);
  const size_t cols = t.header.size();
  if (cols < 3) fail(ErrorKind::ValidationError, path + ": need columns x1..xd, a, y");
  const size_t d = cols - 2;
  for (size_t j = 0; j < d; ++j)
    if (t.header[j] != "x" + std::to_string(j + 1))
      fail(ErrorKind::ValidationError, path + ": column " + std::to_string(j + 1) + " must be named x" +
                                           std::to_string(j + 1) + ", found '" + t.header[j] + "'");
  if (t.header[d] != "a" || t.header[d + 1] != "y")
    fail(ErrorKind::ValidationError, path + ": last two columns must be a, y");
  if (t.rows.empty()) fail(ErrorKind::EmptyData, path + ": no data rows");
  ObservationSet data;
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  data.X.resize(n, static_cast<Eigen::Index>(d));
  data.A.resize(n);
  data.Y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = t.rows[static_cast<size_t>(i)];
    for (size_t j = 0; j < d; ++j) data.X(i, static_cast<Eigen::Index>(j)) = r[j];
    data.A[i] = r[d];
    data.Y[i] = r[d + 1];
  }
  return data;
}

inline NuisanceValues read_nuisance_csv(const std::string& path) {
  const detail::CsvTable t = detail::read_csv(path);
  if (t.header.size() != 2 || t.header[0] != "a_hat" || t.header[1] != "b_hat")
    fail(ErrorKind::ValidationError, path + ": columns must be a_hat, b_hat");
  NuisanceValues v;
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  v.a_hat.resize(n);
  v.b_hat.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    v.a_hat[i] = t.rows[static_cast<size_t>(i)][0];
    v.b_hat[i] = t.rows[static_cast<size_t>(i)][1];
  }
  v.provenance = NuisanceProvenance::ExternalFile;
  return v;
}

inline void write_dataset_csv(const std::string& path, const ObservationSet& data) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::ValidationError, "cannot write '" + path + "'");
  for (Eigen::Index j = 0; j < data.X.cols(); ++j) out << "x" << j + 1 << ",";
  out << "a,y\n";
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    for (Eigen::Index j = 0; j < data.X.cols(); ++j) out << format_double(data.X(i, j)) << ",";
    out << format_double(data.A[i]) << "," << format_double(data.Y[i]) << "\n";
  }
}

inline void write_nuisance_csv(const std::string& path, const NuisanceValues& v) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::ValidationError, "cannot write '" + path + "'");
  out << "a_hat,b_hat\n";
  for (Eigen::Index i = 0; i < v.a_hat.size(); ++i)
    out << format_double(v.a_hat[i]) << "," << format_double(v.b_hat[i]) << "\n";
}

inline void write_matrix_csv(const std::string& path, const Eigen::MatrixXd& M) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::ValidationError, "cannot write '" + path + "'");
  for (Eigen::Index i = 0; i < M.rows(); ++i) {
    for (Eigen::Index j = 0; j < M.cols(); ++j) out << (j ? "," : "") << format_double(M(i, j));
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// JSON with pointer-tagged validation errors

class ConfigError : public Error {
 public:
  ConfigError(const std::string& pointer, const std::string& message)
      : Error(ErrorKind::ValidationError, pointer + ": " + message), pointer_(pointer) {}
  const std::string& pointer() const { return pointer_; }

 private:
  std::string pointer_;
};

namespace detail {

inline const json& require(const json& j, const std::string& key, const std::string& at) {
  if (!j.is_object()) throw ConfigError(at, "expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw ConfigError(at + "/" + key, "missing required field");
  return *it;
}

inline double get_number(const json& j, const std::string& at) {
  if (!j.is_number()) throw ConfigError(at, "expected a number");
  return j.get<double>();
}

inline std::int64_t get_integer(const json& j, const std::string& at) {
  if (!j.is_number_integer()) throw ConfigError(at, "expected an integer");
  return j.get<std::int64_t>();
}

inline std::string get_string(const json& j, const std::string& at) {
  if (!j.is_string()) throw ConfigError(at, "expected a string");
  return j.get<std::string>();
}

inline Eigen::VectorXd get_vector(const json& j, const std::string& at) {
  if (!j.is_array()) throw ConfigError(at, "expected an array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = get_number(j[i], at + "/" + std::to_string(i));
  return v;
}

template <class F>
auto wrap(const std::string& at, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(at, e.what());
  }
}

}  // namespace detail

inline Dictionary dictionary_from_json(const json& j, const std::string& at = "") {
  using namespace detail;
  const DictionaryKind kind =
      wrap(at + "/kind", [&] { return dictionary_kind_from_string(get_string(require(j, "kind", at), at + "/kind")); });
  const int d = static_cast<int>(get_integer(require(j, "d", at), at + "/d"));
  const int cells = static_cast<int>(get_integer(require(j, "cells_per_axis", at), at + "/cells_per_axis"));
  const int degree = j.contains("degree") ? static_cast<int>(get_integer(j["degree"], at + "/degree")) : 0;
  const double B = j.contains("B") ? get_number(j["B"], at + "/B") : 1.0;
  return wrap(at, [&] { return build_dictionary(kind, d, cells, degree, B); });
}

inline json to_json(const Dictionary& d) {
  return json{{"kind", to_string(d.kind)}, {"d", d.d},   {"cells_per_axis", d.cells_per_axis},
              {"degree", d.degree},        {"B", d.B},   {"k", d.k}};
}

inline DGP dgp_from_json(const json& j, FunctionalKind functional, const std::string& at) {
  using namespace detail;
  const std::string type = get_string(require(j, "type", at), at + "/type");
  if (type == "discrete") {
    DiscreteDGP g;
    g.functional = functional;
    const json& atoms = require(j, "atoms", at);
    if (!atoms.is_array() || atoms.empty()) throw ConfigError(at + "/atoms", "expected a nonempty array");
    const size_t K = atoms.size();
    const size_t d = atoms[0].is_array() ? atoms[0].size() : 1;
    g.atoms.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(d));
    for (size_t r = 0; r < K; ++r) {
      const std::string p = at + "/atoms/" + std::to_string(r);
      if (atoms[r].is_array()) {
        if (atoms[r].size() != d) throw ConfigError(p, "atom dimension differs from the first atom");
        for (size_t c = 0; c < d; ++c)
          g.atoms(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = get_number(atoms[r][c], p + "/" + std::to_string(c));
      } else {
        if (d != 1) throw ConfigError(p, "expected an array");
        g.atoms(static_cast<Eigen::Index>(r), 0) = get_number(atoms[r], p);
      }
    }
    auto per_atom = [&](const char* key, bool required, double fallback) {
      const std::string p = at + "/" + key;
      if (!j.contains(key)) {
        if (required) throw ConfigError(p, "missing required field");
        return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(K), fallback).eval();
      }
      if (j[key].is_number()) return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(K), j[key].get<double>()).eval();
      Eigen::VectorXd v = get_vector(j[key], p);
      if (v.size() != static_cast<Eigen::Index>(K)) throw ConfigError(p, "expected one entry per atom");
      return v;
    };
    g.prob = per_atom("prob", true, 0.0);
    g.propensity = per_atom("propensity", true, 0.0);
    g.outcome_mean = per_atom("outcome_mean", true, 0.0);
    g.noise_sd = per_atom("noise_sd", false, 1.0);
    if (j.contains("c")) g.c = get_number(j["c"], at + "/c");
    if (j.contains("a_sd")) g.a_sd = get_number(j["a_sd"], at + "/a_sd");
    if (j.contains("slope")) g.slope = get_number(j["slope"], at + "/slope");
    wrap(at, [&] {
      validate_dgp(g);
      return 0;
    });
    return g;
  }
  if (type == "continuous") {
    ContinuousDGP g = default_continuous_dgp(functional);
    if (j.contains("d")) g.d = static_cast<int>(get_integer(j["d"], at + "/d"));
    if (g.d < 1) throw ConfigError(at + "/d", "dimension must be >= 1");
    if (g.d == 1) {
      g.propensity_index = [](const Eigen::VectorXd& x) { return x[0]; };
      g.outcome_mean = [](const Eigen::VectorXd& x) { return std::sin(M_PI * x[0]) / 2.0; };
    }
    if (j.contains("noise_sd")) g.noise_sd = get_number(j["noise_sd"], at + "/noise_sd");
    if (j.contains("c")) g.c = get_number(j["c"], at + "/c");
    if (!(g.c > 0.0 && g.c < 0.5)) throw ConfigError(at + "/c", "overlap constant must lie in (0, 0.5)");
    if (j.contains("a_sd")) g.a_sd = get_number(j["a_sd"], at + "/a_sd");
    if (j.contains("slope")) g.slope = get_number(j["slope"], at + "/slope");
    if (j.contains("s_a")) g.s_a = get_number(j["s_a"], at + "/s_a");
    if (j.contains("s_b")) g.s_b = get_number(j["s_b"], at + "/s_b");
    return g;
  }
  throw ConfigError(at + "/type", "expected 'discrete' or 'continuous'");
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  using namespace detail;
  if (!j.is_object()) throw ConfigError("", "expected a JSON object");
  ExperimentConfig cfg;
  const FunctionalKind fk = j.contains("functional")
                                ? wrap("/functional", [&] { return functional_from_string(get_string(j["functional"], "/functional")); })
                                : FunctionalKind::TreatedMean;
  cfg.dgp = dgp_from_json(require(j, "dgp", ""), fk, "/dgp");
  const Dictionary base = j.contains("dict") ? dictionary_from_json(j["dict"], "/dict") : Dictionary{};
  const json& grid = require(j, "grid", "");
  if (!grid.is_array() || grid.empty()) throw ConfigError("/grid", "expected a nonempty array");
  for (size_t i = 0; i < grid.size(); ++i) {
    const std::string at = "/grid/" + std::to_string(i);
    GridPoint gp;
    gp.n = get_integer(require(grid[i], "n", at), at + "/n");
    if (gp.n < 2) throw ConfigError(at + "/n", "n must be >= 2");
    gp.m = static_cast<int>(get_integer(require(grid[i], "m", at), at + "/m"));
    if (gp.m < 2 || gp.m > kMaxEngineOrder) throw ConfigError(at + "/m", "order must lie in [2, 8]");
    if (grid[i].contains("dict"))
      gp.dict = dictionary_from_json(grid[i]["dict"], at + "/dict");
    else if (j.contains("dict"))
      gp.dict = base;
    else
      throw ConfigError(at + "/dict", "no dictionary given here or at /dict");
    if (gp.dict.d != dimension_of(cfg.dgp)) throw ConfigError(at + "/dict/d", "dictionary dimension differs from the design");
    if (gp.dict.k >= gp.n) throw ConfigError(at, "k = " + std::to_string(gp.dict.k) + " must be below n");
    cfg.grid.push_back(gp);
  }
  cfg.replications = static_cast<int>(get_integer(require(j, "replications", ""), "/replications"));
  if (cfg.replications < 1) throw ConfigError("/replications", "must be >= 1");
  if (j.contains("seed")) cfg.seed = static_cast<std::uint64_t>(get_integer(j["seed"], "/seed"));
  if (j.contains("estimators")) {
    const json& e = j["estimators"];
    if (!e.is_array() || e.empty()) throw ConfigError("/estimators", "expected a nonempty array");
    cfg.estimators.clear();
    for (size_t i = 0; i < e.size(); ++i) {
      const std::string at = "/estimators/" + std::to_string(i);
      const std::string s = get_string(e[i], at);
      if (s == "shoif") cfg.estimators.push_back(EstimatorKind::Stable);
      else if (s == "ehoif") cfg.estimators.push_back(EstimatorKind::Empirical);
      else if (s == "oracle") cfg.estimators.push_back(EstimatorKind::Oracle);
      else throw ConfigError(at, "expected 'shoif', 'ehoif' or 'oracle'");
    }
  }
  if (j.contains("convention"))
    cfg.convention = wrap("/convention", [&] { return convention_from_string(get_string(j["convention"], "/convention")); });
  if (j.contains("rank_tolerance")) cfg.rank_tolerance = get_number(j["rank_tolerance"], "/rank_tolerance");
  if (j.contains("oracle_reference_size"))
    cfg.oracle_reference_size = get_integer(j["oracle_reference_size"], "/oracle_reference_size");
  if (j.contains("nuisance")) {
    const json& nj = j["nuisance"];
    const std::string type = get_string(require(nj, "type", "/nuisance"), "/nuisance/type");
    if (type == "truth") {
      cfg.nuisance.type = NuisanceConfig::Type::Truth;
    } else if (type == "atom-values") {
      cfg.nuisance.type = NuisanceConfig::Type::AtomValues;
      cfg.nuisance.atom_values.a_hat = get_vector(require(nj, "a_hat", "/nuisance"), "/nuisance/a_hat");
      cfg.nuisance.atom_values.b_hat = get_vector(require(nj, "b_hat", "/nuisance"), "/nuisance/b_hat");
      const auto* g = std::get_if<DiscreteDGP>(&cfg.dgp);
      if (!g) throw ConfigError("/nuisance/type", "atom-values needs a discrete design");
      if (cfg.nuisance.atom_values.a_hat.size() != g->size())
        throw ConfigError("/nuisance/a_hat", "expected one entry per atom");
      if (cfg.nuisance.atom_values.b_hat.size() != g->size())
        throw ConfigError("/nuisance/b_hat", "expected one entry per atom");
    } else if (type == "perturbation") {
      cfg.nuisance.type = NuisanceConfig::Type::Perturbation;
      PerturbationSpec& p = cfg.nuisance.perturbation;
      if (nj.contains("rate_exponent")) p.rate_exponent = get_number(nj["rate_exponent"], "/nuisance/rate_exponent");
      if (!(p.rate_exponent > 0.0)) throw ConfigError("/nuisance/rate_exponent", "must be positive");
      if (nj.contains("scale")) p.scale = get_number(nj["scale"], "/nuisance/scale");
      if (nj.contains("seed")) p.seed = static_cast<std::uint64_t>(get_integer(nj["seed"], "/nuisance/seed"));
      if (nj.contains("direction")) {
        const std::string dir = get_string(nj["direction"], "/nuisance/direction");
        if (dir == "basis-noise") p.direction = PerturbationDirection::BasisNoise;
        else if (dir == "constant-shift") p.direction = PerturbationDirection::ConstantShift;
        else throw ConfigError("/nuisance/direction", "expected 'basis-noise' or 'constant-shift'");
      }
    } else {
      throw ConfigError("/nuisance/type", "expected 'truth', 'atom-values' or 'perturbation'");
    }
  }
  return cfg;
}

inline json to_json(const MomentSummary& s) {
  return json{{"mean", s.mean}, {"sd", s.sd}, {"se", s.se}, {"count", s.count}};
}

inline json to_json(const ExactFunctionals& e) {
  return json{{"psi", e.psi},           {"bias_psi1", e.bias_psi1}, {"bias_k", e.bias_k},
              {"cs_bias", e.cs_bias},   {"eff_bound", e.eff_bound}, {"var_first_order", e.var_first_order}};
}

inline json to_json(const GridSummary& s) {
  json j{{"n", s.n},
         {"k", s.k},
         {"m", s.m},
         {"estimator", to_string(s.estimator)},
         {"successes", s.successes},
         {"failures", s.failures},
         {"failure_kinds", s.failure_kinds},
         {"psi_1", to_json(s.psi_1)},
         {"cond_median", s.cond_median},
         {"cond_max", s.cond_max}};
  json corr = json::object(), psim = json::object();
  for (const auto& [k, v] : s.corrections) corr[std::to_string(k)] = to_json(v);
  for (const auto& [k, v] : s.psi_m) psim[std::to_string(k)] = to_json(v);
  j["corrections"] = corr;
  j["psi_m"] = psim;
  if (s.oracle) j["oracle"] = to_json(*s.oracle);
  return j;
}

inline void write_results_csv(const std::string& path, const ExperimentResult& r) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::ValidationError, "cannot write '" + path + "'");
  out << "n,k,m,estimator,order,replication,value,cond_number,status\n";
  for (const ResultRow& row : r.rows)
    out << row.n << "," << row.k << "," << row.m << "," << to_string(row.estimator) << "," << row.order << ","
        << row.replication << "," << format_double(row.value) << "," << format_double(row.cond_number) << ","
        << row.status << "\n";
}

inline json to_json(const EstimateReport& r) {
  json j{{"psi_1", r.psi_1}, {"se_psi1", r.se_psi1}, {"k", r.k}, {"n", r.n},
         {"m_max", r.m_max}, {"convention", to_string(r.convention)}, {"condition_number", r.condition_number}};
  json corr = json::object(), psim = json::object(), sec = json::object();
  for (const auto& [k, v] : r.corrections) {
    corr[std::to_string(k)] = v;
    j["correction_" + std::to_string(k)] = v;
  }
  for (const auto& [k, v] : r.psi_m) psim[std::to_string(k)] = v;
  for (const auto& [k, v] : r.se_corrections) sec[std::to_string(k)] = v;
  j["corrections"] = corr;
  j["psi_m"] = psim;
  j["se_corrections"] = sec;
  return j;
}

}  // namespace shoif
