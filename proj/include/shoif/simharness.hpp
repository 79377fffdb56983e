#pragma once

// Synthetic designs, controlled nuisance perturbations and the Monte Carlo
// experiment runner.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "shoif/dictionary.hpp"
#include "shoif/errors.hpp"
#include "shoif/estimators.hpp"
#include "shoif/oracle.hpp"

namespace shoif {

inline double expit(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// X uniform on [-1, 1]^d. Treated-mean: A ~ Bernoulli(pi(x)) with
// pi = clip(expit(index(x)), c, 1 - c). ECC: A = pi(x) + a_sd U and
// Y = b(x) + slope a_sd U + noise_sd e.
struct ContinuousDGP {
  FunctionalKind functional = FunctionalKind::TreatedMean;
  int d = 2;
  std::function<double(const Eigen::VectorXd&)> propensity_index;
  std::function<double(const Eigen::VectorXd&)> outcome_mean;
  double noise_sd = 0.5;
  double c = 0.1;
  double s_a = 2.0;  // smoothness tags, metadata only
  double s_b = 2.0;
  double a_sd = 1.0;
  double slope = 0.5;

  double propensity(const Eigen::VectorXd& x) const {
    return std::clamp(expit(propensity_index(x)), c, 1.0 - c);
  }
};

inline ContinuousDGP default_continuous_dgp(FunctionalKind functional = FunctionalKind::TreatedMean) {
  ContinuousDGP g;
  g.functional = functional;
  g.d = 2;
  g.propensity_index = [](const Eigen::VectorXd& x) { return x[0] - x[1] / 2.0; };
  g.outcome_mean = [](const Eigen::VectorXd& x) { return std::sin(M_PI * x[0]) * (1.0 + x[1]) / 2.0; };
  g.noise_sd = 0.5;
  g.c = 0.1;
  return g;
}

// Propensity clip bounds on a dense grid probe of about `points` points.
inline bool probe_clip_bounds(const ContinuousDGP& g, int points = 10000) {
  const int per_axis = std::max(2, static_cast<int>(std::ceil(std::pow(points, 1.0 / g.d))));
  std::vector<int> idx(static_cast<size_t>(g.d), 0);
  Eigen::VectorXd x(g.d);
  while (true) {
    for (int a = 0; a < g.d; ++a) x[a] = -1.0 + 2.0 * idx[static_cast<size_t>(a)] / (per_axis - 1);
    const double p = g.propensity(x);
    if (!(p >= g.c && p <= 1.0 - g.c)) return false;
    int a = 0;
    while (a < g.d && ++idx[static_cast<size_t>(a)] == per_axis) idx[static_cast<size_t>(a++)] = 0;
    if (a == g.d) break;
  }
  return true;
}

using DGP = std::variant<DiscreteDGP, ContinuousDGP>;

inline FunctionalKind functional_of(const DGP& dgp) {
  return std::visit([](const auto& g) { return g.functional; }, dgp);
}

inline int dimension_of(const DGP& dgp) {
  if (const auto* g = std::get_if<DiscreteDGP>(&dgp)) return static_cast<int>(g->atoms.cols());
  return std::get<ContinuousDGP>(dgp).d;
}

namespace detail {

// Exact-match lookup of a covariate point among the atoms.
class AtomIndex {
 public:
  explicit AtomIndex(const Eigen::MatrixXd& atoms) {
    for (Eigen::Index j = 0; j < atoms.rows(); ++j) {
      std::vector<double> key(static_cast<size_t>(atoms.cols()));
      for (Eigen::Index a = 0; a < atoms.cols(); ++a) key[static_cast<size_t>(a)] = atoms(j, a);
      map_.emplace(std::move(key), static_cast<int>(j));
    }
  }
  int find(const Eigen::VectorXd& x) const {
    std::vector<double> key(x.data(), x.data() + x.size());
    auto it = map_.find(key);
    if (it == map_.end()) fail(ErrorKind::DomainViolation, "covariate value is not an atom of the design");
    return it->second;
  }

 private:
  std::map<std::vector<double>, int> map_;
};

}  // namespace detail

inline ObservationSet sample(const DGP& dgp, Eigen::Index n, std::uint64_t seed) {
  if (n < 1) fail(ErrorKind::ArgumentError, "sample size must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ObservationSet out;
  out.A.resize(n);
  out.Y.resize(n);

  if (const auto* g = std::get_if<DiscreteDGP>(&dgp)) {
    validate_dgp(*g);
    std::discrete_distribution<int> pick(g->prob.data(), g->prob.data() + g->prob.size());
    out.X.resize(n, g->atoms.cols());
    out.atom.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int j = pick(rng);
      out.atom[i] = j;
      out.X.row(i) = g->atoms.row(j);
      const double u = normal(rng);
      const double e = normal(rng);
      if (g->functional == FunctionalKind::TreatedMean) {
        out.A[i] = unit(rng) < g->propensity[j] ? 1.0 : 0.0;
        out.Y[i] = g->outcome_mean[j] + g->noise_sd[j] * e;
      } else {
        out.A[i] = g->propensity[j] + g->a_sd * u;
        out.Y[i] = g->outcome_mean[j] + g->slope * g->a_sd * u + g->noise_sd[j] * e;
      }
    }
    return out;
  }

  const auto& g = std::get<ContinuousDGP>(dgp);
  std::uniform_real_distribution<double> box(-1.0, 1.0);
  out.X.resize(n, g.d);
  Eigen::VectorXd x(g.d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int a = 0; a < g.d; ++a) x[a] = box(rng);
    out.X.row(i) = x.transpose();
    const double u = normal(rng);
    const double e = normal(rng);
    const double p = g.propensity(x);
    const double b = g.outcome_mean(x);
    if (g.functional == FunctionalKind::TreatedMean) {
      out.A[i] = unit(rng) < p ? 1.0 : 0.0;
      out.Y[i] = b + g.noise_sd * e;
    } else {
      out.A[i] = p + g.a_sd * u;
      out.Y[i] = b + g.slope * g.a_sd * u + g.noise_sd * e;
    }
  }
  return out;
}

// True nuisance functions: a is 1/pi for the treated mean and E[A | X] for ECC.
inline NuisanceFit true_nuisance(const DGP& dgp) {
  NuisanceFit fit;
  if (const auto* g = std::get_if<DiscreteDGP>(&dgp)) {
    auto index = std::make_shared<detail::AtomIndex>(g->atoms);
    const DiscreteDGP copy = *g;
    const bool tm = g->functional == FunctionalKind::TreatedMean;
    fit.a_hat = [index, copy, tm](const Eigen::VectorXd& x) {
      const double p = copy.propensity[index->find(x)];
      return tm ? 1.0 / p : p;
    };
    fit.b_hat = [index, copy](const Eigen::VectorXd& x) { return copy.outcome_mean[index->find(x)]; };
  } else {
    const ContinuousDGP cg = std::get<ContinuousDGP>(dgp);
    const bool tm = cg.functional == FunctionalKind::TreatedMean;
    fit.a_hat = [cg, tm](const Eigen::VectorXd& x) {
      const double p = cg.propensity(x);
      return tm ? 1.0 / p : p;
    };
    fit.b_hat = [cg](const Eigen::VectorXd& x) { return cg.outcome_mean(x); };
  }
  return fit;
}

enum class PerturbationDirection { BasisNoise, ConstantShift };

struct PerturbationSpec {
  double rate_exponent = 0.25;
  PerturbationDirection direction = PerturbationDirection::BasisNoise;
  double scale = 1.0;
  std::uint64_t seed = 0;
  int components = 4;           // leading noise-dictionary functions used
  int noise_degree = 2;         // global Legendre degree of the noise dictionary
  Eigen::Index reference_size = 10000;
  double sign_a = 1.0;          // constant-shift directions
  double sign_b = 1.0;
};

namespace detail {

// Functional perturbation eta with unit L2 norm under the covariate law.
struct Perturbation {
  Dictionary dict;
  Eigen::VectorXd coef;
  double constant = 0.0;
  bool basis = true;

  double operator()(const Eigen::VectorXd& x) const {
    if (!basis) return constant;
    const BasisMatrix z = evaluate_basis(dict, x.transpose());
    return z.row(0).head(coef.size()).dot(coef);
  }
};

// Reference covariate sample with weights, used for L2 norms.
inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> reference_design(const DGP& dgp, Eigen::Index size,
                                                                    std::uint64_t seed) {
  if (const auto* g = std::get_if<DiscreteDGP>(&dgp)) return {g->atoms, g->prob};
  const ObservationSet ref = sample(dgp, size, seed);
  return {ref.X, Eigen::VectorXd::Constant(size, 1.0 / static_cast<double>(size))};
}

}  // namespace detail

inline constexpr std::uint64_t kReferenceSeedSalt = 0x5EEDF00DCAFEULL;

// a_hat = a + scale n^{-beta} eta_a, b_hat = b + scale n^{-beta} eta_b,
// clipped to the nuisance bounds (a_hat in [1, 1/c] for the treated mean).
inline NuisanceFit perturbed_nuisance(const DGP& dgp, const PerturbationSpec& spec, Eigen::Index n,
                                      double bound = kDefaultNuisanceBound) {
  if (!(spec.rate_exponent > 0.0)) fail(ErrorKind::ArgumentError, "rate exponent must be positive");
  if (!(spec.scale >= 0.0)) fail(ErrorKind::ArgumentError, "perturbation scale must be >= 0");
  if (n < 1) fail(ErrorKind::ArgumentError, "n must be >= 1");
  const NuisanceFit truth = true_nuisance(dgp);
  const double size = spec.scale * std::pow(static_cast<double>(n), -spec.rate_exponent);
  const FunctionalKind fk = functional_of(dgp);
  const double c = std::visit([](const auto& g) { return g.c; }, dgp);
  const double a_lo = fk == FunctionalKind::TreatedMean ? 1.0 : -bound;
  const double a_hi = fk == FunctionalKind::TreatedMean ? std::min(bound, 1.0 / c) : bound;

  auto [ref_x, ref_w] = detail::reference_design(dgp, spec.reference_size, spec.seed ^ kReferenceSeedSalt);
  const int d = dimension_of(dgp);

  auto make_eta = [&](std::uint64_t salt, double sign) {
    detail::Perturbation eta;
    if (spec.direction == PerturbationDirection::ConstantShift) {
      eta.basis = false;
      eta.constant = sign;
      return eta;
    }
    eta.dict = build_dictionary(DictionaryKind::PiecewisePolynomialPartition, d, 1, spec.noise_degree, 1.0);
    const int J = static_cast<int>(std::min<std::int64_t>(spec.components, eta.dict.k));
    std::mt19937_64 rng(spec.seed + salt);
    std::normal_distribution<double> normal(0.0, 1.0);
    eta.coef.resize(J);
    for (int j = 0; j < J; ++j) eta.coef[j] = normal(rng);
    const BasisMatrix Z = evaluate_basis(eta.dict, ref_x);
    const Eigen::VectorXd v = Z.leftCols(J) * eta.coef;
    const double norm = std::sqrt((ref_w.array() * v.array().square()).sum());
    if (norm > 0.0) eta.coef /= norm;
    return eta;
  };
  const detail::Perturbation eta_a = make_eta(1, spec.sign_a);
  const detail::Perturbation eta_b = make_eta(2, spec.sign_b);

  NuisanceFit fit;
  fit.provenance = NuisanceProvenance::SimulatedPerturbation;
  fit.a_hat = [truth, eta_a, size, a_lo, a_hi](const Eigen::VectorXd& x) {
    return std::clamp(truth.a_hat(x) + size * eta_a(x), a_lo, a_hi);
  };
  fit.b_hat = [truth, eta_b, size, bound](const Eigen::VectorXd& x) {
    return std::clamp(truth.b_hat(x) + size * eta_b(x), -bound, bound);
  };

  // Clipping must keep at least half of the perturbation's L2 mass.
  if (size > 0.0) {
    double raw_a = 0.0, kept_a = 0.0, raw_b = 0.0, kept_b = 0.0;
    for (Eigen::Index i = 0; i < ref_x.rows(); ++i) {
      const Eigen::VectorXd x = ref_x.row(i).transpose();
      const double w = ref_w[i];
      const double ta = truth.a_hat(x), tb = truth.b_hat(x);
      raw_a += w * std::pow(size * eta_a(x), 2);
      raw_b += w * std::pow(size * eta_b(x), 2);
      kept_a += w * std::pow(fit.a_hat(x) - ta, 2);
      kept_b += w * std::pow(fit.b_hat(x) - tb, 2);
    }
    if ((raw_a > 0.0 && std::sqrt(kept_a / raw_a) < 0.5) || (raw_b > 0.0 && std::sqrt(kept_b / raw_b) < 0.5))
      fail(ErrorKind::PerturbationInfeasible, "clipping removes more than half of the perturbation");
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Experiment runner

struct GridPoint {
  Eigen::Index n = 0;
  Dictionary dict;
  int m = 2;
};

struct NuisanceConfig {
  enum class Type { Truth, AtomValues, Perturbation } type = Type::Truth;
  AtomFit atom_values;  // discrete designs only
  PerturbationSpec perturbation;
};

struct ExperimentConfig {
  DGP dgp = DiscreteDGP{};
  std::vector<GridPoint> grid;
  int replications = 1;
  std::uint64_t seed = 0;
  std::vector<EstimatorKind> estimators{EstimatorKind::Stable};
  NuisanceConfig nuisance;
  Convention convention = Convention::Canonical;
  double rank_tolerance = kDefaultRankTolerance;
  int parallel = 1;
  Eigen::Index oracle_reference_size = 200000;  // continuous designs: Monte Carlo Sigma
};

inline void validate(const ExperimentConfig& cfg) {
  if (cfg.grid.empty()) fail(ErrorKind::ValidationError, "experiment grid is empty");
  if (cfg.replications < 1) fail(ErrorKind::ValidationError, "replications must be >= 1");
  if (cfg.estimators.empty()) fail(ErrorKind::ValidationError, "estimator set is empty");
  for (const GridPoint& p : cfg.grid) {
    if (p.dict.k >= p.n)
      fail(ErrorKind::ValidationError, "grid point n = " + std::to_string(p.n) + " needs k < n, got k = " +
                                           std::to_string(p.dict.k));
    if (p.m < 2 || p.m > kMaxEngineOrder) fail(ErrorKind::ValidationError, "grid order must lie in [2, 8]");
    if (p.dict.d != dimension_of(cfg.dgp)) fail(ErrorKind::ValidationError, "dictionary dimension differs from the design");
  }
  if (const auto* g = std::get_if<DiscreteDGP>(&cfg.dgp)) {
    validate_dgp(*g);
    if (cfg.nuisance.type == NuisanceConfig::Type::AtomValues &&
        (cfg.nuisance.atom_values.a_hat.size() != g->size() || cfg.nuisance.atom_values.b_hat.size() != g->size()))
      fail(ErrorKind::ValidationError, "atom nuisance values must have one entry per atom");
  } else if (cfg.nuisance.type == NuisanceConfig::Type::AtomValues) {
    fail(ErrorKind::ValidationError, "atom nuisance values need a discrete design");
  }
}

struct ResultRow {
  Eigen::Index n = 0;
  Eigen::Index k = 0;
  int m = 0;
  EstimatorKind estimator = EstimatorKind::Stable;
  int order = 0;  // 1: psi_1, j >= 2: order-j correction, 0: failed replication
  int replication = 0;
  double value = 0.0;
  double cond_number = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
};

struct MomentSummary {
  double mean = 0.0;
  double sd = 0.0;
  double se = 0.0;
  int count = 0;
};

inline MomentSummary summarize(const std::vector<double>& v) {
  MomentSummary s;
  s.count = static_cast<int>(v.size());
  if (v.empty()) return s;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  s.mean = mean;
  s.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  s.se = s.sd / std::sqrt(static_cast<double>(v.size()));
  return s;
}

struct GridSummary {
  Eigen::Index n = 0;
  Eigen::Index k = 0;
  int m = 0;
  EstimatorKind estimator = EstimatorKind::Stable;
  int successes = 0;
  int failures = 0;
  std::map<std::string, int> failure_kinds;
  MomentSummary psi_1;
  std::map<int, MomentSummary> corrections;
  std::map<int, MomentSummary> psi_m;
  double cond_median = std::numeric_limits<double>::quiet_NaN();
  double cond_max = std::numeric_limits<double>::quiet_NaN();
  std::optional<ExactFunctionals> oracle;  // discrete designs
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<GridSummary> summaries;
};

inline constexpr std::uint64_t kNuisanceSampleSalt = 0x9E3779B97F4A7C15ULL;

namespace detail {

struct ReplicationOutcome {
  bool ok = false;
  std::string status;
  double psi_1 = 0.0;
  std::map<int, double> corrections;
  double cond = std::numeric_limits<double>::quiet_NaN();
};

template <class F>
void parallel_for(int count, int threads, F&& body) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) body(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  const FunctionalSpec fspec{functional_of(cfg.dgp)};
  const auto* discrete = std::get_if<DiscreteDGP>(&cfg.dgp);
  ExperimentResult result;

  for (const GridPoint& gp : cfg.grid) {
    // Frozen nuisance for this grid point.
    NuisanceFit fit;
    std::optional<AtomFit> atom_fit;
    switch (cfg.nuisance.type) {
      case NuisanceConfig::Type::Truth: fit = true_nuisance(cfg.dgp); break;
      case NuisanceConfig::Type::AtomValues: atom_fit = cfg.nuisance.atom_values; break;
      case NuisanceConfig::Type::Perturbation: fit = perturbed_nuisance(cfg.dgp, cfg.nuisance.perturbation, gp.n); break;
    }
    if (discrete && !atom_fit) atom_fit = evaluate_on_atoms(fit, *discrete);

    std::optional<ExactFunctionals> exact;
    Eigen::MatrixXd omega;
    double omega_cond = std::numeric_limits<double>::quiet_NaN();
    const bool want_oracle =
        std::find(cfg.estimators.begin(), cfg.estimators.end(), EstimatorKind::Oracle) != cfg.estimators.end();
    if (discrete) {
      try {
        exact = exact_functionals(*discrete, *atom_fit, gp.dict);
        omega = exact->omega;
      } catch (const Error&) {
        if (want_oracle) throw;
      }
    } else if (want_oracle) {
      const ObservationSet ref = sample(cfg.dgp, cfg.oracle_reference_size, cfg.seed ^ kReferenceSeedSalt);
      Eigen::VectorXd S(ref.n());
      for (Eigen::Index i = 0; i < ref.n(); ++i) S[i] = fspec.weight(ref.A[i]);
      const GramPair g = weighted_gram(evaluate_basis(gp.dict, ref.X), S);
      omega = g.sigma_hat.inverse();
      omega = 0.5 * (omega + omega.transpose()).eval();
    }
    if (omega.size() > 0) {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(omega);
      const Eigen::VectorXd sv = svd.singularValues();
      omega_cond = sv[0] / sv[sv.size() - 1];
    }

    const size_t E = cfg.estimators.size();
    const int R = cfg.replications;
    std::vector<detail::ReplicationOutcome> outcomes(static_cast<size_t>(R) * E);

    detail::parallel_for(R, cfg.parallel, [&](int rep) {
      const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(rep);
      const ObservationSet data = sample(cfg.dgp, gp.n, seed);
      NuisanceValues v;
      if (atom_fit) {
        v.a_hat.resize(data.n());
        v.b_hat.resize(data.n());
        for (Eigen::Index i = 0; i < data.n(); ++i) {
          v.a_hat[i] = atom_fit->a_hat[data.atom[i]];
          v.b_hat[i] = atom_fit->b_hat[data.atom[i]];
        }
      } else {
        v = evaluate_nuisance(fit, data.X);
      }
      for (size_t e = 0; e < E; ++e) {
        detail::ReplicationOutcome& out = outcomes[static_cast<size_t>(rep) * E + e];
        try {
          out.psi_1 = first_order_estimate(fspec, v, data);
          CorrectionResult corr;
          switch (cfg.estimators[e]) {
            case EstimatorKind::Stable:
              corr = shoif_correction(fspec, v, data, gp.dict, gp.m, cfg.convention, cfg.rank_tolerance);
              break;
            case EstimatorKind::Empirical: {
              const ObservationSet nuis = sample(cfg.dgp, gp.n, seed ^ kNuisanceSampleSalt);
              corr = ehoif_correction(fspec, v, data, gp.dict, gp.m, nuis, cfg.convention);
              break;
            }
            case EstimatorKind::Oracle:
              corr = oracle_hoif_correction(fspec, v, data, gp.dict, gp.m, omega, cfg.convention);
              corr.condition_number = omega_cond;
              break;
          }
          out.corrections = corr.by_order;
          out.cond = corr.condition_number;
          out.ok = true;
          out.status = "ok";
        } catch (const Error& err) {
          out.ok = false;
          out.status = to_string(err.kind());
        }
      }
    });

    for (size_t e = 0; e < E; ++e) {
      GridSummary s;
      s.n = gp.n;
      s.k = gp.dict.k;
      s.m = gp.m;
      s.estimator = cfg.estimators[e];
      s.oracle = exact;
      std::vector<double> psi1, conds;
      std::map<int, std::vector<double>> corr, psim;
      for (int rep = 0; rep < R; ++rep) {
        const detail::ReplicationOutcome& o = outcomes[static_cast<size_t>(rep) * E + e];
        if (!o.ok) {
          ++s.failures;
          ++s.failure_kinds[o.status];
          result.rows.push_back({gp.n, gp.dict.k, gp.m, cfg.estimators[e], 0, rep,
                                 std::numeric_limits<double>::quiet_NaN(), o.cond, o.status});
          continue;
        }
        ++s.successes;
        psi1.push_back(o.psi_1);
        conds.push_back(o.cond);
        result.rows.push_back({gp.n, gp.dict.k, gp.m, cfg.estimators[e], 1, rep, o.psi_1, o.cond, "ok"});
        double acc = o.psi_1;
        for (const auto& [j, c] : o.corrections) {
          result.rows.push_back({gp.n, gp.dict.k, gp.m, cfg.estimators[e], j, rep, c, o.cond, "ok"});
          acc += c;
          corr[j].push_back(c);
          psim[j].push_back(acc);
        }
      }
      s.psi_1 = summarize(psi1);
      for (auto& [j, v] : corr) s.corrections[j] = summarize(v);
      for (auto& [j, v] : psim) s.psi_m[j] = summarize(v);
      if (!conds.empty()) {
        std::sort(conds.begin(), conds.end());
        s.cond_median = conds[conds.size() / 2];
        s.cond_max = conds.back();
      }
      result.summaries.push_back(std::move(s));
    }
  }
  return result;
}

}  // namespace shoif
