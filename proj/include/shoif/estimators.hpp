#pragma once

// Doubly robust functionals, the first-order estimator and the higher-order
// correction hierarchy (stable, empirical-Gram and oracle-Omega variants).

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "shoif/dictionary.hpp"
#include "shoif/errors.hpp"
#include "shoif/kernels.hpp"
#include "shoif/ustats.hpp"

namespace shoif {

enum class FunctionalKind { TreatedMean, ExpectedConditionalCovariance };

inline const char* to_string(FunctionalKind kind) {
  return kind == FunctionalKind::TreatedMean ? "treated-mean" : "ecc";
}

inline FunctionalKind functional_from_string(const std::string& s) {
  if (s == "treated-mean") return FunctionalKind::TreatedMean;
  if (s == "ecc" || s == "expected-conditional-covariance")
    return FunctionalKind::ExpectedConditionalCovariance;
  fail(ErrorKind::ArgumentError, "unknown functional '" + s + "'");
}

// Residual maps of a doubly robust functional.
struct FunctionalSpec {
  FunctionalKind kind = FunctionalKind::TreatedMean;

  double weight(double a) const { return kind == FunctionalKind::TreatedMean ? a : 1.0; }
  double residual_a(double a_hat, double a) const {
    return kind == FunctionalKind::TreatedMean ? a * a_hat - 1.0 : a - a_hat;
  }
  double residual_b(double b_hat, double a, double y) const {
    return kind == FunctionalKind::TreatedMean ? a * (y - b_hat) : y - b_hat;
  }
  double first_order(double a_hat, double b_hat, double a, double y) const {
    return kind == FunctionalKind::TreatedMean ? a * a_hat * (y - b_hat) + b_hat
                                               : (a - a_hat) * (y - b_hat);
  }
};

struct ObservationSet {
  Eigen::MatrixXd X;  // n x d
  Eigen::VectorXd A;
  Eigen::VectorXd Y;
  Eigen::VectorXi atom;  // atom index per row for discrete designs; empty otherwise

  Eigen::Index n() const { return X.rows(); }
};

inline ObservationSet subset(const ObservationSet& data, const std::vector<Eigen::Index>& rows) {
  ObservationSet out;
  const Eigen::Index m = static_cast<Eigen::Index>(rows.size());
  out.X.resize(m, data.X.cols());
  out.A.resize(m);
  out.Y.resize(m);
  if (data.atom.size() > 0) out.atom.resize(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const Eigen::Index i = rows[static_cast<size_t>(r)];
    out.X.row(r) = data.X.row(i);
    out.A[r] = data.A[i];
    out.Y[r] = data.Y[i];
    if (data.atom.size() > 0) out.atom[r] = data.atom[i];
  }
  return out;
}

enum class NuisanceProvenance { ExternalFile, SimulatedPerturbation };

// Nuisance functions; fitted elsewhere and frozen.
struct NuisanceFit {
  std::function<double(const Eigen::VectorXd&)> a_hat;
  std::function<double(const Eigen::VectorXd&)> b_hat;
  NuisanceProvenance provenance = NuisanceProvenance::SimulatedPerturbation;
};

// Nuisance values at the sample rows.
struct NuisanceValues {
  Eigen::VectorXd a_hat;
  Eigen::VectorXd b_hat;
  NuisanceProvenance provenance = NuisanceProvenance::ExternalFile;
};

inline NuisanceValues subset(const NuisanceValues& v, const std::vector<Eigen::Index>& rows) {
  NuisanceValues out;
  out.a_hat.resize(static_cast<Eigen::Index>(rows.size()));
  out.b_hat.resize(static_cast<Eigen::Index>(rows.size()));
  for (size_t r = 0; r < rows.size(); ++r) {
    out.a_hat[static_cast<Eigen::Index>(r)] = v.a_hat[rows[r]];
    out.b_hat[static_cast<Eigen::Index>(r)] = v.b_hat[rows[r]];
  }
  out.provenance = v.provenance;
  return out;
}

inline NuisanceValues evaluate_nuisance(const NuisanceFit& fit, const Eigen::MatrixXd& X) {
  NuisanceValues v;
  v.a_hat.resize(X.rows());
  v.b_hat.resize(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const Eigen::VectorXd x = X.row(i).transpose();
    v.a_hat[i] = fit.a_hat(x);
    v.b_hat[i] = fit.b_hat(x);
  }
  v.provenance = fit.provenance;
  return v;
}

inline constexpr double kDefaultNuisanceBound = 100.0;

inline void validate_observations(const FunctionalSpec& spec, const ObservationSet& data) {
  const Eigen::Index n = data.n();
  if (n == 0) fail(ErrorKind::EmptyData, "observation set is empty");
  if (data.A.size() != n || data.Y.size() != n)
    fail(ErrorKind::ShapeError, "A and Y must have one entry per row of X");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(data.A[i]) || !std::isfinite(data.Y[i]) || !data.X.row(i).allFinite())
      fail(ErrorKind::ValidationError, "row " + std::to_string(i) + ": non-finite value");
    if (spec.kind == FunctionalKind::TreatedMean && data.A[i] != 0.0 && data.A[i] != 1.0)
      fail(ErrorKind::ValidationError, "row " + std::to_string(i) + ", field a: treated-mean needs A in {0, 1}");
  }
}

inline void validate_nuisance(const FunctionalSpec& spec, const NuisanceValues& v, Eigen::Index n,
                              double bound = kDefaultNuisanceBound) {
  if (v.a_hat.size() != n || v.b_hat.size() != n)
    fail(ErrorKind::ValidationError, "nuisance has " + std::to_string(v.a_hat.size()) +
                                         " rows, dataset has " + std::to_string(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::string row = "row " + std::to_string(i);
    if (!std::isfinite(v.a_hat[i]) || std::abs(v.a_hat[i]) > bound)
      fail(ErrorKind::ValidationError, row + ", field a_hat: not finite or exceeds bound");
    if (!std::isfinite(v.b_hat[i]) || std::abs(v.b_hat[i]) > bound)
      fail(ErrorKind::ValidationError, row + ", field b_hat: not finite or exceeds bound");
    if (spec.kind == FunctionalKind::TreatedMean && v.a_hat[i] < 1.0)
      fail(ErrorKind::ValidationError, row + ", field a_hat: inverse propensity below 1");
  }
}

struct Residuals {
  Eigen::VectorXd eps_a;
  Eigen::VectorXd eps_b;
  Eigen::VectorXd S;
  Eigen::VectorXd first_order;  // per-row contributions to psi_1
};

inline Residuals compute_residuals(const FunctionalSpec& spec, const NuisanceValues& v,
                                   const ObservationSet& data) {
  validate_observations(spec, data);
  validate_nuisance(spec, v, data.n());
  const Eigen::Index n = data.n();
  Residuals r;
  r.eps_a.resize(n);
  r.eps_b.resize(n);
  r.S.resize(n);
  r.first_order.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    r.eps_a[i] = spec.residual_a(v.a_hat[i], data.A[i]);
    r.eps_b[i] = spec.residual_b(v.b_hat[i], data.A[i], data.Y[i]);
    r.S[i] = spec.weight(data.A[i]);
    r.first_order[i] = spec.first_order(v.a_hat[i], v.b_hat[i], data.A[i], data.Y[i]);
  }
  return r;
}

inline double first_order_estimate(const FunctionalSpec& spec, const NuisanceValues& v,
                                   const ObservationSet& data) {
  if (data.n() == 0) fail(ErrorKind::EmptyData, "observation set is empty");
  return compute_residuals(spec, v, data).first_order.mean();
}

enum class Convention { Canonical, Prefactored };

inline const char* to_string(Convention c) { return c == Convention::Canonical ? "canonical" : "s31"; }

inline Convention convention_from_string(const std::string& s) {
  if (s == "canonical") return Convention::Canonical;
  if (s == "s31" || s == "section-3.1-prefactors") return Convention::Prefactored;
  fail(ErrorKind::ArgumentError, "unknown convention '" + s + "'");
}

// Reported order-j correction from the unsigned U-statistic: (-1)^{j+1} U_j,
// so that psi_1 plus the corrections removes the first-order bias. The s31
// convention multiplies orders j >= 3 by (n-j+1)/n.
inline double signed_correction(double unsigned_u, int j, Eigen::Index n, Convention c) {
  double v = (j % 2 == 0) ? -unsigned_u : unsigned_u;
  if (c == Convention::Prefactored && j >= 3)
    v *= static_cast<double>(n - j + 1) / static_cast<double>(n);
  return v;
}

struct CorrectionResult {
  std::map<int, double> by_order;
  double condition_number = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline void check_order(int m) {
  if (m > kMaxEngineOrder) fail(ErrorKind::OrderTooHigh, "order " + std::to_string(m) + " exceeds 8");
  if (m < 2) fail(ErrorKind::ArgumentError, "order must be at least 2");
}

inline CorrectionResult corrections_from_factors(const KernelFactors& factors, const Residuals& r,
                                                 const BasisMatrix& Z, int m, Convention c) {
  SandwichKernelSpec spec{r.eps_a, r.eps_b, r.S, Z, Eigen::MatrixXd(), factors};
  const std::vector<double> u = partition_moebius_ustats(spec, m);
  CorrectionResult out;
  for (int j = 2; j <= m; ++j) out.by_order[j] = signed_correction(u[static_cast<size_t>(j)], j, Z.rows(), c);
  return out;
}

}  // namespace detail

// Stable corrections: Omega_hat from the estimation sample, via the SVD kernel.
inline CorrectionResult shoif_correction(const FunctionalSpec& spec, const NuisanceValues& v,
                                         const ObservationSet& data, const Dictionary& dict, int m,
                                         Convention c = Convention::Canonical,
                                         double rank_tolerance = kDefaultRankTolerance) {
  detail::check_order(m);
  const Residuals r = compute_residuals(spec, v, data);
  if (dict.k >= data.n())
    fail(ErrorKind::Underdetermined, "k = " + std::to_string(dict.k) + " must be below n = " +
                                         std::to_string(data.n()));
  const BasisMatrix Z = evaluate_basis(dict, data.X);
  const StableKernel sk(Z, r.S, rank_tolerance);
  CorrectionResult out = detail::corrections_from_factors(sk.factors(), r, Z, m, c);
  out.condition_number = sk.gram_condition_number();
  return out;
}

// Empirical-Gram corrections: Omega_hat_nuis = Sigma_hat_nuis^{-1} formed
// explicitly from a separate sample.
inline CorrectionResult ehoif_correction(const FunctionalSpec& spec, const NuisanceValues& v,
                                         const ObservationSet& data, const Dictionary& dict, int m,
                                         const ObservationSet& nuisance_data,
                                         Convention c = Convention::Canonical) {
  detail::check_order(m);
  if (nuisance_data.n() == 0) fail(ErrorKind::EmptyData, "nuisance sample is empty");
  const Residuals r = compute_residuals(spec, v, data);
  if (dict.k >= data.n())
    fail(ErrorKind::Underdetermined, "k = " + std::to_string(dict.k) + " must be below n = " +
                                         std::to_string(data.n()));
  validate_observations(spec, nuisance_data);
  Eigen::VectorXd S_nuis(nuisance_data.n());
  for (Eigen::Index i = 0; i < nuisance_data.n(); ++i) S_nuis[i] = spec.weight(nuisance_data.A[i]);
  const GramPair g = weighted_gram(evaluate_basis(dict, nuisance_data.X), S_nuis);

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(g.sigma_hat);
  const Eigen::VectorXd sv = svd.singularValues();
  const double hi = sv[0];
  const double lo = sv[sv.size() - 1];
  if (!(lo > kDefaultRankTolerance * hi))
    fail(ErrorKind::SingularGram, "nuisance-sample Gram matrix is singular; smallest singular value " +
                                      std::to_string(lo));
  const Eigen::MatrixXd omega = g.sigma_hat.inverse();
  const BasisMatrix Z = evaluate_basis(dict, data.X);
  CorrectionResult out = detail::corrections_from_factors(explicit_kernel_factors(Z, omega), r, Z, m, c);
  out.condition_number = hi / lo;
  return out;
}

// Oracle corrections with a supplied population Omega.
inline CorrectionResult oracle_hoif_correction(const FunctionalSpec& spec, const NuisanceValues& v,
                                               const ObservationSet& data, const Dictionary& dict, int m,
                                               const Eigen::MatrixXd& omega,
                                               Convention c = Convention::Canonical) {
  detail::check_order(m);
  if (omega.rows() != dict.k || omega.cols() != dict.k) fail(ErrorKind::ShapeError, "Omega must be k x k");
  const double scale = std::max(1.0, omega.cwiseAbs().maxCoeff());
  if (!omega.allFinite() || (omega - omega.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    fail(ErrorKind::ArgumentError, "Omega must be symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  if (llt.info() != Eigen::Success) fail(ErrorKind::ArgumentError, "Omega must be positive definite");
  const Residuals r = compute_residuals(spec, v, data);
  const BasisMatrix Z = evaluate_basis(dict, data.X);
  return detail::corrections_from_factors(explicit_kernel_factors(Z, omega), r, Z, m, c);
}

enum class EstimatorKind { Stable, Empirical, Oracle };

inline const char* to_string(EstimatorKind e) {
  switch (e) {
    case EstimatorKind::Stable: return "shoif";
    case EstimatorKind::Empirical: return "ehoif";
    case EstimatorKind::Oracle: return "oracle";
  }
  return "shoif";
}

struct EstimateReport {
  double psi_1 = 0.0;
  std::map<int, double> corrections;
  std::map<int, double> psi_m;
  double se_psi1 = 0.0;
  std::map<int, double> se_corrections;
  Eigen::Index k = 0;
  Eigen::Index n = 0;
  int m_max = 2;
  Convention convention = Convention::Canonical;
  double condition_number = std::numeric_limits<double>::quiet_NaN();
};

// psi_m = psi_1 + sum_{j <= m} correction_j, accumulated in order.
inline void accumulate_psi(EstimateReport& rep) {
  rep.psi_m.clear();
  double acc = rep.psi_1;
  for (const auto& [j, c] : rep.corrections) {
    acc += c;
    rep.psi_m[j] = acc;
  }
}

inline double plug_in_se(const Eigen::VectorXd& contributions) {
  const Eigen::Index n = contributions.size();
  if (n < 2) return 0.0;
  const double mean = contributions.mean();
  const double var = (contributions.array() - mean).square().sum() / static_cast<double>(n - 1);
  return std::sqrt(var / static_cast<double>(n));
}

inline EstimateReport estimate(const FunctionalSpec& spec, const NuisanceValues& v, const ObservationSet& data,
                               const Dictionary& dict, int m, Convention c = Convention::Canonical,
                               double rank_tolerance = kDefaultRankTolerance) {
  const Residuals r = compute_residuals(spec, v, data);
  const CorrectionResult corr = shoif_correction(spec, v, data, dict, m, c, rank_tolerance);
  EstimateReport rep;
  rep.psi_1 = r.first_order.mean();
  rep.corrections = corr.by_order;
  rep.se_psi1 = plug_in_se(r.first_order);
  rep.k = dict.k;
  rep.n = data.n();
  rep.m_max = m;
  rep.convention = c;
  rep.condition_number = corr.condition_number;
  accumulate_psi(rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Pathwise alternative characterization: with IF_jj := -correction_j,
//   U2[eps_a z^T z eps_b] - sum_{j=2}^m IF_jj
//     = sum_{j=1}^{m-1} (-1)^j C(m-1, j) (W_j - U2[eps_a z^T z eps_b]),
// where W_j is the distinct-index mean of
// eps_a z_1^T Omega (Q Omega)^{j-1} z_2 eps_b over j+1 indices.

struct PathwiseIdentityResult {
  double lhs = 0.0;
  double rhs = 0.0;
  double abs_discrepancy = 0.0;
  double rel_discrepancy = 0.0;
};

inline PathwiseIdentityResult pathwise_alternative_identity_check(const FunctionalSpec& spec,
                                                                  const NuisanceValues& v,
                                                                  const ObservationSet& data,
                                                                  const Dictionary& dict, int m) {
  if (m < 2 || m > 4) fail(ErrorKind::ArgumentError, "pathwise identity check supports 2 <= m <= 4");
  const CorrectionResult corr = shoif_correction(spec, v, data, dict, m);
  const Residuals r = compute_residuals(spec, v, data);
  const BasisMatrix Z = evaluate_basis(dict, data.X);
  const StableKernel sk(Z, r.S);
  const double n = static_cast<double>(data.n());

  const Eigen::VectorXd za = Z.transpose() * r.eps_a;
  const Eigen::VectorXd zb = Z.transpose() * r.eps_b;
  const double diag = (r.eps_a.array() * r.eps_b.array() * Z.rowwise().squaredNorm().array()).sum();
  const double u2_plain = (za.dot(zb) - diag) / (n * (n - 1.0));

  double lhs = u2_plain;
  for (const auto& [j, c] : corr.by_order) lhs += c;

  // W_j by the second path: brute force when small enough, else the chain engine.
  const SandwichKernelSpec ks = make_spec(sk, r.eps_a, r.eps_b);
  ChainContext ctx(ks.factors, ks.S);
  double rhs = 0.0;
  for (int j = 1; j <= m - 1; ++j) {
    double w;
    if (data.n() <= kBruteForceMaxN && j + 1 >= 2 && j + 1 <= 6 && j + 1 <= data.n())
      w = brute_force_ustat(ks, j + 1, MiddleFactor::Raw);
    else
      w = ctx.distinct_chain_mean(r.eps_a, r.eps_b, j - 1);
    const double coef = static_cast<double>(binomial(m - 1, j)) * ((j % 2 == 0) ? 1.0 : -1.0);
    rhs += coef * (w - u2_plain);
  }
  PathwiseIdentityResult out;
  out.lhs = lhs;
  out.rhs = rhs;
  out.abs_discrepancy = std::abs(lhs - rhs);
  const double scale = std::max({std::abs(lhs), std::abs(rhs), std::abs(u2_plain), 1e-300});
  out.rel_discrepancy = out.abs_discrepancy / scale;
  return out;
}

// ---------------------------------------------------------------------------
// Closed forms of the third- and fourth-order terms under the (n-j+1)/n
// convention, in the sign where IF_22 = +U_2, and their leading-term
// approximations.

struct PrefactorForms {
  double if22 = 0.0;          // +U_2
  double if33 = 0.0;          // from the engine, (n-2)/n prefactor, sign (-1)^3
  double if44 = 0.0;          // from the engine, (n-3)/n prefactor, sign (+1)
  double if33_closed = 0.0;
  double if44_closed = 0.0;
  double if33_tilde = 0.0;
  double if44_tilde = 0.0;
};

inline PrefactorForms prefactor_forms(const StableKernel& sk, const Eigen::VectorXd& eps_a,
                                      const Eigen::VectorXd& eps_b) {
  const Eigen::Index n_i = sk.n();
  if (n_i < 4) fail(ErrorKind::ArgumentError, "closed forms need n >= 4");
  const double n = static_cast<double>(n_i);
  const SandwichKernelSpec spec = make_spec(sk, eps_a, eps_b);
  ChainContext ctx(spec.factors, spec.S);
  const std::vector<double> u = partition_moebius_ustats(spec, 4, &ctx);

  const Eigen::MatrixXd& W = sk.extended_factor();
  const Eigen::MatrixXd K = (sk.sign() * n) * (W * W.transpose());
  const Eigen::VectorXd& S = sk.weights();
  const Eigen::VectorXd d = S.cwiseProduct(K.diagonal());  // S_i K_ii

  // T1 = U2[eps_a z1 Omega Q12 Omega z2 eps_b], T2 = U2[... Q12 Omega Q12 ...].
  detail::CompensatedSum t1, t2;
  for (Eigen::Index i = 0; i < n_i; ++i) {
    for (Eigen::Index j = 0; j < n_i; ++j) {
      if (i == j) continue;
      const double kij = K(i, j);
      const double w = eps_a[i] * eps_b[j];
      t1.add(w * kij * (d[i] + d[j]));
      t2.add(w * (kij * (d[i] * d[i] + d[i] * d[j] + d[j] * d[j]) + S[i] * S[j] * kij * kij * kij));
    }
  }
  const double T1 = t1.value() / (n * (n - 1.0));
  const double T2 = t2.value() / (n * (n - 1.0));
  // T3 = U3[eps_a z1 Omega Q3 Omega Q3 Omega z2 eps_b].
  const Eigen::VectorXd mid = S.cwiseProduct(d);
  const double T3 = ctx.distinct_chain_mean({eps_a, mid, eps_b}, {0, 0, 0});

  PrefactorForms f;
  f.if22 = u[2];
  f.if33 = -((n - 2.0) / n) * u[3];
  f.if44 = ((n - 3.0) / n) * u[4];
  f.if33_closed = T1 / n - 2.0 / n * f.if22;
  f.if44_closed = T2 / (n * (n - 2.0)) - T3 / n - (6.0 * f.if33 - (1.0 - 6.0 / n) * f.if22) / (n - 2.0);
  f.if33_tilde = T1 / n;
  f.if44_tilde = T2 / (n * n) - T3 / n;
  return f;
}

}  // namespace shoif
