#pragma once

// Exact ground truth on finite-support data generating processes. Every
// expectation is a finite sum over atoms.

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "shoif/dictionary.hpp"
#include "shoif/errors.hpp"
#include "shoif/estimators.hpp"

namespace shoif {

// Treated-mean: A ~ Bernoulli(pi(x)), Y = b(x) + noise_sd(x) e.
// ECC: A = a(x) + a_sd U, Y = b(x) + slope a_sd U + noise_sd(x) e, so that
// E[Cov(A, Y | X)] = slope a_sd^2. The `propensity` column holds a(x) = E[A | X].
struct DiscreteDGP {
  FunctionalKind functional = FunctionalKind::TreatedMean;
  Eigen::MatrixXd atoms;         // K x d
  Eigen::VectorXd prob;          // K
  Eigen::VectorXd propensity;    // K
  Eigen::VectorXd outcome_mean;  // K
  Eigen::VectorXd noise_sd;      // K
  double c = 0.05;
  double a_sd = 1.0;
  double slope = 0.0;

  Eigen::Index size() const { return atoms.rows(); }
};

inline void validate_dgp(const DiscreteDGP& g) {
  const Eigen::Index K = g.atoms.rows();
  if (K == 0) fail(ErrorKind::ValidationError, "DGP has no atoms");
  if (g.prob.size() != K || g.propensity.size() != K || g.outcome_mean.size() != K || g.noise_sd.size() != K)
    fail(ErrorKind::ShapeError, "per-atom vectors must have one entry per atom");
  if (!(g.c > 0.0 && g.c < 0.5)) fail(ErrorKind::ValidationError, "overlap constant c must lie in (0, 0.5)");
  if ((g.prob.array() <= 0.0).any()) fail(ErrorKind::ValidationError, "atom probabilities must be positive");
  if (std::abs(g.prob.sum() - 1.0) > 1e-12) fail(ErrorKind::ValidationError, "atom probabilities must sum to 1");
  if ((g.noise_sd.array() < 0.0).any()) fail(ErrorKind::ValidationError, "noise sd must be nonnegative");
  if (g.functional == FunctionalKind::TreatedMean) {
    for (Eigen::Index j = 0; j < K; ++j)
      if (!(g.propensity[j] > g.c && g.propensity[j] <= 1.0))
        fail(ErrorKind::ValidationError, "atom " + std::to_string(j) + ": propensity outside (c, 1]");
  } else if (!(g.a_sd > 0.0)) {
    fail(ErrorKind::ValidationError, "a_sd must be positive");
  }
}

struct ExactFunctionals {
  double psi = 0.0;
  double bias_psi1 = 0.0;
  double bias_k = 0.0;
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd omega;
  double cs_bias = 0.0;
  double eff_bound = 0.0;
  double var_first_order = 0.0;  // Var of one first-order contribution under the fit
};

// Nuisance values per atom.
struct AtomFit {
  Eigen::VectorXd a_hat;
  Eigen::VectorXd b_hat;
};

inline AtomFit evaluate_on_atoms(const NuisanceFit& fit, const DiscreteDGP& g) {
  const NuisanceValues v = evaluate_nuisance(fit, g.atoms);
  return AtomFit{v.a_hat, v.b_hat};
}

inline AtomFit true_fit(const DiscreteDGP& g) {
  AtomFit f;
  f.b_hat = g.outcome_mean;
  if (g.functional == FunctionalKind::TreatedMean)
    f.a_hat = g.propensity.cwiseInverse();
  else
    f.a_hat = g.propensity;
  return f;
}

inline ExactFunctionals exact_functionals(const DiscreteDGP& g, const AtomFit& fit, const Dictionary& dict) {
  validate_dgp(g);
  const Eigen::Index K = g.size();
  if (fit.a_hat.size() != K || fit.b_hat.size() != K)
    fail(ErrorKind::ShapeError, "fit must give one value per atom");
  const bool tm = g.functional == FunctionalKind::TreatedMean;
  const BasisMatrix Z = evaluate_basis(dict, g.atoms);
  const Eigen::VectorXd& p = g.prob;
  const Eigen::VectorXd& pi = g.propensity;
  const Eigen::VectorXd& b = g.outcome_mean;
  const Eigen::VectorXd& ah = fit.a_hat;
  const Eigen::VectorXd& bh = fit.b_hat;

  ExactFunctionals out;
  // Conditional means of eps_a, eps_b, S given X = atom.
  Eigen::VectorXd ea(K), eb(K), s(K), lambda(K), a_err(K);
  for (Eigen::Index j = 0; j < K; ++j) {
    if (tm) {
      ea[j] = pi[j] * ah[j] - 1.0;
      eb[j] = pi[j] * (b[j] - bh[j]);
      s[j] = pi[j];
      lambda[j] = pi[j];
      a_err[j] = ah[j] - 1.0 / pi[j];
    } else {
      ea[j] = pi[j] - ah[j];
      eb[j] = b[j] - bh[j];
      s[j] = 1.0;
      lambda[j] = 1.0;
      a_err[j] = ah[j] - pi[j];
    }
  }

  if (tm) {
    out.psi = p.dot(b);
    out.bias_psi1 = (p.array() * ea.array() * (b - bh).array()).sum();
  } else {
    out.psi = g.slope * g.a_sd * g.a_sd;
    out.bias_psi1 = (p.array() * ea.array() * eb.array()).sum();
  }

  out.sigma = Z.transpose() * (p.array() * s.array()).matrix().asDiagonal() * Z;
  out.sigma = 0.5 * (out.sigma + out.sigma.transpose()).eval();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(out.sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::VectorXd sv = svd.singularValues();
  if (!(sv[sv.size() - 1] > kDefaultRankTolerance * sv[0]))
    fail(ErrorKind::SingularGram, "population Gram matrix is singular on the atom set; smallest singular value " +
                                      std::to_string(sv[sv.size() - 1]));
  out.omega = svd.solve(Eigen::MatrixXd::Identity(dict.k, dict.k));
  out.omega = 0.5 * (out.omega + out.omega.transpose()).eval();

  const Eigen::VectorXd mom_a = Z.transpose() * (p.array() * ea.array()).matrix();
  const Eigen::VectorXd mom_b = Z.transpose() * (p.array() * eb.array()).matrix();
  out.bias_k = mom_a.dot(out.omega * mom_b);

  const double ma = (p.array() * lambda.array() * a_err.array().square()).sum();
  const double mb = (p.array() * lambda.array() * (bh - b).array().square()).sum();
  out.cs_bias = std::sqrt(ma * mb);

  const Eigen::VectorXd sd2 = g.noise_sd.array().square();
  if (tm) {
    out.eff_bound = (p.array() * (sd2.array() / pi.array() + (b.array() - out.psi).square())).sum();
    double m1 = 0.0, m2 = 0.0;
    for (Eigen::Index j = 0; j < K; ++j) {
      const double beta = b[j] - bh[j];
      const double treated = ah[j] * ah[j] * (sd2[j] + beta * beta) + 2.0 * ah[j] * beta * bh[j] + bh[j] * bh[j];
      m1 += p[j] * (pi[j] * ah[j] * beta + bh[j]);
      m2 += p[j] * (pi[j] * treated + (1.0 - pi[j]) * bh[j] * bh[j]);
    }
    out.var_first_order = m2 - m1 * m1;
  } else {
    const double s2 = g.a_sd * g.a_sd;
    const double sl = g.slope;
    out.eff_bound = (p.array() * (2.0 * sl * sl * s2 * s2 + s2 * sd2.array())).sum();
    double m1 = 0.0, m2 = 0.0;
    for (Eigen::Index j = 0; j < K; ++j) {
      const double al = ea[j];
      const double be = eb[j];
      m1 += p[j] * (al * be + sl * s2);
      m2 += p[j] * (al * al * (be * be + sl * sl * s2 + sd2[j]) + 4.0 * al * be * sl * s2 + s2 * be * be +
                    3.0 * sl * sl * s2 * s2 + sd2[j] * s2);
    }
    out.var_first_order = m2 - m1 * m1;
  }
  return out;
}

}  // namespace shoif
