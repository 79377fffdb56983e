#pragma once

// Weighted Gram matrices and the SVD-based projection kernel
// K(i, j) = z(X_i)^T Omega_hat z(X_j), computed without inverting Sigma_hat.

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <string>

#include "shoif/dictionary.hpp"
#include "shoif/errors.hpp"

namespace shoif {

enum class WeightKind { BinaryA, UnitS, GeneralS };

inline const char* to_string(WeightKind kind) {
  switch (kind) {
    case WeightKind::BinaryA: return "binary-A";
    case WeightKind::UnitS: return "unit-S";
    case WeightKind::GeneralS: return "general-S";
  }
  return "general-S";
}

inline WeightKind classify_weights(const Eigen::VectorXd& S) {
  bool unit = true;
  bool binary = true;
  for (Eigen::Index i = 0; i < S.size(); ++i) {
    if (S[i] != 1.0) unit = false;
    if (S[i] != 0.0 && S[i] != 1.0) binary = false;
  }
  if (unit) return WeightKind::UnitS;
  if (binary) return WeightKind::BinaryA;
  return WeightKind::GeneralS;
}

struct GramPair {
  Eigen::MatrixXd sigma_hat;
  Eigen::Index n = 0;
  WeightKind weight_kind = WeightKind::GeneralS;
};

namespace detail {

inline void check_weights(const BasisMatrix& Z, const Eigen::VectorXd& S) {
  if (Z.rows() != S.size())
    fail(ErrorKind::ShapeError, "basis has " + std::to_string(Z.rows()) + " rows but weight vector has " +
                                    std::to_string(S.size()) + " entries");
  if (!S.allFinite()) fail(ErrorKind::ArgumentError, "weights must be finite");
  if (!Z.allFinite()) fail(ErrorKind::ArgumentError, "basis matrix must be finite");
}

}  // namespace detail

inline GramPair weighted_gram(const BasisMatrix& Z, const Eigen::VectorXd& S) {
  detail::check_weights(Z, S);
  const double n = static_cast<double>(Z.rows());
  Eigen::MatrixXd sigma = Z.transpose() * S.asDiagonal() * Z / n;
  sigma = 0.5 * (sigma + sigma.transpose()).eval();
  return GramPair{std::move(sigma), Z.rows(), classify_weights(S)};
}

// Kernel in factored form: K = L R^T, so K(i, j) = L_i . R_j.
struct KernelFactors {
  Eigen::MatrixXd L;
  Eigen::MatrixXd R;
};

inline constexpr double kDefaultRankTolerance = 1e-10;

// SVD of diag(|S|^{1/2}) Z = U D V^T. With sign s of S (all weights share one
// sign) and W = Z V D^{-1}, Omega_hat = s n V D^{-2} V^T and
// K(i, j) = s n W_i . W_j. Rows with S_i != 0 have W_i = U_i / |S_i|^{1/2}.
class StableKernel {
 public:
  StableKernel(const BasisMatrix& Z, const Eigen::VectorXd& S,
               double rank_tolerance = kDefaultRankTolerance)
      : basis_(Z), weights_(S), rank_tolerance_(rank_tolerance) {
    detail::check_weights(Z, S);
    if (!(rank_tolerance >= 0.0)) fail(ErrorKind::ArgumentError, "rank tolerance must be >= 0");
    const Eigen::Index n = Z.rows();
    const Eigen::Index k = Z.cols();
    bool any_pos = false, any_neg = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      any_pos = any_pos || S[i] > 0.0;
      any_neg = any_neg || S[i] < 0.0;
    }
    if (any_pos && any_neg)
      fail(ErrorKind::ArgumentError, "weights must not change sign across observations");
    sign_ = any_neg ? -1.0 : 1.0;
    weight_kind_ = classify_weights(S);

    const Eigen::VectorXd root = S.cwiseAbs().cwiseSqrt();
    const Eigen::MatrixXd weighted = root.asDiagonal() * Z;
    Eigen::BDCSVD<Eigen::MatrixXd> svd(weighted, Eigen::ComputeThinU | Eigen::ComputeThinV);
    singular_values_ = svd.singularValues();

    Eigen::Index rank = 0;
    const double largest = singular_values_.size() > 0 ? singular_values_[0] : 0.0;
    for (Eigen::Index j = 0; j < singular_values_.size(); ++j)
      if (singular_values_[j] > rank_tolerance * largest && singular_values_[j] > 0.0) ++rank;
    if (k > n || rank < k) {
      std::ostringstream msg;
      msg << "weighted basis matrix has numerical rank " << rank << " < k = " << k
          << "; smallest singular value "
          << (singular_values_.size() > 0 ? singular_values_[singular_values_.size() - 1] : 0.0)
          << ", largest " << largest << ", relative tolerance " << rank_tolerance;
      fail(ErrorKind::SingularGram, msg.str());
    }

    left_factor_ = svd.matrixU();
    right_factor_ = svd.matrixV();
    const Eigen::VectorXd inv_d = singular_values_.cwiseInverse();
    extended_.resize(n, k);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (root[i] > 0.0)
        extended_.row(i) = left_factor_.row(i) / root[i];
      else
        extended_.row(i) = (Z.row(i) * right_factor_).cwiseProduct(inv_d.transpose());
    }
  }

  Eigen::Index n() const { return basis_.rows(); }
  Eigen::Index k() const { return basis_.cols(); }
  double sign() const { return sign_; }
  WeightKind weight_kind() const { return weight_kind_; }
  double rank_tolerance() const { return rank_tolerance_; }

  // U^A: orthonormal columns spanning the weighted basis matrix.
  const Eigen::MatrixXd& left_factor() const { return left_factor_; }
  const Eigen::MatrixXd& right_factor() const { return right_factor_; }
  const Eigen::VectorXd& singular_values() const { return singular_values_; }
  const BasisMatrix& basis() const { return basis_; }
  const Eigen::VectorXd& weights() const { return weights_; }
  // W = Z V D^{-1}.
  const Eigen::MatrixXd& extended_factor() const { return extended_; }

  // z(X_i)^T Omega_hat z(X_j).
  double kernel_entry(Eigen::Index i, Eigen::Index j) const {
    return sign_ * static_cast<double>(n()) * extended_.row(i).dot(extended_.row(j));
  }

  // z(X_i)^T Omega_hat z(X_j) S_j.
  double kernel_weighted(Eigen::Index i, Eigen::Index j) const {
    return kernel_entry(i, j) * weights_[j];
  }

  // Condition number of Sigma_hat.
  double gram_condition_number() const {
    const double hi = singular_values_[0];
    const double lo = singular_values_[singular_values_.size() - 1];
    return (hi / lo) * (hi / lo);
  }

  KernelFactors factors() const {
    return KernelFactors{sign_ * static_cast<double>(n()) * extended_, extended_};
  }

 private:
  BasisMatrix basis_;
  Eigen::VectorXd weights_;
  double rank_tolerance_;
  double sign_ = 1.0;
  WeightKind weight_kind_ = WeightKind::GeneralS;
  Eigen::VectorXd singular_values_;
  Eigen::MatrixXd left_factor_;
  Eigen::MatrixXd right_factor_;
  Eigen::MatrixXd extended_;
};

inline StableKernel stable_kernel(const BasisMatrix& Z, const Eigen::VectorXd& S,
                                  double rank_tolerance = kDefaultRankTolerance) {
  return StableKernel(Z, S, rank_tolerance);
}

// n x n matrix with entries z(X_i)^T Omega_hat z(X_j) S_j.
inline Eigen::MatrixXd kernel_weighted_matrix(const StableKernel& sk) {
  const Eigen::MatrixXd& W = sk.extended_factor();
  Eigen::MatrixXd M = (sk.sign() * static_cast<double>(sk.n())) * (W * W.transpose());
  return M * sk.weights().asDiagonal();
}

// Kernel factors for a supplied inverse Gram matrix Omega (oracle or
// nuisance-sample estimate): L = Z Omega, R = Z.
inline KernelFactors explicit_kernel_factors(const BasisMatrix& Z, const Eigen::MatrixXd& omega) {
  if (omega.rows() != Z.cols() || omega.cols() != Z.cols())
    fail(ErrorKind::ShapeError, "Omega must be k x k");
  return KernelFactors{Z * omega, Z};
}

// Debug path: forms Sigma_hat^{-1} explicitly. Not used by the estimators.
inline Eigen::MatrixXd explicit_inverse_kernel_matrix(const BasisMatrix& Z, const Eigen::VectorXd& S) {
  const GramPair g = weighted_gram(Z, S);
  const Eigen::MatrixXd omega = g.sigma_hat.inverse();
  return Z * omega * Z.transpose() * S.asDiagonal();
}

// Omega_hat = Sigma_hat^{-1} reconstructed from the SVD factors.
inline Eigen::MatrixXd omega_from_svd(const StableKernel& sk) {
  const Eigen::VectorXd inv_d2 = sk.singular_values().array().square().inverse();
  return sk.sign() * static_cast<double>(sk.n()) * sk.right_factor() * inv_d2.asDiagonal() *
         sk.right_factor().transpose();
}

}  // namespace shoif
