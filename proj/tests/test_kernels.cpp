#include <gtest/gtest.h>

#include <random>

#include "shoif/kernels.hpp"
#include "test_support.hpp"

using namespace shoif;
using namespace shoif::testing;

namespace {

Eigen::MatrixXd ones(Eigen::Index n) { return Eigen::MatrixXd::Ones(n, 1); }

// Reference kernel z_i^T Omega z_j S_j with Omega from a direct inverse.
Eigen::MatrixXd reference_kernel(const Eigen::MatrixXd& Z, const Eigen::VectorXd& S) {
  return Z * direct_omega(Z, S) * Z.transpose() * S.asDiagonal();
}

double max_rel_entry_err(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  const double scale = std::max(A.cwiseAbs().maxCoeff(), B.cwiseAbs().maxCoeff());
  return (A - B).cwiseAbs().maxCoeff() / scale;
}

}  // namespace

TEST(WeightedGram, ScalarExample) {
  const GramPair g = weighted_gram(ones(3), Eigen::Vector3d(1, 1, 0));
  EXPECT_NEAR(g.sigma_hat(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(g.n, 3);
  EXPECT_EQ(g.weight_kind, WeightKind::BinaryA);
}

TEST(WeightedGram, ZeroWeightsGiveZeroMatrix) {
  std::mt19937_64 rng(1);
  const GramPair g = weighted_gram(random_matrix(10, 3, rng), Eigen::VectorXd::Zero(10));
  EXPECT_EQ(g.sigma_hat, Eigen::MatrixXd::Zero(3, 3));
}

TEST(WeightedGram, IsotropicBasisGivesIdentity) {
  std::mt19937_64 rng(2);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(12, 4, rng));
  const Eigen::MatrixXd Q = Eigen::MatrixXd(qr.householderQ()).leftCols(4) * std::sqrt(12.0);
  const GramPair g = weighted_gram(Q, Eigen::VectorXd::Ones(12));
  EXPECT_LT((g.sigma_hat - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_EQ(g.weight_kind, WeightKind::UnitS);
}

TEST(WeightedGram, SymmetricAndShapeChecked) {
  std::mt19937_64 rng(3);
  const Eigen::VectorXd S = random_vector(20, rng).cwiseAbs();
  const GramPair g = weighted_gram(random_matrix(20, 5, rng), S);
  EXPECT_EQ(g.sigma_hat, g.sigma_hat.transpose());
  EXPECT_EQ(g.weight_kind, WeightKind::GeneralS);
  try {
    weighted_gram(random_matrix(20, 5, rng), Eigen::VectorXd::Ones(19));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeError);
  }
}

TEST(StableKernel, ScalarExample) {
  const Eigen::Vector3d A(1, 1, 0);
  const StableKernel sk = stable_kernel(ones(3), A);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(sk.kernel_weighted(i, j), 1.5 * A[j], 1e-14);
  Eigen::MatrixXd expected(3, 3);
  expected << 1.5, 1.5, 0, 1.5, 1.5, 0, 1.5, 1.5, 0;
  EXPECT_LT((kernel_weighted_matrix(sk) - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(StableKernel, SaturatedUnitWeightsGiveScaledIdentity) {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd Z = random_matrix(6, 6, rng);
  const StableKernel sk = stable_kernel(Z, Eigen::VectorXd::Ones(6));
  const Eigen::MatrixXd M = kernel_weighted_matrix(sk);
  EXPECT_LT((M - 6.0 * Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(StableKernel, LeftFactorOrthonormal) {
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd Z = random_matrix(40, 7, rng);
  Eigen::VectorXd A(40);
  for (int i = 0; i < 40; ++i) A[i] = i % 3 == 0 ? 0.0 : 1.0;
  const StableKernel sk(Z, A);
  const Eigen::MatrixXd& U = sk.left_factor();
  EXPECT_LT((U.transpose() * U - Eigen::MatrixXd::Identity(7, 7)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_EQ(sk.singular_values().size(), 7);
  EXPECT_TRUE((sk.singular_values().array() > 0).all());
}

TEST(StableKernel, AgreesWithExplicitInverse) {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index n = 30 + rep, k = 1 + rep % 6;
    const Eigen::MatrixXd Z = random_matrix(n, k, rng);
    Eigen::VectorXd A(n);
    for (Eigen::Index i = 0; i < n; ++i) A[i] = (i + rep) % 4 == 0 ? 0.0 : 1.0;
    const StableKernel sk(Z, A);
    ASSERT_LT(sk.gram_condition_number(), 1e3);
    EXPECT_LT(max_rel_entry_err(kernel_weighted_matrix(sk), reference_kernel(Z, A)), 1e-10);
    EXPECT_LT(max_rel_entry_err(kernel_weighted_matrix(sk), explicit_inverse_kernel_matrix(Z, A)), 1e-10);
    EXPECT_LT(max_rel_entry_err(omega_from_svd(sk), direct_omega(Z, A)), 1e-10);
    // Individual entries.
    const Eigen::MatrixXd Om = direct_omega(Z, A);
    EXPECT_NEAR(sk.kernel_entry(0, 1), Z.row(0) * Om * Z.row(1).transpose(), 1e-10 * Om.norm() * Z.norm());
  }
}

TEST(StableKernel, ConditionNumberMatchesGram) {
  std::mt19937_64 rng(7);
  const Eigen::MatrixXd Z = random_matrix(25, 4, rng);
  const Eigen::VectorXd S = Eigen::VectorXd::Ones(25);
  const StableKernel sk(Z, S);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(weighted_gram(Z, S).sigma_hat);
  const Eigen::VectorXd sv = svd.singularValues();
  EXPECT_LT(rel_err(sk.gram_condition_number(), sv[0] / sv[3]), 1e-10);
}

// Kernel entries are invariant under z -> T z (Z -> Z T^T) even when T is
// badly conditioned.
TEST(StableKernel, ReparameterizationInvariance) {
  std::mt19937_64 rng(8);
  for (double cond : {1e3, 1e6, 1e8}) {
    for (int rep = 0; rep < 5; ++rep) {
      const Eigen::Index n = 40, k = 5;
      const Eigen::MatrixXd Z = random_matrix(n, k, rng);
      Eigen::VectorXd A(n);
      for (Eigen::Index i = 0; i < n; ++i) A[i] = (i % 5 == 0) ? 0.0 : 1.0;
      const Eigen::MatrixXd T = conditioned_matrix(static_cast<int>(k), cond, rng);
      const Eigen::MatrixXd Zt = Z * T.transpose();
      const StableKernel base(Z, A), moved(Zt, A);
      EXPECT_GT(moved.gram_condition_number(), 1e-2 * cond * cond / base.gram_condition_number());
      EXPECT_LT(max_rel_entry_err(kernel_weighted_matrix(base), kernel_weighted_matrix(moved)), 1e-8)
          << "cond " << cond;
    }
  }
}

TEST(StableKernel, ProjectionIdempotent) {
  std::mt19937_64 rng(9);
  const Eigen::MatrixXd Z = random_matrix(30, 6, rng);
  const StableKernel sk(Z, Eigen::VectorXd::Ones(30));
  const Eigen::MatrixXd M = kernel_weighted_matrix(sk) / 30.0;
  EXPECT_LT((M * M - M).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((M - M.transpose()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(StableKernel, DiagonalBoundedOnPartitionDictionaries) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  for (int cells : {2, 4, 8}) {
    const Dictionary d = build_dictionary(DictionaryKind::PiecewisePolynomialPartition, 1, cells, 1, 1.0);
    Eigen::MatrixXd X(400, 1);
    for (int i = 0; i < 400; ++i) X(i, 0) = U(rng);
    const StableKernel sk(evaluate_basis(d, X), Eigen::VectorXd::Ones(400));
    for (Eigen::Index i = 0; i < 400; ++i) EXPECT_LE(sk.kernel_entry(i, i), 10.0 * static_cast<double>(d.k));
  }
}

TEST(StableKernel, SingularGramReportsRank) {
  Eigen::MatrixXd Z(5, 2);
  Z << 1, 2, 2, 4, 3, 6, 4, 8, 5, 10;
  try {
    StableKernel sk(Z, Eigen::VectorXd::Ones(5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SingularGram);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("rank 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("smallest singular value"), std::string::npos) << msg;
  }
  // Treated subset rank deficient even though Z has full rank.
  Eigen::MatrixXd Z2(4, 2);
  Z2 << 1, 0, 1, 0, 0, 1, 0, 1;
  EXPECT_THROW(StableKernel(Z2, Eigen::Vector4d(1, 1, 0, 0)), Error);
  EXPECT_NO_THROW(StableKernel(Z2, Eigen::Vector4d(1, 0, 1, 0)));
  // k > n.
  std::mt19937_64 rng(11);
  EXPECT_THROW(StableKernel(random_matrix(3, 4, rng), Eigen::VectorXd::Ones(3)), Error);
}

TEST(StableKernel, MixedSignWeightsRejected) {
  std::mt19937_64 rng(12);
  try {
    StableKernel(random_matrix(6, 2, rng), (Eigen::VectorXd(6) << 1, 2, -1, 1, 1, 1).finished());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ArgumentError);
  }
}

TEST(StableKernel, NegativeAndGeneralWeights) {
  std::mt19937_64 rng(13);
  const Eigen::MatrixXd Z = random_matrix(30, 4, rng);
  Eigen::VectorXd S = random_vector(30, rng).cwiseAbs().array() + 0.1;
  S[3] = 0.0;
  const StableKernel pos(Z, S);
  EXPECT_LT(max_rel_entry_err(kernel_weighted_matrix(pos), reference_kernel(Z, S)), 1e-10);
  const Eigen::VectorXd neg = -S;
  const StableKernel ng(Z, neg);
  EXPECT_EQ(ng.sign(), -1.0);
  EXPECT_LT(max_rel_entry_err(kernel_weighted_matrix(ng), reference_kernel(Z, neg)), 1e-10);
}

TEST(ExplicitKernelFactors, ShapeChecked) {
  std::mt19937_64 rng(14);
  EXPECT_THROW(explicit_kernel_factors(random_matrix(5, 2, rng), Eigen::MatrixXd::Identity(3, 3)), Error);
  const Eigen::MatrixXd Z = random_matrix(5, 2, rng);
  const Eigen::MatrixXd Om = Eigen::Matrix2d(Eigen::Vector2d(2, 3).asDiagonal());
  const KernelFactors f = explicit_kernel_factors(Z, Om);
  EXPECT_LT((f.L * f.R.transpose() - Z * Om * Z.transpose()).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ClassifyWeights, Kinds) {
  EXPECT_EQ(classify_weights(Eigen::Vector3d(1, 0, 1)), WeightKind::BinaryA);
  EXPECT_EQ(classify_weights(Eigen::Vector3d(1, 1, 1)), WeightKind::UnitS);
  EXPECT_EQ(classify_weights(Eigen::Vector3d(1, 0.5, 1)), WeightKind::GeneralS);
}
