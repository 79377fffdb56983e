#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <random>

#include "shoif/ustats.hpp"
#include "test_support.hpp"

using namespace shoif;
using namespace shoif::testing;

namespace {

// Stirling numbers of the first kind counted directly: permutations of m
// elements by number of cycles.
BigInt stirling_by_cycles(int m, int j) {
  std::vector<int> perm(static_cast<size_t>(m));
  std::iota(perm.begin(), perm.end(), 0);
  BigInt count = 0;
  do {
    std::vector<char> seen(static_cast<size_t>(m), 0);
    int cycles = 0;
    for (int s = 0; s < m; ++s) {
      if (seen[static_cast<size_t>(s)]) continue;
      ++cycles;
      for (int t = s; !seen[static_cast<size_t>(t)]; t = perm[static_cast<size_t>(t)]) seen[static_cast<size_t>(t)] = 1;
    }
    if (cycles == j) ++count;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return count;
}

// Cancellation coefficient evaluated from its definition with rationals only.
BigRational cancellation_reference(int m, int c, int cd) {
  BigRational sum = 0;
  for (int j = 0; j <= m - 1; ++j) {
    BigRational term = BigRational(binomial(m - 1, j)) * j;
    for (int l = -cd + 1; l <= c - 1; ++l) term *= (j + l);
    sum += (j % 2 == 0 ? term : -term);
  }
  BigRational pref = BigRational(1) / BigRational(factorial(cd) * factorial(c));
  if (cd % 2 != 0) pref = -pref;
  return pref * sum;
}

struct RandomSpec {
  Eigen::MatrixXd Z;
  Eigen::VectorXd S, eps_a, eps_b;
};

RandomSpec random_spec(Eigen::Index n, Eigen::Index k, std::mt19937_64& rng, bool binary) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  RandomSpec r;
  while (true) {
    r.Z = random_matrix(n, k, rng);
    r.S.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) r.S[i] = binary ? (U(rng) < 0.75 ? 1.0 : 0.0) : 0.2 + U(rng);
    if (r.S.sum() >= static_cast<double>(k) + 1 &&
        Eigen::JacobiSVD<Eigen::MatrixXd>(r.S.cwiseSqrt().asDiagonal() * r.Z).singularValues().minCoeff() > 0.05)
      break;
  }
  r.eps_a = random_vector(n, rng);
  r.eps_b = random_vector(n, rng);
  return r;
}

}  // namespace

TEST(Stirling, KnownValues) {
  for (int m = 1; m <= 20; ++m) EXPECT_EQ(stirling_first_unsigned(m, m), 1);
  EXPECT_EQ(stirling_first_unsigned(3, 1), 2);
  EXPECT_EQ(stirling_first_unsigned(3, 2), 3);
  EXPECT_EQ(stirling_first_unsigned(10, 1), factorial(9));
}

TEST(Stirling, MatchesCycleCounts) {
  for (int m = 1; m <= 7; ++m)
    for (int j = 1; j <= m; ++j) EXPECT_EQ(stirling_first_unsigned(m, j), stirling_by_cycles(m, j)) << m << "," << j;
}

TEST(Stirling, RangeGuard) {
  EXPECT_THROW(stirling_first_unsigned(3, 0), Error);
  EXPECT_THROW(stirling_first_unsigned(3, 4), Error);
  EXPECT_THROW(stirling_first_unsigned(21, 2), Error);
}

TEST(Stirling, FallingFactorialExample) {
  // 5*4*3 = 125 - 75 + 10
  BigInt rhs = 0;
  for (int j = 1; j <= 3; ++j) {
    BigInt t = stirling_first_unsigned(3, j);
    for (int e = 0; e < j; ++e) t *= 5;
    rhs += ((3 - j) % 2 == 0) ? t : BigInt(-t);
  }
  EXPECT_EQ(rhs, 60);
}

TEST(UToV, Coefficients) {
  auto c2 = u_to_v_coefficients(2);
  ASSERT_EQ(c2.size(), 2u);
  EXPECT_EQ(c2[0].order, 2);
  EXPECT_EQ(c2[0].coefficient, 1);
  EXPECT_EQ(c2[1].order, 1);
  EXPECT_EQ(c2[1].coefficient, -1);
  auto c3 = u_to_v_coefficients(3);
  ASSERT_EQ(c3.size(), 3u);
  EXPECT_EQ(c3[0].coefficient, 1);
  EXPECT_EQ(c3[1].coefficient, -3);
  EXPECT_EQ(c3[2].coefficient, 2);
  EXPECT_EQ(BigInt(343 - 3 * 49 + 2 * 7), 210);
  EXPECT_THROW(u_to_v_coefficients(1), Error);
  EXPECT_THROW(u_to_v_coefficients(11), Error);
}

TEST(UToV, FallingFactorialIdentityExhaustive) {
  for (int m = 2; m <= 10; ++m) {
    const auto coeffs = u_to_v_coefficients(m);
    for (int n = m; n <= 50; ++n) {
      BigInt rhs = 0;
      for (const auto& t : coeffs) {
        BigInt p = 1;
        for (int e = 0; e < t.order; ++e) p *= n;
        rhs += t.coefficient * p;
      }
      BigInt lhs = 1;
      for (int i = 0; i < m; ++i) lhs *= (n - i);
      EXPECT_EQ(rhs, lhs) << "m=" << m << " n=" << n;
    }
  }
}

TEST(Cancellation, Examples) {
  EXPECT_EQ(cancellation_coefficient(4, 1, 1), 0);
  EXPECT_EQ(cancellation_coefficient(3, 1, 1), -2);
  EXPECT_THROW(cancellation_coefficient(3, 0, 0), Error);
  EXPECT_THROW(cancellation_coefficient(3, 1, 2), Error);
}

TEST(Cancellation, VanishesBelowBoundaryAndMatchesDefinition) {
  for (int m = 2; m <= 8; ++m) {
    bool witness = false;
    for (int c = 1; c <= m + 1; ++c)
      for (int cd = 0; cd <= c; ++cd) {
        const BigRational v = cancellation_coefficient(m, c, cd);
        EXPECT_EQ(v, cancellation_reference(m, c, cd));
        if (c + cd < m - 1) { EXPECT_EQ(v, 0) << m << " " << c << " " << cd; }
        if (c + cd == m - 1 && v != 0) witness = true;
      }
    EXPECT_TRUE(witness) << "m=" << m;
  }
  for (int c = 1; c <= 5; ++c)
    for (int cd = 0; cd <= c && c + cd <= 5; ++cd) EXPECT_EQ(cancellation_coefficient(8, c, cd), 0);
}

TEST(Partitions, BellCountsAndMoebius) {
  const int bells[] = {1, 1, 2, 5, 15, 52, 203, 877, 4140, 21147, 115975};
  for (int p = 0; p <= 10; ++p) EXPECT_EQ(bell_number(p), bells[p]);
  for (int p = 1; p <= 8; ++p) {
    const PartitionTable t = partition_table(p);
    EXPECT_EQ(static_cast<int>(t.size()), bells[p]);
    // Restricted growth strings are distinct and valid.
    std::set<std::vector<int>> seen(t.labels.begin(), t.labels.end());
    EXPECT_EQ(seen.size(), t.size());
    for (size_t q = 0; q < t.size(); ++q) {
      int mx = -1;
      for (int x : t.labels[q]) {
        EXPECT_LE(x, mx + 1);
        mx = std::max(mx, x);
      }
      EXPECT_EQ(t.block_count[q], mx + 1);
    }
    for (int n = 1; n <= 12; ++n) {
      BigInt s = 0;
      for (size_t q = 0; q < t.size(); ++q) {
        BigInt pw = 1;
        for (int e = 0; e < t.block_count[q]; ++e) pw *= n;
        s += BigInt(t.mobius[q]) * pw;
      }
      EXPECT_EQ(s, falling_factorial(n, p)) << "p=" << p << " n=" << n;
    }
  }
}

TEST(BruteForce, WorkedInstance) {
  const Eigen::MatrixXd Z = Eigen::MatrixXd::Ones(3, 1);
  const Eigen::Vector3d A(1, 1, 0), ea(1, 2, -1), eb(1, 1, 0);
  const Eigen::MatrixXd omega = Eigen::MatrixXd::Constant(1, 1, 1.5);
  const SandwichKernelSpec spec = make_spec(Z, A, omega, ea, eb);
  EXPECT_NEAR(brute_force_ustat(spec, 2), 0.25, 1e-15);
  EXPECT_NEAR(brute_force_ustat(spec, 3), -1.0, 1e-15);
  EXPECT_NEAR(reference_ustat(Z, A, omega, ea, eb, 2), 0.25, 1e-15);
  EXPECT_NEAR(reference_ustat(Z, A, omega, ea, eb, 3), -1.0, 1e-15);
  const std::vector<double> u = partition_moebius_ustats(spec, 3);
  EXPECT_NEAR(u[2], 0.25, 1e-14);
  EXPECT_NEAR(u[3], -1.0, 1e-14);
  // Same instance through the stable kernel.
  const StableKernel sk(Z, A);
  EXPECT_NEAR(partition_moebius_ustat(make_spec(sk, ea, eb), 2), 0.25, 1e-14);
}

TEST(BruteForce, Guards) {
  std::mt19937_64 rng(1);
  const RandomSpec r = random_spec(15, 2, rng, false);
  const SandwichKernelSpec big = make_spec(r.Z, r.S, direct_omega(r.Z, r.S), r.eps_a, r.eps_b);
  try {
    brute_force_ustat(big, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TooLargeForBruteForce);
  }
  const RandomSpec s = random_spec(8, 2, rng, false);
  const SandwichKernelSpec small = make_spec(s.Z, s.S, direct_omega(s.Z, s.S), s.eps_a, s.eps_b);
  EXPECT_THROW(brute_force_ustat(small, 7), Error);
  EXPECT_THROW(brute_force_ustat(small, 1), Error);
}

TEST(BruteForce, ZeroRightResidual) {
  std::mt19937_64 rng(2);
  const RandomSpec r = random_spec(7, 2, rng, true);
  const SandwichKernelSpec spec =
      make_spec(r.Z, r.S, direct_omega(r.Z, r.S), r.eps_a, Eigen::VectorXd::Zero(7));
  for (int m = 2; m <= 4; ++m) {
    EXPECT_EQ(brute_force_ustat(spec, m), 0.0);
    EXPECT_EQ(partition_moebius_ustat(spec, m), 0.0);
  }
}

TEST(BruteForce, AgreesWithIndexSpaceReference) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 30; ++rep) {
    const Eigen::Index n = 4 + rep % 5, k = 1 + rep % 3;
    const RandomSpec r = random_spec(n, k, rng, rep % 2 == 0);
    const Eigen::MatrixXd om = direct_omega(r.Z, r.S);
    const SandwichKernelSpec spec = make_spec(r.Z, r.S, om, r.eps_a, r.eps_b);
    for (int m = 2; m <= std::min<int>(4, static_cast<int>(n)); ++m) {
      EXPECT_LT(rel_err(brute_force_ustat(spec, m), reference_ustat(r.Z, r.S, om, r.eps_a, r.eps_b, m)), 1e-11);
      EXPECT_LT(rel_err(brute_force_ustat(spec, m, MiddleFactor::Raw),
                        reference_ustat(r.Z, r.S, om, r.eps_a, r.eps_b, m, false)),
                1e-11);
    }
  }
}

// The acceptance grid: 200 instances, n in 4..9, m in 2..4, k in 1..3.
TEST(Engine, MatchesBruteForceOnRandomGrid) {
  std::mt19937_64 rng(20240601);
  int checked = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const Eigen::Index n = 4 + rep % 6;
    const Eigen::Index k = 1 + (rep / 6) % 3;
    const int m = 2 + (rep / 18) % 3;
    const RandomSpec r = random_spec(n, k, rng, rep % 3 != 0);
    const StableKernel sk(r.Z, r.S);
    const SandwichKernelSpec spec = make_spec(sk, r.eps_a, r.eps_b);
    const double brute = brute_force_ustat(spec, m);
    const double engine = partition_moebius_ustat(spec, m);
    EXPECT_LT(rel_err(engine, brute), 1e-10) << "n=" << n << " k=" << k << " m=" << m;
    ++checked;
  }
  EXPECT_EQ(checked, 200);
}

// Orders above the brute-force guard, against the independent reference.
TEST(Engine, HighOrdersMatchReference) {
  std::mt19937_64 rng(5);
  for (int m = 5; m <= 8; ++m) {
    for (int rep = 0; rep < 2; ++rep) {
      const Eigen::Index n = m == 8 ? 8 : 9 - rep;
      const RandomSpec r = random_spec(n, 2, rng, rep == 0);
      const Eigen::MatrixXd om = direct_omega(r.Z, r.S);
      const SandwichKernelSpec spec = make_spec(r.Z, r.S, om, r.eps_a, r.eps_b);
      const std::vector<double> u = partition_moebius_ustats(spec, m);
      const double ref = reference_ustat(r.Z, r.S, om, r.eps_a, r.eps_b, m);
      EXPECT_LT(rel_err(u[static_cast<size_t>(m)], ref), 1e-9) << "m=" << m << " n=" << n;
    }
  }
}

TEST(Engine, RawChainMatchesBruteForce) {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index n = 5 + rep % 4;
    const RandomSpec r = random_spec(n, 2, rng, rep % 2 == 0);
    const SandwichKernelSpec spec = make_spec(r.Z, r.S, direct_omega(r.Z, r.S), r.eps_a, r.eps_b);
    ChainContext ctx(spec.factors, spec.S);
    for (int internal = 0; internal <= 2; ++internal)
      EXPECT_LT(rel_err(ctx.distinct_chain_mean(r.eps_a, r.eps_b, internal),
                        brute_force_ustat(spec, internal + 2, MiddleFactor::Raw)),
                1e-10);
  }
}

TEST(Engine, PermutationInvariance) {
  std::mt19937_64 rng(7);
  const RandomSpec r = random_spec(30, 3, rng, true);
  std::vector<int> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> P(30);
  for (int i = 0; i < 30; ++i) P.indices()[i] = perm[static_cast<size_t>(i)];
  const StableKernel a(r.Z, r.S), b(P * r.Z, P * r.S);
  const std::vector<double> ua = partition_moebius_ustats(make_spec(a, r.eps_a, r.eps_b), 5);
  const std::vector<double> ub = partition_moebius_ustats(make_spec(b, P * r.eps_a, P * r.eps_b), 5);
  for (int j = 2; j <= 5; ++j) EXPECT_LT(rel_err(ua[static_cast<size_t>(j)], ub[static_cast<size_t>(j)]), 1e-10);
}

TEST(Engine, OrderGuards) {
  std::mt19937_64 rng(8);
  const RandomSpec r = random_spec(12, 2, rng, false);
  const SandwichKernelSpec spec = make_spec(StableKernel(r.Z, r.S), r.eps_a, r.eps_b);
  try {
    partition_moebius_ustat(spec, 9);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::OrderTooHigh);
  }
  EXPECT_THROW(partition_moebius_ustat(spec, 1), Error);
  const RandomSpec t = random_spec(4, 1, rng, false);
  EXPECT_THROW(partition_moebius_ustat(make_spec(StableKernel(t.Z, t.S), t.eps_a, t.eps_b), 5), Error);
}

TEST(Engine, ShapeValidation) {
  std::mt19937_64 rng(9);
  const RandomSpec r = random_spec(10, 2, rng, false);
  EXPECT_THROW(make_spec(StableKernel(r.Z, r.S), r.eps_a, Eigen::VectorXd::Zero(9)), Error);
}

TEST(SoifClosedForm, MatchesEngine) {
  std::mt19937_64 rng(10);
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::Index n = 10 + rep % 40, k = 1 + rep % 5;
    RandomSpec r = random_spec(n, k, rng, rep % 2 == 0);
    if (rep % 2 != 0) r.S.setOnes();
    // eps_b vanishes off the treated rows, as for the treated mean.
    for (Eigen::Index i = 0; i < n; ++i)
      if (r.S[i] == 0.0) r.eps_b[i] = 0.0;
    const StableKernel sk(r.Z, r.S);
    const double engine = partition_moebius_ustat(make_spec(sk, r.eps_a, r.eps_b), 2);
    const double closed = soif_closed_form(sk, r.eps_a, r.eps_b);
    EXPECT_LT(std::abs(engine - closed), 1e-12 * std::max(1.0, std::abs(closed)));
  }
}

TEST(Engine, LargerSampleAgainstReferenceViaDense) {
  // Order 3 at n = 40 through an independent O(n^3) triple loop on the dense kernel.
  std::mt19937_64 rng(11);
  const RandomSpec r = random_spec(40, 3, rng, true);
  const Eigen::MatrixXd K = r.Z * direct_omega(r.Z, r.S) * r.Z.transpose();
  long double acc = 0;
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 40; ++j) {
      if (j == i) continue;
      for (int s = 0; s < 40; ++s) {
        if (s == i || s == j) continue;
        acc += r.eps_a[i] * (K(i, s) * r.S[s] * K(s, j) - K(i, j)) * r.eps_b[j];
      }
    }
  const double ref = static_cast<double>(acc / (40.0L * 39 * 38));
  const double engine = partition_moebius_ustat(make_spec(StableKernel(r.Z, r.S), r.eps_a, r.eps_b), 3);
  EXPECT_LT(rel_err(engine, ref), 1e-10);
}

TEST(IdentitySuite, AllPass) {
  const auto checks = run_identity_suite(10);
  bool boundary_seen = false;
  for (const auto& c : checks) {
    EXPECT_TRUE(c.pass) << c.suite << " " << c.label;
    if (c.label == "m=3, c=1, c_dag=1") {
      boundary_seen = true;
      EXPECT_EQ(c.actual, "-2");
      EXPECT_TRUE(c.nonzero_expected);
    }
  }
  EXPECT_TRUE(boundary_seen);
  EXPECT_THROW(run_identity_suite(11), Error);
  EXPECT_THROW(run_identity_suite(1), Error);
}
