#pragma once

// Distinct-index U-statistics of sandwich kernels
//   eps_a(i1) z_{i1}^T Omega prod_{s=3}^m (Q_{is} Omega - I) z_{i2} eps_b(i2)
// with Q_i = S_i z_i z_i^T, plus the exact combinatorial identities used to
// relate U- and V-statistics.

#include <Eigen/Dense>
#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "shoif/dictionary.hpp"
#include "shoif/errors.hpp"
#include "shoif/kernels.hpp"

namespace shoif {

using BigInt = boost::multiprecision::cpp_int;
using BigRational = boost::multiprecision::cpp_rational;

// ---------------------------------------------------------------------------
// Exact combinatorics

inline BigInt falling_factorial(std::int64_t n, int m) {
  BigInt out = 1;
  for (int i = 0; i < m; ++i) out *= BigInt(n - i);
  return out;
}

inline BigInt binomial(int n, int r) {
  if (r < 0 || r > n) return 0;
  BigInt out = 1;
  for (int i = 1; i <= r; ++i) out = out * (n - r + i) / i;
  return out;
}

inline BigInt factorial(int n) {
  BigInt out = 1;
  for (int i = 2; i <= n; ++i) out *= i;
  return out;
}

// Unsigned Stirling numbers of the first kind.
inline BigInt stirling_first_unsigned(int m, int j) {
  if (j < 1 || m < j || m > 20)
    fail(ErrorKind::ArgumentError, "stirling_first_unsigned requires 1 <= j <= m <= 20");
  std::vector<std::vector<BigInt>> s(m + 1, std::vector<BigInt>(m + 1, 0));
  s[0][0] = 1;
  for (int a = 1; a <= m; ++a)
    for (int b = 1; b <= a; ++b) s[a][b] = s[a - 1][b - 1] + BigInt(a - 1) * s[a - 1][b];
  return s[m][j];
}

struct UToVTerm {
  int order;
  BigInt coefficient;
};

// n!/(n-m)! = sum_j coefficient_j n^j, listed from j = m down to 1.
inline std::vector<UToVTerm> u_to_v_coefficients(int m) {
  if (m < 2 || m > 10) fail(ErrorKind::ArgumentError, "u_to_v_coefficients requires 2 <= m <= 10");
  std::vector<UToVTerm> out;
  for (int j = m; j >= 1; --j) {
    BigInt c = stirling_first_unsigned(m, j);
    if ((m - j) % 2 != 0) c = -c;
    out.push_back({j, c});
  }
  return out;
}

inline BigRational cancellation_coefficient(int m, int c, int c_dag) {
  if (m < 2 || c < 1 || c_dag < 0 || c_dag > c)
    fail(ErrorKind::ArgumentError, "cancellation_coefficient requires m >= 2, c >= 1, 0 <= c_dag <= c");
  BigInt sum = 0;
  for (int j = 0; j <= m - 1; ++j) {
    BigInt term = binomial(m - 1, j) * j;
    for (int l = -c_dag + 1; l <= c - 1; ++l) term *= BigInt(j + l);
    sum += (j % 2 == 0) ? term : BigInt(-term);
  }
  BigRational out(sum, factorial(c_dag) * factorial(c));
  return (c_dag % 2 == 0) ? out : BigRational(-out);
}

inline BigInt bell_number(int p) {
  // Bell triangle.
  std::vector<BigInt> row{1};
  for (int i = 1; i <= p; ++i) {
    std::vector<BigInt> next{row.back()};
    for (const BigInt& x : row) next.push_back(next.back() + x);
    row = std::move(next);
  }
  return row.front();
}

// ---------------------------------------------------------------------------
// Set partitions of {0..p-1} as restricted growth strings.

struct PartitionTable {
  int m = 0;
  std::vector<std::vector<int>> labels;   // labels[q][pos] = block id
  std::vector<int> block_count;
  std::vector<std::int64_t> mobius;       // prod_B (-1)^{|B|-1} (|B|-1)!

  std::size_t size() const { return labels.size(); }
};

inline PartitionTable partition_table(int p) {
  if (p < 1 || p > 10) fail(ErrorKind::ArgumentError, "partition tables are built for 1 <= p <= 10");
  PartitionTable t;
  t.m = p;
  std::vector<int> rgs(p, 0);
  std::vector<int> maxes(p, 0);
  while (true) {
    t.labels.push_back(rgs);
    int blocks = *std::max_element(rgs.begin(), rgs.end()) + 1;
    std::vector<int> sizes(blocks, 0);
    for (int x : rgs) ++sizes[x];
    std::int64_t mu = 1;
    for (int sz : sizes) {
      for (int f = 2; f < sz; ++f) mu *= f;
      if ((sz - 1) % 2 != 0) mu = -mu;
    }
    t.block_count.push_back(blocks);
    t.mobius.push_back(mu);

    // Next restricted growth string: rgs[i] <= 1 + max(rgs[0..i-1]).
    int i = p - 1;
    while (i > 0 && rgs[i] == maxes[i] + 1) --i;
    if (i == 0) break;
    ++rgs[i];
    for (int q = i + 1; q < p; ++q) {
      rgs[q] = 0;
      maxes[q] = std::max(maxes[q - 1], rgs[q - 1]);
    }
  }
  return t;
}

namespace detail {

inline const PartitionTable& cached_partition_table(int p) {
  static const std::vector<PartitionTable> tables = [] {
    std::vector<PartitionTable> v;
    for (int q = 1; q <= 8; ++q) v.push_back(partition_table(q));
    return v;
  }();
  if (p < 1 || p > 8) fail(ErrorKind::OrderTooHigh, "chain length above 8 positions");
  return tables[static_cast<size_t>(p - 1)];
}

// Neumaier compensated sum.
struct CompensatedSum {
  double sum = 0.0;
  double comp = 0.0;
  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x))
      comp += (sum - t) + x;
    else
      comp += (x - t) + sum;
    sum = t;
  }
  double value() const { return sum + comp; }
};

inline double falling_factorial_double(std::int64_t n, int m) {
  double out = 1.0;
  for (int i = 0; i < m; ++i) out *= static_cast<double>(n - i);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Kernel specification

struct SandwichKernelSpec {
  Eigen::VectorXd eps_a;
  Eigen::VectorXd eps_b;
  Eigen::VectorXd S;
  BasisMatrix Z;
  Eigen::MatrixXd omega;  // k x k; used by the literal brute-force path
  KernelFactors factors;  // K = L R^T; used by the partition engine

  Eigen::Index n() const { return Z.rows(); }
  Eigen::Index k() const { return Z.cols(); }
};

inline void validate_spec(const SandwichKernelSpec& spec) {
  const Eigen::Index n = spec.Z.rows();
  if (spec.eps_a.size() != n || spec.eps_b.size() != n || spec.S.size() != n)
    fail(ErrorKind::ShapeError, "residual and weight vectors must have length n");
  if (spec.omega.size() != 0 && (spec.omega.rows() != spec.k() || spec.omega.cols() != spec.k()))
    fail(ErrorKind::ShapeError, "Omega must be k x k");
  if (spec.factors.L.rows() != n || spec.factors.R.rows() != n ||
      spec.factors.L.cols() != spec.factors.R.cols())
    fail(ErrorKind::ShapeError, "kernel factors must both be n x r");
}

inline SandwichKernelSpec make_spec(const StableKernel& sk, const Eigen::VectorXd& eps_a,
                                    const Eigen::VectorXd& eps_b) {
  SandwichKernelSpec spec{eps_a, eps_b, sk.weights(), sk.basis(), omega_from_svd(sk), sk.factors()};
  validate_spec(spec);
  return spec;
}

inline SandwichKernelSpec make_spec(const BasisMatrix& Z, const Eigen::VectorXd& S,
                                    const Eigen::MatrixXd& omega, const Eigen::VectorXd& eps_a,
                                    const Eigen::VectorXd& eps_b) {
  SandwichKernelSpec spec{eps_a, eps_b, S, Z, omega, explicit_kernel_factors(Z, omega)};
  validate_spec(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Brute force

enum class MiddleFactor {
  Centered,  // Q_s Omega - I
  Raw,       // Q_s Omega
};

namespace detail {

struct BruteForceState {
  const SandwichKernelSpec* spec;
  int m;
  MiddleFactor middle;
  std::vector<Eigen::Index> idx;
  std::vector<char> used;
  Eigen::MatrixXd omega_z;  // k x n, column i = Omega z_i
  CompensatedSum acc;

  void descend(int depth, const Eigen::RowVectorXd& x) {
    const Eigen::Index n = spec->n();
    if (depth == m) {
      const Eigen::Index i2 = idx[1];
      acc.add(x.dot(spec->Z.row(i2)) * spec->eps_b[i2]);
      return;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      if (used[i]) continue;
      used[i] = 1;
      idx[depth] = i;
      // x (S_i z_i z_i^T Omega - I)
      const double proj = x.dot(spec->Z.row(i)) * spec->S[i];
      Eigen::RowVectorXd next = proj * omega_z.col(i).transpose();
      if (middle == MiddleFactor::Centered) next -= x;
      descend(depth + 1, next);
      used[i] = 0;
    }
  }
};

}  // namespace detail

inline constexpr int kBruteForceMaxN = 14;

// Literal k-space evaluation over all ordered distinct tuples, lexicographic,
// scaled by (n-m)!/n!. No sign factor is applied.
inline double brute_force_ustat(const SandwichKernelSpec& spec, int m,
                                MiddleFactor middle = MiddleFactor::Centered) {
  validate_spec(spec);
  const Eigen::Index n = spec.n();
  if (n > kBruteForceMaxN || m < 2 || m > 6)
    fail(ErrorKind::TooLargeForBruteForce,
         "brute force requires n <= 14 and 2 <= m <= 6 (got n = " + std::to_string(n) +
             ", m = " + std::to_string(m) + ")");
  if (spec.omega.size() == 0) fail(ErrorKind::ArgumentError, "brute force needs an explicit Omega");
  if (m > n) fail(ErrorKind::ArgumentError, "order m exceeds sample size");

  detail::BruteForceState st;
  st.spec = &spec;
  st.m = m;
  st.middle = middle;
  st.idx.assign(static_cast<size_t>(m), 0);
  st.used.assign(static_cast<size_t>(n), 0);
  st.omega_z = spec.omega * spec.Z.transpose();

  for (Eigen::Index i1 = 0; i1 < n; ++i1) {
    st.used[i1] = 1;
    st.idx[0] = i1;
    const Eigen::RowVectorXd left = spec.eps_a[i1] * st.omega_z.col(i1).transpose();
    for (Eigen::Index i2 = 0; i2 < n; ++i2) {
      if (st.used[i2]) continue;
      st.used[i2] = 1;
      st.idx[1] = i2;
      st.descend(2, left);
      st.used[i2] = 0;
    }
    st.used[i1] = 0;
  }
  return st.acc.value() / detail::falling_factorial_double(n, m);
}

// ---------------------------------------------------------------------------
// Partition-Moebius chain engine
//
// Expanding prod_s (Q_s Omega - I) writes U_m as a signed binomial combination
// of distinct-index chain means
//   W_r = (1/(n)_{r+2}) sum_{distinct v} w_0(v_0) K(v_0,v_1) w_1(v_1) ... K(v_r,v_{r+1}) w_{r+1}(v_{r+1}),
// with w_0 = eps_a, w_{r+1} = eps_b and w_s = S inside. Each distinct sum is a
// Moebius combination of unrestricted sums over set partitions of the chain
// positions; each unrestricted sum is a small factor-graph contraction.

namespace detail {

inline constexpr double kDenseTensorGuard = 2e8;

struct EdgeMat {
  // E(x_a, x_b) = P.row(x_a) . Q.row(x_b), or D(x_a, x_b) when dense.
  bool dense = false;
  std::shared_ptr<const Eigen::MatrixXd> P, Q, D;
  int power = -1;  // >= 0 when the edge is K (S K)^power
};

struct GraphEdge {
  int a = 0, b = 0;
  EdgeMat mat;
};

}  // namespace detail

class ChainContext {
 public:
  ChainContext(const KernelFactors& factors, const Eigen::VectorXd& S)
      : L_(std::make_shared<Eigen::MatrixXd>(factors.L)),
        R_(std::make_shared<Eigen::MatrixXd>(factors.R)),
        S_(S) {
    if (factors.L.rows() != S.size() || factors.R.rows() != S.size())
      fail(ErrorKind::ShapeError, "kernel factors and weights disagree on n");
    G_ = R_->transpose() * S_.asDiagonal() * (*L_);
    left_powers_.push_back(L_);
  }

  Eigen::Index n() const { return S_.size(); }
  const Eigen::VectorXd& weights() const { return S_; }

  // L G^j, so that K (S K)^j = (L G^j) R^T.
  std::shared_ptr<const Eigen::MatrixXd> left_power(int j) {
    std::lock_guard<std::recursive_mutex> lock(mu_);
    while (static_cast<int>(left_powers_.size()) <= j)
      left_powers_.push_back(std::make_shared<Eigen::MatrixXd>((*left_powers_.back()) * G_));
    return left_powers_[static_cast<size_t>(j)];
  }
  std::shared_ptr<const Eigen::MatrixXd> right() const { return R_; }

  Eigen::VectorXd diag_power(int j) {
    std::lock_guard<std::recursive_mutex> lock(mu_);
    while (static_cast<int>(diag_.size()) <= j) {
      const int q = static_cast<int>(diag_.size());
      auto lp = left_power(q);
      diag_.push_back(lp->cwiseProduct(*R_).rowwise().sum());
    }
    return diag_[static_cast<size_t>(j)];
  }

  std::shared_ptr<const Eigen::MatrixXd> dense_power(int j) {
    std::lock_guard<std::recursive_mutex> lock(mu_);
    while (static_cast<int>(dense_.size()) <= j) dense_.push_back(nullptr);
    if (!dense_[static_cast<size_t>(j)]) {
      auto lp = left_power(j);
      dense_[static_cast<size_t>(j)] = std::make_shared<Eigen::MatrixXd>((*lp) * R_->transpose());
    }
    return dense_[static_cast<size_t>(j)];
  }

  // Distinct-index chain mean for positions 0..p-1 with the given unary
  // weights. Positions flagged `standard` carry the kernel weight S and may be
  // contracted into powers of K when they form singleton blocks.
  double distinct_chain_mean(const std::vector<Eigen::VectorXd>& w, const std::vector<char>& standard);

  double distinct_chain_mean(const Eigen::VectorXd& left, const Eigen::VectorXd& right, int internal) {
    std::vector<Eigen::VectorXd> w;
    std::vector<char> standard;
    w.push_back(left);
    standard.push_back(0);
    for (int s = 0; s < internal; ++s) {
      w.push_back(S_);
      standard.push_back(1);
    }
    w.push_back(right);
    standard.push_back(0);
    return distinct_chain_mean(w, standard);
  }

  // Unrestricted sum for one partition of the chain positions.
  double partition_sum(const std::vector<int>& labels, const std::vector<Eigen::VectorXd>& w,
                       const std::vector<char>& standard);

 private:
  detail::EdgeMat power_edge(int j) {
    detail::EdgeMat e;
    e.P = left_power(j);
    e.Q = R_;
    e.power = j;
    return e;
  }

  std::shared_ptr<const Eigen::MatrixXd> materialize(const detail::EdgeMat& e) {
    if (e.dense) return e.D;
    if (e.power >= 0) return dense_power(e.power);
    return std::make_shared<Eigen::MatrixXd>((*e.P) * e.Q->transpose());
  }

  static detail::EdgeMat transpose(const detail::EdgeMat& e) {
    detail::EdgeMat t = e;
    if (e.dense)
      t.D = std::make_shared<Eigen::MatrixXd>(e.D->transpose());
    else
      std::swap(t.P, t.Q);
    // K (S K)^j is symmetric, so the cached dense form stays valid.
    return t;
  }

  double contract(int vertex_count, std::vector<Eigen::VectorXd>& unary,
                  std::vector<detail::GraphEdge>& edges);

  std::shared_ptr<Eigen::MatrixXd> L_;
  std::shared_ptr<Eigen::MatrixXd> R_;
  Eigen::VectorXd S_;
  Eigen::MatrixXd G_;
  std::recursive_mutex mu_;
  std::vector<std::shared_ptr<const Eigen::MatrixXd>> left_powers_;
  std::vector<Eigen::VectorXd> diag_;
  std::vector<std::shared_ptr<const Eigen::MatrixXd>> dense_;
};

inline double ChainContext::partition_sum(const std::vector<int>& labels,
                                          const std::vector<Eigen::VectorXd>& w,
                                          const std::vector<char>& standard) {
  const int p = static_cast<int>(labels.size());
  const int blocks = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> block_size(static_cast<size_t>(blocks), 0);
  for (int x : labels) ++block_size[static_cast<size_t>(x)];

  // Internal singleton positions with kernel weights collapse into K powers.
  std::vector<char> collapsed(static_cast<size_t>(p), 0);
  for (int q = 1; q + 1 < p; ++q)
    collapsed[q] = standard[q] && block_size[static_cast<size_t>(labels[q])] == 1;

  std::vector<int> vertex_of_block(static_cast<size_t>(blocks), -1);
  int vertex_count = 0;
  for (int q = 0; q < p; ++q)
    if (!collapsed[q] && vertex_of_block[static_cast<size_t>(labels[q])] < 0)
      vertex_of_block[static_cast<size_t>(labels[q])] = vertex_count++;

  const Eigen::Index n = this->n();
  std::vector<Eigen::VectorXd> unary(static_cast<size_t>(vertex_count), Eigen::VectorXd::Ones(n));
  for (int q = 0; q < p; ++q)
    if (!collapsed[q]) unary[static_cast<size_t>(vertex_of_block[static_cast<size_t>(labels[q])])].array() *= w[q].array();

  std::vector<detail::GraphEdge> edges;
  int anchor = vertex_of_block[static_cast<size_t>(labels[0])];
  int run = 0;
  for (int q = 1; q < p; ++q) {
    if (collapsed[q]) {
      ++run;
      continue;
    }
    const int v = vertex_of_block[static_cast<size_t>(labels[q])];
    if (v == anchor)
      unary[static_cast<size_t>(v)].array() *= diag_power(run).array();
    else
      edges.push_back({anchor, v, power_edge(run)});
    anchor = v;
    run = 0;
  }
  return contract(vertex_count, unary, edges);
}

inline double ChainContext::contract(int vertex_count, std::vector<Eigen::VectorXd>& unary,
                                     std::vector<detail::GraphEdge>& edges) {
  using detail::EdgeMat;
  using detail::GraphEdge;
  std::vector<char> alive(static_cast<size_t>(vertex_count), 1);
  double scalar = 1.0;
  const Eigen::Index n = this->n();

  auto oriented = [&](const GraphEdge& e, int from) {
    return e.a == from ? e.mat : transpose(e.mat);
  };

  // Parallel edges become one dense Hadamard product.
  auto merge_parallel = [&]() {
    for (size_t i = 0; i < edges.size(); ++i) {
      for (size_t j = i + 1; j < edges.size();) {
        const bool same = (edges[i].a == edges[j].a && edges[i].b == edges[j].b) ||
                          (edges[i].a == edges[j].b && edges[i].b == edges[j].a);
        if (!same) {
          ++j;
          continue;
        }
        auto di = materialize(edges[i].mat);
        const EdgeMat ej = oriented(edges[j], edges[i].a);
        auto dj = materialize(ej);
        EdgeMat merged;
        merged.dense = true;
        merged.D = std::make_shared<Eigen::MatrixXd>(di->cwiseProduct(*dj));
        edges[i].mat = merged;
        edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(j));
      }
    }
  };
  merge_parallel();

  int remaining = vertex_count;
  while (remaining > 0) {
    // Vertex with fewest distinct neighbours (lowest index on ties).
    int best = -1;
    std::vector<size_t> best_edges;
    for (int v = 0; v < vertex_count; ++v) {
      if (!alive[static_cast<size_t>(v)]) continue;
      std::vector<size_t> inc;
      for (size_t e = 0; e < edges.size(); ++e)
        if (edges[e].a == v || edges[e].b == v) inc.push_back(e);
      if (best < 0 || inc.size() < best_edges.size()) {
        best = v;
        best_edges = inc;
      }
    }
    const Eigen::VectorXd& wv = unary[static_cast<size_t>(best)];

    if (best_edges.empty()) {
      scalar *= wv.sum();
    } else if (best_edges.size() == 1) {
      const GraphEdge& e = edges[best_edges[0]];
      const int u = e.a == best ? e.b : e.a;
      const EdgeMat m = oriented(e, u);  // E(x_u, x_v)
      Eigen::VectorXd msg = m.dense ? Eigen::VectorXd((*m.D) * wv)
                                    : Eigen::VectorXd((*m.P) * (m.Q->transpose() * wv));
      unary[static_cast<size_t>(u)].array() *= msg.array();
      edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(best_edges[0]));
    } else if (best_edges.size() == 2) {
      const GraphEdge& e1 = edges[best_edges[0]];
      const GraphEdge& e2 = edges[best_edges[1]];
      const int u = e1.a == best ? e1.b : e1.a;
      const int x = e2.a == best ? e2.b : e2.a;
      const EdgeMat m1 = oriented(e1, u);     // E1(x_u, x_v)
      const EdgeMat m2 = oriented(e2, best);  // E2(x_v, x_x)
      EdgeMat out;
      if (!m1.dense && !m2.dense) {
        const Eigen::MatrixXd mid = m1.Q->transpose() * wv.asDiagonal() * (*m2.P);
        out.P = std::make_shared<Eigen::MatrixXd>((*m1.P) * mid);
        out.Q = m2.Q;
      } else if (m1.dense && !m2.dense) {
        out.P = std::make_shared<Eigen::MatrixXd>((*m1.D) * (wv.asDiagonal() * (*m2.P)));
        out.Q = m2.Q;
      } else if (!m1.dense && m2.dense) {
        out.P = m1.P;
        out.Q = std::make_shared<Eigen::MatrixXd>(m2.D->transpose() * (wv.asDiagonal() * (*m1.Q)));
      } else {
        out.dense = true;
        out.D = std::make_shared<Eigen::MatrixXd>((*m1.D) * wv.asDiagonal() * (*m2.D));
      }
      const size_t hi = std::max(best_edges[0], best_edges[1]);
      const size_t lo = std::min(best_edges[0], best_edges[1]);
      edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(hi));
      edges.erase(edges.begin() + static_cast<std::ptrdiff_t>(lo));
      edges.push_back({u, x, out});
      merge_parallel();
    } else {
      // Every remaining vertex has three or more neighbours: sum the rest by
      // direct enumeration.
      std::vector<int> verts;
      for (int v = 0; v < vertex_count; ++v)
        if (alive[static_cast<size_t>(v)]) verts.push_back(v);
      const double cells = std::pow(static_cast<double>(n), static_cast<double>(verts.size()));
      if (cells > detail::kDenseTensorGuard)
        fail(ErrorKind::DimensionTooLarge,
             "coincidence pattern needs a dense contraction over " + std::to_string(verts.size()) +
                 " indices; n too large for this order");
      std::vector<std::shared_ptr<const Eigen::MatrixXd>> dense_edges;
      for (const GraphEdge& e : edges) dense_edges.push_back(materialize(e.mat));
      std::vector<int> pos(static_cast<size_t>(vertex_count), 0);
      std::vector<Eigen::Index> assign(verts.size(), 0);
      for (size_t t = 0; t < verts.size(); ++t) pos[static_cast<size_t>(verts[t])] = static_cast<int>(t);
      detail::CompensatedSum acc;
      bool done = false;
      while (!done) {
        double prod = 1.0;
        for (size_t t = 0; t < verts.size(); ++t) prod *= unary[static_cast<size_t>(verts[t])][assign[t]];
        for (size_t e = 0; e < edges.size() && prod != 0.0; ++e)
          prod *= (*dense_edges[e])(assign[static_cast<size_t>(pos[static_cast<size_t>(edges[e].a)])],
                                    assign[static_cast<size_t>(pos[static_cast<size_t>(edges[e].b)])]);
        acc.add(prod);
        size_t t = verts.size();
        while (true) {
          if (t == 0) {
            done = true;
            break;
          }
          --t;
          if (++assign[t] < n) break;
          assign[t] = 0;
        }
      }
      return scalar * acc.value();
    }
    alive[static_cast<size_t>(best)] = 0;
    --remaining;
  }
  return scalar;
}

inline double ChainContext::distinct_chain_mean(const std::vector<Eigen::VectorXd>& w,
                                                const std::vector<char>& standard) {
  const int p = static_cast<int>(w.size());
  if (p < 2 || static_cast<int>(standard.size()) != p)
    fail(ErrorKind::ArgumentError, "chain needs at least two positions");
  for (const Eigen::VectorXd& v : w)
    if (v.size() != n()) fail(ErrorKind::ShapeError, "chain weight vector has wrong length");
  if (p > n()) fail(ErrorKind::ArgumentError, "chain longer than the sample");
  const PartitionTable& table = detail::cached_partition_table(p);
  detail::CompensatedSum acc;
  for (size_t q = 0; q < table.size(); ++q)
    acc.add(static_cast<double>(table.mobius[q]) * partition_sum(table.labels[q], w, standard));
  return acc.value() / detail::falling_factorial_double(n(), p);
}

inline constexpr int kMaxEngineOrder = 8;

// Unsigned U_{n,j} for j = 2..m (index j of the returned vector; entries 0
// and 1 unused).
inline std::vector<double> partition_moebius_ustats(const SandwichKernelSpec& spec, int m,
                                                    ChainContext* shared_context = nullptr) {
  validate_spec(spec);
  if (m > kMaxEngineOrder) fail(ErrorKind::OrderTooHigh, "order " + std::to_string(m) + " exceeds 8");
  if (m < 2) fail(ErrorKind::ArgumentError, "order must be at least 2");
  if (m > spec.n()) fail(ErrorKind::ArgumentError, "order m exceeds sample size");
  std::unique_ptr<ChainContext> owned;
  ChainContext* ctx = shared_context;
  if (!ctx) {
    owned = std::make_unique<ChainContext>(spec.factors, spec.S);
    ctx = owned.get();
  }
  // chain[r] = W_r: r internal kernel-weighted positions.
  std::vector<double> chain(static_cast<size_t>(m - 1), 0.0);
  for (int r = 0; r <= m - 2; ++r)
    chain[static_cast<size_t>(r)] = ctx->distinct_chain_mean(spec.eps_a, spec.eps_b, r);

  std::vector<double> out(static_cast<size_t>(m + 1), 0.0);
  for (int j = 2; j <= m; ++j) {
    detail::CompensatedSum acc;
    for (int r = 0; r <= j - 2; ++r) {
      const double c = static_cast<double>(binomial(j - 2, r));
      acc.add(((j - 2 - r) % 2 == 0 ? c : -c) * chain[static_cast<size_t>(r)]);
    }
    out[static_cast<size_t>(j)] = acc.value();
  }
  return out;
}

inline double partition_moebius_ustat(const SandwichKernelSpec& spec, int m) {
  return partition_moebius_ustats(spec, m)[static_cast<size_t>(m)];
}

// Order-2 closed form: (1/(n-1)) eps_a^T (I - Diag) (M / n) eps_b with
// M = kernel_weighted_matrix. Divided by S_j this is the unweighted kernel, so
// it applies when S_j is 0/1 with eps_b vanishing where S_j = 0, or S = 1.
inline double soif_closed_form(const StableKernel& sk, const Eigen::VectorXd& eps_a,
                               const Eigen::VectorXd& eps_b) {
  const Eigen::MatrixXd M = kernel_weighted_matrix(sk);
  const double n = static_cast<double>(sk.n());
  Eigen::MatrixXd off = M / n;
  off.diagonal().setZero();
  return eps_a.dot(off * eps_b) / (n - 1.0);
}

// ---------------------------------------------------------------------------
// Identity suites

struct IdentityCheck {
  std::string suite;
  std::string label;
  std::string expected;
  std::string actual;
  bool pass = false;
  bool nonzero_expected = false;
};

inline std::vector<IdentityCheck> run_identity_suite(int max_m) {
  if (max_m < 2 || max_m > 10) fail(ErrorKind::ArgumentError, "max-m must lie in [2, 10]");
  std::vector<IdentityCheck> out;
  for (int m = 2; m <= max_m; ++m) {
    const auto coeffs = u_to_v_coefficients(m);
    bool all = true;
    std::string first_bad;
    for (int n = m; n <= 50; ++n) {
      BigInt rhs = 0;
      BigInt pw;
      for (const auto& t : coeffs) {
        pw = 1;
        for (int e = 0; e < t.order; ++e) pw *= n;
        rhs += t.coefficient * pw;
      }
      if (rhs != falling_factorial(n, m)) {
        all = false;
        if (first_bad.empty()) first_bad = "n=" + std::to_string(n);
      }
    }
    out.push_back({"stirling-falling-factorial", "m=" + std::to_string(m) + ", m<=n<=50", "exact",
                   all ? "exact" : "mismatch at " + first_bad, all, false});
  }
  for (int m = 2; m <= std::min(max_m, 8); ++m) {
    bool witnessed = false;
    for (int c = 1; c <= m; ++c) {
      for (int cd = 0; cd <= c; ++cd) {
        const BigRational v = cancellation_coefficient(m, c, cd);
        const bool must_vanish = c + cd < m - 1;
        const bool boundary = c + cd == m - 1;
        if (boundary && v != 0) witnessed = true;
        if (!must_vanish && !boundary) continue;
        IdentityCheck chk;
        chk.suite = "cancellation-coefficient";
        chk.label = "m=" + std::to_string(m) + ", c=" + std::to_string(c) + ", c_dag=" + std::to_string(cd);
        chk.expected = must_vanish ? "0" : "nonzero";
        chk.actual = v.str();
        chk.pass = must_vanish ? (v == 0) : true;
        chk.nonzero_expected = boundary;
        out.push_back(chk);
      }
    }
    out.push_back({"cancellation-witness", "m=" + std::to_string(m), "some boundary coefficient nonzero",
                   witnessed ? "found" : "none", witnessed, true});
  }
  for (int m = 1; m <= std::min(max_m, 6); ++m) {
    const PartitionTable t = partition_table(m);
    bool ok = BigInt(t.size()) == bell_number(m);
    for (int n = 1; n <= 12 && ok; ++n) {
      BigInt s = 0;
      for (size_t q = 0; q < t.size(); ++q) {
        BigInt pw = 1;
        for (int e = 0; e < t.block_count[q]; ++e) pw *= n;
        s += BigInt(t.mobius[q]) * pw;
      }
      ok = s == falling_factorial(n, m);
    }
    out.push_back({"moebius-weights", "m=" + std::to_string(m) + ", n<=12", "sum mu n^blocks = (n)_m",
                   ok ? "exact" : "mismatch", ok, false});
  }
  return out;
}

}  // namespace shoif
