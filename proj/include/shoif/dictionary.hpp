#pragma once

// Partition dictionaries: per-cell tensor-product Legendre polynomials on
// the box [-B, B]^d.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "shoif/errors.hpp"

namespace shoif {

enum class DictionaryKind { IndicatorPartition, PiecewisePolynomialPartition };

inline const char* to_string(DictionaryKind kind) {
  return kind == DictionaryKind::IndicatorPartition ? "indicator-partition"
                                                    : "piecewise-polynomial-partition";
}

inline DictionaryKind dictionary_kind_from_string(const std::string& s) {
  if (s == "indicator-partition" || s == "indicator") return DictionaryKind::IndicatorPartition;
  if (s == "piecewise-polynomial-partition" || s == "piecewise-polynomial")
    return DictionaryKind::PiecewisePolynomialPartition;
  fail(ErrorKind::ArgumentError, "unknown dictionary kind '" + s + "'");
}

struct Dictionary {
  DictionaryKind kind = DictionaryKind::IndicatorPartition;
  int d = 1;
  int cells_per_axis = 1;
  int degree = 0;
  double B = 1.0;
  std::int64_t k = 1;

  std::int64_t cells() const { return k / functions_per_cell(); }
  std::int64_t functions_per_cell() const {
    std::int64_t f = 1;
    for (int a = 0; a < d; ++a) f *= degree + 1;
    return f;
  }
};

// n x k matrix; row i is z_k(X_i)^T.
using BasisMatrix = Eigen::MatrixXd;

inline constexpr std::int64_t kDefaultMaxDictionarySize = 1'000'000;

inline Dictionary build_dictionary(DictionaryKind kind, int d, int cells_per_axis, int degree,
                                   double B,
                                   std::int64_t max_k = kDefaultMaxDictionarySize) {
  if (d < 1) fail(ErrorKind::ArgumentError, "dimension d must be >= 1");
  if (cells_per_axis < 1) fail(ErrorKind::ArgumentError, "cells_per_axis must be >= 1");
  if (degree < 0) fail(ErrorKind::ArgumentError, "degree must be >= 0");
  if (!(B > 0.0) || !std::isfinite(B)) fail(ErrorKind::ArgumentError, "B must be positive");
  if (kind == DictionaryKind::IndicatorPartition && degree != 0)
    fail(ErrorKind::ArgumentError, "indicator-partition dictionaries have degree 0");

  const std::int64_t per_axis = static_cast<std::int64_t>(cells_per_axis) * (degree + 1);
  std::int64_t k = 1;
  for (int a = 0; a < d; ++a) {
    if (k > max_k / per_axis)
      fail(ErrorKind::DimensionTooLarge,
           "dictionary size exceeds maximum " + std::to_string(max_k));
    k *= per_axis;
  }
  if (k > max_k)
    fail(ErrorKind::DimensionTooLarge, "dictionary size exceeds maximum " + std::to_string(max_k));
  return Dictionary{kind, d, cells_per_axis, degree, B, k};
}

namespace detail {

// Legendre P_0..P_p at t in [-1, 1]; |P_j| <= 1 there.
inline void legendre_values(double t, int p, double* out) {
  out[0] = 1.0;
  if (p >= 1) out[1] = t;
  for (int j = 2; j <= p; ++j)
    out[j] = ((2.0 * j - 1.0) * t * out[j - 1] - (j - 1.0) * out[j - 2]) / j;
}

}  // namespace detail

// Cells are right-inclusive at interior boundaries; the rightmost cell is closed.
inline BasisMatrix evaluate_basis(const Dictionary& dict, const Eigen::MatrixXd& X) {
  if (X.cols() != dict.d)
    fail(ErrorKind::ShapeError, "covariate matrix has " + std::to_string(X.cols()) +
                                    " columns, dictionary expects " + std::to_string(dict.d));
  const Eigen::Index n = X.rows();
  const int p = dict.degree;
  const std::int64_t per_cell = dict.functions_per_cell();
  const double width = 2.0 * dict.B / dict.cells_per_axis;

  BasisMatrix Z = BasisMatrix::Zero(n, dict.k);
  std::vector<int> cell(dict.d);
  std::vector<double> leg(static_cast<size_t>(dict.d) * (p + 1));

  for (Eigen::Index i = 0; i < n; ++i) {
    for (int a = 0; a < dict.d; ++a) {
      const double x = X(i, a);
      if (!(x >= -dict.B && x <= dict.B))
        fail(ErrorKind::DomainViolation, "row " + std::to_string(i) + ", axis " +
                                             std::to_string(a) + ": value outside [-B, B]");
      int c = static_cast<int>(std::floor((x + dict.B) / width));
      if (c >= dict.cells_per_axis) c = dict.cells_per_axis - 1;
      if (c < 0) c = 0;
      cell[a] = c;
      const double lo = -dict.B + c * width;
      double t = 2.0 * (x - lo) / width - 1.0;
      t = std::clamp(t, -1.0, 1.0);
      detail::legendre_values(t, p, &leg[static_cast<size_t>(a) * (p + 1)]);
    }
    std::int64_t flat_cell = 0;
    for (int a = 0; a < dict.d; ++a) flat_cell = flat_cell * dict.cells_per_axis + cell[a];
    const std::int64_t base = flat_cell * per_cell;
    // Tensor product over axes, axis 0 most significant.
    for (std::int64_t f = 0; f < per_cell; ++f) {
      std::int64_t rem = f;
      double v = 1.0;
      for (int a = dict.d - 1; a >= 0; --a) {
        const int j = static_cast<int>(rem % (p + 1));
        rem /= (p + 1);
        v *= leg[static_cast<size_t>(a) * (p + 1) + j];
      }
      Z(i, base + f) = v;
    }
  }
  return Z;
}

// Least-squares projection of sampled values h onto the column span of Z,
// evaluated back at the sample rows.
inline Eigen::VectorXd empirical_projection(const BasisMatrix& Z, const Eigen::VectorXd& h) {
  if (Z.rows() != h.size()) fail(ErrorKind::ShapeError, "projection: length mismatch");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(Z, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return Z * svd.solve(h);
}

}  // namespace shoif
