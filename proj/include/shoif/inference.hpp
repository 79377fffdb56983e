#pragma once

// Standard errors, Wald intervals and the one-sided bias test.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <thread>
#include <vector>

#include "shoif/errors.hpp"

namespace shoif {

// Standard normal quantile: Acklam's rational approximation followed by one
// Halley step against erfc, good to about 1e-15 in the central range.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) fail(ErrorKind::ArgumentError, "normal_quantile needs p in (0, 1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  const double lo = 0.02425;
  double x;
  if (p < lo) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - lo) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

inline Interval wald_ci(double psi_hat, double se, double alpha) {
  if (!(se >= 0.0)) fail(ErrorKind::ArgumentError, "standard error must be nonnegative");
  if (!(alpha > 0.0 && alpha < 1.0)) fail(ErrorKind::ArgumentError, "alpha must lie in (0, 1)");
  const double half = normal_quantile(1.0 - alpha / 2.0) * se;
  return Interval{psi_hat - half, psi_hat + half};
}

struct BiasTestConfig {
  double alpha = 0.05;
  double delta = 0.0;
  int order = 2;
  int bootstrap_B = 200;
  std::uint64_t seed = 0;
  bool two_sided_magnitude = false;
};

inline void validate(const BiasTestConfig& cfg) {
  if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) fail(ErrorKind::ArgumentError, "alpha must lie in (0, 1)");
  if (!(cfg.delta >= 0.0)) fail(ErrorKind::ArgumentError, "delta must be >= 0");
  if (cfg.bootstrap_B < 100) fail(ErrorKind::ArgumentError, "bootstrap B must be at least 100");
  if (cfg.order < 2) fail(ErrorKind::ArgumentError, "order must be at least 2");
}

struct BiasTestResult {
  bool reject = false;
  double statistic = 0.0;
};

// The correction value passed here is an estimate of the first-order bias.
inline BiasTestResult bias_test(double correction_value, double se_correction, double se_psi1,
                                const BiasTestConfig& cfg) {
  if (!(se_psi1 > 0.0)) fail(ErrorKind::DegenerateScale, "se of psi_1 must be positive");
  if (!(se_correction >= 0.0)) fail(ErrorKind::ArgumentError, "se of the correction must be nonnegative");
  const double z = normal_quantile(1.0 - cfg.alpha / 2.0);
  const double c = cfg.two_sided_magnitude ? std::abs(correction_value) : correction_value;
  BiasTestResult r;
  r.statistic = c / se_psi1 - z * se_correction / se_psi1;
  r.reject = r.statistic > cfg.delta;
  return r;
}

struct BootstrapResult {
  double se = 0.0;
  int rejected = 0;
  std::vector<double> values;  // one per accepted resample, in resample order
};

// Statistic evaluated on a vector of row indices drawn with replacement.
using ResampleStatistic = std::function<double(const std::vector<Eigen::Index>&)>;

// Resample b uses a generator seeded with seed + b. Resamples whose
// statistic raises SingularGram are redrawn from the same generator.
inline BootstrapResult bootstrap_se(const ResampleStatistic& statistic, Eigen::Index n, int B,
                                    std::uint64_t seed, int threads = 1) {
  if (B < 100) fail(ErrorKind::ArgumentError, "bootstrap B must be at least 100");
  if (n < 1) fail(ErrorKind::EmptyData, "cannot resample an empty dataset");
  std::vector<double> values(static_cast<size_t>(B), 0.0);
  std::vector<int> rejections(static_cast<size_t>(B), 0);
  std::vector<std::exception_ptr> errors(static_cast<size_t>(B));

  auto run_one = [&](int b) {
    std::mt19937_64 rng(seed + static_cast<std::uint64_t>(b));
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    std::vector<Eigen::Index> idx(static_cast<size_t>(n));
    while (true) {
      for (auto& i : idx) i = pick(rng);
      try {
        values[static_cast<size_t>(b)] = statistic(idx);
        return;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::SingularGram) {
          errors[static_cast<size_t>(b)] = std::current_exception();
          return;
        }
        if (++rejections[static_cast<size_t>(b)] > B) {
          errors[static_cast<size_t>(b)] = std::current_exception();
          return;
        }
      }
    }
  };

  threads = std::max(1, threads);
  if (threads == 1) {
    for (int b = 0; b < B; ++b) run_one(b);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (int b = t; b < B; b += threads) run_one(b);
      });
    for (auto& th : pool) th.join();
  }

  BootstrapResult out;
  for (int b = 0; b < B; ++b) out.rejected += rejections[static_cast<size_t>(b)];
  if (out.rejected > B)
    fail(ErrorKind::UnstableResampling, std::to_string(out.rejected) + " of " + std::to_string(out.rejected + B) +
                                            " resamples rejected for a singular Gram matrix");
  for (int b = 0; b < B; ++b)
    if (errors[static_cast<size_t>(b)]) std::rethrow_exception(errors[static_cast<size_t>(b)]);

  out.values = values;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= B;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  out.se = std::sqrt(ss / (B - 1));
  return out;
}

}  // namespace shoif
