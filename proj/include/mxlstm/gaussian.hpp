#pragma once

// Output distributions of the forecaster.
//
// Full head: a 4-D Gaussian over (x, y, a_x, a_y) whose covariance is
// Sigma = L^T L with L upper triangular. The ten free values theta are the
// upper triangle of L in row-major order
//     (0,0) (0,1) (0,2) (0,3) (1,1) (1,2) (1,3) (2,2) (2,3) (3,3)
// with diagonal entries stored as log(l_ii).
//
// Block-diagonal / position-only heads: bivariate Gaussians parameterised by
// raw (mu_1, mu_2, s_1, s_2, p) with sigma_k = exp(s_k) and rho = tanh(p).

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>

#include "mxlstm/autodiff.hpp"
#include "mxlstm/tensor.hpp"

namespace mxlstm {

/// |theta_ii| and raw log-sigmas are clamped to this bound before exponentiation.
inline constexpr double kLogScaleClamp = 10.0;
/// Raw correlation inputs are clamped to this bound before tanh, keeping |rho| < 1.
inline constexpr double kCorrelationClamp = 10.0;

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

using Vec4 = std::array<double, 4>;
using Mat4 = std::array<std::array<double, 4>, 4>;

inline constexpr std::array<std::array<int, 2>, 10> kThetaLayout{{
    {0, 0}, {0, 1}, {0, 2}, {0, 3}, {1, 1}, {1, 2}, {1, 3}, {2, 2}, {2, 3}, {3, 3}}};
inline constexpr std::array<int, 4> kThetaDiagonal{0, 4, 7, 9};

/// Ten unconstrained values that deterministically define a 4x4 covariance.
struct LogCholParams {
  std::array<double, 10> theta{};

  friend bool operator==(const LogCholParams&, const LogCholParams&) = default;
};

namespace detail {

inline double clamp_log_scale(double v) { return std::clamp(v, -kLogScaleClamp, kLogScaleClamp); }
inline bool log_scale_clamped(double v) { return v < -kLogScaleClamp || v > kLogScaleClamp; }

}  // namespace detail

/// Upper-triangular factor L with diag exp(theta_ii).
inline Mat4 cholesky_factor(const LogCholParams& p) {
  Mat4 L{};
  for (std::size_t k = 0; k < 10; ++k) {
    const double v = p.theta[k];
    if (!std::isfinite(v)) throw std::domain_error("cholesky_factor: non-finite theta entry");
    const auto [i, j] = kThetaLayout[k];
    L[i][j] = (i == j) ? std::exp(detail::clamp_log_scale(v)) : v;
  }
  return L;
}

/// Sigma = L^T L; symmetric positive definite by construction.
inline Mat4 covariance_from_logchol(const LogCholParams& p) {
  const Mat4 L = cholesky_factor(p);
  Mat4 S{};
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j) {
      double s = 0.0;
      for (int k = 0; k <= std::min(i, j); ++k) s += L[k][i] * L[k][j];
      S[i][j] = s;
      S[j][i] = s;
    }
  return S;
}

/// Inverse map: factor Sigma = L^T L (L upper, positive diagonal) and log the diagonal.
inline std::optional<LogCholParams> logchol_from_covariance(const Mat4& sigma) {
  // Lower Cholesky C with Sigma = C C^T, then L = C^T.
  Mat4 C{};
  for (int j = 0; j < 4; ++j) {
    double d = sigma[j][j];
    for (int k = 0; k < j; ++k) d -= C[j][k] * C[j][k];
    if (!(d > 0.0)) return std::nullopt;
    C[j][j] = std::sqrt(d);
    for (int i = j + 1; i < 4; ++i) {
      double s = sigma[i][j];
      for (int k = 0; k < j; ++k) s -= C[i][k] * C[j][k];
      C[i][j] = s / C[j][j];
    }
  }
  LogCholParams p;
  for (std::size_t k = 0; k < 10; ++k) {
    const auto [i, j] = kThetaLayout[k];
    const double l = C[j][i];
    p.theta[k] = (i == j) ? std::log(l) : l;
  }
  return p;
}

struct Gaussian4 {
  Vec4 mu{};
  LogCholParams theta;

  Mat4 sigma() const { return covariance_from_logchol(theta); }
};

struct Nll4 {
  double value = 0.0;
  Vec4 d_mu{};
  std::array<double, 10> d_theta{};
};

/**
 * -log N(x; mu, L^T L) and its gradient with respect to mu and theta.
 * log det Sigma = 2 * sum(theta_ii); the quadratic form uses z = L^{-T}(x - mu)
 * (forward substitution) and w = L^{-1} z = Sigma^{-1}(x - mu) (back substitution).
 */
inline Nll4 gaussian4_nll_with_grad(const Vec4& x, const Vec4& mu, const LogCholParams& theta) {
  const Mat4 L = cholesky_factor(theta);
  Vec4 d{};
  for (int i = 0; i < 4; ++i) d[i] = x[i] - mu[i];

  Vec4 z{};
  for (int i = 0; i < 4; ++i) {
    double s = d[i];
    for (int k = 0; k < i; ++k) s -= L[k][i] * z[k];
    z[i] = s / L[i][i];
  }
  Vec4 w{};
  for (int i = 3; i >= 0; --i) {
    double s = z[i];
    for (int k = i + 1; k < 4; ++k) s -= L[i][k] * w[k];
    w[i] = s / L[i][i];
  }

  double logdet = 0.0;
  for (int k : kThetaDiagonal) logdet += 2.0 * detail::clamp_log_scale(theta.theta[k]);
  double maha = 0.0;
  for (double v : z) maha += v * v;

  Nll4 out;
  out.value = 0.5 * (4.0 * kLog2Pi + logdet + maha);
  for (int i = 0; i < 4; ++i) out.d_mu[i] = -w[i];
  for (std::size_t k = 0; k < 10; ++k) {
    const auto [i, j] = kThetaLayout[k];
    if (i != j) {
      out.d_theta[k] = -z[i] * w[j];
    } else if (detail::log_scale_clamped(theta.theta[k])) {
      out.d_theta[k] = 0.0;
    } else {
      out.d_theta[k] = 1.0 - z[i] * w[i] * L[i][i];
    }
  }
  return out;
}

inline double gaussian4_nll(const Vec4& x, const Gaussian4& g) { return gaussian4_nll_with_grad(x, g.mu, g.theta).value; }

/// Draw mu + L^T z with z ~ N(0, I).
inline Vec4 sample_gaussian4(const Gaussian4& g, Rng& rng) {
  const Mat4 L = cholesky_factor(g.theta);
  Vec4 z{};
  for (auto& v : z) v = rng.normal();
  Vec4 out = g.mu;
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k <= i; ++k) out[i] += L[k][i] * z[k];
  return out;
}

/// Bivariate Gaussian with standard deviations and correlation.
struct Bivariate {
  double mu1 = 0.0;
  double mu2 = 0.0;
  double sigma1 = 1.0;
  double sigma2 = 1.0;
  double rho = 0.0;

  /// From raw head outputs (mu_1, mu_2, s_1, s_2, p).
  static Bivariate from_raw(double mu1, double mu2, double s1, double s2, double p) {
    return {mu1, mu2, std::exp(detail::clamp_log_scale(s1)), std::exp(detail::clamp_log_scale(s2)),
            std::tanh(std::clamp(p, -kCorrelationClamp, kCorrelationClamp))};
  }
};

/// Two independent bivariates: position stream and anchor stream.
struct BdGaussianPair {
  Bivariate position;
  Bivariate anchor;
};

inline double bivariate_nll(double x1, double x2, const Bivariate& b) {
  const double n1 = (x1 - b.mu1) / b.sigma1;
  const double n2 = (x2 - b.mu2) / b.sigma2;
  const double q = 1.0 - b.rho * b.rho;
  const double zq = n1 * n1 + n2 * n2 - 2.0 * b.rho * n1 * n2;
  return kLog2Pi + std::log(b.sigma1) + std::log(b.sigma2) + 0.5 * std::log(q) + zq / (2.0 * q);
}

struct Nll2 {
  double value = 0.0;
  std::array<double, 5> d_raw{};  // w.r.t. (mu_1, mu_2, s_1, s_2, p)
};

inline Nll2 bivariate_nll_with_grad(double x1, double x2, const std::array<double, 5>& raw) {
  const Bivariate b = Bivariate::from_raw(raw[0], raw[1], raw[2], raw[3], raw[4]);
  const double n1 = (x1 - b.mu1) / b.sigma1;
  const double n2 = (x2 - b.mu2) / b.sigma2;
  const double q = 1.0 - b.rho * b.rho;
  const double zq = n1 * n1 + n2 * n2 - 2.0 * b.rho * n1 * n2;
  const double a1 = (n1 - b.rho * n2) / q;
  const double a2 = (n2 - b.rho * n1) / q;

  Nll2 out;
  out.value = bivariate_nll(x1, x2, b);
  out.d_raw[0] = -a1 / b.sigma1;
  out.d_raw[1] = -a2 / b.sigma2;
  out.d_raw[2] = detail::log_scale_clamped(raw[2]) ? 0.0 : 1.0 - n1 * a1;
  out.d_raw[3] = detail::log_scale_clamped(raw[3]) ? 0.0 : 1.0 - n2 * a2;
  const bool p_clamped = raw[4] < -kCorrelationClamp || raw[4] > kCorrelationClamp;
  out.d_raw[4] = p_clamped ? 0.0 : -b.rho - n1 * n2 + zq * b.rho / q;
  return out;
}

/// Sum of the two bivariate negative log-likelihoods.
inline double bd_nll(const std::array<double, 2>& x_pos, const std::array<double, 2>& x_anchor, const BdGaussianPair& g) {
  return bivariate_nll(x_pos[0], x_pos[1], g.position) + bivariate_nll(x_anchor[0], x_anchor[1], g.anchor);
}

inline std::array<double, 2> sample_bivariate(const Bivariate& b, Rng& rng) {
  const double z1 = rng.normal();
  const double z2 = rng.normal();
  return {b.mu1 + b.sigma1 * z1, b.mu2 + b.sigma2 * (b.rho * z1 + std::sqrt(1.0 - b.rho * b.rho) * z2)};
}

namespace ad {

/**
 * NLL of `target` under the full head stored in `head` (14 rows: 4 mean
 * offsets then theta). The mean is `mean_ref + head[0:4]`.
 */
inline Var gaussian4_nll(Var head, const Vec4& mean_ref, const Vec4& target) {
  Tape& t = tape_of(head);
  const Matrix& h = t.value(head);
  if (h.rows() != 14 || h.cols() != 1) throw ShapeError("gaussian4_nll: head must be 14x1, got " + h.shape_string());
  Vec4 mu{};
  LogCholParams theta;
  for (int i = 0; i < 4; ++i) mu[i] = mean_ref[i] + h[i];
  for (int k = 0; k < 10; ++k) theta.theta[k] = h[4 + k];
  const Nll4 r = gaussian4_nll_with_grad(target, mu, theta);
  return t.push(Matrix(1, 1, r.value), t.requires_grad(head), [head, r](Tape& tp, const Matrix& g) {
    Matrix& gh = tp.grad(head);
    for (int i = 0; i < 4; ++i) gh[i] += g[0] * r.d_mu[i];
    for (int k = 0; k < 10; ++k) gh[4 + k] += g[0] * r.d_theta[k];
  });
}

/// NLL of a 2-D target under the bivariate stored at head[offset : offset + 5].
inline Var bivariate_nll(Var head, std::size_t offset, const std::array<double, 2>& mean_ref,
                         const std::array<double, 2>& target) {
  Tape& t = tape_of(head);
  const Matrix& h = t.value(head);
  if (h.cols() != 1 || h.rows() < offset + 5) throw ShapeError("bivariate_nll: head too short");
  const std::array<double, 5> raw{mean_ref[0] + h[offset], mean_ref[1] + h[offset + 1], h[offset + 2], h[offset + 3],
                                  h[offset + 4]};
  const Nll2 r = bivariate_nll_with_grad(target[0], target[1], raw);
  return t.push(Matrix(1, 1, r.value), t.requires_grad(head), [head, offset, r](Tape& tp, const Matrix& g) {
    Matrix& gh = tp.grad(head);
    for (std::size_t k = 0; k < 5; ++k) gh[offset + k] += g[0] * r.d_raw[k];
  });
}

}  // namespace ad
}  // namespace mxlstm
