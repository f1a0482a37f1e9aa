#pragma once

#include <cmath>

#include "dpvi/common.hpp"

namespace dpvi::obs {

// Gaussian likelihood y = u + e, e ~ N(0, sigma2), for scalar projections
// u = H x of the latent state.

inline double log_lik(double y, double u, double sigma2) {
  double r = y - u;
  return -0.5 * (kLog2Pi + std::log(sigma2) + r * r / sigma2);
}

// Gradients of E_{u ~ N(mu, v)}[log p(y|u)] with respect to the mean and
// variance of u: alpha = dE/dmu, beta = dE/dv. For the Gaussian likelihood
// these are exact and variance-independent.
inline void gaussian_grads(double y, double mu, double sigma2, double& alpha,
                           double& beta) {
  alpha = (y - mu) / sigma2;
  beta = -0.5 / sigma2;
}

inline double expected_log_lik(double y, double mu, double v, double sigma2) {
  double r = y - mu;
  return -0.5 * (kLog2Pi + std::log(sigma2) + (r * r + v) / sigma2);
}

// Negative log predictive density of y* under the posterior marginal
// u* ~ N(mu, v): -log N(y*; mu, v + sigma2).
inline double nlpd(double y, double mu, double v, double sigma2) {
  double s = v + sigma2;
  double r = y - mu;
  return 0.5 * (kLog2Pi + std::log(s) + r * r / s);
}

}  // namespace dpvi::obs
