#pragma once

#include <vector>

#include "dpvi/common.hpp"

namespace dpvi::lgssm {

// Gaussian Markov chain over nodes x_0..x_M in three parameterizations.
//
// Conventions used throughout:
//  * pair ordering is [x_{m+1}; x_m] wherever the two endpoints of interval m
//    appear together (site blocks, pair moments, pair quadrature);
//  * NaturalParams stores the linear term h and the positive block-tridiagonal
//    precision J (diagonal blocks Jd[i] = J(i,i), sub-diagonal blocks
//    Jo[m] = J(m+1,m)); the natural pair in the exponential-family sense is
//    (h, -J/2);
//  * Marginals::C[m] = Cov(x_{m+1}, x_m).

struct PhiParams {
  Vec m0;
  Mat S0;
  std::vector<Mat> A;  // M transition matrices
  std::vector<Vec> b;  // M offsets
  std::vector<Mat> Q;  // M innovation covariances
  int M() const { return int(A.size()); }
  int dim() const { return int(m0.size()); }
};

struct NaturalParams {
  std::vector<Vec> h;   // M+1
  std::vector<Mat> Jd;  // M+1
  std::vector<Mat> Jo;  // M
  int M() const { return int(Jo.size()); }
  int dim() const { return h.empty() ? 0 : int(h[0].size()); }
};

struct Marginals {
  std::vector<Vec> m;  // M+1
  std::vector<Mat> S;  // M+1
  std::vector<Mat> C;  // M; C[m] = Cov(x_{m+1}, x_m)
  int M() const { return int(C.size()); }
};

struct ExpectationParams {
  std::vector<Vec> m1;   // E[x_i]
  std::vector<Mat> M2;   // E[x_i x_i^T]
  std::vector<Mat> M12;  // E[x_{m+1} x_m^T]
};

NaturalParams phi_to_eta(const PhiParams& phi);

// Backward block-elimination peel; throws NumericalError when J is not PD
// (after one jittered Cholesky retry per block).
PhiParams eta_to_phi(const NaturalParams& eta);

// Strict variant used for step rejection: no jitter, no throw.
bool try_eta_to_phi(const NaturalParams& eta, PhiParams& out);

Marginals phi_to_moments(const PhiParams& phi);

// Posterior marginals of the chain described by eta: eta -> phi -> moments.
Marginals smooth(const NaturalParams& eta);

ExpectationParams to_expectation(const Marginals& marg);

PhiParams moments_to_phi(const Marginals& marg);

NaturalParams moments_to_eta(const Marginals& marg);

// Log normalizer A(eta) of the unnormalized density exp(h'x - x'Jx/2).
double log_partition(const NaturalParams& eta);

// <eta, mu> = sum_i h_i'mu1_i - (sum_i <Jd_i, M2_i> + 2 sum_m <Jo_m, M12_m>)/2.
double dot(const NaturalParams& eta, const ExpectationParams& mu);

NaturalParams diff(const NaturalParams& a, const NaturalParams& b);

// KL(q || p) = <eta_q - eta_p, mu_q> - A(eta_q) + A(eta_p).
double kl(const NaturalParams& q_eta, const ExpectationParams& q_mu,
          const NaturalParams& p_eta);

// Scalar observations y_k = H x_{idx_k} + noise, Var = sigma2.
struct ObsSeq {
  std::vector<int> idx;
  std::vector<double> y;
};

struct KalmanResult {
  Marginals marg;
  double loglik;
};

// Forward filter + RTS smoother; the independent linear-Gaussian reference
// (exact GP regression for linear drifts) and the test oracle's counterpart.
KalmanResult kalman_smoother(const PhiParams& phi, const ObsSeq& obs,
                             const RowVec& H, double sigma2);

}  // namespace dpvi::lgssm
