#pragma once

// Dense-matrix reference implementations used as independent oracles in the
// test suite. Everything here works on the full (M+1)d joint Gaussian with
// plain dense algebra and none of the chain-structured code under test.

#include <vector>

#include "dpvi/common.hpp"
#include "dpvi/lgssm.hpp"
#include "dpvi/rng.hpp"

namespace testutil {

using dpvi::Mat;
using dpvi::RowVec;
using dpvi::Vec;

struct DenseGaussian {
  Vec mean;
  Mat cov;
};

// Joint law of (x_0, ..., x_M) stacked, from the chain parameterization.
inline DenseGaussian dense_from_phi(const dpvi::lgssm::PhiParams& phi) {
  const int M = phi.M(), d = phi.dim(), N = (M + 1) * d;
  DenseGaussian g;
  g.mean = Vec::Zero(N);
  g.cov = Mat::Zero(N, N);
  g.mean.segment(0, d) = phi.m0;
  g.cov.block(0, 0, d, d) = phi.S0;
  for (int i = 0; i < M; ++i) {
    g.mean.segment((i + 1) * d, d) = phi.A[i] * g.mean.segment(i * d, d) + phi.b[i];
    for (int j = 0; j <= i; ++j) {
      g.cov.block((i + 1) * d, j * d, d, d) =
          phi.A[i] * g.cov.block(i * d, j * d, d, d);
      g.cov.block(j * d, (i + 1) * d, d, d) =
          g.cov.block((i + 1) * d, j * d, d, d).transpose();
    }
    g.cov.block((i + 1) * d, (i + 1) * d, d, d) =
        phi.A[i] * g.cov.block(i * d, i * d, d, d) * phi.A[i].transpose() + phi.Q[i];
  }
  return g;
}

// Stacked (h, J) of the chain's natural parameterization.
inline void dense_from_eta(const dpvi::lgssm::NaturalParams& eta, Vec& h, Mat& J) {
  const int M = eta.M(), d = eta.dim(), N = (M + 1) * d;
  h = Vec::Zero(N);
  J = Mat::Zero(N, N);
  for (int i = 0; i <= M; ++i) {
    h.segment(i * d, d) = eta.h[i];
    J.block(i * d, i * d, d, d) = eta.Jd[i];
  }
  for (int m = 0; m < M; ++m) {
    J.block((m + 1) * d, m * d, d, d) = eta.Jo[m];
    J.block(m * d, (m + 1) * d, d, d) = eta.Jo[m].transpose();
  }
}

inline double dense_log_partition(const Vec& h, const Mat& J) {
  Mat S = J.inverse();
  Vec m = S * h;
  double logdet = std::log(J.determinant());
  return 0.5 * h.dot(m) + 0.5 * double(h.size()) * dpvi::kLog2Pi - 0.5 * logdet;
}

inline double dense_kl(const DenseGaussian& q, const DenseGaussian& p) {
  const int n = int(q.mean.size());
  Mat Pi = p.cov.inverse();
  Vec dm = q.mean - p.mean;
  double tr = (Pi * q.cov).trace();
  double logdet = std::log(p.cov.determinant()) - std::log(q.cov.determinant());
  return 0.5 * (tr + dm.dot(Pi * dm) - double(n) + logdet);
}

// Condition the stacked joint on scalar observations y_k = H x_{idx_k} + e_k.
inline DenseGaussian dense_condition(const DenseGaussian& prior,
                                     const dpvi::lgssm::ObsSeq& obs, const RowVec& H,
                                     double sigma2, double* loglik = nullptr) {
  const int d = int(H.size());
  const int n = int(obs.idx.size());
  const int N = int(prior.mean.size());
  Mat O = Mat::Zero(n, N);
  Vec y(n);
  for (int k = 0; k < n; ++k) {
    O.block(k, obs.idx[k] * d, 1, d) = H;
    y(k) = obs.y[k];
  }
  Mat S = O * prior.cov * O.transpose() + sigma2 * Mat::Identity(n, n);
  Vec r = y - O * prior.mean;
  Mat K = prior.cov * O.transpose() * S.inverse();
  DenseGaussian post;
  post.mean = prior.mean + K * r;
  post.cov = prior.cov - K * O * prior.cov;
  post.cov = 0.5 * (post.cov + post.cov.transpose());
  if (loglik) {
    *loglik = -0.5 * (double(n) * dpvi::kLog2Pi + std::log(S.determinant()) +
                      r.dot(S.inverse() * r));
  }
  return post;
}

inline Mat random_spd(dpvi::Rng& rng, int d, double base = 0.3) {
  Mat m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
  return m * m.transpose() + base * Mat::Identity(d, d);
}

inline Vec random_vec(dpvi::Rng& rng, int d) {
  Vec v(d);
  for (int i = 0; i < d; ++i) v(i) = rng.normal();
  return v;
}

inline dpvi::lgssm::PhiParams random_phi(dpvi::Rng& rng, int d, int M) {
  dpvi::lgssm::PhiParams phi;
  phi.m0 = random_vec(rng, d);
  phi.S0 = random_spd(rng, d);
  phi.A.resize(M);
  phi.b.resize(M);
  phi.Q.resize(M);
  for (int m = 0; m < M; ++m) {
    phi.A[m].resize(d, d);  // modest entries keep the chain well-conditioned
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) phi.A[m](i, j) = 0.6 * rng.normal() / double(d);
    phi.b[m] = random_vec(rng, d);
    phi.Q[m] = random_spd(rng, d);
  }
  return phi;
}

}  // namespace testutil
