#include "dpvi/lgssm.hpp"

namespace dpvi::lgssm {

namespace {

void check_chain(int M, size_t h, size_t Jd, size_t Jo) {
  if (h != size_t(M + 1) || Jd != size_t(M + 1) || Jo != size_t(M))
    throw ConfigError("lgssm: inconsistent chain sizes");
}

struct PeelScratch {
  PhiParams phi;
  double logdet_sum = 0;  // logdet S0 + sum_m logdet Qhat_m
  bool ok = false;
};

// Eliminate nodes bottom-up: with Omega_M = Jd[M], each step factors the chain
// as p(x_m..x_M) = p(x_{m+1}..x_M | x_m) p(x_m..), giving Qhat_m = Omega_{m+1}^-1,
// Ahat_m = -Qhat_m Jo[m], Omega_m = Jd[m] - Jo[m]' Qhat_m Jo[m], and the linear
// terms g_m = h[m] + Ahat_m' g_{m+1} with bhat_m = Qhat_m g_{m+1}. Succeeds iff
// J is positive definite.
PeelScratch peel(const NaturalParams& eta, bool strict) {
  const int M = eta.M();
  const int d = eta.dim();
  check_chain(M, eta.h.size(), eta.Jd.size(), eta.Jo.size());
  PeelScratch r;
  r.phi.A.resize(M);
  r.phi.b.resize(M);
  r.phi.Q.resize(M);
  Mat omega = eta.Jd[M];
  Vec g = eta.h[M];
  Eigen::LLT<Mat> llt;
  for (int m = M - 1; m >= 0; --m) {
    if (strict) {
      if (!try_llt(omega, llt)) return r;
    } else {
      llt = safe_llt(omega, "eta_to_phi");
    }
    r.logdet_sum -= logdet_from_llt(llt);
    Mat qhat = llt.solve(Mat::Identity(d, d));
    symmetrize(qhat);
    r.phi.Q[m] = qhat;
    r.phi.A[m] = -llt.solve(eta.Jo[m]);
    r.phi.b[m] = llt.solve(g);
    g = eta.h[m] + r.phi.A[m].transpose() * g;
    Mat om = eta.Jd[m] - eta.Jo[m].transpose() * llt.solve(eta.Jo[m]);
    symmetrize(om);
    omega = std::move(om);
  }
  if (strict) {
    if (!try_llt(omega, llt)) return r;
  } else {
    llt = safe_llt(omega, "eta_to_phi");
  }
  r.logdet_sum -= logdet_from_llt(llt);
  r.phi.S0 = llt.solve(Mat::Identity(d, d));
  symmetrize(r.phi.S0);
  r.phi.m0 = r.phi.S0 * g;
  r.ok = true;
  return r;
}

}  // namespace

NaturalParams phi_to_eta(const PhiParams& phi) {
  const int M = phi.M();
  const int d = phi.dim();
  NaturalParams eta;
  eta.h.assign(M + 1, Vec::Zero(d));
  eta.Jd.assign(M + 1, Mat::Zero(d, d));
  eta.Jo.assign(M, Mat::Zero(d, d));
  Eigen::LLT<Mat> llt0 = safe_llt(phi.S0, "phi_to_eta: S0");
  eta.Jd[0] = llt0.solve(Mat::Identity(d, d));
  symmetrize(eta.Jd[0]);
  eta.h[0] = llt0.solve(phi.m0);
  for (int m = 0; m < M; ++m) {
    Eigen::LLT<Mat> llt = safe_llt(phi.Q[m], "phi_to_eta: Q");
    Mat G = llt.solve(Mat::Identity(d, d));
    symmetrize(G);
    Mat GA = G * phi.A[m];
    Vec Gb = G * phi.b[m];
    eta.Jd[m + 1] += G;
    eta.Jd[m] += phi.A[m].transpose() * GA;
    symmetrize(eta.Jd[m]);
    eta.Jo[m] = -GA;
    eta.h[m + 1] += Gb;
    eta.h[m] -= phi.A[m].transpose() * Gb;
  }
  return eta;
}

PhiParams eta_to_phi(const NaturalParams& eta) {
  PeelScratch r = peel(eta, /*strict=*/false);
  return std::move(r.phi);
}

bool try_eta_to_phi(const NaturalParams& eta, PhiParams& out) {
  PeelScratch r = peel(eta, /*strict=*/true);
  if (r.ok) out = std::move(r.phi);
  return r.ok;
}

Marginals phi_to_moments(const PhiParams& phi) {
  const int M = phi.M();
  Marginals marg;
  marg.m.resize(M + 1);
  marg.S.resize(M + 1);
  marg.C.resize(M);
  marg.m[0] = phi.m0;
  marg.S[0] = symmetrized(phi.S0);
  for (int m = 0; m < M; ++m) {
    marg.C[m] = phi.A[m] * marg.S[m];
    marg.m[m + 1] = phi.A[m] * marg.m[m] + phi.b[m];
    Mat S = marg.C[m] * phi.A[m].transpose() + phi.Q[m];
    symmetrize(S);
    marg.S[m + 1] = std::move(S);
  }
  return marg;
}

Marginals smooth(const NaturalParams& eta) { return phi_to_moments(eta_to_phi(eta)); }

ExpectationParams to_expectation(const Marginals& marg) {
  const int M = marg.M();
  ExpectationParams mu;
  mu.m1 = marg.m;
  mu.M2.resize(M + 1);
  mu.M12.resize(M);
  for (int i = 0; i <= M; ++i)
    mu.M2[i] = marg.S[i] + marg.m[i] * marg.m[i].transpose();
  for (int m = 0; m < M; ++m)
    mu.M12[m] = marg.C[m] + marg.m[m + 1] * marg.m[m].transpose();
  return mu;
}

PhiParams moments_to_phi(const Marginals& marg) {
  const int M = marg.M();
  PhiParams phi;
  phi.m0 = marg.m[0];
  phi.S0 = symmetrized(marg.S[0]);
  phi.A.resize(M);
  phi.b.resize(M);
  phi.Q.resize(M);
  for (int m = 0; m < M; ++m) {
    Eigen::LLT<Mat> llt = safe_llt(marg.S[m], "moments_to_phi: S");
    phi.A[m] = llt.solve(marg.C[m].transpose()).transpose();  // C S^-1
    phi.b[m] = marg.m[m + 1] - phi.A[m] * marg.m[m];
    Mat Q = marg.S[m + 1] - phi.A[m] * marg.C[m].transpose();
    symmetrize(Q);
    phi.Q[m] = std::move(Q);
  }
  return phi;
}

NaturalParams moments_to_eta(const Marginals& marg) {
  return phi_to_eta(moments_to_phi(marg));
}

double log_partition(const NaturalParams& eta) {
  PeelScratch r = peel(eta, /*strict=*/false);
  Marginals marg = phi_to_moments(r.phi);
  const int M = eta.M();
  const int d = eta.dim();
  double s = 0;
  for (int i = 0; i <= M; ++i) s += eta.h[i].dot(marg.m[i]);
  return 0.5 * s + 0.5 * double((M + 1) * d) * kLog2Pi + 0.5 * r.logdet_sum;
}

double dot(const NaturalParams& eta, const ExpectationParams& mu) {
  const int M = eta.M();
  double lin = 0, quad = 0;
  for (int i = 0; i <= M; ++i) {
    lin += eta.h[i].dot(mu.m1[i]);
    quad += eta.Jd[i].cwiseProduct(mu.M2[i]).sum();
  }
  for (int m = 0; m < M; ++m)
    quad += 2.0 * eta.Jo[m].cwiseProduct(mu.M12[m]).sum();
  return lin - 0.5 * quad;
}

NaturalParams diff(const NaturalParams& a, const NaturalParams& b) {
  const int M = a.M();
  if (b.M() != M) throw ConfigError("lgssm diff: size mismatch");
  NaturalParams d;
  d.h.resize(M + 1);
  d.Jd.resize(M + 1);
  d.Jo.resize(M);
  for (int i = 0; i <= M; ++i) {
    d.h[i] = a.h[i] - b.h[i];
    d.Jd[i] = a.Jd[i] - b.Jd[i];
  }
  for (int m = 0; m < M; ++m) d.Jo[m] = a.Jo[m] - b.Jo[m];
  return d;
}

double kl(const NaturalParams& q_eta, const ExpectationParams& q_mu,
          const NaturalParams& p_eta) {
  return dot(diff(q_eta, p_eta), q_mu) - log_partition(q_eta) + log_partition(p_eta);
}

KalmanResult kalman_smoother(const PhiParams& phi, const ObsSeq& obs,
                             const RowVec& H, double sigma2) {
  const int M = phi.M();
  const int d = phi.dim();
  if (obs.idx.size() != obs.y.size()) throw ConfigError("kalman: obs size mismatch");
  if (H.size() != d) throw ConfigError("kalman: H dimension mismatch");
  // filtered moments and one-step predictions
  std::vector<Vec> mf(M + 1), mp(M + 1);
  std::vector<Mat> Sf(M + 1), Sp(M + 1);
  double loglik = 0;
  size_t k = 0;
  mp[0] = phi.m0;
  Sp[0] = symmetrized(phi.S0);
  for (int i = 0; i <= M; ++i) {
    if (i > 0) {
      mp[i] = phi.A[i - 1] * mf[i - 1] + phi.b[i - 1];
      Mat S = phi.A[i - 1] * Sf[i - 1] * phi.A[i - 1].transpose() + phi.Q[i - 1];
      symmetrize(S);
      Sp[i] = std::move(S);
    }
    mf[i] = mp[i];
    Sf[i] = Sp[i];
    while (k < obs.idx.size() && obs.idx[k] == i) {
      Vec Sh = Sf[i] * H.transpose();
      double s = H.dot(Sh) + sigma2;
      if (!(s > 0)) throw NumericalError("kalman: nonpositive innovation variance");
      double r = obs.y[k] - H.dot(mf[i]);
      loglik += -0.5 * (kLog2Pi + std::log(s) + r * r / s);
      Vec K = Sh / s;
      mf[i] += K * r;
      Mat S = Sf[i] - K * Sh.transpose();
      symmetrize(S);
      Sf[i] = std::move(S);
      ++k;
    }
  }
  if (k != obs.idx.size()) throw ConfigError("kalman: obs indices out of range/order");
  // RTS backward pass
  Marginals marg;
  marg.m.resize(M + 1);
  marg.S.resize(M + 1);
  marg.C.resize(M);
  marg.m[M] = mf[M];
  marg.S[M] = Sf[M];
  for (int i = M - 1; i >= 0; --i) {
    Eigen::LLT<Mat> llt = safe_llt(Sp[i + 1], "kalman: predicted cov");
    Mat G = llt.solve(phi.A[i] * Sf[i]).transpose();  // Sf A' Sp^-1
    marg.m[i] = mf[i] + G * (marg.m[i + 1] - mp[i + 1]);
    Mat S = Sf[i] + G * (marg.S[i + 1] - Sp[i + 1]) * G.transpose();
    symmetrize(S);
    marg.S[i] = std::move(S);
    marg.C[i] = marg.S[i + 1] * (llt.solve(phi.A[i] * Sf[i]));  // Cov(x_{i+1}, x_i)
  }
  return {std::move(marg), loglik};
}

}  // namespace dpvi::lgssm
