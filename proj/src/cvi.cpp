#include "dpvi/cvi.hpp"

#include <chrono>
#include <cmath>

#include "dpvi/obs.hpp"

namespace dpvi::cvi {

namespace {

int auto_order(int d, int requested) {
  if (requested > 0) return requested;
  return d == 1 ? 20 : 10;
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                   t0)
      .count();
}

// Batched pair-quadrature worker; buffers are reused across intervals.
struct PairQuad {
  const Drift& f;
  Mat Qinv;
  const GhRule& gh;
  int d;
  Mat Xt, F, J, FL, Dd, QD, Vm, R, QR, Grad, Xc;

  PairQuad(const Drift& drift, const Mat& qinv, const GhRule& rule)
      : f(drift), Qinv(qinv), gh(rule), d(drift.dim()) {}

  IntervalStats run(const Mat& A, const Vec& b, const Vec& mt, const Mat& St,
                    double dt) {
    const int D = 2 * d;
    const long n = gh.z.cols();
    Eigen::LLT<Mat> llt = safe_llt(St, "pair covariance");
    Xt = (Mat(llt.matrixL()) * gh.z).colwise() + mt;
    auto Xp = Xt.topRows(d);     // x_{m+1}
    auto Xm = Xt.bottomRows(d);  // x_m
    f.eval(Xm, F);
    f.jac(Xm, J);
    FL = (A * Xm).colwise() + b;
    Dd = F - FL;
    QD = Qinv * Dd;
    Vm = (Xp - Xm) / dt;
    R = Vm - FL;
    IntervalStats out;
    Vec vvals = (R.cwiseProduct(QD).colwise().sum() -
                 0.5 * Dd.cwiseProduct(QD).colwise().sum())
                    .transpose();
    out.ev = vvals.dot(gh.w);
    // gradients: dV/dx+ = QD/dt ; dV/dx = -QD/dt - A'QD + (Jf - A)' Q (v - f_L - d)
    R -= Dd;  // now v - f_L - delta
    QR = Qinv * R;
    Grad.resize(D, n);
    Grad.topRows(d) = QD / dt;
    Grad.bottomRows(d) = -QD / dt - A.transpose() * QD;
    // (J_k - A)' QR_k for all nodes at once; J.col(k) holds the d x d
    // jacobian column-major, so entry (i, j) lives in row i + j*d
    for (int j = 0; j < d; ++j)
      for (int i = 0; i < d; ++i)
        Grad.row(d + j).array() +=
            (J.row(long(i) + long(j) * d).array() - A(i, j)) * QR.row(i).array();
    out.g = Grad * gh.w;
    Xc = Xt.colwise() - mt;
    Mat P = Xc * gh.w.asDiagonal() * Grad.transpose();
    Mat G = llt.solve(P);
    out.G = 0.25 * (G + G.transpose());  // 0.5 * sym(St^-1 P)
    return out;
  }
};

struct ThetaQuad {
  const Drift& f;
  Mat Qinv;
  const GhRule& gh;
  int d;
  Mat Xt, F, TG, R, QR;

  ThetaQuad(const Drift& drift, const Mat& qinv, const GhRule& rule)
      : f(drift), Qinv(qinv), gh(rule), d(drift.dim()) {}

  void accumulate(const Vec& mt, const Mat& St, double dt, Vec& grad) {
    Eigen::LLT<Mat> llt = safe_llt(St, "pair covariance");
    Xt = (Mat(llt.matrixL()) * gh.z).colwise() + mt;
    auto Xp = Xt.topRows(d);
    auto Xm = Xt.bottomRows(d);
    f.eval(Xm, F);
    f.theta_grad(Xm, TG);
    R = (Xp - Xm) / dt - F;
    QR = (Qinv * R) * gh.w.asDiagonal();
    const int P = f.n_params();
    for (int p = 0; p < P; ++p)
      grad(p) += dt * TG.middleRows(long(p) * d, d).cwiseProduct(QR).sum();
  }
};

Vec pair_mean(const lgssm::Marginals& marg, int m, int d) {
  Vec mt(2 * d);
  mt.head(d) = marg.m[m + 1];
  mt.tail(d) = marg.m[m];
  return mt;
}

Mat pair_cov(const lgssm::Marginals& marg, int m, int d) {
  Mat St(2 * d, 2 * d);
  St.topLeftCorner(d, d) = marg.S[m + 1];
  St.topRightCorner(d, d) = marg.C[m];
  St.bottomLeftCorner(d, d) = marg.C[m].transpose();
  St.bottomRightCorner(d, d) = marg.S[m];
  return St;
}

struct ElboParts {
  double elbo = 0;
  std::vector<IntervalStats> stats;
};

// One sweep: quadrature on every interval + full ELBO of the current state.
ElboParts full_pass(const Problem& pb, PairQuad& quad,
                    const lgssm::NaturalParams& eta, const lgssm::NaturalParams& prior,
                    const lgssm::Marginals& marg, const Linearization& lin) {
  const int d = pb.dim(), M = pb.grid.M();
  ElboParts out;
  out.stats.resize(M);
  double evdt = 0;
  for (int m = 0; m < M; ++m) {
    out.stats[m] = quad.run(lin.A[m], lin.b[m], pair_mean(marg, m, d),
                            pair_cov(marg, m, d), pb.grid.dt[m]);
    evdt += out.stats[m].ev * pb.grid.dt[m];
  }
  double ll = 0;
  for (size_t i = 0; i < pb.obs_idx.size(); ++i) {
    int g = pb.obs_idx[i];
    double mu = pb.H.dot(marg.m[g]);
    double v = pb.H * marg.S[g] * pb.H.transpose();
    ll += obs::expected_log_lik(pb.obs_y[i], mu, v, pb.sigma2);
  }
  double kl = lgssm::kl(eta, lgssm::to_expectation(marg), prior);
  out.elbo = -kl + ll + evdt;
  return out;
}

Linearization taylor_at_prior_mean(const Problem& pb) {
  Linearization lin;
  Mat A;
  Vec b;
  linearize_at(*pb.drift, pb.m0, A, b);
  lin.A.assign(pb.grid.M(), A);
  lin.b.assign(pb.grid.M(), b);
  return lin;
}

void zero_sites(const Problem& pb, SparseSites& sp, DenseSites& dn) {
  const int d = pb.dim(), M = pb.grid.M();
  sp.l1.assign(pb.obs_idx.size(), 0.0);
  sp.l2.assign(pb.obs_idx.size(), 0.0);
  dn.l.assign(M, Vec::Zero(2 * d));
  dn.L.assign(M, Mat::Zero(2 * d, 2 * d));
}

}  // namespace

double potential(const Drift& f, const Mat& Qc_inv, const Mat& A, const Vec& b,
                 const Vec& x_next, const Vec& x, double dt, Vec* g_next,
                 Vec* g_cur) {
  Vec fp = f.eval1(x);
  Vec fl = A * x + b;
  Vec delta = fp - fl;
  Vec v = (x_next - x) / dt;
  Vec qd = Qc_inv * delta;
  double out = (v - fl).dot(qd) - 0.5 * delta.dot(qd);
  if (g_next) *g_next = qd / dt;
  if (g_cur) {
    Vec qr = Qc_inv * (v - fl - delta);
    *g_cur = -qd / dt - A.transpose() * qd + (f.jac1(x) - A).transpose() * qr;
  }
  return out;
}

IntervalStats expected_potential(const Drift& f, const Mat& Qc_inv, const Mat& A,
                                 const Vec& b, const Vec& pair_mean,
                                 const Mat& pair_cov, double dt, const GhRule& gh) {
  PairQuad quad(f, Qc_inv, gh);
  return quad.run(A, b, pair_mean, pair_cov, dt);
}

lgssm::NaturalParams prior_eta(const Problem& pb, const Linearization& lin) {
  return lgssm::phi_to_eta(
      discretize(pb.m0, pb.S0, lin.A, lin.b, pb.Qc, pb.grid));
}

lgssm::NaturalParams assemble(const lgssm::NaturalParams& prior, const Problem& pb,
                              const SparseSites& sp, const DenseSites& dn) {
  const int d = pb.dim(), M = pb.grid.M();
  lgssm::NaturalParams eta = prior;
  Vec hvec = pb.H.transpose();
  Mat hh = hvec * hvec.transpose();
  for (size_t i = 0; i < pb.obs_idx.size(); ++i) {
    int g = pb.obs_idx[i];
    eta.h[g] += sp.l1[i] * hvec;
    eta.Jd[g] += (-2.0 * sp.l2[i]) * hh;
  }
  for (int m = 0; m < M; ++m) {
    double dt = pb.grid.dt[m];
    eta.h[m + 1] += dt * dn.l[m].head(d);
    eta.h[m] += dt * dn.l[m].tail(d);
    eta.Jd[m + 1] += -2.0 * dt * dn.L[m].topLeftCorner(d, d);
    eta.Jd[m] += -2.0 * dt * dn.L[m].bottomRightCorner(d, d);
    eta.Jo[m] += -2.0 * dt * dn.L[m].topRightCorner(d, d);
  }
  return eta;
}

Linearization linearize_posterior(const Drift& f, const lgssm::Marginals& marg,
                                  const GhRule& gh) {
  const int M = marg.M();
  Linearization lin;
  lin.A.resize(M);
  lin.b.resize(M);
  Mat X, F;
  for (int m = 0; m < M; ++m) {
    Eigen::LLT<Mat> llt = safe_llt(marg.S[m], "linearize_posterior");
    X = (Mat(llt.matrixL()) * gh.z).colwise() + marg.m[m];
    f.eval(X, F);
    Vec fbar = F * gh.w;
    Mat Psi = (X.colwise() - marg.m[m]) * gh.w.asDiagonal() * F.transpose();
    lin.A[m] = llt.solve(Psi).transpose();  // Psi' S^-1
    lin.b[m] = fbar - lin.A[m] * marg.m[m];
  }
  return lin;
}

void rebase(const Problem& pb, const Linearization& from, const Linearization& to,
            DenseSites& dn) {
  const int d = pb.dim(), M = pb.grid.M();
  Mat I = Mat::Identity(d, d);
  Mat Qinv = safe_llt(pb.Qc, "rebase: Qc").solve(I);
  for (int m = 0; m < M; ++m) {
    double dt = pb.grid.dt[m];
    Mat G = Qinv / dt;  // (Qc dt)^-1
    Mat Ao = I + from.A[m] * dt, An = I + to.A[m] * dt;
    Vec bo = from.b[m] * dt, bn = to.b[m] * dt;
    Vec gbo = G * bo, gbn = G * bn;
    dn.l[m].head(d) += (gbo - gbn) / dt;
    dn.l[m].tail(d) += (An.transpose() * gbn - Ao.transpose() * gbo) / dt;
    Mat dUR = 0.5 * (G * (Ao - An)) / dt;
    dn.L[m].topRightCorner(d, d) += dUR;
    dn.L[m].bottomLeftCorner(d, d) += dUR.transpose();
    dn.L[m].bottomRightCorner(d, d) +=
        0.5 * (An.transpose() * G * An - Ao.transpose() * G * Ao) / dt;
  }
}

double evaluate_elbo(const Problem& pb, const Linearization& lin,
                     const SparseSites& sp, const DenseSites& dn, int gh_order) {
  pb.validate();
  const int d = pb.dim();
  const GhRule& gh = gh_rule(2 * d, auto_order(d, gh_order));
  Mat Qinv = safe_llt(pb.Qc, "Qc").solve(Mat::Identity(d, d));
  PairQuad quad(*pb.drift, Qinv, gh);
  lgssm::NaturalParams prior = prior_eta(pb, lin);
  lgssm::NaturalParams eta = assemble(prior, pb, sp, dn);
  lgssm::Marginals marg = lgssm::smooth(eta);
  return full_pass(pb, quad, eta, prior, marg, lin).elbo;
}

InferResult infer(const Problem& pb, const Options& opt, const InferResult* warm) {
  pb.validate();
  const int d = pb.dim(), M = pb.grid.M();
  double tol = opt.tol;
  int max_outer = opt.max_outer;
  int max_total = opt.max_total_inner;
  if (std::isinf(tol)) {  // single-sweep mode
    tol = 0;
    max_total = 1;
    max_outer = 1;
  }
  const int order = auto_order(d, opt.gh_order);
  const GhRule& ghp = gh_rule(2 * d, order);
  const GhRule& ghl = gh_rule(d, order);
  Mat Qinv = safe_llt(pb.Qc, "Qc").solve(Mat::Identity(d, d));
  PairQuad quad(*pb.drift, Qinv, ghp);

  InferResult st;
  bool warm_ok = warm && int(warm->sparse.l1.size()) == pb.n_obs() &&
                 int(warm->dense.l.size()) == M && int(warm->lin.A.size()) == M;
  if (warm_ok) {
    st.sparse = warm->sparse;
    st.dense = warm->dense;
    st.lin = warm->lin;
  } else {
    st.lin = taylor_at_prior_mean(pb);
    zero_sites(pb, st.sparse, st.dense);
  }
  lgssm::NaturalParams prior = prior_eta(pb, st.lin);
  lgssm::NaturalParams eta = assemble(prior, pb, st.sparse, st.dense);
  lgssm::PhiParams phi;
  if (!lgssm::try_eta_to_phi(eta, phi)) {
    if (!warm_ok) throw NumericalError("cvi: initial chain not positive definite");
    st.lin = taylor_at_prior_mean(pb);
    zero_sites(pb, st.sparse, st.dense);
    prior = prior_eta(pb, st.lin);
    eta = assemble(prior, pb, st.sparse, st.dense);
    if (!lgssm::try_eta_to_phi(eta, phi))
      throw NumericalError("cvi: initial chain not positive definite");
  }

  auto t0 = std::chrono::steady_clock::now();
  st.status = "max_iter";
  double prev_outer = std::numeric_limits<double>::quiet_NaN();
  bool budget_hit = false;
  for (int outer = 0; outer < max_outer && !budget_hit; ++outer) {
    st.outer = outer + 1;
    double prev = std::numeric_limits<double>::quiet_NaN();
    int updates = 0;
    bool segment_converged = false;
    for (int k = 0; k < opt.max_inner; ++k) {
      st.marg = lgssm::phi_to_moments(phi);
      ElboParts parts = full_pass(pb, quad, eta, prior, st.marg, st.lin);
      if (!std::isfinite(parts.elbo)) throw NumericalError("cvi: ELBO not finite");
      st.elbo = parts.elbo;
      if (st.trace.empty() || st.trace.back().iter != st.inner_total)
        st.trace.push_back({st.inner_total, st.elbo, elapsed_ms(t0)});
      if (updates > 0 && std::isfinite(prev) &&
          std::abs(st.elbo - prev) <= tol * std::max(1.0, std::abs(prev))) {
        segment_converged = true;
        break;
      }
      prev = st.elbo;
      if (max_total > 0 && st.inner_total >= max_total) {
        budget_hit = true;
        break;
      }
      // damped site update with positive-definiteness backoff
      auto blend_obs = [&](SparseSites& tsp, double r) {
        for (size_t i = 0; i < pb.obs_idx.size(); ++i) {
          double mu = pb.H.dot(st.marg.m[pb.obs_idx[i]]);
          double alpha, beta;
          obs::gaussian_grads(pb.obs_y[i], mu, pb.sigma2, alpha, beta);
          tsp.l1[i] = (1 - r) * tsp.l1[i] + r * (alpha - 2 * beta * mu);
          tsp.l2[i] = (1 - r) * tsp.l2[i] + r * beta;
        }
      };
      double rho = opt.rho;
      bool accepted = false;
      for (int attempt = 0; attempt <= 10; ++attempt) {
        SparseSites tsp = st.sparse;
        blend_obs(tsp, rho);
        DenseSites tdn = st.dense;
        for (int m = 0; m < M; ++m) {
          const IntervalStats& s = parts.stats[m];
          Vec mt = pair_mean(st.marg, m, d);
          tdn.L[m] = (1 - rho) * tdn.L[m] + rho * s.G;
          tdn.l[m] = (1 - rho) * tdn.l[m] + rho * (s.g - 2.0 * s.G * mt);
        }
        lgssm::NaturalParams teta = assemble(prior, pb, tsp, tdn);
        lgssm::PhiParams tphi;
        if (lgssm::try_eta_to_phi(teta, tphi)) {
          st.sparse = std::move(tsp);
          st.dense = std::move(tdn);
          eta = std::move(teta);
          phi = std::move(tphi);
          accepted = true;
          break;
        }
        rho *= 0.5;
      }
      bool rescued = false;
      if (!accepted) {
        // a stiff drift can make the initial linearized marginals so wide
        // that the drift-site update is infeasible at any damping; the
        // observation update alone always adds positive precision, so apply
        // it by itself and let the contracted marginals repair the drift
        // statistics on the next round
        SparseSites tsp = st.sparse;
        blend_obs(tsp, opt.rho);
        lgssm::NaturalParams teta = assemble(prior, pb, tsp, st.dense);
        lgssm::PhiParams tphi;
        if (lgssm::try_eta_to_phi(teta, tphi)) {
          st.sparse = std::move(tsp);
          eta = std::move(teta);
          phi = std::move(tphi);
          accepted = true;
          rescued = true;
        }
      }
      if (!accepted)
        throw NumericalError("cvi: update rejected after 10 step halvings");
      ++st.inner_total;
      ++updates;
      // an observation-only round must not satisfy the convergence check
      if (rescued) prev = std::numeric_limits<double>::quiet_NaN();
      if (opt.relin_every > 0 && updates >= opt.relin_every) break;
    }
    if (budget_hit) break;
    if ((segment_converged || opt.relin_every > 0) && std::isfinite(prev_outer) &&
        std::abs(st.elbo - prev_outer) <= tol * std::max(1.0, std::abs(prev_outer))) {
      st.status = "converged";
      break;
    }
    prev_outer = st.elbo;
    if (outer + 1 >= max_outer) break;
    Linearization nl = linearize_posterior(*pb.drift, st.marg, ghl);
    rebase(pb, st.lin, nl, st.dense);
    st.lin = std::move(nl);
    prior = prior_eta(pb, st.lin);
    eta = assemble(prior, pb, st.sparse, st.dense);
    if (!lgssm::try_eta_to_phi(eta, phi))
      throw NumericalError("cvi: relinearized chain not positive definite");
  }
  // Leave the returned state self-consistent on every exit path (an update can
  // be the last thing that happened when a segment ends on a budget).
  st.marg = lgssm::phi_to_moments(phi);
  ElboParts parts = full_pass(pb, quad, eta, prior, st.marg, st.lin);
  st.elbo = parts.elbo;
  if (st.trace.empty() || st.trace.back().iter != st.inner_total)
    st.trace.push_back({st.inner_total, st.elbo, elapsed_ms(t0)});
  st.eta_q = std::move(eta);
  return st;
}

Vec theta_gradient(const Problem& pb, const lgssm::Marginals& marg, int gh_order) {
  const int d = pb.dim(), M = pb.grid.M();
  const GhRule& gh = gh_rule(2 * d, auto_order(d, gh_order));
  Mat Qinv = safe_llt(pb.Qc, "Qc").solve(Mat::Identity(d, d));
  ThetaQuad quad(*pb.drift, Qinv, gh);
  Vec grad = Vec::Zero(pb.drift->n_params());
  for (int m = 0; m < M; ++m)
    quad.accumulate(pair_mean(marg, m, d), pair_cov(marg, m, d), pb.grid.dt[m],
                    grad);
  return grad;
}

LearnResult learn(Problem& pb, const LearnOptions& opt) {
  pb.validate();
  const int P = pb.drift->n_params();
  std::vector<int> mask = opt.learn_mask;
  if (mask.empty())
    for (int p = 0; p < P; ++p) mask.push_back(p);
  for (int p : mask)
    if (p < 0 || p >= P) throw ConfigError("learn: mask index out of range");
  Vec ma = Vec::Zero(P), va = Vec::Zero(P);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  LearnResult out;
  out.status = "max_iter";
  auto t0 = std::chrono::steady_clock::now();
  bool have_state = false;
  for (int c = 0; c < opt.cycles; ++c) {
    out.state = infer(pb, opt.estep, have_state ? &out.state : nullptr);
    have_state = true;
    Vec g = theta_gradient(pb, out.state.marg, opt.estep.gh_order);
    Vec th = pb.drift->theta();
    double t = double(c + 1);
    double max_step = 0;
    for (int p : mask) {
      ma(p) = b1 * ma(p) + (1 - b1) * g(p);
      va(p) = b2 * va(p) + (1 - b2) * g(p) * g(p);
      double mhat = ma(p) / (1 - std::pow(b1, t));
      double vhat = va(p) / (1 - std::pow(b2, t));
      double step = opt.lr * mhat / (std::sqrt(vhat) + eps);
      th(p) += step;
      max_step = std::max(max_step, std::abs(step));
    }
    pb.drift->set_theta(th);
    out.theta_trace.push_back(th);
    out.trace.push_back({c, out.state.elbo, elapsed_ms(t0)});
    if (max_step < opt.theta_tol) {
      out.status = "converged";
      break;
    }
  }
  out.state = infer(pb, opt.estep, have_state ? &out.state : nullptr);
  return out;
}

}  // namespace dpvi::cvi
