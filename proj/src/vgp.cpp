#include "dpvi/vgp.hpp"

#include <chrono>
#include <cmath>

#include "dpvi/obs.hpp"

namespace dpvi::vgp {

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

// Per-node quadrature of the drift-mismatch energy and its moment gradients.
struct NodeStats {
  double e = 0;     // 0.5 E||A x + b - f||^2_{Qinv}
  Vec grad_m;       // dE e / dm
  Mat grad_S;       // dE e / dS (Frobenius convention)
  Vec fbar;         // E[f]
  Mat Psi;          // Cov(x, f)
};

struct NodeQuad {
  const Drift& f;
  Mat Qinv;
  const GhRule& gh;
  int d;
  Mat X, F, J, Dd, QD, Phi, Xc;

  NodeQuad(const Drift& drift, const Mat& qinv, const GhRule& rule)
      : f(drift), Qinv(qinv), gh(rule), d(drift.dim()) {}

  NodeStats run(const Mat& A, const Vec& b, const Vec& m, const Mat& S) {
    const long n = gh.z.cols();
    Eigen::LLT<Mat> llt = safe_llt(S, "node covariance");
    X = (Mat(llt.matrixL()) * gh.z).colwise() + m;
    f.eval(X, F);
    f.jac(X, J);
    Dd = (A * X).colwise() + b;
    Dd -= F;  // delta = A x + b - f(x)
    QD = Qinv * Dd;
    NodeStats out;
    out.e = 0.5 * (Dd.cwiseProduct(QD).colwise().sum() * gh.w.asDiagonal())
                      .sum();
    // phi(x) = J_delta' Q delta with J_delta = A - J_f(x)
    Phi.resize(d, n);
    for (long k = 0; k < n; ++k) {
      Eigen::Map<const Mat> Jk(J.col(k).data(), d, d);
      Phi.col(k) = (A - Jk).transpose() * QD.col(k);
    }
    out.grad_m = Phi * gh.w;
    Xc = X.colwise() - m;
    Mat P = Xc * gh.w.asDiagonal() * Phi.transpose();
    Mat G = llt.solve(P);
    out.grad_S = 0.25 * (G + G.transpose());
    out.fbar = F * gh.w;
    out.Psi = Xc * gh.w.asDiagonal() * F.transpose();
    return out;
  }
};

double kl_gaussian(const Vec& a, const Mat& A, const Vec& b, const Mat& B) {
  int d = int(a.size());
  Eigen::LLT<Mat> lb = safe_llt(B, "kl reference");
  Eigen::LLT<Mat> la = safe_llt(A, "kl argument");
  Vec r = b - a;
  double quad = lb.matrixL().solve(r).squaredNorm();
  double tr = lb.solve(A).trace();
  return 0.5 * (tr + quad - d + logdet_from_llt(lb) - logdet_from_llt(la));
}

struct Objective {
  double elbo;
  std::vector<NodeStats> stats;  // M entries, node m = left endpoint
};

Objective objective(const Problem& pb, const State& st,
                    const lgssm::Marginals& marg, NodeQuad& quad) {
  const int M = pb.grid.M();
  Objective out;
  out.stats.resize(M);
  double energy = 0;
  for (int m = 0; m < M; ++m) {
    out.stats[m] = quad.run(st.A[m], st.b[m], marg.m[m], marg.S[m]);
    energy += pb.grid.dt[m] * out.stats[m].e;
  }
  double ll = 0;
  for (size_t i = 0; i < pb.obs_idx.size(); ++i) {
    int g = pb.obs_idx[i];
    double mu = pb.H.dot(marg.m[g]);
    double v = pb.H * marg.S[g] * pb.H.transpose();
    ll += obs::expected_log_lik(pb.obs_y[i], mu, v, pb.sigma2);
  }
  out.elbo = ll - energy - kl_gaussian(st.m0q, st.S0q, pb.m0, pb.S0);
  return out;
}

State initial_state(const Problem& pb) {
  State st;
  Mat A;
  Vec b;
  linearize_at(*pb.drift, pb.m0, A, b);
  st.A.assign(pb.grid.M(), A);
  st.b.assign(pb.grid.M(), b);
  st.m0q = pb.m0;
  st.S0q = pb.S0;
  return st;
}

Adjoints backward_from(const Problem& pb, const State& st,
                       const lgssm::Marginals& marg,
                       const std::vector<NodeStats>& stats) {
  const int d = pb.dim(), M = pb.grid.M();
  Vec hvec = pb.H.transpose();
  Mat hh = hvec * hvec.transpose();
  std::vector<Vec> obs_l(M + 1, Vec::Zero(d));
  std::vector<Mat> obs_P(M + 1, Mat::Zero(d, d));
  for (size_t i = 0; i < pb.obs_idx.size(); ++i) {
    int g = pb.obs_idx[i];
    double mu = pb.H.dot(marg.m[g]);
    double alpha, beta;
    obs::gaussian_grads(pb.obs_y[i], mu, pb.sigma2, alpha, beta);
    obs_l[g] -= alpha * hvec;  // lambda = -dL/dm
    obs_P[g] -= beta * hh;     // -beta = +1/(2 sigma2): upward jump
  }
  Adjoints adj;
  adj.lambda.assign(M + 1, Vec::Zero(d));
  adj.Psi.assign(M + 1, Mat::Zero(d, d));
  adj.lambda[M] = obs_l[M];
  adj.Psi[M] = obs_P[M];
  for (int m = M - 1; m >= 0; --m) {
    double dt = pb.grid.dt[m];
    Mat F = Mat::Identity(d, d) + st.A[m] * dt;
    adj.lambda[m] =
        F.transpose() * adj.lambda[m + 1] + dt * stats[m].grad_m + obs_l[m];
    adj.Psi[m] = symmetrized(F.transpose() * adj.Psi[m + 1] * F) +
                 dt * stats[m].grad_S + obs_P[m];
  }
  return adj;
}

}  // namespace

lgssm::Marginals propagate(const Problem& pb, const State& st) {
  const int M = pb.grid.M();
  lgssm::Marginals marg;
  marg.m.resize(M + 1);
  marg.S.resize(M + 1);
  marg.C.resize(M);
  marg.m[0] = st.m0q;
  marg.S[0] = st.S0q;
  for (int m = 0; m < M; ++m) {
    double dt = pb.grid.dt[m];
    Mat F = Mat::Identity(pb.dim(), pb.dim()) + st.A[m] * dt;
    marg.C[m] = F * marg.S[m];  // Cov(x_{m+1}, x_m) = F S
    marg.m[m + 1] = F * marg.m[m] + st.b[m] * dt;
    marg.S[m + 1] = symmetrized(F * marg.S[m] * F.transpose()) + pb.Qc * dt;
  }
  return marg;
}

double evaluate_elbo(const Problem& pb, const State& st, int gh_order) {
  pb.validate();
  const int d = pb.dim();
  const GhRule& gh = gh_rule(d, auto_order(d, gh_order));
  Mat Qinv = safe_llt(pb.Qc, "Qc").solve(Mat::Identity(d, d));
  NodeQuad quad(*pb.drift, Qinv, gh);
  lgssm::Marginals marg = propagate(pb, st);
  return objective(pb, st, marg, quad).elbo;
}

Adjoints adjoints(const Problem& pb, const State& st, const lgssm::Marginals& marg,
                  int gh_order) {
  const int d = pb.dim(), M = pb.grid.M();
  const GhRule& gh = gh_rule(d, auto_order(d, gh_order));
  Mat Qinv = safe_llt(pb.Qc, "Qc").solve(Mat::Identity(d, d));
  NodeQuad quad(*pb.drift, Qinv, gh);
  std::vector<NodeStats> stats(M);
  for (int m = 0; m < M; ++m)
    stats[m] = quad.run(st.A[m], st.b[m], marg.m[m], marg.S[m]);
  return backward_from(pb, st, marg, stats);
}

InferResult infer(const Problem& pb, const Options& opt, const State* warm) {
  pb.validate();
  const int d = pb.dim(), M = pb.grid.M();
  const GhRule& gh = gh_rule(d, auto_order(d, opt.gh_order));
  Mat I = Mat::Identity(d, d);
  Mat Qinv = safe_llt(pb.Qc, "Qc").solve(I);
  NodeQuad quad(*pb.drift, Qinv, gh);

  InferResult st;
  bool warm_ok = warm && int(warm->A.size()) == M && warm->m0q.size() == d;
  st.state = warm_ok ? *warm : initial_state(pb);
  st.status = "max_iter";

  auto t0 = std::chrono::steady_clock::now();
  double prev = std::numeric_limits<double>::quiet_NaN();
  double best = -std::numeric_limits<double>::infinity();
  State best_state = st.state;
  int decreases = 0;
  for (int it = 0; it <= opt.max_iter; ++it) {
    st.marg = propagate(pb, st.state);
    Objective obj = objective(pb, st.state, st.marg, quad);
    if (!std::isfinite(obj.elbo)) {
      // Overflowed updates are one way this scheme diverges; fall back to the
      // best state seen so far when there is one.
      if (std::isfinite(best)) {
        st.status = "diverged";
        break;
      }
      throw NumericalError("vgp: ELBO not finite");
    }
    st.elbo = obj.elbo;
    st.trace.push_back({it, st.elbo, elapsed_ms(t0)});
    if (st.elbo > best) {
      best = st.elbo;
      best_state = st.state;
    }
    if (std::isfinite(prev)) {
      if (std::abs(st.elbo - prev) <= opt.tol * std::max(1.0, std::abs(prev))) {
        st.status = "converged";
        break;
      }
      decreases = st.elbo < prev ? decreases + 1 : 0;
      if (decreases >= opt.diverge_patience) {
        st.status = "diverged";
        break;
      }
    }
    prev = st.elbo;
    if (it == opt.max_iter) break;  // final evaluation only
    st.iters = it + 1;

    Adjoints adj = backward_from(pb, st.state, st.marg, obj.stats);
    double w = opt.omega;
    for (int m = 0; m < M; ++m) {
      double dt = pb.grid.dt[m];
      const NodeStats& ns = obj.stats[m];
      Eigen::LLT<Mat> lltS = safe_llt(st.marg.S[m], "vgp: marginal covariance");
      Mat T = lltS.solve(ns.Psi).transpose();  // Psi' S^-1
      Mat lhs = I + 2.0 * dt * (pb.Qc * adj.Psi[m + 1]);
      Mat At = lhs.partialPivLu().solve(T - 2.0 * (pb.Qc * adj.Psi[m + 1]));
      st.state.A[m] = (1 - w) * st.state.A[m] + w * At;
      Vec bt = ns.fbar - st.state.A[m] * st.marg.m[m] - pb.Qc * adj.lambda[m + 1];
      st.state.b[m] = (1 - w) * st.state.b[m] + w * bt;
    }
    // initial-state fixed point: S0q^-1 = S0^-1 + 2 Psi_0, m0q = m0 - S0 lambda_0
    Eigen::LLT<Mat> llt0 = safe_llt(pb.S0, "S0");
    Mat P_target = llt0.solve(I) + 2.0 * adj.Psi[0];
    Eigen::LLT<Mat> lltT(symmetrized(P_target));
    if (lltT.info() == Eigen::Success) {
      Mat Pq = safe_llt(st.state.S0q, "S0q").solve(I);
      Mat Pnew = symmetrized((1 - w) * Pq + w * P_target);
      Eigen::LLT<Mat> lltP(Pnew);
      if (lltP.info() == Eigen::Success) st.state.S0q = lltP.solve(I);
    }
    Vec m_target = pb.m0 - pb.S0 * adj.lambda[0];
    st.state.m0q = (1 - w) * st.state.m0q + w * m_target;
  }
  if (st.status == "diverged") {
    st.state = best_state;
    st.marg = propagate(pb, st.state);
    st.elbo = objective(pb, st.state, st.marg, quad).elbo;
  }
  return st;
}

Vec theta_gradient(const Problem& pb, const lgssm::Marginals& marg,
                   const State& st, int gh_order) {
  const int d = pb.dim(), M = pb.grid.M();
  const GhRule& gh = gh_rule(d, auto_order(d, gh_order));
  Mat Qinv = safe_llt(pb.Qc, "Qc").solve(Mat::Identity(d, d));
  const Drift& f = *pb.drift;
  const int P = f.n_params();
  Vec grad = Vec::Zero(P);
  Mat X, F, TG, Dd, QD;
  for (int m = 0; m < M; ++m) {
    Eigen::LLT<Mat> llt = safe_llt(marg.S[m], "node covariance");
    X = (Mat(llt.matrixL()) * gh.z).colwise() + marg.m[m];
    f.eval(X, F);
    f.theta_grad(X, TG);
    Dd = (st.A[m] * X).colwise() + st.b[m];
    Dd -= F;
    QD = (Qinv * Dd) * gh.w.asDiagonal();
    for (int p = 0; p < P; ++p)
      grad(p) +=
          pb.grid.dt[m] * TG.middleRows(long(p) * d, d).cwiseProduct(QD).sum();
  }
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
    out.state = infer(pb, opt.estep, have_state ? &out.state.state : nullptr);
    have_state = true;
    Vec g = theta_gradient(pb, out.state.marg, out.state.state, opt.estep.gh_order);
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
  out.state = infer(pb, opt.estep, have_state ? &out.state.state : nullptr);
  return out;
}

}  // namespace dpvi::vgp
