#include "dpvi/mc.hpp"

#include <algorithm>
#include <cmath>

#include "dpvi/obs.hpp"

namespace dpvi::mc {

namespace {

// Per-node observation index lists.
std::vector<std::vector<int>> obs_at(const Problem& pb) {
  std::vector<std::vector<int>> at(pb.grid.M() + 1);
  for (size_t i = 0; i < pb.obs_idx.size(); ++i)
    at[pb.obs_idx[i]].push_back(int(i));
  return at;
}

// Low-variance systematic resampling of `n` ancestors from normalized `w`.
void systematic_resample(const Vec& w, std::vector<int>& anc, int n, Rng& rng) {
  double u = rng.uniform() / n;
  double cum = w(0);
  int j = 0;
  for (int i = 0; i < n; ++i) {
    double target = u + double(i) / n;
    while (cum < target && j + 1 < int(w.size())) cum += w(++j);
    anc[i] = j;
  }
}

int sample_index(const Vec& unnormalized, Rng& rng) {
  double u = rng.uniform() * unnormalized.sum();
  double cum = 0;
  for (int p = 0; p < int(unnormalized.size()); ++p) {
    cum += unnormalized(p);
    if (u <= cum) return p;
  }
  return int(unnormalized.size()) - 1;
}

struct SweepWorkspace {
  Mat X, Xn, F, mean;
  Vec logw, w, asw;
  std::vector<Mat> states;             // per node, d x N
  std::vector<std::vector<int>> ancs;  // per interval
};

// One conditional sweep. N-1 free particles; slot N-1 pins the reference path.
// The reference slot gets a fresh ancestor each interval, sampled from the
// pre-resampling weights times the (untempered) transition density to the next
// reference point.
void sweep(const Problem& pb, double temper, int N, double resample_frac,
           Mat& ref, Rng& rng, SweepWorkspace& ws) {
  const int d = pb.dim(), M = pb.grid.M();
  if (N < 2) throw ConfigError("cpf: need at least two particles");
  auto at = obs_at(pb);
  Mat L0 = safe_llt(pb.S0, "S0").matrixL();
  Eigen::LLT<Mat> lq = safe_llt(pb.Qc, "Qc");
  Mat Lq = lq.matrixL();
  Mat Qinv = lq.solve(Mat::Identity(d, d));

  ws.states.assign(M + 1, Mat());
  ws.ancs.assign(M, std::vector<int>(N));
  ws.X.resize(d, N);
  Vec z(d);
  for (int i = 0; i < N - 1; ++i) {
    for (int k = 0; k < d; ++k) z(k) = rng.normal();
    ws.X.col(i) = pb.m0 + L0 * z;
  }
  ws.X.col(N - 1) = ref.col(0);
  ws.logw = Vec::Zero(N);
  for (int i : at[0])
    for (int p = 0; p < N; ++p)
      ws.logw(p) += temper * obs::log_lik(pb.obs_y[i],
                                          pb.H.dot(ws.X.col(p)), pb.sigma2);
  ws.states[0] = ws.X;

  for (int m = 0; m < M; ++m) {
    double dt = pb.grid.dt[m];
    double mx = ws.logw.maxCoeff();
    ws.w = (ws.logw.array() - mx).exp();
    ws.w /= ws.w.sum();
    double ess = 1.0 / ws.w.squaredNorm();
    std::vector<int>& anc = ws.ancs[m];
    bool resampled = ess < resample_frac * N;
    if (resampled) {
      systematic_resample(ws.w, anc, N - 1, rng);
    } else {
      for (int i = 0; i < N - 1; ++i) anc[i] = i;
    }
    // drift at the current particles, shared by propagation and ancestor draw
    pb.drift->eval(ws.X, ws.F);
    ws.mean = ws.X + dt * ws.F;
    // ancestor sampling for the reference slot
    ws.asw.resize(N);
    for (int p = 0; p < N; ++p) {
      Vec r = ref.col(m + 1) - ws.mean.col(p);
      ws.asw(p) = std::log(ws.w(p)) - 0.5 * r.dot(Qinv * r) / dt;
    }
    ws.asw = (ws.asw.array() - ws.asw.maxCoeff()).exp();
    anc[N - 1] = sample_index(ws.asw, rng);
    // propagate
    ws.Xn.resize(d, N);
    double sdt = std::sqrt(dt);
    for (int i = 0; i < N - 1; ++i) {
      for (int k = 0; k < d; ++k) z(k) = rng.normal();
      ws.Xn.col(i) = ws.mean.col(anc[i]) + sdt * (Lq * z);
    }
    ws.Xn.col(N - 1) = ref.col(m + 1);
    // weights: reset after resampling, otherwise carried from the ancestor
    Vec logw_new(N);
    if (resampled) {
      logw_new.setZero();
    } else {
      for (int i = 0; i < N; ++i) logw_new(i) = ws.logw(anc[i]);
    }
    for (int i : at[m + 1])
      for (int p = 0; p < N; ++p)
        logw_new(p) += temper * obs::log_lik(pb.obs_y[i],
                                             pb.H.dot(ws.Xn.col(p)), pb.sigma2);
    ws.logw = logw_new;
    ws.X = ws.Xn;
    ws.states[m + 1] = ws.X;
  }

  // draw one trajectory and back-track its ancestry into `ref`
  ws.w = (ws.logw.array() - ws.logw.maxCoeff()).exp();
  int idx = sample_index(ws.w, rng);
  for (int m = M; m >= 0; --m) {
    ref.col(m) = ws.states[m].col(idx);
    if (m > 0) idx = ws.ancs[m - 1][idx];
  }
}

// Simulate one full prior path on the problem grid (initial draw included).
Mat prior_path(const Problem& pb, Rng& rng) {
  const int d = pb.dim(), M = pb.grid.M();
  Mat path(d, M + 1);
  Vec z(d);
  Mat L0 = safe_llt(pb.S0, "S0").matrixL();
  for (int k = 0; k < d; ++k) z(k) = rng.normal();
  path.col(0) = pb.m0 + L0 * z;
  Mat Lq = Mat(safe_llt(pb.Qc, "Qc").matrixL());
  Mat F(d, 1);
  for (int m = 0; m < M; ++m) {
    double dt = pb.grid.dt[m];
    Mat x = path.col(m);
    pb.drift->eval(x, F);
    for (int k = 0; k < d; ++k) z(k) = rng.normal();
    path.col(m + 1) = path.col(m) + dt * F.col(0) + std::sqrt(dt) * (Lq * z);
  }
  return path;
}

}  // namespace

void cpf_sweep(const Problem& pb, double temper, int n_particles, Mat& ref,
               Rng& rng) {
  SweepWorkspace ws;
  sweep(pb, temper, n_particles, 0.5, ref, rng, ws);
}

double path_loglik(const Problem& pb, const Mat& path) {
  double ll = 0;
  for (size_t i = 0; i < pb.obs_idx.size(); ++i)
    ll += obs::log_lik(pb.obs_y[i], pb.H.dot(path.col(pb.obs_idx[i])),
                       pb.sigma2);
  return ll;
}

SmootherResult cpf_smoother(const Problem& pb, const CpfOptions& opt, Rng& rng) {
  pb.validate();
  const int d = pb.dim(), M = pb.grid.M();
  if (opt.n_sweeps <= opt.burn_in)
    throw ConfigError("cpf: n_sweeps must exceed burn_in");
  Mat ref = prior_path(pb, rng);
  SweepWorkspace ws;
  std::vector<Vec> sum(M + 1, Vec::Zero(d));
  std::vector<Mat> sum2(M + 1, Mat::Zero(d, d));
  int n = 0;
  for (int s = 0; s < opt.n_sweeps; ++s) {
    sweep(pb, opt.temper, opt.n_particles, opt.resample_frac, ref, rng, ws);
    if (s < opt.burn_in) continue;
    for (int k = 0; k <= M; ++k) {
      sum[k] += ref.col(k);
      sum2[k] += ref.col(k) * ref.col(k).transpose();
    }
    ++n;
  }
  SmootherResult out;
  out.n_samples = n;
  out.mean.resize(M + 1);
  out.cov.resize(M + 1);
  for (int k = 0; k <= M; ++k) {
    out.mean[k] = sum[k] / n;
    out.cov[k] =
        symmetrized(sum2[k] / n - out.mean[k] * out.mean[k].transpose());
  }
  return out;
}

AisResult ais_evidence(const Problem& pb, const AisOptions& opt, Rng& rng) {
  pb.validate();
  if (opt.levels < 1) throw ConfigError("ais: need at least one level");
  if (opt.sweeps_per_level < 1)
    throw ConfigError("ais: need at least one sweep per level");
  AisResult out;
  for (int r = 0; r < opt.replicates; ++r) {
    Rng sub = rng.split(uint64_t(r) + 1);
    Mat ref = prior_path(pb, sub);
    SweepWorkspace ws;
    double logw = 0;
    double tau_prev = 0;
    for (int j = 1; j <= opt.levels; ++j) {
      double tau = std::pow(double(j) / opt.levels, opt.power);
      logw += (tau - tau_prev) * path_loglik(pb, ref);
      tau_prev = tau;
      if (j < opt.levels)
        for (int s = 0; s < opt.sweeps_per_level; ++s)
          sweep(pb, tau, opt.n_particles, 0.5, ref, sub, ws);
    }
    out.logz_r.push_back(logw);
  }
  // each replicate weight is unbiased for the evidence, so combine in
  // weight space: logz = log of the average of exp(logz_r)
  double mx = *std::max_element(out.logz_r.begin(), out.logz_r.end());
  double s = 0;
  for (double v : out.logz_r) s += std::exp(v - mx);
  out.logz = mx + std::log(s / double(opt.replicates));
  return out;
}

}  // namespace dpvi::mc
