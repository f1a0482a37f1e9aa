#pragma once

#include <string>
#include <vector>

#include "dpvi/gauss_hermite.hpp"
#include "dpvi/lgssm.hpp"
#include "dpvi/problem.hpp"

namespace dpvi::cvi {

// Natural-parameter sites. Sparse sites (one per observation) act on the
// projected state u = H x at the observation node; dense sites (one per
// interval) act on the pair [x_{m+1}; x_m] and are scaled by dt_m when
// folded into the chain, so their fixed point is dt-free.
struct SparseSites {
  std::vector<double> l1, l2;
};

struct DenseSites {
  std::vector<Vec> l;  // 2d
  std::vector<Mat> L;  // 2d x 2d, symmetric
};

// Per-interval linear surrogate drift f_L(x) = A x + b.
struct Linearization {
  std::vector<Mat> A;
  std::vector<Vec> b;
};

// Log-density ratio rate of the nonlinear vs the linear transition kernel:
// V = <v - f_L(x), f_p(x) - f_L(x)>_{Qc^-1} - 0.5 |f_p(x) - f_L(x)|^2_{Qc^-1}
// with v = (x_next - x) / dt, so that V * dt equals
// log N(x_next; x + f_p dt, Qc dt) - log N(x_next; x + f_L dt, Qc dt).
double potential(const Drift& f, const Mat& Qc_inv, const Mat& A, const Vec& b,
                 const Vec& x_next, const Vec& x, double dt,
                 Vec* g_next = nullptr, Vec* g_cur = nullptr);

// One quadrature pass over an interval: E_q[V], the pair-mean gradient g,
// and the Stein-identity estimate G = 0.5 sym(Cov^-1 E[(xt - mt) grad V'])
// of half the expected Hessian. (g, G) define the dense site target
// L = G, l = g - 2 G mt.
struct IntervalStats {
  double ev = 0;
  Vec g;
  Mat G;
};
IntervalStats expected_potential(const Drift& f, const Mat& Qc_inv, const Mat& A,
                                 const Vec& b, const Vec& pair_mean,
                                 const Mat& pair_cov, double dt, const GhRule& gh);

// Prior chain natural parameters for a given linearization.
lgssm::NaturalParams prior_eta(const Problem& pb, const Linearization& lin);

// prior + sparse sites at observation nodes + dt-scaled dense pair sites.
lgssm::NaturalParams assemble(const lgssm::NaturalParams& prior, const Problem& pb,
                              const SparseSites& sp, const DenseSites& dn);

// Statistical linearization of the drift under the posterior marginals
// (left node of each interval): A = Psi' S^-1, b = E[f] - A m.
Linearization linearize_posterior(const Drift& f, const lgssm::Marginals& marg,
                                  const GhRule& gh);

// Rewrites dense sites so the assembled posterior is unchanged when the
// linearization moves from `from` to `to`.
void rebase(const Problem& pb, const Linearization& from, const Linearization& to,
            DenseSites& dn);

struct Options {
  double rho = 0.5;
  double tol = 1e-6;
  int max_inner = 500;
  int max_outer = 20;
  int max_total_inner = 0;  // 0: no global budget
  int gh_order = 0;         // 0: 20 nodes per axis if dim==1 else 10
  int relin_every = 0;      // relinearize every k inner steps; 0: on convergence
};

struct TraceRow {
  int iter;
  double elbo;
  double wall_ms;
};

struct InferResult {
  lgssm::Marginals marg;
  lgssm::NaturalParams eta_q;
  SparseSites sparse;
  DenseSites dense;
  Linearization lin;
  double elbo = 0;
  std::vector<TraceRow> trace;
  std::string status;  // "converged" | "max_iter"
  int inner_total = 0;
  int outer = 0;
};

// Full ELBO of the state (prior linearization lin, sites sp/dn):
// -KL(q || p_L) + sum_i E_q[log p(y_i|u_i)] + sum_m E_q[V_m] dt_m.
double evaluate_elbo(const Problem& pb, const Linearization& lin,
                     const SparseSites& sp, const DenseSites& dn, int gh_order = 0);

InferResult infer(const Problem& pb, const Options& opt,
                  const InferResult* warm = nullptr);

// Explicit parameter gradient of the ELBO at fixed sites (the chain score):
// sum_m E_q[(v - f_p)' Qc^-1 df/dtheta] dt_m.
Vec theta_gradient(const Problem& pb, const lgssm::Marginals& marg, int gh_order = 0);

struct LearnOptions {
  Options estep;
  double lr = 0.1;
  int cycles = 200;
  double theta_tol = 1e-4;
  std::vector<int> learn_mask;  // parameter indices to update; empty: all
};

struct LearnResult {
  std::vector<Vec> theta_trace;  // theta after each cycle's update
  std::vector<TraceRow> trace;   // (cycle, elbo after E-step, wall)
  InferResult state;
  std::string status;
};

// Variational EM: E-step = infer to tolerance (warm-started), M-step = one
// bias-corrected Adam ascent step per cycle on the learnable parameters.
LearnResult learn(Problem& pb, const LearnOptions& opt);

}  // namespace dpvi::cvi
