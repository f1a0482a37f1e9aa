#pragma once

#include <string>
#include <vector>

#include "dpvi/cvi.hpp"
#include "dpvi/problem.hpp"

namespace dpvi::vgp {

// Fixed-point smoothing baseline: the posterior process is approximated by a
// time-varying linear SDE dx = (A_m x + b_m) dt + dbeta with a free Gaussian
// initial state. Marginals follow the same Euler-discretized recursion as the
// prior chain (F_m = I + A_m dt), the objective is the discrete ELBO
//   sum_i E[log p(y_i|x)] - sum_m dt_m * e_m - KL(q0 || p0),
//   e_m = 0.5 E_{q_m} || A_m x + b_m - f(x) ||^2_{Qc^-1},
// and each sweep applies smoothed fixed-point updates driven by the exact
// discrete adjoints of that objective.

struct State {
  Vec m0q;
  Mat S0q;
  std::vector<Mat> A;  // M interval drift matrices
  std::vector<Vec> b;  // M interval offsets
};

// Adjoints of the objective without the initial-state KL term:
// lambda[k] = -dL/dm_k, Psi[k] = -dL/dS_k (Frobenius convention).
struct Adjoints {
  std::vector<Vec> lambda;  // M+1
  std::vector<Mat> Psi;     // M+1
};

struct Options {
  double omega = 0.1;         // smoothing factor of the fixed-point updates
  double tol = 1e-6;          // relative ELBO change declaring convergence
  int max_iter = 1000;        // update sweeps; 0 returns the initial state
  int gh_order = 0;           // quadrature order per axis; 0 = automatic
  int diverge_patience = 20;  // consecutive ELBO decreases before giving up
};

struct InferResult {
  lgssm::Marginals marg;
  State state;
  double elbo = 0;
  std::vector<cvi::TraceRow> trace;
  std::string status;  // "converged", "max_iter", "diverged"
  int iters = 0;
};

// Marginals of the linear state via the discrete forward recursion.
lgssm::Marginals propagate(const Problem& pb, const State& st);

double evaluate_elbo(const Problem& pb, const State& st, int gh_order = 0);

Adjoints adjoints(const Problem& pb, const State& st, const lgssm::Marginals& marg,
                  int gh_order = 0);

InferResult infer(const Problem& pb, const Options& opt,
                  const State* warm = nullptr);

// d/dtheta of the objective at fixed variational state:
// sum_m dt_m E_{q_m}[ (A_m x + b_m - f(x))^T Qc^-1 df/dtheta ].
Vec theta_gradient(const Problem& pb, const lgssm::Marginals& marg,
                   const State& st, int gh_order = 0);

struct LearnOptions {
  Options estep;
  double lr = 0.01;
  int cycles = 200;
  double theta_tol = 1e-4;
  std::vector<int> learn_mask;  // empty = all parameters
};

struct LearnResult {
  std::vector<Vec> theta_trace;
  std::vector<cvi::TraceRow> trace;
  InferResult state;
  std::string status;
};

LearnResult learn(Problem& pb, const LearnOptions& opt);

}  // namespace dpvi::vgp
