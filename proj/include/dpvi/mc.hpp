#pragma once

#include <vector>

#include "dpvi/problem.hpp"
#include "dpvi/rng.hpp"

namespace dpvi::mc {

// Conditional particle filter with ancestor sampling and adaptive systematic
// resampling, used both as a reference posterior sampler and as the Markov
// kernel inside the annealed evidence estimator. Proposals are the prior
// Euler transitions; `temper` in [0, 1] raises every likelihood factor to
// that power.

struct CpfOptions {
  int n_particles = 200;
  int n_sweeps = 100;
  int burn_in = 20;
  double resample_frac = 0.5;  // resample when ESS < frac * n
  double temper = 1.0;
};

struct SmootherResult {
  std::vector<Vec> mean;  // M+1 node means
  std::vector<Mat> cov;   // M+1 node covariances
  int n_samples = 0;
};

// One conditional sweep: refreshes `ref` (d x (M+1)) with a trajectory drawn
// from the invariant conditional kernel at the given temperature.
void cpf_sweep(const Problem& pb, double temper, int n_particles, Mat& ref,
               Rng& rng);

// Iterated conditional sweeps; sample moments over the post-burn-in refs.
SmootherResult cpf_smoother(const Problem& pb, const CpfOptions& opt, Rng& rng);

// Full-data log likelihood of one latent path.
double path_loglik(const Problem& pb, const Mat& path);

struct AisOptions {
  int levels = 800;       // annealing levels; 1 = single-level importance sampling
  int n_particles = 400;  // particles in each bridging sweep
  int replicates = 3;
  double power = 4.0;        // temperature schedule tau_j = (j/J)^power
  int sweeps_per_level = 1;  // conditional kernel applications between levels
};

struct AisResult {
  double logz = 0;                // arithmetic mean of the replicate logs
  std::vector<double> logz_r;     // per-replicate estimates
};

AisResult ais_evidence(const Problem& pb, const AisOptions& opt, Rng& rng);

}  // namespace dpvi::mc
