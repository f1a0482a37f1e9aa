#pragma once

#include <limits>
#include <map>
#include <string>
#include <vector>

#include "dpvi/cvi.hpp"
#include "dpvi/problem.hpp"

namespace dpvi::harness {

// One experiment, fully described: model + data source + method + budgets.
// Serializes to a flat key=value file; every preset round-trips unchanged.
struct ExperimentConfig {
  // prior model
  std::string drift = "ou";
  Vec theta;           // prior drift parameters (learning starts here too)
  double qc = 1.0;     // Qc = qc * I
  Vec m0;              // initial-state prior mean; empty = x0
  double s0 = 0.5;     // S0 = s0 * I
  double sigma2 = 0.01;
  // data: either simulate (theta_data truth, Euler-Maruyama at sim_step,
  // n_obs nodes drawn uniformly without replacement) or load a t,y CSV
  Vec theta_data;      // empty = theta
  Vec x0;
  double t0 = 0.0, t1 = 10.0;
  double sim_step = 0.01;
  int n_obs = 40;
  std::string data_file;
  // method and budgets
  std::string method = "cvi_dp";  // cvi_dp | vgp | smc | ais | exact_gpr
  double dt = 0.01;
  double rho = 0.5;    // site update damping
  double omega = 0.1;  // baseline fixed-point damping
  double tol = 1e-6;
  int max_inner = 500;
  int max_outer = 20;
  int max_total_inner = 0;
  int relin_every = 0;
  int max_iter = 1000;  // baseline sweep budget
  int gh_order = 0;
  // learning
  double lr = 0.1;      // Adam rate for cvi_dp
  double vgp_lr = 0.01; // Adam rate for vgp
  int cycles = 200;
  double theta_tol = 1e-4;
  std::vector<int> learn_mask;  // learnable parameter indices; empty = all
  // samplers
  int n_particles = 200;
  int n_sweeps = 100;
  int burn_in = 20;
  int levels = 800;
  int ais_particles = 400;
  int replicates = 3;
  // run
  int folds = 5;
  uint64_t seed = 0;
  std::string out;

  void validate() const;
};

// Flat serialization; from_map rejects unknown keys and bad values with the
// offending key named.
std::map<std::string, std::string> to_map(const ExperimentConfig& cfg);
ExperimentConfig from_map(const std::map<std::string, std::string>& kv);

// key = value text file; '#' comments and blank lines ignored. The raw-map
// reader exists so callers can overlay file keys on a preset base.
std::map<std::string, std::string> load_config_map(const std::string& path);
ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& cfg, const std::string& path);

// Registry of the synthetic benchmark settings.
ExperimentConfig preset(const std::string& name);
std::vector<std::string> preset_names();

struct Dataset {
  std::vector<double> t_obs;
  std::vector<double> y;
  Mat latent;                    // d x (K+1); empty when loaded from file
  std::vector<double> t_latent;
};

// Simulate (seeded) or load the observations named by the config.
Dataset make_dataset(const ExperimentConfig& cfg);

// Inference grid = uniform dt mesh united with the observation times.
Problem build_problem(const ExperimentConfig& cfg, const Dataset& ds);

struct RunResult {
  std::string method;
  std::vector<double> t_nodes;      // grid times for the marginals
  lgssm::Marginals marg;            // empty for ais
  std::vector<cvi::TraceRow> trace;
  std::vector<Vec> theta_trace;     // learning runs only
  double final_elbo = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
  int iters = 0;
  double wall_ms = 0;
  std::map<std::string, double> metrics;
  std::vector<double> metric_series;  // per-replicate evidence estimates
};

// Posterior inference (or evidence estimation) with cfg.method.
RunResult run(const ExperimentConfig& cfg);

// Variational EM parameter learning; cfg.method selects cvi_dp or vgp.
RunResult run_learn(const ExperimentConfig& cfg);

struct CvResult {
  std::vector<double> fold_nlpd;  // per-fold mean NLPD
  std::vector<int> fold_size;
  double nlpd = 0;       // mean over all held-out points
  double fold_std = 0;   // std across fold means
  double point_std = 0;  // std across held-out points
  int n_points = 0;
};

// k-fold NLPD cross-validation, interleaved folds (observation i -> i mod k),
// each fold fitted independently in a work pool with a fold-indexed stream.
CvResult nlpd_cv(const ExperimentConfig& cfg, int k);

// Writers: trace.csv (iter,elbo,wall_ms), posterior.csv (t,dim,mean,var),
// theta_trace.csv for learning runs, result.json = config echo + metrics.
void write_run(const ExperimentConfig& cfg, const RunResult& rr,
               const std::string& dir);
void write_cv(const ExperimentConfig& cfg, const CvResult& cv,
              const std::string& dir);
void write_dataset(const ExperimentConfig& cfg, const Dataset& ds,
                   const std::string& dir);

}  // namespace dpvi::harness
