#include "dpvi/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "dpvi/mc.hpp"
#include "dpvi/obs.hpp"
#include "dpvi/vgp.hpp"
#include "json.hpp"

namespace dpvi::harness {

namespace {

using nlohmann::json;

// ---- value formatting / parsing, all errors name the offending key

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_vec(const Vec& v) {
  std::string s;
  for (int i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += fmt17(v(i));
  }
  return s;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty() || !parts.empty()) parts.push_back(cur);
  return parts;
}

double parse_double(const std::string& key, const std::string& s) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    while (pos < s.size() && std::isspace(uint8_t(s[pos]))) ++pos;
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + s + "'");
  }
}

int parse_int(const std::string& key, const std::string& s) {
  double v = parse_double(key, s);
  int i = int(v);
  if (double(i) != v)
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + s + "'");
  return i;
}

uint64_t parse_u64(const std::string& key, const std::string& s) {
  try {
    size_t pos = 0;
    uint64_t v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" +
                      s + "'");
  }
}

Vec parse_vec(const std::string& key, const std::string& s) {
  if (s.empty()) return Vec();
  auto parts = split_commas(s);
  Vec v(parts.size());
  for (size_t i = 0; i < parts.size(); ++i) v(i) = parse_double(key, parts[i]);
  return v;
}

std::vector<int> parse_ints(const std::string& key, const std::string& s) {
  if (s.empty()) return {};
  auto parts = split_commas(s);
  std::vector<int> v(parts.size());
  for (size_t i = 0; i < parts.size(); ++i) v[i] = parse_int(key, parts[i]);
  return v;
}

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(uint8_t(s[a]))) ++a;
  while (b > a && std::isspace(uint8_t(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - start)
        .count();
  }
};

cvi::Options cvi_options(const ExperimentConfig& cfg) {
  cvi::Options o;
  o.rho = cfg.rho;
  o.tol = cfg.tol;
  o.max_inner = cfg.max_inner;
  o.max_outer = cfg.max_outer;
  o.max_total_inner = cfg.max_total_inner;
  o.gh_order = cfg.gh_order;
  o.relin_every = cfg.relin_every;
  return o;
}

vgp::Options vgp_options(const ExperimentConfig& cfg) {
  vgp::Options o;
  o.omega = cfg.omega;
  o.tol = cfg.tol;
  o.max_iter = cfg.max_iter;
  o.gh_order = cfg.gh_order;
  return o;
}

// Exact smoother for the linear prior; the conjugate reference method.
lgssm::KalmanResult exact_gpr(const ExperimentConfig& cfg, const Problem& pb) {
  if (cfg.drift != "ou")
    throw ConfigError("method exact_gpr requires drift = ou");
  const int d = pb.dim(), M = pb.grid.M();
  std::vector<Mat> A(M, -cfg.theta(0) * Mat::Identity(d, d));
  std::vector<Vec> b(M, Vec::Zero(d));
  lgssm::PhiParams phi = discretize(pb.m0, pb.S0, A, b, pb.Qc, pb.grid);
  lgssm::ObsSeq obs{pb.obs_idx, pb.obs_y};
  return lgssm::kalman_smoother(phi, obs, pb.H, pb.sigma2);
}

// Posterior marginals only; shared by the cross-validation folds.
lgssm::Marginals fit_marginals(const ExperimentConfig& cfg, Problem& pb,
                               uint64_t stream) {
  if (cfg.method == "cvi_dp") return cvi::infer(pb, cvi_options(cfg)).marg;
  if (cfg.method == "vgp") return vgp::infer(pb, vgp_options(cfg)).marg;
  if (cfg.method == "exact_gpr") return exact_gpr(cfg, pb).marg;
  if (cfg.method == "smc") {
    mc::CpfOptions co;
    co.n_particles = cfg.n_particles;
    co.n_sweeps = cfg.n_sweeps;
    co.burn_in = cfg.burn_in;
    Rng rng = Rng(cfg.seed).split(stream);
    mc::SmootherResult sm = mc::cpf_smoother(pb, co, rng);
    lgssm::Marginals m;
    m.m = sm.mean;
    m.S = sm.cov;
    return m;
  }
  throw ConfigError("config: no posterior marginals for method '" + cfg.method + "'");
}

Problem problem_with(const ExperimentConfig& cfg,
                     const std::vector<double>& grid_times,
                     const std::vector<double>& t_obs,
                     const std::vector<double>& y) {
  Problem pb;
  pb.drift = make_drift(cfg.drift, cfg.theta);
  const int d = pb.drift->dim();
  pb.grid = build_grid(cfg.t0, cfg.t1, cfg.dt, grid_times);
  pb.Qc = cfg.qc * Mat::Identity(d, d);
  if (cfg.m0.size() > 0)
    pb.m0 = cfg.m0;
  else if (cfg.x0.size() > 0)
    pb.m0 = cfg.x0;
  else
    pb.m0 = Vec::Zero(d);
  if (int(pb.m0.size()) != d)
    throw ConfigError("config: key 'm0' has dimension " +
                      std::to_string(pb.m0.size()) + ", drift needs " +
                      std::to_string(d));
  pb.S0 = cfg.s0 * Mat::Identity(d, d);
  pb.H = RowVec::Zero(d);
  pb.H(0) = 1.0;
  pb.sigma2 = cfg.sigma2;
  for (size_t i = 0; i < t_obs.size(); ++i) {
    pb.obs_idx.push_back(grid_index(pb.grid, t_obs[i]));
    pb.obs_y.push_back(y[i]);
  }
  pb.validate();
  return pb;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

json config_echo(const ExperimentConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : to_map(cfg)) j[k] = v;
  return j;
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << body;
}

}  // namespace

void ExperimentConfig::validate() const {
  auto names = drift_names();
  if (std::find(names.begin(), names.end(), drift) == names.end())
    throw ConfigError("config: unknown drift '" + drift + "'");
  static const std::vector<std::string> methods = {"cvi_dp", "vgp", "smc", "ais",
                                                   "exact_gpr"};
  if (std::find(methods.begin(), methods.end(), method) == methods.end())
    throw ConfigError("config: unknown method '" + method +
                      "' (cvi_dp, vgp, smc, ais, exact_gpr)");
  if (theta.size() == 0) throw ConfigError("config: key 'theta' is required");
  if (!(dt > 0)) throw ConfigError("config: key 'dt' must be positive");
  if (!(sim_step > 0)) throw ConfigError("config: key 'sim_step' must be positive");
  if (!(t1 > t0)) throw ConfigError("config: key 't1' must exceed t0");
  if (!(sigma2 > 0)) throw ConfigError("config: key 'sigma2' must be positive");
  if (!(qc > 0)) throw ConfigError("config: key 'qc' must be positive");
  if (!(s0 > 0)) throw ConfigError("config: key 's0' must be positive");
  if (folds < 2) throw ConfigError("config: key 'folds' must be at least 2");
  if (data_file.empty()) {
    if (n_obs < 1) throw ConfigError("config: key 'n_obs' must be positive");
    if (x0.size() == 0)
      throw ConfigError("config: key 'x0' is required to simulate data");
  }
}

std::map<std::string, std::string> to_map(const ExperimentConfig& c) {
  std::map<std::string, std::string> kv;
  kv["drift"] = c.drift;
  kv["theta"] = join_vec(c.theta);
  kv["qc"] = fmt17(c.qc);
  kv["m0"] = join_vec(c.m0);
  kv["s0"] = fmt17(c.s0);
  kv["sigma2"] = fmt17(c.sigma2);
  kv["theta_data"] = join_vec(c.theta_data);
  kv["x0"] = join_vec(c.x0);
  kv["t0"] = fmt17(c.t0);
  kv["t1"] = fmt17(c.t1);
  kv["sim_step"] = fmt17(c.sim_step);
  kv["n_obs"] = std::to_string(c.n_obs);
  kv["data_file"] = c.data_file;
  kv["method"] = c.method;
  kv["dt"] = fmt17(c.dt);
  kv["rho"] = fmt17(c.rho);
  kv["omega"] = fmt17(c.omega);
  kv["tol"] = fmt17(c.tol);
  kv["max_inner"] = std::to_string(c.max_inner);
  kv["max_outer"] = std::to_string(c.max_outer);
  kv["max_total_inner"] = std::to_string(c.max_total_inner);
  kv["relin_every"] = std::to_string(c.relin_every);
  kv["max_iter"] = std::to_string(c.max_iter);
  kv["gh_order"] = std::to_string(c.gh_order);
  kv["lr"] = fmt17(c.lr);
  kv["vgp_lr"] = fmt17(c.vgp_lr);
  kv["cycles"] = std::to_string(c.cycles);
  kv["theta_tol"] = fmt17(c.theta_tol);
  kv["learn_mask"] = join_ints(c.learn_mask);
  kv["n_particles"] = std::to_string(c.n_particles);
  kv["n_sweeps"] = std::to_string(c.n_sweeps);
  kv["burn_in"] = std::to_string(c.burn_in);
  kv["levels"] = std::to_string(c.levels);
  kv["ais_particles"] = std::to_string(c.ais_particles);
  kv["replicates"] = std::to_string(c.replicates);
  kv["folds"] = std::to_string(c.folds);
  kv["seed"] = std::to_string(c.seed);
  kv["out"] = c.out;
  return kv;
}

ExperimentConfig from_map(const std::map<std::string, std::string>& kv) {
  ExperimentConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "drift") c.drift = v;
    else if (k == "theta") c.theta = parse_vec(k, v);
    else if (k == "qc") c.qc = parse_double(k, v);
    else if (k == "m0") c.m0 = parse_vec(k, v);
    else if (k == "s0") c.s0 = parse_double(k, v);
    else if (k == "sigma2") c.sigma2 = parse_double(k, v);
    else if (k == "theta_data") c.theta_data = parse_vec(k, v);
    else if (k == "x0") c.x0 = parse_vec(k, v);
    else if (k == "t0") c.t0 = parse_double(k, v);
    else if (k == "t1") c.t1 = parse_double(k, v);
    else if (k == "sim_step") c.sim_step = parse_double(k, v);
    else if (k == "n_obs") c.n_obs = parse_int(k, v);
    else if (k == "data_file") c.data_file = v;
    else if (k == "method") c.method = v;
    else if (k == "dt") c.dt = parse_double(k, v);
    else if (k == "rho") c.rho = parse_double(k, v);
    else if (k == "omega") c.omega = parse_double(k, v);
    else if (k == "tol") c.tol = parse_double(k, v);
    else if (k == "max_inner") c.max_inner = parse_int(k, v);
    else if (k == "max_outer") c.max_outer = parse_int(k, v);
    else if (k == "max_total_inner") c.max_total_inner = parse_int(k, v);
    else if (k == "relin_every") c.relin_every = parse_int(k, v);
    else if (k == "max_iter") c.max_iter = parse_int(k, v);
    else if (k == "gh_order") c.gh_order = parse_int(k, v);
    else if (k == "lr") c.lr = parse_double(k, v);
    else if (k == "vgp_lr") c.vgp_lr = parse_double(k, v);
    else if (k == "cycles") c.cycles = parse_int(k, v);
    else if (k == "theta_tol") c.theta_tol = parse_double(k, v);
    else if (k == "learn_mask") c.learn_mask = parse_ints(k, v);
    else if (k == "n_particles") c.n_particles = parse_int(k, v);
    else if (k == "n_sweeps") c.n_sweeps = parse_int(k, v);
    else if (k == "burn_in") c.burn_in = parse_int(k, v);
    else if (k == "levels") c.levels = parse_int(k, v);
    else if (k == "ais_particles") c.ais_particles = parse_int(k, v);
    else if (k == "replicates") c.replicates = parse_int(k, v);
    else if (k == "folds") c.folds = parse_int(k, v);
    else if (k == "seed") c.seed = parse_u64(k, v);
    else if (k == "out") c.out = v;
    else throw ConfigError("config: unknown key '" + k + "'");
  }
  return c;
}

std::map<std::string, std::string> load_config_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: " + path + ":" + std::to_string(lineno) +
                        ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

ExperimentConfig load_config(const std::string& path) {
  return from_map(load_config_map(path));
}

void save_config(const ExperimentConfig& cfg, const std::string& path) {
  std::string body;
  for (const auto& [k, v] : to_map(cfg)) body += k + " = " + v + "\n";
  write_text(path, body);
}

Dataset make_dataset(const ExperimentConfig& cfg) {
  cfg.validate();
  Dataset ds;
  if (!cfg.data_file.empty()) {
    std::ifstream in(cfg.data_file);
    if (!in) throw ConfigError("config: cannot open data_file '" + cfg.data_file + "'");
    std::string line;
    std::vector<std::pair<double, double>> rows;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = trim(line);
      if (line.empty()) continue;
      if (lineno == 1 && line.find_first_not_of(
                             "0123456789+-.eE, \t") != std::string::npos)
        continue;  // header row
      auto parts = split_commas(line);
      if (parts.size() != 2)
        throw ConfigError("data_file: line " + std::to_string(lineno) +
                          ": expected 't,y'");
      rows.emplace_back(parse_double("data_file t", trim(parts[0])),
                        parse_double("data_file y", trim(parts[1])));
    }
    if (rows.empty()) throw ConfigError("data_file: no observations");
    std::sort(rows.begin(), rows.end());
    for (auto& [t, y] : rows) {
      if (t < cfg.t0 - 1e-9 || t > cfg.t1 + 1e-9)
        throw ConfigError("data_file: observation time " + fmt17(t) +
                          " outside [t0, t1]");
      ds.t_obs.push_back(t);
      ds.y.push_back(y);
    }
    return ds;
  }
  const Vec& th = cfg.theta_data.size() > 0 ? cfg.theta_data : cfg.theta;
  auto drift_true = make_drift(cfg.drift, th);
  const int d = drift_true->dim();
  if (int(cfg.x0.size()) != d)
    throw ConfigError("config: key 'x0' has dimension " +
                      std::to_string(cfg.x0.size()) + ", drift needs " +
                      std::to_string(d));
  Rng rng = Rng(cfg.seed).split(11);
  Mat Qc = cfg.qc * Mat::Identity(d, d);
  ds.latent = simulate_em(*drift_true, Qc, cfg.x0, cfg.t0, cfg.t1, cfg.sim_step, rng);
  const int K = int(ds.latent.cols()) - 1;
  ds.t_latent.resize(K + 1);
  for (int k = 0; k <= K; ++k) ds.t_latent[k] = cfg.t0 + k * cfg.sim_step;
  if (cfg.n_obs > K)
    throw ConfigError("config: n_obs exceeds the " + std::to_string(K) +
                      " simulation nodes");
  // observation nodes: uniform without replacement over {1, ..., K}
  std::vector<int> pool(K);
  for (int k = 0; k < K; ++k) pool[k] = k + 1;
  for (int i = 0; i < cfg.n_obs; ++i) {
    int j = i + rng.uniform_int(K - i);
    std::swap(pool[i], pool[j]);
  }
  std::vector<int> picked(pool.begin(), pool.begin() + cfg.n_obs);
  std::sort(picked.begin(), picked.end());
  double sd = std::sqrt(cfg.sigma2);
  for (int idx : picked) {
    ds.t_obs.push_back(cfg.t0 + idx * cfg.sim_step);
    ds.y.push_back(ds.latent(0, idx) + sd * rng.normal());
  }
  return ds;
}

Problem build_problem(const ExperimentConfig& cfg, const Dataset& ds) {
  return problem_with(cfg, ds.t_obs, ds.t_obs, ds.y);
}

RunResult run(const ExperimentConfig& cfg) {
  cfg.validate();
  Dataset ds = make_dataset(cfg);
  Problem pb = build_problem(cfg, ds);
  RunResult rr;
  rr.method = cfg.method;
  rr.t_nodes = pb.grid.t;
  Timer tm;
  if (cfg.method == "cvi_dp") {
    cvi::InferResult r = cvi::infer(pb, cvi_options(cfg));
    rr.marg = std::move(r.marg);
    rr.trace = std::move(r.trace);
    rr.final_elbo = r.elbo;
    rr.status = r.status;
    rr.iters = r.inner_total;
    rr.metrics["outer_iters"] = r.outer;
  } else if (cfg.method == "vgp") {
    vgp::InferResult r = vgp::infer(pb, vgp_options(cfg));
    rr.marg = std::move(r.marg);
    rr.trace = std::move(r.trace);
    rr.final_elbo = r.elbo;
    rr.status = r.status;
    rr.iters = r.iters;
  } else if (cfg.method == "smc") {
    mc::CpfOptions co;
    co.n_particles = cfg.n_particles;
    co.n_sweeps = cfg.n_sweeps;
    co.burn_in = cfg.burn_in;
    Rng rng = Rng(cfg.seed).split(21);
    mc::SmootherResult sm = mc::cpf_smoother(pb, co, rng);
    rr.marg.m = std::move(sm.mean);
    rr.marg.S = std::move(sm.cov);
    rr.iters = cfg.n_sweeps;
    rr.metrics["n_samples"] = sm.n_samples;
  } else if (cfg.method == "ais") {
    mc::AisOptions ao;
    ao.levels = cfg.levels;
    ao.n_particles = cfg.ais_particles;
    ao.replicates = cfg.replicates;
    Rng rng = Rng(cfg.seed).split(31);
    mc::AisResult ar = mc::ais_evidence(pb, ao, rng);
    rr.final_elbo = ar.logz;
    rr.iters = cfg.levels;
    rr.metrics["logz"] = ar.logz;
    rr.metric_series = ar.logz_r;
  } else {  // exact_gpr (validate() already vetted the name)
    lgssm::KalmanResult r = exact_gpr(cfg, pb);
    rr.marg = std::move(r.marg);
    rr.final_elbo = r.loglik;
    rr.metrics["loglik"] = r.loglik;
  }
  rr.wall_ms = tm.ms();
  return rr;
}

RunResult run_learn(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.method != "cvi_dp" && cfg.method != "vgp")
    throw ConfigError("config: learning requires method cvi_dp or vgp");
  Dataset ds = make_dataset(cfg);
  Problem pb = build_problem(cfg, ds);
  RunResult rr;
  rr.method = cfg.method;
  rr.t_nodes = pb.grid.t;
  Timer tm;
  Vec theta_final;
  if (cfg.method == "cvi_dp") {
    cvi::LearnOptions lo;
    lo.estep = cvi_options(cfg);
    lo.lr = cfg.lr;
    lo.cycles = cfg.cycles;
    lo.theta_tol = cfg.theta_tol;
    lo.learn_mask = cfg.learn_mask;
    cvi::LearnResult r = cvi::learn(pb, lo);
    rr.marg = std::move(r.state.marg);
    rr.final_elbo = r.state.elbo;
    rr.status = r.status;
    rr.trace = std::move(r.trace);
    rr.theta_trace = std::move(r.theta_trace);
  } else {
    vgp::LearnOptions lo;
    lo.estep = vgp_options(cfg);
    lo.lr = cfg.vgp_lr;
    lo.cycles = cfg.cycles;
    lo.theta_tol = cfg.theta_tol;
    lo.learn_mask = cfg.learn_mask;
    vgp::LearnResult r = vgp::learn(pb, lo);
    rr.marg = std::move(r.state.marg);
    rr.final_elbo = r.state.elbo;
    rr.status = r.status;
    rr.trace = std::move(r.trace);
    rr.theta_trace = std::move(r.theta_trace);
  }
  rr.iters = int(rr.trace.size());
  theta_final = pb.drift->theta();
  for (int p = 0; p < theta_final.size(); ++p)
    rr.metrics["theta_" + std::to_string(p)] = theta_final(p);
  rr.wall_ms = tm.ms();
  return rr;
}

CvResult nlpd_cv(const ExperimentConfig& cfg, int k) {
  cfg.validate();
  if (k < 2) throw ConfigError("cv: needs at least 2 folds");
  if (cfg.method == "ais")
    throw ConfigError("cv: method ais estimates evidence, not a posterior");
  Dataset ds = make_dataset(cfg);
  const int n = int(ds.y.size());
  if (n < k)
    throw ConfigError("cv: " + std::to_string(k) + " folds over " +
                      std::to_string(n) + " observations leaves an empty fold");
  CvResult out;
  out.fold_nlpd.assign(k, 0.0);
  out.fold_size.assign(k, 0);
  std::vector<std::vector<double>> fold_points(k);

  std::atomic<int> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&]() {
    for (int f; (f = next.fetch_add(1)) < k;) {
      try {
        std::vector<double> t_train, y_train;
        std::vector<int> test;
        for (int i = 0; i < n; ++i) {
          if (i % k == f) {
            test.push_back(i);
          } else {
            t_train.push_back(ds.t_obs[i]);
            y_train.push_back(ds.y[i]);
          }
        }
        Problem pb = problem_with(cfg, ds.t_obs, t_train, y_train);
        lgssm::Marginals marg = fit_marginals(cfg, pb, 1000 + uint64_t(f));
        std::vector<double>& pts = fold_points[f];
        for (int i : test) {
          int g = grid_index(pb.grid, ds.t_obs[i]);
          double mu = pb.H.dot(marg.m[g]);
          double v = pb.H.dot(marg.S[g] * pb.H.transpose());
          pts.push_back(obs::nlpd(ds.y[i], mu, v, cfg.sigma2));
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  unsigned hw = std::thread::hardware_concurrency();
  int n_threads = std::min(k, int(hw ? hw : 1));
  std::vector<std::thread> threads;
  for (int i = 0; i < n_threads; ++i) threads.emplace_back(worker);
  for (auto& th : threads) th.join();
  if (first_error) std::rethrow_exception(first_error);

  std::vector<double> all;
  for (int f = 0; f < k; ++f) {
    out.fold_size[f] = int(fold_points[f].size());
    out.fold_nlpd[f] = mean_of(fold_points[f]);
    all.insert(all.end(), fold_points[f].begin(), fold_points[f].end());
  }
  out.n_points = int(all.size());
  out.nlpd = mean_of(all);
  out.point_std = std_of(all);
  out.fold_std = std_of(out.fold_nlpd);
  return out;
}

void write_run(const ExperimentConfig& cfg, const RunResult& rr,
               const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::string trace = "iter,elbo,wall_ms\n";
  for (const auto& row : rr.trace)
    trace += std::to_string(row.iter) + "," + fmt17(row.elbo) + "," +
             fmt17(row.wall_ms) + "\n";
  write_text(dir + "/trace.csv", trace);

  std::string post = "t,dim,mean,var\n";
  for (size_t kk = 0; kk < rr.marg.m.size(); ++kk)
    for (int j = 0; j < rr.marg.m[kk].size(); ++j)
      post += fmt17(rr.t_nodes[kk]) + "," + std::to_string(j) + "," +
              fmt17(rr.marg.m[kk](j)) + "," + fmt17(rr.marg.S[kk](j, j)) + "\n";
  write_text(dir + "/posterior.csv", post);

  if (!rr.theta_trace.empty()) {
    std::string body = "cycle,elbo";
    for (int p = 0; p < rr.theta_trace[0].size(); ++p)
      body += ",theta_" + std::to_string(p);
    body += "\n";
    for (size_t c = 0; c < rr.theta_trace.size(); ++c) {
      body += std::to_string(c) + "," + fmt17(rr.trace[c].elbo);
      for (int p = 0; p < rr.theta_trace[c].size(); ++p)
        body += "," + fmt17(rr.theta_trace[c](p));
      body += "\n";
    }
    write_text(dir + "/theta_trace.csv", body);
  }

  json j;
  j["config"] = config_echo(cfg);
  j["method"] = rr.method;
  j["status"] = rr.status;
  j["iters"] = rr.iters;
  j["wall_ms"] = rr.wall_ms;
  if (std::isfinite(rr.final_elbo)) j["final_elbo"] = rr.final_elbo;
  for (const auto& [key, val] : rr.metrics) j["metrics"][key] = val;
  if (!rr.metric_series.empty()) j["metrics"]["logz_replicates"] = rr.metric_series;
  write_text(dir + "/result.json", j.dump(2) + "\n");
}

void write_cv(const ExperimentConfig& cfg, const CvResult& cv,
              const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::string body = "fold,n_test,nlpd\n";
  for (size_t f = 0; f < cv.fold_nlpd.size(); ++f)
    body += std::to_string(f) + "," + std::to_string(cv.fold_size[f]) + "," +
            fmt17(cv.fold_nlpd[f]) + "\n";
  write_text(dir + "/folds.csv", body);

  json j;
  j["config"] = config_echo(cfg);
  j["method"] = cfg.method;
  j["status"] = "ok";
  j["metrics"]["nlpd"] = cv.nlpd;
  j["metrics"]["nlpd_fold_std"] = cv.fold_std;
  j["metrics"]["nlpd_point_std"] = cv.point_std;
  j["metrics"]["n_points"] = cv.n_points;
  j["metrics"]["fold_nlpd"] = cv.fold_nlpd;
  write_text(dir + "/result.json", j.dump(2) + "\n");
}

void write_dataset(const ExperimentConfig& cfg, const Dataset& ds,
                   const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::string data = "t,y\n";
  for (size_t i = 0; i < ds.y.size(); ++i)
    data += fmt17(ds.t_obs[i]) + "," + fmt17(ds.y[i]) + "\n";
  write_text(dir + "/data.csv", data);
  if (ds.latent.size() > 0) {
    std::string lat = "t,dim,value\n";
    for (int kk = 0; kk < ds.latent.cols(); ++kk)
      for (int j = 0; j < ds.latent.rows(); ++j)
        lat += fmt17(ds.t_latent[kk]) + "," + std::to_string(j) + "," +
               fmt17(ds.latent(j, kk)) + "\n";
    write_text(dir + "/latent.csv", lat);
  }
  json j;
  j["config"] = config_echo(cfg);
  j["status"] = "ok";
  j["metrics"]["n_obs"] = int(ds.y.size());
  write_text(dir + "/result.json", j.dump(2) + "\n");
}

}  // namespace dpvi::harness
