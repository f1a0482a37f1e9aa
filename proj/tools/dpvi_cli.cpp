#include <cmath>
#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dpvi/harness.hpp"

namespace hn = dpvi::harness;

namespace {

// Flag values collected by CLI11, overlaid on preset/config-file values.
struct Flags {
  std::string preset, config, out, method;
  std::optional<uint64_t> seed;
  std::optional<double> dt;
};

void add_common(CLI::App* cmd, Flags& fl) {
  cmd->add_option("--preset", fl.preset, "start from a named preset");
  cmd->add_option("--config", fl.config, "key = value configuration file");
  cmd->add_option("--seed", fl.seed, "master seed (overrides config)");
  cmd->add_option("--out", fl.out, "output directory (overrides config)");
  cmd->add_option("--method", fl.method,
                  "cvi_dp | vgp | smc | ais | exact_gpr (overrides config)");
  cmd->add_option("--dt", fl.dt, "grid step (overrides config)");
}

// preset < config file < explicit flags.
hn::ExperimentConfig assemble(const Flags& fl) {
  hn::ExperimentConfig cfg;
  if (!fl.preset.empty()) cfg = hn::preset(fl.preset);
  if (!fl.config.empty()) {
    auto kv = hn::to_map(cfg);
    for (const auto& [k, v] : hn::load_config_map(fl.config)) kv[k] = v;
    cfg = hn::from_map(kv);
  }
  if (fl.seed) cfg.seed = *fl.seed;
  if (!fl.out.empty()) cfg.out = fl.out;
  if (!fl.method.empty()) cfg.method = fl.method;
  if (fl.dt) cfg.dt = *fl.dt;
  return cfg;
}

void print_run(const hn::RunResult& rr) {
  std::printf("method=%s status=%s iters=%d", rr.method.c_str(),
              rr.status.c_str(), rr.iters);
  if (std::isfinite(rr.final_elbo)) std::printf(" elbo=%.6f", rr.final_elbo);
  for (const auto& [k, v] : rr.metrics) std::printf(" %s=%.6g", k.c_str(), v);
  std::printf(" wall_ms=%.1f\n", rr.wall_ms);
}

int dispatch(const std::string& sub, const hn::ExperimentConfig& cfg) {
  if (sub == "simulate") {
    hn::Dataset ds = hn::make_dataset(cfg);
    if (!cfg.out.empty()) hn::write_dataset(cfg, ds, cfg.out);
    std::printf("n_obs=%zu t=[%.17g, %.17g]\n", ds.y.size(), cfg.t0, cfg.t1);
    return 0;
  }
  if (sub == "cv") {
    hn::CvResult cv = hn::nlpd_cv(cfg, cfg.folds);
    if (!cfg.out.empty()) hn::write_cv(cfg, cv, cfg.out);
    std::printf("method=%s nlpd=%.6f fold_std=%.6f point_std=%.6f n=%d\n",
                cfg.method.c_str(), cv.nlpd, cv.fold_std, cv.point_std,
                cv.n_points);
    return 0;
  }
  hn::RunResult rr;
  if (sub == "learn") {
    rr = hn::run_learn(cfg);
  } else {  // infer, smc, ais
    rr = hn::run(cfg);
  }
  if (!cfg.out.empty()) hn::write_run(cfg, rr, cfg.out);
  print_run(rr);
  return rr.status == "diverged" ? 3 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational and Monte Carlo inference for latent diffusion models"};
  app.require_subcommand(1);

  Flags fl;
  CLI::App* c_sim = app.add_subcommand("simulate", "generate a synthetic dataset");
  CLI::App* c_inf = app.add_subcommand("infer", "posterior inference with the configured method");
  CLI::App* c_lrn = app.add_subcommand("learn", "variational EM parameter learning");
  CLI::App* c_cv = app.add_subcommand("cv", "k-fold held-out negative log predictive density");
  CLI::App* c_smc = app.add_subcommand("smc", "conditional particle smoother");
  CLI::App* c_ais = app.add_subcommand("ais", "annealed evidence estimate");
  CLI::App* c_lst = app.add_subcommand("preset-list", "list the named presets");
  for (CLI::App* c : {c_sim, c_inf, c_lrn, c_cv, c_smc, c_ais}) add_common(c, fl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (c_lst->parsed()) {
      for (const auto& n : hn::preset_names()) std::printf("%s\n", n.c_str());
      return 0;
    }
    hn::ExperimentConfig cfg = assemble(fl);
    std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "smc") cfg.method = "smc";
    if (sub == "ais") cfg.method = "ais";
    return dispatch(sub, cfg);
  } catch (const dpvi::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const dpvi::NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 3;
  }
}
