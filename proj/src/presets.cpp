#include "dpvi/harness.hpp"

namespace dpvi::harness {

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }
Vec v2(double a, double b) { return (Vec(2) << a, b).finished(); }

// Shared synthetic-benchmark scaffolding: unit diffusion, 40 random
// observations with sigma2 = 0.01 from a 0.01-step simulation.
ExperimentConfig base() {
  ExperimentConfig c;
  c.qc = 1.0;
  c.sigma2 = 0.01;
  c.sim_step = 0.01;
  c.n_obs = 40;
  c.dt = 0.01;
  c.tol = 1e-6;
  c.folds = 5;
  c.seed = 0;
  return c;
}

ExperimentConfig ou_inference() {
  ExperimentConfig c = base();
  c.drift = "ou";
  c.theta = v1(1.2);
  c.theta_data = v1(0.5);
  c.x0 = v1(1.0);
  c.t1 = 10.0;
  c.m0 = v1(0.0);
  c.s0 = 1.0 / 2.4;  // stationary variance qc / (2 theta)
  c.rho = 1.0;
  c.omega = 0.1;
  return c;
}

ExperimentConfig ou_learning() {
  ExperimentConfig c = ou_inference();
  c.theta = v1(2.5);
  c.s0 = 0.2;
  c.lr = 0.1;
  c.vgp_lr = 0.01;
  return c;
}

ExperimentConfig benes_inference() {
  ExperimentConfig c = base();
  c.drift = "benes";
  c.theta = v1(1.0);
  c.x0 = v1(0.0);
  c.t1 = 8.0;
  c.m0 = v1(0.0);
  c.rho = 1.0;
  c.omega = 0.001;
  return c;
}

ExperimentConfig benes_learning() {
  ExperimentConfig c = benes_inference();
  c.theta = v1(3.0);
  c.theta_data = v1(1.0);
  c.lr = 0.1;
  c.vgp_lr = 0.01;
  return c;
}

ExperimentConfig dw_inference() {
  ExperimentConfig c = base();
  c.drift = "double_well";
  c.theta = v2(4.0, 1.0);
  c.x0 = v1(1.0);
  c.t1 = 20.0;
  c.m0 = v1(1.0);
  c.rho = 0.5;
  c.omega = 0.001;
  return c;
}

ExperimentConfig dw_learning() {
  ExperimentConfig c = dw_inference();
  c.theta = v2(4.0, 0.0);
  c.theta_data = v2(4.0, 1.0);
  c.learn_mask = {1};
  c.lr = 0.1;
  c.vgp_lr = 0.01;
  return c;
}

ExperimentConfig sine_inference() {
  ExperimentConfig c = base();
  c.drift = "sine";
  c.theta = v2(1.0, 0.0);
  c.x0 = v1(0.0);
  c.t1 = 10.0;
  c.m0 = v1(0.0);
  c.rho = 1.0;
  c.omega = 1e-5;
  return c;
}

ExperimentConfig sine_learning() {
  ExperimentConfig c = sine_inference();
  c.theta = v2(1.0, 2.0);
  c.theta_data = v2(1.0, 0.0);
  c.learn_mask = {1};
  c.rho = 0.1;
  c.lr = 0.01;
  c.vgp_lr = 0.01;
  return c;
}

ExperimentConfig sqrt_inference() {
  ExperimentConfig c = base();
  c.drift = "sqrt";
  c.theta = v1(1.0);
  c.x0 = v1(0.0);
  c.t1 = 10.0;
  c.m0 = v1(0.0);
  c.rho = 1.0;
  c.omega = 1e-5;
  return c;
}

ExperimentConfig sqrt_learning() {
  ExperimentConfig c = sqrt_inference();
  c.theta = v1(5.0);
  c.theta_data = v1(1.0);
  c.rho = 0.5;
  c.lr = 0.01;
  c.vgp_lr = 0.01;
  return c;
}

ExperimentConfig vdp_inference() {
  ExperimentConfig c = base();
  c.drift = "van_der_pol";
  c.theta = v2(5.0, 2.0);
  c.x0 = v2(1.0, 1.0);
  c.t1 = 5.0;
  c.m0 = v2(1.0, 1.0);
  c.rho = 0.5;
  c.omega = 1e-3;
  c.max_iter = 2000;
  return c;
}

ExperimentConfig vdp_learning() {
  ExperimentConfig c = vdp_inference();
  c.theta = v2(2.0, 2.0);
  c.theta_data = v2(5.0, 2.0);
  c.rho = 0.5;
  c.lr = 0.01;
  c.vgp_lr = 0.01;
  return c;
}

}  // namespace

std::vector<std::string> preset_names() {
  return {"ou_inference",   "ou_learning",   "benes_inference", "benes_learning",
          "dw_inference",   "dw_learning",   "sine_inference",  "sine_learning",
          "sqrt_inference", "sqrt_learning", "vdp_inference",   "vdp_learning"};
}

ExperimentConfig preset(const std::string& name) {
  if (name == "ou_inference") return ou_inference();
  if (name == "ou_learning") return ou_learning();
  if (name == "benes_inference") return benes_inference();
  if (name == "benes_learning") return benes_learning();
  if (name == "dw_inference") return dw_inference();
  if (name == "dw_learning") return dw_learning();
  if (name == "sine_inference") return sine_inference();
  if (name == "sine_learning") return sine_learning();
  if (name == "sqrt_inference") return sqrt_inference();
  if (name == "sqrt_learning") return sqrt_learning();
  if (name == "vdp_inference") return vdp_inference();
  if (name == "vdp_learning") return vdp_learning();
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + name + "'; known presets: " + known);
}

}  // namespace dpvi::harness
