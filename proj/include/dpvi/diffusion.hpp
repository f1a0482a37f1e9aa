#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dpvi/common.hpp"
#include "dpvi/grid.hpp"
#include "dpvi/lgssm.hpp"
#include "dpvi/rng.hpp"

namespace dpvi {

// Parametric drift family f_theta: R^d -> R^d of the latent diffusion
// dx = f_theta(x) dt + dbeta, Cov(dbeta) = Qc dt.
//
// Batched layout: columns of X are states. eval fills F (d x N); jac fills
// J (d*d x N) with column-major vec of the Jacobian (J(i + d*j, n) =
// df_i/dx_j at X.col(n)); theta_grad fills G (d*n_params x N) with
// G(i + d*p, n) = df_i/dtheta_p.
class Drift {
 public:
  virtual ~Drift() = default;
  virtual int dim() const = 0;
  virtual int n_params() const = 0;
  virtual const Vec& theta() const = 0;
  virtual void set_theta(const Vec& th) = 0;
  virtual std::string name() const = 0;
  virtual void eval(const Mat& X, Mat& F) const = 0;
  virtual void jac(const Mat& X, Mat& J) const = 0;
  virtual void theta_grad(const Mat& X, Mat& G) const = 0;

  Vec eval1(const Vec& x) const;
  Mat jac1(const Vec& x) const;
};

// Registry keyed by name: "ou", "benes", "double_well", "sine", "sqrt",
// "van_der_pol", "mlp". For "mlp", dim is inferred from theta's length.
std::unique_ptr<Drift> make_drift(const std::string& name, const Vec& theta);
std::vector<std::string> drift_names();

// Euler-Maruyama path on a uniform grid with step dt; returns d x (K+1)
// states at times t0 + k*dt.
Mat simulate_em(const Drift& f, const Mat& Qc, const Vec& x0, double t0,
                double t1, double dt, Rng& rng);

// Taylor linearization of f at a point: f(x) ~= A x + b.
void linearize_at(const Drift& f, const Vec& xbar, Mat& A, Vec& b);

// Discrete chain of the linear SDE dx = (A_m x + b_m) dt + dbeta on `grid`:
// transitions A_hat = I + A_m dt_m, b_hat = b_m dt_m, Q_hat = Qc dt_m.
lgssm::PhiParams discretize(const Vec& m0, const Mat& S0,
                            const std::vector<Mat>& A, const std::vector<Vec>& b,
                            const Mat& Qc, const TimeGrid& grid);

}  // namespace dpvi
