#pragma once

#include <memory>
#include <vector>

#include "dpvi/diffusion.hpp"
#include "dpvi/grid.hpp"

namespace dpvi {

// Inference task: latent diffusion prior dx = f(x) dt + dbeta on a grid,
// scalar Gaussian observations y_k = H x_{g_k} + e_k at grid nodes g_k.
struct Problem {
  TimeGrid grid;
  std::shared_ptr<Drift> drift;
  Mat Qc;
  Vec m0;
  Mat S0;
  RowVec H;
  double sigma2 = 0.01;
  std::vector<int> obs_idx;  // ascending grid-node indices
  std::vector<double> obs_y;

  int dim() const { return int(m0.size()); }
  int n_obs() const { return int(obs_y.size()); }

  void validate() const {
    const int d = dim();
    if (!drift || drift->dim() != d) throw ConfigError("problem: drift dimension mismatch");
    if (Qc.rows() != d || Qc.cols() != d || S0.rows() != d || S0.cols() != d ||
        int(H.size()) != d)
      throw ConfigError("problem: matrix dimension mismatch");
    if (!(sigma2 > 0)) throw ConfigError("problem: sigma2 must be positive");
    if (obs_idx.size() != obs_y.size()) throw ConfigError("problem: obs size mismatch");
    for (size_t k = 0; k < obs_idx.size(); ++k) {
      if (obs_idx[k] < 0 || obs_idx[k] > grid.M())
        throw ConfigError("problem: obs index outside grid");
      if (k > 0 && obs_idx[k] < obs_idx[k - 1])
        throw ConfigError("problem: obs indices must be ascending");
    }
    if (grid.M() < 1) throw ConfigError("problem: grid needs at least one interval");
  }
};

}  // namespace dpvi
