#pragma once

#include <vector>

#include "dpvi/common.hpp"

namespace dpvi {

// Discretization grid: M+1 nodes t[0..M], M intervals dt[m] = t[m+1] - t[m].
struct TimeGrid {
  std::vector<double> t;
  std::vector<double> dt;
  int M() const { return int(dt.size()); }
};

// Sorted union of the uniform grid {t0 + k*step} over [t0, t1] and `extra`
// times (e.g. observation times), coalescing nodes closer than snap_tol.
TimeGrid build_grid(double t0, double t1, double step,
                    const std::vector<double>& extra, double snap_tol = 1e-9);

// Index of the node matching `time` within snap_tol; ConfigError if absent.
int grid_index(const TimeGrid& g, double time, double snap_tol = 1e-9);

}  // namespace dpvi
