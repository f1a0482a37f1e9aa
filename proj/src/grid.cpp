#include "dpvi/grid.hpp"

#include <algorithm>
#include <cmath>

namespace dpvi {

TimeGrid build_grid(double t0, double t1, double step,
                    const std::vector<double>& extra, double snap_tol) {
  if (!(t1 > t0)) throw ConfigError("grid: need t1 > t0");
  if (!(step > 0)) throw ConfigError("grid: need step > 0");
  std::vector<double> nodes;
  long K = std::lround((t1 - t0) / step);
  if (K < 1 || std::abs(t0 + double(K) * step - t1) > snap_tol) {
    K = long(std::floor((t1 - t0) / step));
  }
  for (long k = 0; k <= K; ++k) nodes.push_back(t0 + double(k) * step);
  if (t1 - nodes.back() > snap_tol) nodes.push_back(t1);
  for (double e : extra) {
    if (e < t0 - snap_tol || e > t1 + snap_tol)
      throw ConfigError("grid: time outside [t0, t1]");
    nodes.push_back(std::min(std::max(e, t0), t1));
  }
  std::sort(nodes.begin(), nodes.end());
  TimeGrid g;
  for (double v : nodes) {
    if (g.t.empty() || v - g.t.back() > snap_tol) g.t.push_back(v);
  }
  g.dt.resize(g.t.size() - 1);
  for (size_t i = 0; i + 1 < g.t.size(); ++i) g.dt[i] = g.t[i + 1] - g.t[i];
  return g;
}

int grid_index(const TimeGrid& g, double time, double snap_tol) {
  auto it = std::lower_bound(g.t.begin(), g.t.end(), time - snap_tol);
  if (it == g.t.end() || std::abs(*it - time) > snap_tol)
    throw ConfigError("grid: time not on grid");
  return int(it - g.t.begin());
}

}  // namespace dpvi
