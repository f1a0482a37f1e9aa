#include "dpvi/gauss_hermite.hpp"

#include <map>
#include <mutex>

namespace dpvi {

namespace {

GhRule make_rule_1d(int order) {
  if (order < 1) throw ConfigError("gauss-hermite order must be >= 1");
  // Jacobi matrix of the monic Hermite-probabilists' recurrence: zero diagonal,
  // off-diagonal sqrt(i). Eigenvalues are the nodes; squared first eigenvector
  // components are the (normalized) weights.
  Mat J = Mat::Zero(order, order);
  for (int i = 1; i < order; ++i) {
    double c = std::sqrt(double(i));
    J(i, i - 1) = c;
    J(i - 1, i) = c;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(J);
  GhRule r;
  r.z = es.eigenvalues().transpose();
  r.w = es.eigenvectors().row(0).transpose().array().square();
  r.w /= r.w.sum();
  return r;
}

GhRule make_rule(const GhRule& r1, int dim, int order) {
  long n = 1;
  for (int i = 0; i < dim; ++i) n *= order;
  GhRule r;
  r.z.resize(dim, n);
  r.w.resize(n);
  std::vector<int> idx(dim, 0);
  for (long k = 0; k < n; ++k) {
    double w = 1.0;
    for (int a = 0; a < dim; ++a) {
      r.z(a, k) = r1.z(0, idx[a]);
      w *= r1.w(idx[a]);
    }
    r.w(k) = w;
    for (int a = 0; a < dim; ++a) {
      if (++idx[a] < order) break;
      idx[a] = 0;
    }
  }
  return r;
}

}  // namespace

const GhRule& gh_rule_1d(int order) { return gh_rule(1, order); }

const GhRule& gh_rule(int dim, int order) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, GhRule> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_pair(dim, order);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  if (dim < 1) throw ConfigError("gauss-hermite dim must be >= 1");
  auto key1 = std::make_pair(1, order);
  auto it1 = cache.find(key1);
  if (it1 == cache.end()) it1 = cache.emplace(key1, make_rule_1d(order)).first;
  if (dim == 1) return it1->second;
  GhRule r = make_rule(it1->second, dim, order);
  return cache.emplace(key, std::move(r)).first->second;
}

}  // namespace dpvi
