#pragma once

#include "dpvi/common.hpp"

namespace dpvi {

// Quadrature rule for expectations under N(0, I): E[f] ~= sum_k w[k] f(z.col(k)).
struct GhRule {
  Mat z;  // dim x n_nodes
  Vec w;  // n_nodes, sums to 1
};

// One-dimensional Gauss-Hermite rule (probabilists' weight), Golub-Welsch.
const GhRule& gh_rule_1d(int order);

// Tensor-product rule over `dim` axes with `order` nodes per axis. Cached.
const GhRule& gh_rule(int dim, int order);

}  // namespace dpvi
