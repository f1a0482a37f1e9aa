#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace dpvi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

// Bad user-supplied configuration (unknown names, invalid dimensions, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical breakdown (lost positive definiteness, divergence, ...).
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr double kLog2Pi = 1.8378770664093454836;

inline void symmetrize(Mat& a) { a = (0.5 * (a + a.transpose())).eval(); }

inline Mat symmetrized(const Mat& a) { return 0.5 * (a + a.transpose()); }

// Cholesky with a single jitter retry (1e-8 x mean diagonal), then a hard error.
inline Eigen::LLT<Mat> safe_llt(const Mat& a, const char* what) {
  Eigen::LLT<Mat> llt(a);
  if (llt.info() == Eigen::Success) return llt;
  double jitter = 1e-8 * a.diagonal().mean();
  if (!(jitter > 0)) jitter = 1e-12;
  llt.compute(a + jitter * Mat::Identity(a.rows(), a.cols()));
  if (llt.info() == Eigen::Success) return llt;
  throw NumericalError(std::string(what) + ": matrix not positive definite");
}

// Strict (no jitter) PD probe; used for step rejection.
inline bool try_llt(const Mat& a, Eigen::LLT<Mat>& out) {
  out.compute(a);
  return out.info() == Eigen::Success;
}

inline double logdet_from_llt(const Eigen::LLT<Mat>& llt) {
  return 2.0 * Mat(llt.matrixL()).diagonal().array().log().sum();
}

inline double logdet_spd(const Mat& a, const char* what) {
  return logdet_from_llt(safe_llt(a, what));
}

inline double gaussian_logpdf(const Vec& x, const Vec& m, const Mat& S) {
  Eigen::LLT<Mat> llt = safe_llt(S, "gaussian_logpdf");
  Vec w = llt.matrixL().solve(x - m);
  return -0.5 * (double(x.size()) * kLog2Pi + logdet_from_llt(llt) + w.squaredNorm());
}

}  // namespace dpvi
