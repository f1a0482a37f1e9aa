#include <doctest.h>

#include <cmath>

#include "dpvi/lgssm.hpp"
#include "dpvi/rng.hpp"
#include "helpers.hpp"

using namespace dpvi;
using namespace dpvi::lgssm;
using testutil::DenseGaussian;

namespace {

PhiParams scalar_chain(double A, double b, double Q, double m0, double S0, int M) {
  PhiParams phi;
  phi.m0 = Vec::Constant(1, m0);
  phi.S0 = Mat::Constant(1, 1, S0);
  phi.A.assign(M, Mat::Constant(1, 1, A));
  phi.b.assign(M, Vec::Constant(1, b));
  phi.Q.assign(M, Mat::Constant(1, 1, Q));
  return phi;
}

}  // namespace

TEST_CASE("moment recursion: identity chain accumulates variance") {
  PhiParams phi = scalar_chain(1.0, 0.0, 1.0, 0.0, 1.0, 2);
  Marginals marg = phi_to_moments(phi);
  CHECK(marg.m[0](0) == doctest::Approx(0.0));
  CHECK(marg.m[1](0) == doctest::Approx(0.0));
  CHECK(marg.m[2](0) == doctest::Approx(0.0));
  CHECK(marg.S[0](0, 0) == doctest::Approx(1.0));
  CHECK(marg.S[1](0, 0) == doctest::Approx(2.0));
  CHECK(marg.S[2](0, 0) == doctest::Approx(3.0));
  CHECK(marg.C[0](0, 0) == doctest::Approx(1.0));
  CHECK(marg.C[1](0, 0) == doctest::Approx(2.0));
}

TEST_CASE("moment recursion: contracting chain hand values") {
  PhiParams phi = scalar_chain(0.5, 1.0, 0.5, 0.0, 1.0, 1);
  Marginals marg = phi_to_moments(phi);
  CHECK(marg.m[1](0) == doctest::Approx(1.0));
  CHECK(marg.S[1](0, 0) == doctest::Approx(0.75));
  CHECK(marg.C[0](0, 0) == doctest::Approx(0.5));
}

TEST_CASE("kl of unit Gaussians shifted by one is one half") {
  PhiParams q = scalar_chain(0, 0, 1, 0.0, 1.0, 0);
  PhiParams p = scalar_chain(0, 0, 1, 1.0, 1.0, 0);
  NaturalParams qe = phi_to_eta(q), pe = phi_to_eta(p);
  ExpectationParams qmu = to_expectation(phi_to_moments(q));
  CHECK(kl(qe, qmu, pe) == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(kl(qe, qmu, qe) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("log partition of standard normal is log sqrt(2 pi)") {
  NaturalParams eta;
  eta.h.assign(1, Vec::Zero(1));
  eta.Jd.assign(1, Mat::Identity(1, 1));
  CHECK(log_partition(eta) == doctest::Approx(std::log(std::sqrt(2.0 * M_PI))).epsilon(1e-12));
}

TEST_CASE("parameterization round trips") {
  Rng rng(41);
  for (int d : {1, 2}) {
    for (int M : {0, 1, 3, 7}) {
      PhiParams phi = testutil::random_phi(rng, d, M);
      NaturalParams eta = phi_to_eta(phi);
      PhiParams back = eta_to_phi(eta);
      CHECK((back.m0 - phi.m0).norm() < 1e-10);
      CHECK((back.S0 - phi.S0).norm() < 1e-10);
      for (int m = 0; m < M; ++m) {
        CHECK((back.A[m] - phi.A[m]).norm() < 1e-10);
        CHECK((back.b[m] - phi.b[m]).norm() < 1e-10);
        CHECK((back.Q[m] - phi.Q[m]).norm() < 1e-10);
      }
      Marginals marg = smooth(eta);
      NaturalParams eta2 = moments_to_eta(marg);
      for (int i = 0; i <= M; ++i) {
        CHECK((eta2.h[i] - eta.h[i]).norm() < 1e-8);
        CHECK((eta2.Jd[i] - eta.Jd[i]).norm() < 1e-8);
      }
      for (int m = 0; m < M; ++m) CHECK((eta2.Jo[m] - eta.Jo[m]).norm() < 1e-8);
    }
  }
}

TEST_CASE("smoothed marginals match the dense joint") {
  Rng rng(42);
  for (int d : {1, 2}) {
    for (int M : {1, 3, 7}) {
      PhiParams phi = testutil::random_phi(rng, d, M);
      DenseGaussian joint = testutil::dense_from_phi(phi);
      Marginals marg = smooth(phi_to_eta(phi));
      for (int i = 0; i <= M; ++i) {
        CHECK((marg.m[i] - joint.mean.segment(i * d, d)).norm() < 1e-8);
        CHECK((marg.S[i] - joint.cov.block(i * d, i * d, d, d)).norm() < 1e-8);
      }
      for (int m = 0; m < M; ++m) {
        CHECK((marg.C[m] - joint.cov.block((m + 1) * d, m * d, d, d)).norm() < 1e-8);
      }
    }
  }
}

TEST_CASE("log partition and dot match dense formulas") {
  Rng rng(43);
  for (int d : {1, 2}) {
    for (int M : {0, 2, 5}) {
      PhiParams phi = testutil::random_phi(rng, d, M);
      NaturalParams eta = phi_to_eta(phi);
      Vec h;
      Mat J;
      testutil::dense_from_eta(eta, h, J);
      CHECK(log_partition(eta) ==
            doctest::Approx(testutil::dense_log_partition(h, J)).epsilon(1e-8));
      ExpectationParams mu = to_expectation(smooth(eta));
      DenseGaussian joint = testutil::dense_from_phi(phi);
      Mat M2 = joint.cov + joint.mean * joint.mean.transpose();
      double expect = h.dot(joint.mean) - 0.5 * J.cwiseProduct(M2).sum();
      CHECK(dot(eta, mu) == doctest::Approx(expect).epsilon(1e-8));
    }
  }
}

TEST_CASE("kl matches the dense divergence and is nonnegative") {
  Rng rng(44);
  for (int d : {1, 2}) {
    for (int M : {0, 2, 5}) {
      PhiParams qf = testutil::random_phi(rng, d, M);
      PhiParams pf = testutil::random_phi(rng, d, M);
      NaturalParams qe = phi_to_eta(qf), pe = phi_to_eta(pf);
      ExpectationParams qmu = to_expectation(phi_to_moments(qf));
      double got = kl(qe, qmu, pe);
      double want = testutil::dense_kl(testutil::dense_from_phi(qf),
                                       testutil::dense_from_phi(pf));
      CHECK(got == doctest::Approx(want).epsilon(1e-8));
      CHECK(got >= -1e-10);
    }
  }
}

TEST_CASE("kl mean-parameter gradient is the natural-parameter gap") {
  Rng rng(45);
  const int d = 1, M = 3;
  PhiParams qf = testutil::random_phi(rng, d, M);
  PhiParams pf = testutil::random_phi(rng, d, M);
  NaturalParams pe = phi_to_eta(pf);
  Marginals base = phi_to_moments(qf);

  auto kl_of = [&](const Marginals& marg) {
    NaturalParams qe = moments_to_eta(marg);
    return kl(qe, to_expectation(marg), pe);
  };
  auto mu_flat = [&](const Marginals& marg) {
    ExpectationParams mu = to_expectation(marg);
    std::vector<double> v;
    for (auto& x : mu.m1) v.push_back(x(0));
    for (auto& x : mu.M2) v.push_back(x(0, 0));
    for (auto& x : mu.M12) v.push_back(x(0, 0));
    return v;
  };

  // Perturb the marginals along a random direction; the chain rule gives
  // d KL / d eps = <eta_q - eta_p, d mu / d eps>.
  Marginals up = base, dn = base;
  double eps = 1e-6;
  Rng prng(99);
  for (int i = 0; i <= M; ++i) {
    double dm = prng.normal() * eps, ds = prng.normal() * eps;
    up.m[i](0) += dm;
    dn.m[i](0) -= dm;
    up.S[i](0, 0) += ds;
    dn.S[i](0, 0) -= ds;
  }
  for (int m = 0; m < M; ++m) {
    double dc = prng.normal() * eps;
    up.C[m](0, 0) += dc;
    dn.C[m](0, 0) -= dc;
  }
  double fd = (kl_of(up) - kl_of(dn)) / 2.0;

  NaturalParams gap = diff(moments_to_eta(base), pe);
  std::vector<double> muu = mu_flat(up), mud = mu_flat(dn);
  // assemble <gap, dmu> over the flattened layout used above
  double inner = 0;
  size_t k = 0;
  for (int i = 0; i <= M; ++i, ++k) inner += gap.h[i](0) * (muu[k] - mud[k]) / 2.0;
  for (int i = 0; i <= M; ++i, ++k)
    inner += -0.5 * gap.Jd[i](0, 0) * (muu[k] - mud[k]) / 2.0;
  for (int m = 0; m < M; ++m, ++k)
    inner += -gap.Jo[m](0, 0) * (muu[k] - mud[k]) / 2.0;
  CHECK(fd == doctest::Approx(inner).epsilon(1e-5));
}

TEST_CASE("log partition is midpoint convex") {
  Rng rng(46);
  for (int rep = 0; rep < 5; ++rep) {
    PhiParams a = testutil::random_phi(rng, 1, 4);
    PhiParams b = testutil::random_phi(rng, 1, 4);
    NaturalParams ea = phi_to_eta(a), eb = phi_to_eta(b);
    NaturalParams mid = ea;
    for (size_t i = 0; i < mid.h.size(); ++i) {
      mid.h[i] = 0.5 * (ea.h[i] + eb.h[i]);
      mid.Jd[i] = 0.5 * (ea.Jd[i] + eb.Jd[i]);
    }
    for (size_t m = 0; m < mid.Jo.size(); ++m)
      mid.Jo[m] = 0.5 * (ea.Jo[m] + eb.Jo[m]);
    CHECK(log_partition(mid) <=
          0.5 * (log_partition(ea) + log_partition(eb)) + 1e-9);
  }
}

TEST_CASE("indefinite precision is rejected") {
  PhiParams phi = scalar_chain(0.9, 0.0, 1.0, 0.0, 1.0, 3);
  NaturalParams eta = phi_to_eta(phi);
  eta.Jd[2](0, 0) -= 10.0;  // destroys positive definiteness
  PhiParams out;
  CHECK_FALSE(try_eta_to_phi(eta, out));
  CHECK_THROWS_AS((void)eta_to_phi(eta), NumericalError);
}

TEST_CASE("kalman smoother matches dense conditioning") {
  Rng rng(47);
  for (int d : {1, 2}) {
    PhiParams phi = testutil::random_phi(rng, d, 6);
    RowVec H = RowVec::Zero(d);
    H(0) = 1.0;
    if (d == 2) H(1) = -0.5;
    ObsSeq obs;
    obs.idx = {1, 3, 3, 6};
    obs.y = {0.3, -0.2, -0.1, 0.8};
    double sigma2 = 0.04;
    double loglik_dense = 0;
    DenseGaussian joint = testutil::dense_from_phi(phi);
    DenseGaussian post =
        testutil::dense_condition(joint, obs, H, sigma2, &loglik_dense);
    KalmanResult kr = kalman_smoother(phi, obs, H, sigma2);
    CHECK(kr.loglik == doctest::Approx(loglik_dense).epsilon(1e-8));
    for (int i = 0; i <= 6; ++i) {
      CHECK((kr.marg.m[i] - post.mean.segment(i * d, d)).norm() < 1e-8);
      CHECK((kr.marg.S[i] - post.cov.block(i * d, i * d, d, d)).norm() < 1e-8);
    }
    for (int m = 0; m < 6; ++m) {
      CHECK((kr.marg.C[m] - post.cov.block((m + 1) * d, m * d, d, d)).norm() < 1e-8);
    }
  }
}

TEST_CASE("conditioning via natural-parameter sites matches the kalman smoother") {
  // Folding observation precision directly into the chain's natural parameters
  // and smoothing must reproduce the filter/smoother posterior, and the
  // partition-function identity must reproduce its marginal likelihood.
  Rng rng(48);
  const int d = 2, M = 5;
  PhiParams phi = testutil::random_phi(rng, d, M);
  RowVec H(d);
  H << 1.0, 0.25;
  double sigma2 = 0.09;
  ObsSeq obs;
  obs.idx = {0, 2, 5};
  obs.y = {0.1, -0.4, 0.9};
  NaturalParams prior = phi_to_eta(phi);
  NaturalParams post = prior;
  for (size_t k = 0; k < obs.idx.size(); ++k) {
    int g = obs.idx[k];
    post.h[g] += H.transpose() * (obs.y[k] / sigma2);
    post.Jd[g] += H.transpose() * H / sigma2;
  }
  KalmanResult kr = kalman_smoother(phi, obs, H, sigma2);
  Marginals marg = smooth(post);
  for (int i = 0; i <= M; ++i) {
    CHECK((marg.m[i] - kr.marg.m[i]).norm() < 1e-8);
    CHECK((marg.S[i] - kr.marg.S[i]).norm() < 1e-8);
  }
  double quad = 0;
  for (double yk : obs.y) quad += yk * yk;
  double evidence = log_partition(post) - log_partition(prior) -
                    0.5 * quad / sigma2 -
                    0.5 * double(obs.y.size()) * (kLog2Pi + std::log(sigma2));
  CHECK(evidence == doctest::Approx(kr.loglik).epsilon(1e-8));
}
