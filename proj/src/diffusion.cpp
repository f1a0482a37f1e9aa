#include "dpvi/diffusion.hpp"

#include <cmath>

namespace dpvi {

namespace {

void check_theta(const std::string& name, const Vec& th, int want) {
  if (int(th.size()) != want)
    throw ConfigError("drift '" + name + "' expects " + std::to_string(want) +
                      " parameter(s), got " + std::to_string(th.size()));
}

class ScalarDrift : public Drift {
 public:
  int dim() const override { return 1; }
  const Vec& theta() const override { return th_; }
  void set_theta(const Vec& th) override {
    check_theta(name(), th, n_params());
    th_ = th;
  }

 protected:
  Vec th_;
};

class OuDrift final : public ScalarDrift {
 public:
  explicit OuDrift(const Vec& th) { set_theta(th); }
  int n_params() const override { return 1; }
  std::string name() const override { return "ou"; }
  void eval(const Mat& X, Mat& F) const override { F = -th_(0) * X; }
  void jac(const Mat& X, Mat& J) const override {
    J.setConstant(1, X.cols(), -th_(0));
  }
  void theta_grad(const Mat& X, Mat& G) const override { G = -X; }
};

class BenesDrift final : public ScalarDrift {
 public:
  explicit BenesDrift(const Vec& th) { set_theta(th); }
  int n_params() const override { return 1; }
  std::string name() const override { return "benes"; }
  void eval(const Mat& X, Mat& F) const override {
    F = th_(0) * X.array().tanh().matrix();
  }
  void jac(const Mat& X, Mat& J) const override {
    J = th_(0) * (1.0 - X.array().tanh().square()).matrix();
  }
  void theta_grad(const Mat& X, Mat& G) const override {
    G = X.array().tanh().matrix();
  }
};

class DoubleWellDrift final : public ScalarDrift {
 public:
  explicit DoubleWellDrift(const Vec& th) { set_theta(th); }
  int n_params() const override { return 2; }
  std::string name() const override { return "double_well"; }
  void eval(const Mat& X, Mat& F) const override {
    F = (th_(0) * X.array() * (th_(1) - X.array().square())).matrix();
  }
  void jac(const Mat& X, Mat& J) const override {
    J = (th_(0) * (th_(1) - 3.0 * X.array().square())).matrix();
  }
  void theta_grad(const Mat& X, Mat& G) const override {
    G.resize(2, X.cols());
    G.row(0) = (X.array() * (th_(1) - X.array().square())).matrix();
    G.row(1) = th_(0) * X;
  }
};

class SineDrift final : public ScalarDrift {
 public:
  explicit SineDrift(const Vec& th) { set_theta(th); }
  int n_params() const override { return 2; }
  std::string name() const override { return "sine"; }
  void eval(const Mat& X, Mat& F) const override {
    F = (th_(0) * (X.array() - th_(1)).sin()).matrix();
  }
  void jac(const Mat& X, Mat& J) const override {
    J = (th_(0) * (X.array() - th_(1)).cos()).matrix();
  }
  void theta_grad(const Mat& X, Mat& G) const override {
    G.resize(2, X.cols());
    G.row(0) = (X.array() - th_(1)).sin().matrix();
    G.row(1) = (-th_(0) * (X.array() - th_(1)).cos()).matrix();
  }
};

// f(x) = sqrt(theta |x|) with |x| smoothed to a = sqrt(x^2 + 1e-12); the
// jacobian is the exact derivative of the smoothed form, theta x / (2 a f).
class SqrtDrift final : public ScalarDrift {
 public:
  explicit SqrtDrift(const Vec& th) { set_theta(th); }
  int n_params() const override { return 1; }
  std::string name() const override { return "sqrt"; }
  void eval(const Mat& X, Mat& F) const override {
    F = (th_(0) * (X.array().square() + kEps).sqrt()).sqrt().matrix();
  }
  void jac(const Mat& X, Mat& J) const override {
    auto a = (X.array().square() + kEps).sqrt();
    auto f = (th_(0) * a).sqrt();
    J = (th_(0) * X.array() / (2.0 * a * f.max(1e-300))).matrix();
  }
  void theta_grad(const Mat& X, Mat& G) const override {
    auto a = (X.array().square() + kEps).sqrt();
    auto f = (th_(0) * a).sqrt();
    G = (a / (2.0 * f.max(1e-300))).matrix();
  }

 private:
  static constexpr double kEps = 1e-12;
};

class VanDerPolDrift final : public Drift {
 public:
  explicit VanDerPolDrift(const Vec& th) { set_theta(th); }
  int dim() const override { return 2; }
  int n_params() const override { return 2; }
  const Vec& theta() const override { return th_; }
  void set_theta(const Vec& th) override {
    check_theta(name(), th, 2);
    th_ = th;
  }
  std::string name() const override { return "van_der_pol"; }
  void eval(const Mat& X, Mat& F) const override {
    F.resize(2, X.cols());
    auto x1 = X.row(0).array(), x2 = X.row(1).array();
    F.row(0) = (th_(0) * (th_(1) * x1 - x1.cube() / 3.0 - x2)).matrix();
    F.row(1) = (x1 / th_(1)).matrix();
  }
  void jac(const Mat& X, Mat& J) const override {
    J.resize(4, X.cols());
    auto x1 = X.row(0).array();
    J.row(0) = (th_(0) * (th_(1) - x1.square())).matrix();  // df1/dx1
    J.row(1).setConstant(1.0 / th_(1));                     // df2/dx1
    J.row(2).setConstant(-th_(0));                          // df1/dx2
    J.row(3).setZero();                                     // df2/dx2
  }
  void theta_grad(const Mat& X, Mat& G) const override {
    G.resize(4, X.cols());
    auto x1 = X.row(0).array(), x2 = X.row(1).array();
    G.row(0) = (th_(1) * x1 - x1.cube() / 3.0 - x2).matrix();  // df1/dth0
    G.row(1).setZero();                                        // df2/dth0
    G.row(2) = (th_(0) * x1).matrix();                         // df1/dth1
    G.row(3) = (-x1 / (th_(1) * th_(1))).matrix();             // df2/dth1
  }

 private:
  Vec th_;
};

// One hidden layer, three ReLU units: f(x) = W2 relu(W1 x + b1) + b2.
// theta packs [vec(W1); b1; vec(W2); b2], so n_params = 7d + 3.
class MlpDrift final : public Drift {
 public:
  static constexpr int kHidden = 3;

  explicit MlpDrift(const Vec& th) {
    int d = int((th.size() - kHidden) / 7);
    if (d < 1 || 7 * d + kHidden != int(th.size()))
      throw ConfigError("mlp drift: theta length must be 7*dim + 3");
    d_ = d;
    set_theta(th);
  }
  int dim() const override { return d_; }
  int n_params() const override { return 7 * d_ + kHidden; }
  const Vec& theta() const override { return th_; }
  void set_theta(const Vec& th) override {
    check_theta(name(), th, n_params());
    th_ = th;
    int o = 0;
    W1_ = Eigen::Map<const Mat>(th_.data() + o, kHidden, d_);
    o += kHidden * d_;
    b1_ = th_.segment(o, kHidden);
    o += kHidden;
    W2_ = Eigen::Map<const Mat>(th_.data() + o, d_, kHidden);
    o += d_ * kHidden;
    b2_ = th_.segment(o, d_);
  }
  std::string name() const override { return "mlp"; }

  void eval(const Mat& X, Mat& F) const override {
    Mat Z = (W1_ * X).colwise() + b1_;
    F = (W2_ * Z.cwiseMax(0.0)).colwise() + b2_;
  }
  void jac(const Mat& X, Mat& J) const override {
    const int N = int(X.cols());
    Mat Z = (W1_ * X).colwise() + b1_;
    J.resize(d_ * d_, N);
    for (int n = 0; n < N; ++n) {
      Mat Jn = Mat::Zero(d_, d_);
      for (int k = 0; k < kHidden; ++k)
        if (Z(k, n) > 0) Jn += W2_.col(k) * W1_.row(k);
      J.col(n) = Eigen::Map<const Vec>(Jn.data(), d_ * d_);
    }
  }
  void theta_grad(const Mat& X, Mat& G) const override {
    const int N = int(X.cols()), P = n_params();
    Mat Z = (W1_ * X).colwise() + b1_;
    G.setZero(d_ * P, N);
    for (int n = 0; n < N; ++n) {
      for (int k = 0; k < kHidden; ++k) {
        double act = Z(k, n) > 0 ? 1.0 : 0.0;
        double relu = Z(k, n) > 0 ? Z(k, n) : 0.0;
        for (int i = 0; i < d_; ++i) {
          // dW1(k,j): W2(i,k) act x_j ; db1(k): W2(i,k) act
          for (int j = 0; j < d_; ++j) {
            int p = k + kHidden * j;
            G(i + d_ * p, n) += W2_(i, k) * act * X(j, n);
          }
          int pb1 = kHidden * d_ + k;
          G(i + d_ * pb1, n) += W2_(i, k) * act;
          // dW2(i,k): relu(z_k)
          int pw2 = kHidden * d_ + kHidden + i + d_ * k;
          G(i + d_ * pw2, n) += relu;
        }
      }
      for (int i = 0; i < d_; ++i) {
        int pb2 = kHidden * d_ + kHidden + d_ * kHidden + i;
        G(i + d_ * pb2, n) += 1.0;
      }
    }
  }

 private:
  int d_;
  Vec th_;
  Mat W1_, W2_;
  Vec b1_, b2_;
};

}  // namespace

Vec Drift::eval1(const Vec& x) const {
  Mat F;
  eval(x, F);
  return F.col(0);
}

Mat Drift::jac1(const Vec& x) const {
  Mat J;
  jac(x, J);
  return Eigen::Map<const Mat>(J.data(), dim(), dim());
}

std::unique_ptr<Drift> make_drift(const std::string& name, const Vec& theta) {
  if (name == "ou") return std::make_unique<OuDrift>(theta);
  if (name == "benes") return std::make_unique<BenesDrift>(theta);
  if (name == "double_well") return std::make_unique<DoubleWellDrift>(theta);
  if (name == "sine") return std::make_unique<SineDrift>(theta);
  if (name == "sqrt") return std::make_unique<SqrtDrift>(theta);
  if (name == "van_der_pol") return std::make_unique<VanDerPolDrift>(theta);
  if (name == "mlp") return std::make_unique<MlpDrift>(theta);
  throw ConfigError("unknown drift model '" + name + "'");
}

std::vector<std::string> drift_names() {
  return {"ou", "benes", "double_well", "sine", "sqrt", "van_der_pol", "mlp"};
}

Mat simulate_em(const Drift& f, const Mat& Qc, const Vec& x0, double t0,
                double t1, double dt, Rng& rng) {
  const int d = f.dim();
  if (int(x0.size()) != d || Qc.rows() != d || Qc.cols() != d)
    throw ConfigError("simulate_em: dimension mismatch");
  long K = std::lround((t1 - t0) / dt);
  if (K < 1) throw ConfigError("simulate_em: empty time span");
  Mat L = safe_llt(Qc, "simulate_em: Qc").matrixL();
  double sdt = std::sqrt(dt);
  Mat path(d, K + 1);
  path.col(0) = x0;
  Mat F;
  Vec z(d);
  for (long k = 0; k < K; ++k) {
    f.eval(path.col(k), F);
    for (int i = 0; i < d; ++i) z(i) = rng.normal();
    path.col(k + 1) = path.col(k) + F.col(0) * dt + sdt * (L * z);
  }
  return path;
}

void linearize_at(const Drift& f, const Vec& xbar, Mat& A, Vec& b) {
  A = f.jac1(xbar);
  b = f.eval1(xbar) - A * xbar;
}

lgssm::PhiParams discretize(const Vec& m0, const Mat& S0,
                            const std::vector<Mat>& A, const std::vector<Vec>& b,
                            const Mat& Qc, const TimeGrid& grid) {
  const int M = grid.M();
  const int d = int(m0.size());
  if (int(A.size()) != M || int(b.size()) != M)
    throw ConfigError("discretize: need one (A, b) per interval");
  lgssm::PhiParams phi;
  phi.m0 = m0;
  phi.S0 = S0;
  phi.A.resize(M);
  phi.b.resize(M);
  phi.Q.resize(M);
  Mat I = Mat::Identity(d, d);
  for (int m = 0; m < M; ++m) {
    double dt = grid.dt[m];
    phi.A[m] = I + A[m] * dt;
    phi.b[m] = b[m] * dt;
    phi.Q[m] = Qc * dt;
  }
  return phi;
}

}  // namespace dpvi
