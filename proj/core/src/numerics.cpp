#include "ketlab/numerics.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace ketlab::numerics {

namespace {

using EMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMapF = Eigen::Map<EMatF>;
using ECMapF = Eigen::Map<const EMatF>;

ECMapF as_eigen(const Matrix& m) { return ECMapF(m.data.data(), m.rows, m.cols); }
EMapF as_eigen(Matrix& m) { return EMapF(m.data.data(), m.rows, m.cols); }

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m.at(i, i) = 1.0f;
  return m;
}

Matrix Matrix::column(std::span<const float> v) {
  Matrix m(static_cast<int>(v.size()), 1);
  std::copy(v.begin(), v.end(), m.data.begin());
  return m;
}

bool all_finite(const Matrix& m) {
  for (float x : m.data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (float x : m.data) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

double dot(std::span<const float> a, std::span<const float> b) {
  require(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols == b.rows, "matmul: inner dimension mismatch");
  Matrix c(a.rows, b.cols);
  as_eigen(c).noalias() = as_eigen(a) * as_eigen(b);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows == b.rows, "matmul_tn: inner dimension mismatch");
  Matrix c(a.cols, b.cols);
  as_eigen(c).noalias() = as_eigen(a).transpose() * as_eigen(b);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols == b.cols, "matmul_nt: inner dimension mismatch");
  Matrix c(a.rows, b.rows);
  as_eigen(c).noalias() = as_eigen(a) * as_eigen(b).transpose();
  return c;
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  require(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols,
          "matmul_tn_acc: dimension mismatch");
  as_eigen(c).noalias() += as_eigen(a).transpose() * as_eigen(b);
}

void add_inplace(Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "add_inplace: shape mismatch");
  as_eigen(a) += as_eigen(b);
}

void scale_inplace(Matrix& a, float s) { as_eigen(a) *= s; }

Matrix solve_spd(const Matrix& c, const Matrix& b) {
  require(c.rows == c.cols, "solve_spd: c must be square");
  require(c.rows == b.rows, "solve_spd: b row count must match c");
  const int n = c.rows;

  Eigen::MatrixXd cd(n, n);
  double max_abs = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      cd(i, j) = c.at(i, j);
      max_abs = std::max(max_abs, std::abs(cd(i, j)));
    }
  const double sym_tol = 1e-6 * std::max(1.0, max_abs);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (std::abs(cd(i, j) - cd(j, i)) > sym_tol)
        throw std::invalid_argument("solve_spd: matrix not symmetric within tolerance");
  // Work on the symmetrized matrix so the factorization sees an exactly
  // symmetric operand.
  Eigen::MatrixXd cs = 0.5 * (cd + cd.transpose());

  Eigen::MatrixXd bd(b.rows, b.cols);
  for (int i = 0; i < b.rows; ++i)
    for (int j = 0; j < b.cols; ++j) bd(i, j) = b.at(i, j);

  double lambda = 1e-6 * cs.trace() / n;
  if (!(lambda > 0.0)) lambda = 1e-12;
  Eigen::MatrixXd attempt = cs;
  for (int tries = 0; tries < 4; ++tries) {
    Eigen::LLT<Eigen::MatrixXd> llt(attempt);
    if (llt.info() == Eigen::Success) {
      Eigen::MatrixXd x = llt.solve(bd);
      Matrix out(b.rows, b.cols);
      for (int i = 0; i < b.rows; ++i)
        for (int j = 0; j < b.cols; ++j) out.at(i, j) = static_cast<float>(x(i, j));
      if (!all_finite(out)) throw SingularSystemError("solve_spd: non-finite solution");
      return out;
    }
    attempt = cs + lambda * Eigen::MatrixXd::Identity(n, n);
    lambda *= 10.0;
  }
  throw SingularSystemError("solve_spd: matrix not positive definite after maximum jitter");
}

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> p(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (float z : logits) mx = std::max(mx, static_cast<double>(z));
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

SoftmaxXent softmax_xent(std::span<const float> logits, int target) {
  require(target >= 0 && static_cast<size_t>(target) < logits.size(),
          "softmax_xent: target out of range");
  SoftmaxXent out;
  std::vector<double> p = softmax(logits);
  out.probs.resize(p.size());
  out.dlogits.resize(p.size());
  for (size_t i = 0; i < p.size(); ++i) {
    out.probs[i] = static_cast<float>(p[i]);
    out.dlogits[i] = static_cast<float>(p[i]);
  }
  out.dlogits[target] -= 1.0f;
  out.loss = -std::log(std::max(p[target], 1e-300));
  return out;
}

void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, long step,
                double lr, double beta1, double beta2, double eps, double weight_decay) {
  require(param.same_shape(grad), "adamw_step: grad shape mismatch");
  require(param.same_shape(state.m) && param.same_shape(state.v), "adamw_step: state shape mismatch");
  require(step >= 1, "adamw_step: step must be >= 1");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (size_t i = 0; i < param.data.size(); ++i) {
    const double g = grad.data[i];
    double m = beta1 * state.m.data[i] + (1.0 - beta1) * g;
    double v = beta2 * state.v.data[i] + (1.0 - beta2) * g * g;
    state.m.data[i] = static_cast<float>(m);
    state.v.data[i] = static_cast<float>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    double p = param.data[i];
    p -= lr * mhat / (std::sqrt(vhat) + eps);
    p -= lr * weight_decay * param.data[i];  // decoupled decay
    param.data[i] = static_cast<float>(p);
  }
}

void adam_step(Matrix& param, const Matrix& grad, AdamState& state, long step,
               double lr, double beta1, double beta2, double eps, double l2) {
  require(param.same_shape(grad), "adam_step: grad shape mismatch");
  require(param.same_shape(state.m) && param.same_shape(state.v), "adam_step: state shape mismatch");
  require(step >= 1, "adam_step: step must be >= 1");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (size_t i = 0; i < param.data.size(); ++i) {
    const double g = static_cast<double>(grad.data[i]) + l2 * param.data[i];
    double m = beta1 * state.m.data[i] + (1.0 - beta1) * g;
    double v = beta2 * state.v.data[i] + (1.0 - beta2) * g * g;
    state.m.data[i] = static_cast<float>(m);
    state.v.data[i] = static_cast<float>(v);
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    param.data[i] = static_cast<float>(param.data[i] - lr * mhat / (std::sqrt(vhat) + eps));
  }
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> theta, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be > 0");
  std::vector<double> work(theta.begin(), theta.end());
  std::vector<double> grad(theta.size());
  for (size_t i = 0; i < work.size(); ++i) {
    const double orig = work[i];
    work[i] = orig + eps;
    const double fp = f(work);
    work[i] = orig - eps;
    const double fm = f(work);
    work[i] = orig;
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

}  // namespace ketlab::numerics
