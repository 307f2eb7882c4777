#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ketlab::numerics {

/// Dense row-major binary32 matrix. Vectors are matrices with cols == 1
/// (or a single row, depending on context). Heavier routines (SPD solve,
/// covariance accumulation) work in binary64 internally and round back.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;  // row-major, rows*cols entries

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

  static Matrix zeros(int r, int c) { return Matrix(r, c); }
  static Matrix identity(int n);
  static Matrix column(std::span<const float> v);

  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  std::span<float> row(int r) { return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)}; }
  std::span<const float> row(int r) const {
    return {data.data() + static_cast<size_t>(r) * cols, static_cast<size_t>(cols)};
  }

  size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  void fill(float v) { std::fill(data.begin(), data.end(), v); }
};

bool all_finite(const Matrix& m);
double frobenius_norm(const Matrix& m);
double dot(std::span<const float> a, std::span<const float> b);

struct SingularSystemError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// a * b. Fixed blocked summation order (Eigen, single-threaded), so results
/// are identical across runs of the same binary.
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// c += aᵀ * b (gradient accumulation)
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);

void add_inplace(Matrix& a, const Matrix& b);
void scale_inplace(Matrix& a, float s);

/// Solve c x = b for symmetric positive definite c. Cholesky in binary64.
/// If factorization fails, retries with jitter lambda*I, lambda escalating
/// x10 from 1e-6*trace(c)/n, three attempts, then throws SingularSystemError.
/// Also throws if c is not square or not symmetric within 1e-6 (relative to
/// the largest entry magnitude).
Matrix solve_spd(const Matrix& c, const Matrix& b);

struct SoftmaxXent {
  std::vector<float> probs;
  double loss = 0.0;
  std::vector<float> dlogits;  // probs - onehot(target)
};

/// Max-shifted softmax + cross entropy against a single target index.
SoftmaxXent softmax_xent(std::span<const float> logits, int target);

/// Max-shifted softmax alone, accumulated in binary64.
std::vector<double> softmax(std::span<const float> logits);

struct AdamState {
  Matrix m;  // first moment
  Matrix v;  // second moment
  AdamState() = default;
  explicit AdamState(const Matrix& shape_like) : m(shape_like.rows, shape_like.cols), v(shape_like.rows, shape_like.cols) {}
};

/// One AdamW step with decoupled weight decay (decay applied to the
/// parameter, not folded into the gradient). step is 1-based.
void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, long step,
                double lr, double beta1, double beta2, double eps, double weight_decay);

/// Classic Adam; l2 > 0 folds l2*param into the gradient (no decoupling).
void adam_step(Matrix& param, const Matrix& grad, AdamState& state, long step,
               double lr, double beta1, double beta2, double eps, double l2);

/// Central differences per coordinate, O(eps^2).
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> theta, double eps);

}  // namespace ketlab::numerics
