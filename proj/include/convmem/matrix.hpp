#pragma once
#include <algorithm>
#include <cstddef>
#include <vector>

namespace convmem {

// Dense row-major double matrix. Everything numeric in this project runs in
// double precision so the gradient-check and merge tolerances stay tight.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), d(size_t(r) * size_t(c), 0.0) {}

  double& at(int r, int c) { return d[size_t(r) * cols + c]; }
  double at(int r, int c) const { return d[size_t(r) * cols + c]; }
  double* row(int r) { return d.data() + size_t(r) * cols; }
  const double* row(int r) const { return d.data() + size_t(r) * cols; }
  size_t size() const { return d.size(); }
  bool empty() const { return d.empty(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  void zero() { std::fill(d.begin(), d.end(), 0.0); }
};

// out(M x N) = x(M x K) * w(N x K)^T ; the y = W·x forward over a batch of rows.
void matmul_nt(const Matrix& x, const Matrix& w, Matrix& out, bool accumulate = false);

// out(M x N) = x(M x K) * w(K x N)
void matmul_nn(const Matrix& x, const Matrix& w, Matrix& out, bool accumulate = false);

// out(K x N) = x(M x K)^T * y(M x N) ; weight-gradient shape.
void matmul_tn(const Matrix& x, const Matrix& y, Matrix& out, bool accumulate = false);

double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace convmem
