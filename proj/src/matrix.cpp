#include "convmem/matrix.hpp"

#include <cassert>
#include <cmath>

namespace convmem {

void matmul_nt(const Matrix& x, const Matrix& w, Matrix& out, bool accumulate) {
  assert(x.cols == w.cols);
  if (!accumulate) {
    out.rows = x.rows;
    out.cols = w.rows;
    out.d.assign(size_t(x.rows) * w.rows, 0.0);
  }
  assert(out.rows == x.rows && out.cols == w.rows);
  const int K = x.cols;
  for (int m = 0; m < x.rows; ++m) {
    const double* __restrict xr = x.row(m);
    double* __restrict or_ = out.row(m);
    for (int n = 0; n < w.rows; ++n) {
      const double* __restrict wr = w.row(n);
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += xr[k] * wr[k];
      or_[n] += acc;
    }
  }
}

void matmul_nn(const Matrix& x, const Matrix& w, Matrix& out, bool accumulate) {
  assert(x.cols == w.rows);
  if (!accumulate) {
    out.rows = x.rows;
    out.cols = w.cols;
    out.d.assign(size_t(x.rows) * w.cols, 0.0);
  }
  assert(out.rows == x.rows && out.cols == w.cols);
  const int N = w.cols;
  for (int m = 0; m < x.rows; ++m) {
    const double* __restrict xr = x.row(m);
    double* __restrict or_ = out.row(m);
    for (int k = 0; k < x.cols; ++k) {
      const double xv = xr[k];
      if (xv == 0.0) continue;
      const double* __restrict wr = w.row(k);
      for (int n = 0; n < N; ++n) or_[n] += xv * wr[n];
    }
  }
}

void matmul_tn(const Matrix& x, const Matrix& y, Matrix& out, bool accumulate) {
  assert(x.rows == y.rows);
  if (!accumulate) {
    out.rows = x.cols;
    out.cols = y.cols;
    out.d.assign(size_t(x.cols) * y.cols, 0.0);
  }
  assert(out.rows == x.cols && out.cols == y.cols);
  const int N = y.cols;
  for (int m = 0; m < x.rows; ++m) {
    const double* __restrict xr = x.row(m);
    const double* __restrict yr = y.row(m);
    for (int k = 0; k < x.cols; ++k) {
      const double xv = xr[k];
      if (xv == 0.0) continue;
      double* __restrict or_ = out.row(k);
      for (int n = 0; n < N; ++n) or_[n] += xv * yr[n];
    }
  }
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  assert(a.same_shape(b));
  double m = 0.0;
  for (size_t i = 0; i < a.d.size(); ++i) m = std::max(m, std::fabs(a.d[i] - b.d[i]));
  return m;
}

}  // namespace convmem
