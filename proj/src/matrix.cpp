#include "matrix.hpp"

#include <cmath>
#include <sstream>

#include "common.hpp"
#include "rng.hpp"

namespace fedgen {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream out;
  out << m.rows << "x" << m.cols;
  return out.str();
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    fail(ErrorCode::kDimension, std::string(op) + ": shape mismatch " +
                                    shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

Matrix::Matrix(std::size_t r, std::size_t c, double fill)
    : rows(r), cols(c), data(r * c, fill) {}

Matrix col_vector(std::size_t n, double fill) { return Matrix(n, 1, fill); }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    fail(ErrorCode::kDimension, "matmul: inner dimensions differ, " +
                                    shape_str(a) + " times " + shape_str(b));
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      double aik = a.data[i * a.cols + k];
      if (aik == 0.0) continue;
      const double* brow = &b.data[k * b.cols];
      double* orow = &out.data[i * b.cols];
      for (std::size_t j = 0; j < b.cols; ++j) {
        orow[j] += aik * brow[j];
      }
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) {
      out.data[j * a.rows + i] = a.data[i * a.cols + j];
    }
  }
  return out;
}

Matrix affine(const Matrix& w, const Matrix& x, const Matrix& b) {
  if (w.cols != x.rows || x.cols != 1 || b.rows != w.rows || b.cols != 1) {
    fail(ErrorCode::kDimension, "affine: W " + shape_str(w) + ", x " +
                                    shape_str(x) + ", b " + shape_str(b));
  }
  Matrix y = b;
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* wrow = &w.data[i * w.cols];
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols; ++j) {
      acc += wrow[j] * x.data[j];
    }
    y.data[i] += acc;
  }
  return y;
}

void add_matvec(Matrix& y, const Matrix& w, const Matrix& x) {
  if (w.cols != x.rows || x.cols != 1 || y.rows != w.rows || y.cols != 1) {
    fail(ErrorCode::kDimension, "add_matvec: W " + shape_str(w) + ", x " +
                                    shape_str(x) + ", y " + shape_str(y));
  }
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double* wrow = &w.data[i * w.cols];
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols; ++j) {
      acc += wrow[j] * x.data[j];
    }
    y.data[i] += acc;
  }
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
  return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

void add_in_place(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add_in_place");
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

void sub_in_place(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub_in_place");
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] -= b.data[i];
}

void scale_in_place(Matrix& a, double s) {
  for (double& v : a.data) v *= s;
}

void axpy(Matrix& y, double alpha, const Matrix& x) {
  require_same_shape(y, x, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += alpha * x.data[i];
}

void add_outer(Matrix& g, const Matrix& dz, const Matrix& x) {
  if (g.rows != dz.rows || g.cols != x.rows || dz.cols != 1 || x.cols != 1) {
    fail(ErrorCode::kDimension, "add_outer: g " + shape_str(g) + ", dz " +
                                    shape_str(dz) + ", x " + shape_str(x));
  }
  for (std::size_t i = 0; i < g.rows; ++i) {
    double d = dz.data[i];
    if (d == 0.0) continue;
    double* grow = &g.data[i * g.cols];
    for (std::size_t j = 0; j < g.cols; ++j) {
      grow[j] += d * x.data[j];
    }
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix sigmoid(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.data) v = sigmoid_scalar(v);
  return out;
}

Matrix tanh_m(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.data) v = std::tanh(v);
  return out;
}

Matrix concat_rows(const Matrix& top, const Matrix& bottom) {
  if (top.cols != 1 || bottom.cols != 1) {
    fail(ErrorCode::kDimension, "concat_rows: expects column vectors");
  }
  Matrix out(top.rows + bottom.rows, 1);
  for (std::size_t i = 0; i < top.rows; ++i) out.data[i] = top.data[i];
  for (std::size_t i = 0; i < bottom.rows; ++i) {
    out.data[top.rows + i] = bottom.data[i];
  }
  return out;
}

double l2_norm(const Matrix& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v * v;
  return std::sqrt(acc);
}

double dot(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

bool all_finite(const Matrix& a) {
  for (double v : a.data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data) m = std::max(m, std::fabs(v));
  return m;
}

Matrix xavier_init(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (rows == 0 || cols == 0) {
    fail(ErrorCode::kDimension, "xavier_init: zero dimension");
  }
  double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Rng rng(seed);
  Matrix out(rows, cols);
  for (double& v : out.data) v = rng.uniform(-bound, bound);
  return out;
}

Matrix normal_init(std::size_t rows, std::size_t cols, double mean,
                   double stddev, std::uint64_t seed) {
  if (rows == 0 || cols == 0) {
    fail(ErrorCode::kDimension, "normal_init: zero dimension");
  }
  Rng rng(seed);
  Matrix out(rows, cols);
  for (double& v : out.data) v = rng.normal(mean, stddev);
  return out;
}

Matrix dropout_mask(std::size_t rows, std::size_t cols, double rate,
                    std::uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) {
    fail(ErrorCode::kInvalidArgument,
         "dropout_mask: rate must be in [0, 1)");
  }
  Matrix out(rows, cols, 1.0);
  if (rate == 0.0) return out;
  double keep = 1.0 / (1.0 - rate);
  Rng rng(seed);
  for (double& v : out.data) {
    v = rng.uniform01() < rate ? 0.0 : keep;
  }
  return out;
}

}  // namespace fedgen
