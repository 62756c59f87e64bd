#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace fedgen {

// Dense row-major matrix of doubles. Column vectors are (n, 1) matrices.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0);

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Matrix& other) const {
    return rows == other.rows && cols == other.cols;
  }
};

// Column-vector constructor.
Matrix col_vector(std::size_t n, double fill = 0.0);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// y = W x + b, where x and b are column vectors. Faster path than
// matmul for the per-step cell evaluations.
Matrix affine(const Matrix& w, const Matrix& x, const Matrix& b);

// y += alpha * W x, for accumulating a second input block into gate
// pre-activations.
void add_matvec(Matrix& y, const Matrix& w, const Matrix& x);

Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
void add_in_place(Matrix& a, const Matrix& b);
void sub_in_place(Matrix& a, const Matrix& b);
void scale_in_place(Matrix& a, double s);
void axpy(Matrix& y, double alpha, const Matrix& x);  // y += alpha * x

// g += dz * x^T (rank-1 update for weight gradients).
void add_outer(Matrix& g, const Matrix& dz, const Matrix& x);

// Elementwise activations; saturate instead of overflowing.
Matrix sigmoid(const Matrix& x);
Matrix tanh_m(const Matrix& x);
double sigmoid_scalar(double x);

Matrix concat_rows(const Matrix& top, const Matrix& bottom);

double l2_norm(const Matrix& a);
double dot(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a);
double max_abs(const Matrix& a);

// Entries i.i.d. uniform on [-s, s] with s = sqrt(6 / (rows + cols)),
// deterministic for a fixed seed.
Matrix xavier_init(std::size_t rows, std::size_t cols, std::uint64_t seed);

Matrix normal_init(std::size_t rows, std::size_t cols, double mean,
                   double stddev, std::uint64_t seed);

// Inverted-dropout mask: entries are 0 with probability `rate` and
// 1/(1-rate) otherwise, so the mask has unit expectation.
Matrix dropout_mask(std::size_t rows, std::size_t cols, double rate,
                    std::uint64_t seed);

}  // namespace fedgen
