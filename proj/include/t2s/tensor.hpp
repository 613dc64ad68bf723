#pragma once

#include <cstddef>
#include <vector>

namespace t2s {

// Dense row-major float64 matrix. All model math runs on double so analytic
// gradients can be checked against central finite differences.
struct Matrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(size_t r, size_t c) { return data[r * cols + c]; }
  double operator()(size_t r, size_t c) const { return data[r * cols + c]; }

  bool same_shape(const Matrix& other) const {
    return rows == other.rows && cols == other.cols;
  }
  bool operator==(const Matrix&) const = default;
};

// C = A B. Shapes must agree; throws std::invalid_argument otherwise.
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A Bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// C = Aᵀ B
Matrix matmul_tn(const Matrix& a, const Matrix& b);

void add_in_place(Matrix& a, const Matrix& b);
void scale_in_place(Matrix& a, double factor);
// Adds the 1×cols bias row to every row of a.
void add_row_in_place(Matrix& a, const Matrix& bias);

Matrix concat_cols(const Matrix& a, const Matrix& b);
// Columns [begin, end) as a copy.
Matrix slice_cols(const Matrix& a, size_t begin, size_t end);
// dst[:, begin:begin+src.cols] += src
void add_cols_in_place(Matrix& dst, const Matrix& src, size_t begin);

// 1×cols matrix of column sums.
Matrix column_sums(const Matrix& a);

// Row-wise softmax with max subtraction. Entries at or below the masking
// floor are treated as fully masked; a row with every entry masked throws
// std::runtime_error.
inline constexpr double kMaskValue = -1e30;
Matrix softmax_rows(const Matrix& scores);

// dS for S = softmax input given A = softmax(S) and upstream dA:
// dS = A ⊙ (dA − rowsum(dA ⊙ A)).
Matrix softmax_backward(const Matrix& a, const Matrix& da);

Matrix tanh_elementwise(const Matrix& z);
// dZ for Y = tanh(Z) given Y and upstream dY: dZ = dY ⊙ (1 − Y²).
Matrix tanh_backward(const Matrix& y, const Matrix& dy);

}  // namespace t2s
