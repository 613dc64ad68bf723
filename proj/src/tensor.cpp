#include "t2s/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace t2s {
namespace {

void require(bool condition, const std::string& what) {
  if (!condition) throw std::invalid_argument("matrix shape mismatch: " + what);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols == b.rows, "matmul " + std::to_string(a.cols) + " vs " + std::to_string(b.rows));
  Matrix c(a.rows, b.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    for (size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols == b.cols, "matmul_nt " + std::to_string(a.cols) + " vs " + std::to_string(b.cols));
  Matrix c(a.rows, b.rows);
  for (size_t i = 0; i < a.rows; ++i) {
    for (size_t j = 0; j < b.rows; ++j) {
      double sum = 0.0;
      for (size_t k = 0; k < a.cols; ++k) sum += a(i, k) * b(j, k);
      c(i, j) = sum;
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows == b.rows, "matmul_tn " + std::to_string(a.rows) + " vs " + std::to_string(b.rows));
  Matrix c(a.cols, b.cols);
  for (size_t k = 0; k < a.rows; ++k) {
    for (size_t i = 0; i < a.cols; ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      for (size_t j = 0; j < b.cols; ++j) c(i, j) += aki * b(k, j);
    }
  }
  return c;
}

void add_in_place(Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "add_in_place");
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

void scale_in_place(Matrix& a, double factor) {
  for (double& value : a.data) value *= factor;
}

void add_row_in_place(Matrix& a, const Matrix& bias) {
  require(bias.rows == 1 && bias.cols == a.cols, "add_row_in_place");
  for (size_t i = 0; i < a.rows; ++i) {
    for (size_t j = 0; j < a.cols; ++j) a(i, j) += bias(0, j);
  }
}

Matrix concat_cols(const Matrix& a, const Matrix& b) {
  require(a.rows == b.rows, "concat_cols");
  Matrix c(a.rows, a.cols + b.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    for (size_t j = 0; j < a.cols; ++j) c(i, j) = a(i, j);
    for (size_t j = 0; j < b.cols; ++j) c(i, a.cols + j) = b(i, j);
  }
  return c;
}

Matrix slice_cols(const Matrix& a, size_t begin, size_t end) {
  require(begin < end && end <= a.cols, "slice_cols");
  Matrix c(a.rows, end - begin);
  for (size_t i = 0; i < a.rows; ++i) {
    for (size_t j = begin; j < end; ++j) c(i, j - begin) = a(i, j);
  }
  return c;
}

void add_cols_in_place(Matrix& dst, const Matrix& src, size_t begin) {
  require(dst.rows == src.rows && begin + src.cols <= dst.cols, "add_cols_in_place");
  for (size_t i = 0; i < src.rows; ++i) {
    for (size_t j = 0; j < src.cols; ++j) dst(i, begin + j) += src(i, j);
  }
}

Matrix column_sums(const Matrix& a) {
  Matrix c(1, a.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    for (size_t j = 0; j < a.cols; ++j) c(0, j) += a(i, j);
  }
  return c;
}

Matrix softmax_rows(const Matrix& scores) {
  Matrix out(scores.rows, scores.cols);
  for (size_t i = 0; i < scores.rows; ++i) {
    double row_max = kMaskValue;
    for (size_t j = 0; j < scores.cols; ++j) row_max = std::max(row_max, scores(i, j));
    if (row_max <= kMaskValue / 2) {
      throw std::runtime_error("softmax row " + std::to_string(i) + " is fully masked");
    }
    double total = 0.0;
    for (size_t j = 0; j < scores.cols; ++j) {
      // exp of a masked score underflows to exactly 0, removing the key.
      const double e = std::exp(scores(i, j) - row_max);
      out(i, j) = e;
      total += e;
    }
    for (size_t j = 0; j < scores.cols; ++j) out(i, j) /= total;
  }
  return out;
}

Matrix softmax_backward(const Matrix& a, const Matrix& da) {
  if (!a.same_shape(da)) throw std::invalid_argument("matrix shape mismatch: softmax_backward");
  Matrix ds(a.rows, a.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    double inner = 0.0;
    for (size_t j = 0; j < a.cols; ++j) inner += da(i, j) * a(i, j);
    for (size_t j = 0; j < a.cols; ++j) ds(i, j) = a(i, j) * (da(i, j) - inner);
  }
  return ds;
}

Matrix tanh_elementwise(const Matrix& z) {
  Matrix y(z.rows, z.cols);
  for (size_t i = 0; i < z.data.size(); ++i) y.data[i] = std::tanh(z.data[i]);
  return y;
}

Matrix tanh_backward(const Matrix& y, const Matrix& dy) {
  if (!y.same_shape(dy)) throw std::invalid_argument("matrix shape mismatch: tanh_backward");
  Matrix dz(y.rows, y.cols);
  for (size_t i = 0; i < y.data.size(); ++i) {
    dz.data[i] = dy.data[i] * (1.0 - y.data[i] * y.data[i]);
  }
  return dz;
}

}  // namespace t2s
