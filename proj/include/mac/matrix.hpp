#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "mac/error.hpp"

namespace mac {

// Dense row-major matrix of 64-bit floats. Values are treated as immutable
// by every operation in this library; functions return fresh matrices.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> init) {
    Matrix m;
    m.rows = init.size();
    m.cols = init.size() == 0 ? 0 : init.begin()->size();
    m.data.reserve(m.rows * m.cols);
    for (const auto& row : init) {
      if (row.size() != m.cols) {
        throw ShapeError("Matrix::from_rows: ragged initializer, expected row length " +
                         std::to_string(m.cols) + ", got " + std::to_string(row.size()));
      }
      m.data.insert(m.data.end(), row.begin(), row.end());
    }
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  double* row_ptr(std::size_t i) { return data.data() + i * cols; }
  const double* row_ptr(std::size_t i) const { return data.data() + i * cols; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

namespace detail {

// All matmul kernels accumulate every output element in strictly ascending
// k order, so the summation order is a pure function of the operand shapes.
// That keeps repeated runs bit-identical (no SIMD- or tile-dependent
// reassociation of the dot products).

// 2-row, 4-k unrolled kernel; fastest for tall inputs with a deep K.
inline void matmul_2x4(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
                       std::size_t N) {
  std::size_t i = 0;
  for (; i + 2 <= M; i += 2) {
    double* c0 = C + i * N;
    double* c1 = c0 + N;
    std::fill(c0, c0 + N, 0.0);
    std::fill(c1, c1 + N, 0.0);
    const double* a0 = A + i * K;
    const double* a1 = a0 + K;
    std::size_t k = 0;
    for (; k + 4 <= K; k += 4) {
      const double a00 = a0[k], a01 = a0[k + 1], a02 = a0[k + 2], a03 = a0[k + 3];
      const double a10 = a1[k], a11 = a1[k + 1], a12 = a1[k + 2], a13 = a1[k + 3];
      const double* b0 = B + k * N;
      const double* b1 = b0 + N;
      const double* b2 = b1 + N;
      const double* b3 = b2 + N;
      for (std::size_t j = 0; j < N; ++j) {
        double x0 = c0[j], x1 = c1[j];
        x0 += a00 * b0[j];
        x1 += a10 * b0[j];
        x0 += a01 * b1[j];
        x1 += a11 * b1[j];
        x0 += a02 * b2[j];
        x1 += a12 * b2[j];
        x0 += a03 * b3[j];
        x1 += a13 * b3[j];
        c0[j] = x0;
        c1[j] = x1;
      }
    }
    for (; k < K; ++k) {
      const double s0 = a0[k], s1 = a1[k];
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) {
        c0[j] += s0 * b[j];
        c1[j] += s1 * b[j];
      }
    }
  }
  if (i < M) {
    double* c0 = C + i * N;
    std::fill(c0, c0 + N, 0.0);
    const double* a0 = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double s = a0[k];
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c0[j] += s * b[j];
    }
  }
}

// Register-blocked kernel: a 4x24 tile of C is held in registers while the
// full K extent is contracted. Fastest for short or mid-height inputs.
inline void matmul_rb4x24(const double* A, const double* B, double* C, std::size_t M, std::size_t K,
                          std::size_t N) {
  constexpr std::size_t MR = 4;
  constexpr std::size_t NR = 24;
  std::size_t j0 = 0;
  for (; j0 + NR <= N; j0 += NR) {
    std::size_t i0 = 0;
    for (; i0 + MR <= M; i0 += MR) {
      double acc[MR][NR];
      for (std::size_t i = 0; i < MR; ++i)
        for (std::size_t j = 0; j < NR; ++j) acc[i][j] = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double* b = B + k * N + j0;
        for (std::size_t i = 0; i < MR; ++i) {
          const double a = A[(i0 + i) * K + k];
          for (std::size_t j = 0; j < NR; ++j) acc[i][j] += a * b[j];
        }
      }
      for (std::size_t i = 0; i < MR; ++i)
        for (std::size_t j = 0; j < NR; ++j) C[(i0 + i) * N + j0 + j] = acc[i][j];
    }
    for (; i0 < M; ++i0) {
      double acc[NR];
      for (std::size_t j = 0; j < NR; ++j) acc[j] = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double a = A[i0 * K + k];
        const double* b = B + k * N + j0;
        for (std::size_t j = 0; j < NR; ++j) acc[j] += a * b[j];
      }
      for (std::size_t j = 0; j < NR; ++j) C[i0 * N + j0 + j] = acc[j];
    }
  }
  if (j0 < N) {
    for (std::size_t i = 0; i < M; ++i) {
      const double* a = A + i * K;
      for (std::size_t j = j0; j < N; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += a[k] * B[k * N + j];
        C[i * N + j] = s;
      }
    }
  }
}

// N == 1: eight interleaved row-dot products.
inline void matmul_dot8(const double* A, const double* B, double* C, std::size_t M, std::size_t K) {
  std::size_t i = 0;
  for (; i + 8 <= M; i += 8) {
    double s[8] = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double b = B[k];
      s[0] += a[k] * b;
      s[1] += a[K + k] * b;
      s[2] += a[2 * K + k] * b;
      s[3] += a[3 * K + k] * b;
      s[4] += a[4 * K + k] * b;
      s[5] += a[5 * K + k] * b;
      s[6] += a[6 * K + k] * b;
      s[7] += a[7 * K + k] * b;
    }
    for (std::size_t r = 0; r < 8; ++r) C[i + r] = s[r];
  }
  for (; i < M; ++i) {
    double s = 0.0;
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) s += a[k] * B[k];
    C[i] = s;
  }
}

// K == 1: outer product, no accumulation at all.
inline void matmul_outer(const double* A, const double* B, double* C, std::size_t M, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double a = A[i];
    double* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) c[j] = a * B[j];
  }
}

inline void matmul_dispatch(const double* A, const double* B, double* C, std::size_t M,
                            std::size_t K, std::size_t N) {
  if (N == 1) {
    matmul_dot8(A, B, C, M, K);
  } else if (K == 1) {
    matmul_outer(A, B, C, M, N);
  } else if (M >= 4096 && K >= 384) {
    matmul_2x4(A, B, C, M, K, N);
  } else if (N >= 24) {
    matmul_rb4x24(A, B, C, M, K, N);
  } else {
    matmul_2x4(A, B, C, M, K, N);
  }
}

}  // namespace detail

// Standard matrix product. Accumulation within each output element is fixed
// left-to-right over k regardless of which kernel runs.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dimensions differ, a is " + shape_string(a) + ", b is " +
                     shape_string(b));
  }
  Matrix c(a.rows, b.cols);
  if (a.rows == 0 || b.cols == 0 || a.cols == 0) return c;
  detail::matmul_dispatch(a.data.data(), b.data.data(), c.data.data(), a.rows, a.cols, b.cols);
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t.data[j * a.rows + i] = a.data[i * a.cols + j];
  return t;
}

// transpose(a) * b without materializing the transpose; the contraction runs
// over the shared row index r in ascending order for every output element.
// This is the dW = activations^T * upstream shape of backprop.
inline Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) {
    throw ShapeError("matmul_at_b: row counts differ, a is " + shape_string(a) + ", b is " +
                     shape_string(b));
  }
  const std::size_t R = a.rows;
  const std::size_t KA = a.cols;
  const std::size_t N = b.cols;
  Matrix c(KA, N);
  if (KA == 0 || N == 0) return c;
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = c.data.data();
  if (N == 1) {
    for (std::size_t r = 0; r < R; ++r) {
      const double s = B[r];
      const double* arow = A + r * KA;
      for (std::size_t i = 0; i < KA; ++i) C[i] += s * arow[i];
    }
    return c;
  }
  constexpr std::size_t IB = 32;
  for (std::size_t i0 = 0; i0 < KA; i0 += IB) {
    const std::size_t iend = std::min(i0 + IB, KA);
    std::size_t r = 0;
    for (; r + 4 <= R; r += 4) {
      const double* a0 = A + r * KA;
      const double* b0 = B + r * N;
      for (std::size_t i = i0; i < iend; ++i) {
        const double s0 = a0[i], s1 = a0[KA + i], s2 = a0[2 * KA + i], s3 = a0[3 * KA + i];
        double* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) {
          double x = crow[j];
          x += s0 * b0[j];
          x += s1 * b0[N + j];
          x += s2 * b0[2 * N + j];
          x += s3 * b0[3 * N + j];
          crow[j] = x;
        }
      }
    }
    for (; r < R; ++r) {
      const double* arow = A + r * KA;
      const double* brow = B + r * N;
      for (std::size_t i = i0; i < iend; ++i) {
        const double s = arow[i];
        double* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += s * brow[j];
      }
    }
  }
  return c;
}

// Numerically stable logistic function; the two branches avoid computing
// exp of a large positive argument.
inline double stable_sigmoid(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

enum class ElementwiseOp { add, sub, mul, relu, sigmoid, ln, exp, reciprocal };

inline bool elementwise_is_binary(ElementwiseOp op) {
  return op == ElementwiseOp::add || op == ElementwiseOp::sub || op == ElementwiseOp::mul;
}

namespace detail {

inline std::string index_string(const Matrix& m, std::size_t flat) {
  return "(" + std::to_string(flat / m.cols) + "," + std::to_string(flat % m.cols) + ")";
}

}  // namespace detail

// Unary elementwise operation.
inline Matrix elementwise(ElementwiseOp op, const Matrix& a) {
  if (elementwise_is_binary(op)) {
    throw ConfigError("elementwise: binary operation requires a second operand");
  }
  Matrix out(a.rows, a.cols);
  const std::size_t n = a.size();
  switch (op) {
    case ElementwiseOp::relu:
      for (std::size_t t = 0; t < n; ++t) out.data[t] = std::max(0.0, a.data[t]);
      break;
    case ElementwiseOp::sigmoid:
      for (std::size_t t = 0; t < n; ++t) out.data[t] = stable_sigmoid(a.data[t]);
      break;
    case ElementwiseOp::ln:
      for (std::size_t t = 0; t < n; ++t) {
        if (!(a.data[t] > 0.0)) {
          throw DomainError("elementwise ln: input " + std::to_string(a.data[t]) + " at " +
                            detail::index_string(a, t) + " is not strictly positive");
        }
        out.data[t] = std::log(a.data[t]);
      }
      break;
    case ElementwiseOp::exp:
      for (std::size_t t = 0; t < n; ++t) out.data[t] = std::exp(a.data[t]);
      break;
    case ElementwiseOp::reciprocal:
      for (std::size_t t = 0; t < n; ++t) {
        if (a.data[t] == 0.0) {
          throw DomainError("elementwise reciprocal: input is zero at " +
                            detail::index_string(a, t));
        }
        out.data[t] = 1.0 / a.data[t];
      }
      break;
    default:
      throw ConfigError("elementwise: unknown unary operation");
  }
  return out;
}

// Binary elementwise operation.
inline Matrix elementwise(ElementwiseOp op, const Matrix& a, const Matrix& b) {
  if (!elementwise_is_binary(op)) {
    throw ConfigError("elementwise: unary operation takes a single operand");
  }
  if (!a.same_shape(b)) {
    throw ShapeError("elementwise: shapes differ, a is " + shape_string(a) + ", b is " +
                     shape_string(b));
  }
  Matrix out(a.rows, a.cols);
  const std::size_t n = a.size();
  switch (op) {
    case ElementwiseOp::add:
      for (std::size_t t = 0; t < n; ++t) out.data[t] = a.data[t] + b.data[t];
      break;
    case ElementwiseOp::sub:
      for (std::size_t t = 0; t < n; ++t) out.data[t] = a.data[t] - b.data[t];
      break;
    case ElementwiseOp::mul:
      for (std::size_t t = 0; t < n; ++t) out.data[t] = a.data[t] * b.data[t];
      break;
    default:
      throw ConfigError("elementwise: unknown binary operation");
  }
  return out;
}

// Column sums as a 1 x cols matrix, accumulated in ascending row order.
inline Matrix col_sums(const Matrix& a) {
  Matrix out(1, a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* row = a.row_ptr(i);
    for (std::size_t j = 0; j < a.cols; ++j) out.data[j] += row[j];
  }
  return out;
}

}  // namespace mac
