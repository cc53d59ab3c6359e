#include "npattack/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "npattack/error.hpp"

namespace npattack::kernels {
namespace {

void check_product(ConstMatrix a, ConstMatrix b, Matrix c, std::size_t n, std::size_t k,
                   std::size_t kb, std::size_t m) {
  NPATTACK_REQUIRE(k == kb, "matmul: inner dimensions disagree");
  NPATTACK_REQUIRE(c.rows == n && c.cols == m, "matmul: output has wrong shape");
  NPATTACK_REQUIRE(a.data.size() >= a.rows * a.cols && b.data.size() >= b.rows * b.cols &&
                       c.data.size() >= c.rows * c.cols,
                   "matmul: view shorter than its extents");
}

using Index = std::ptrdiff_t;

// Softmax of one row of scores, in place. Shared by both kernel families so
// that their attention weights agree exactly.
void softmax_row(double* s, std::size_t m) {
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < m; ++j) peak = std::max(peak, s[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    s[j] = std::exp(s[j] - peak);
    total += s[j];
  }
  const double inv = 1.0 / total;
  for (std::size_t j = 0; j < m; ++j) s[j] *= inv;
}

}  // namespace

void matmul(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate) {
  const std::size_t n = a.rows, k = a.cols, m = b.cols;
  check_product(a, b, c, n, k, b.rows, m);
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = c.data.data();
#pragma omp parallel for schedule(static) if (n * k * m > kParallelThreshold)
  for (Index i = 0; i < static_cast<Index>(n); ++i) {
    double* ci = C + i * m;
    if (!accumulate) std::fill(ci, ci + m, 0.0);
    const double* ai = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = B + p * m;
#pragma omp simd
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_tn(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate) {
  // a is k×n, result n×m
  const std::size_t k = a.rows, n = a.cols, m = b.cols;
  check_product(a, b, c, n, k, b.rows, m);
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = c.data.data();
#pragma omp parallel for schedule(static) if (n * k * m > kParallelThreshold)
  for (Index i = 0; i < static_cast<Index>(n); ++i) {
    double* ci = C + i * m;
    if (!accumulate) std::fill(ci, ci + m, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double api = A[p * n + i];
      if (api == 0.0) continue;
      const double* bp = B + p * m;
#pragma omp simd
      for (std::size_t j = 0; j < m; ++j) ci[j] += api * bp[j];
    }
  }
}

void matmul_nt(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate) {
  // b is m×k, result n×m
  const std::size_t n = a.rows, k = a.cols, m = b.rows;
  check_product(a, b, c, n, k, b.cols, m);
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = c.data.data();
#pragma omp parallel for schedule(static) if (n * k * m > kParallelThreshold)
  for (Index i = 0; i < static_cast<Index>(n); ++i) {
    const double* ai = A + i * k;
    double* ci = C + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = B + j * k;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + s : s;
    }
  }
}

void attention(ConstMatrix q, ConstMatrix k, ConstMatrix v, Matrix out, Matrix weights) {
  const std::size_t n = q.rows, d = q.cols, m = k.rows, dv = v.cols;
  NPATTACK_REQUIRE(d >= 1, "attention: key dimension must be positive");
  NPATTACK_REQUIRE(k.cols == d, "attention: query/key widths disagree");
  NPATTACK_REQUIRE(v.rows == m, "attention: key/value counts disagree");
  NPATTACK_REQUIRE(m >= 1, "attention: no keys");
  NPATTACK_REQUIRE(out.rows == n && out.cols == dv, "attention: output has wrong shape");
  const bool keep = !weights.data.empty();
  NPATTACK_REQUIRE(!keep || (weights.rows == n && weights.cols == m),
                   "attention: weight buffer has wrong shape");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double* Q = q.data.data();
  const double* K = k.data.data();
  const double* V = v.data.data();
  double* O = out.data.data();
#pragma omp parallel if (n * m * (d + dv) > kParallelThreshold)
  {
    std::vector<double> scratch(keep ? 0 : m);
#pragma omp for schedule(static)
    for (Index i = 0; i < static_cast<Index>(n); ++i) {
      double* s = keep ? weights.data.data() + i * m : scratch.data();
      const double* qi = Q + i * d;
      for (std::size_t j = 0; j < m; ++j) {
        const double* kj = K + j * d;
        double dot = 0.0;
#pragma omp simd reduction(+ : dot)
        for (std::size_t p = 0; p < d; ++p) dot += qi[p] * kj[p];
        s[j] = dot * scale;
      }
      softmax_row(s, m);
      double* oi = O + i * dv;
      std::fill(oi, oi + dv, 0.0);
      for (std::size_t j = 0; j < m; ++j) {
        const double w = s[j];
        const double* vj = V + j * dv;
#pragma omp simd
        for (std::size_t c = 0; c < dv; ++c) oi[c] += w * vj[c];
      }
    }
  }
}

void softmax_rows(Matrix x) {
#pragma omp parallel for schedule(static) if (x.rows * x.cols > kParallelThreshold)
  for (Index i = 0; i < static_cast<Index>(x.rows); ++i) softmax_row(x.data.data() + i * x.cols, x.cols);
}

namespace serial {

void matmul(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate) {
  check_product(a, b, c, a.rows, a.cols, b.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a(i, p) * b(p, j);
      c(i, j) = accumulate ? c(i, j) + s : s;
    }
}

void matmul_tn(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate) {
  check_product(a, b, c, a.cols, a.rows, b.rows, b.cols);
  for (std::size_t i = 0; i < a.cols; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.rows; ++p) s += a(p, i) * b(p, j);
      c(i, j) = accumulate ? c(i, j) + s : s;
    }
}

void matmul_nt(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate) {
  check_product(a, b, c, a.rows, a.cols, b.cols, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += a(i, p) * b(j, p);
      c(i, j) = accumulate ? c(i, j) + s : s;
    }
}

void attention(ConstMatrix q, ConstMatrix k, ConstMatrix v, Matrix out, Matrix weights) {
  const std::size_t n = q.rows, d = q.cols, m = k.rows, dv = v.cols;
  NPATTACK_REQUIRE(d >= 1 && k.cols == d && v.rows == m && m >= 1, "attention: shape mismatch");
  NPATTACK_REQUIRE(out.rows == n && out.cols == dv, "attention: output has wrong shape");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> s(m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0.0;
      for (std::size_t p = 0; p < d; ++p) dot += q(i, p) * k(j, p);
      s[j] = dot * scale;
    }
    softmax_row(s.data(), m);
    for (std::size_t c = 0; c < dv; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += s[j] * v(j, c);
      out(i, c) = acc;
    }
    if (!weights.data.empty())
      for (std::size_t j = 0; j < m; ++j) weights(i, j) = s[j];
  }
}

void softmax_rows(Matrix x) {
  for (std::size_t i = 0; i < x.rows; ++i) softmax_row(x.data.data() + i * x.cols, x.cols);
}

}  // namespace serial
}  // namespace npattack::kernels
