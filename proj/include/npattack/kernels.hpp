#pragma once

#include <cstddef>
#include <span>

// Dense row-major kernels behind the autodiff tape and the attack decoders.
//
// The unqualified kernels are OpenMP-parallel over output rows. Each output
// element is reduced in a fixed order regardless of the thread count, so
// results are bit-identical between 1 and N threads. `kernels::serial` holds
// the textbook loop versions kept as the reference for tests and benchmarks.
namespace npattack::kernels {

template <typename T>
struct MatrixView {
  std::span<T> data;
  std::size_t rows = 0;
  std::size_t cols = 0;

  T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<T> row(std::size_t i) const { return data.subspan(i * cols, cols); }
};

using ConstMatrix = MatrixView<const double>;
using Matrix = MatrixView<double>;

// C = A·B, or C += A·B when accumulate is set.
void matmul(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate = false);
// C = Aᵀ·B
void matmul_tn(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate = false);
// C = A·Bᵀ
void matmul_nt(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate = false);

// out_i = softmax(q_i·Kᵀ/sqrt(d))·V. The softmax weights (n×m) are written
// to `weights` when it is non-empty.
void attention(ConstMatrix q, ConstMatrix k, ConstMatrix v, Matrix out, Matrix weights);

// In-place numerically stable softmax of every row.
void softmax_rows(Matrix x);

namespace serial {
void matmul(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate = false);
void matmul_tn(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate = false);
void matmul_nt(ConstMatrix a, ConstMatrix b, Matrix c, bool accumulate = false);
void attention(ConstMatrix q, ConstMatrix k, ConstMatrix v, Matrix out, Matrix weights);
void softmax_rows(Matrix x);
}  // namespace serial

// Below this many multiply-adds the parallel kernels stay on one thread.
inline constexpr std::size_t kParallelThreshold = 1u << 16;

}  // namespace npattack::kernels
