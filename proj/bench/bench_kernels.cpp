#include <benchmark/benchmark.h>

#include <random>

#include "npattack/anp.hpp"
#include "npattack/kernels.hpp"

using namespace npattack;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

template <void (*Kernel)(kernels::ConstMatrix, kernels::ConstMatrix, kernels::Matrix, bool)>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, 128}, 1);
  const Tensor b = random_tensor({128, 128}, 2);
  Tensor c({n, 128});
  for (auto _ : state) {
    Kernel(a.view(), b.view(), c.view(), false);
    benchmark::DoNotOptimize(c.values().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * 128 * 128));
}

template <void (*Kernel)(kernels::ConstMatrix, kernels::ConstMatrix, kernels::ConstMatrix, kernels::Matrix,
                         kernels::Matrix)>
void BM_attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor q = random_tensor({n, 128}, 3);
  const Tensor k = random_tensor({n, 128}, 4);
  const Tensor v = random_tensor({n, 128}, 5);
  Tensor out({n, 128});
  for (auto _ : state) {
    Kernel(q.view(), k.view(), v.view(), out.view(), {});
    benchmark::DoNotOptimize(out.values().data());
  }
}

void BM_fast_decode(benchmark::State& state) {
  AnpArch arch;
  const AnpParameters p = init_anp(arch, 1);
  const Tensor pos(Shape{arch.image.size(), 3}, pixel_positions(arch.image));
  FastDecoder dec(p, pos);
  const Tensor r = random_tensor({arch.image.size(), arch.d_r}, 6);
  const std::vector<double> z(arch.d_z, 0.1);
  std::vector<double> out(arch.image.size());
  for (auto _ : state) {
    dec.decode(z, r, out);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_plain_decode(benchmark::State& state) {
  AnpArch arch;
  const AnpParameters p = init_anp(arch, 1);
  const Tensor pos(Shape{arch.image.size(), 3}, pixel_positions(arch.image));
  const DeterministicRep r{random_tensor({arch.image.size(), arch.d_r}, 6)};
  const std::vector<double> z(arch.d_z, 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(decode(p, z, r, pos));
}

}  // namespace

BENCHMARK(BM_matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(196)->Arg(784);
BENCHMARK(BM_matmul<kernels::matmul>)->Name("matmul/parallel")->Arg(196)->Arg(784);
BENCHMARK(BM_attention<kernels::serial::attention>)->Name("attention/serial")->Arg(196)->Arg(784);
BENCHMARK(BM_attention<kernels::attention>)->Name("attention/parallel")->Arg(196)->Arg(784);
BENCHMARK(BM_fast_decode)->Name("decode/fast");
BENCHMARK(BM_plain_decode)->Name("decode/plain");

BENCHMARK_MAIN();
