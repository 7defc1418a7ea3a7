// Reference vs parallel kernel throughput at the shapes of the desk-scale
// network (batch 64, widths 16/32/64).

#include <benchmark/benchmark.h>

#include <vector>

#include "mixshare/kernels.hpp"
#include "mixshare/rng.hpp"

namespace mk = mixshare::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  mixshare::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

mk::ConvGeometry geometry(const benchmark::State& state) {
  const auto channels = state.range(0);
  const auto side = state.range(1);
  return mk::ConvGeometry{64, channels, side, side, channels, 3, 1, 1};
}

struct ConvBuffers {
  std::vector<double> x, w, y;
  explicit ConvBuffers(const mk::ConvGeometry& g)
      : x(random_vec(static_cast<std::size_t>(g.batch * g.in_channels * g.in_h * g.in_w), 1)),
        w(random_vec(static_cast<std::size_t>(g.out_channels * g.patch()), 2)),
        y(static_cast<std::size_t>(g.batch * g.out_channels * g.out_h() * g.out_w())) {}
};

template <auto Fn>
void conv_forward(benchmark::State& state) {
  const auto g = geometry(state);
  ConvBuffers b(g);
  for (auto _ : state) {
    Fn(g, b.x, b.w, b.y);
    benchmark::DoNotOptimize(b.y.data());
  }
  state.SetItemsProcessed(state.iterations() * g.batch);
}

template <auto Fn>
void conv_backward_input(benchmark::State& state) {
  const auto g = geometry(state);
  ConvBuffers b(g);
  std::vector<double> dx(b.x.size());
  for (auto _ : state) {
    Fn(g, b.w, b.y, dx);
    benchmark::DoNotOptimize(dx.data());
  }
  state.SetItemsProcessed(state.iterations() * g.batch);
}

template <auto Fn>
void conv_backward_weight(benchmark::State& state) {
  const auto g = geometry(state);
  ConvBuffers b(g);
  std::vector<double> dw(b.w.size());
  for (auto _ : state) {
    Fn(g, b.x, b.y, dw);
    benchmark::DoNotOptimize(dw.data());
  }
  state.SetItemsProcessed(state.iterations() * g.batch);
}

template <auto Fwd, auto Bwd>
void batchnorm(benchmark::State& state) {
  const mk::ChannelGeometry g{64, state.range(0), state.range(1) * state.range(1)};
  const auto n = static_cast<std::size_t>(g.batch * g.channels * g.spatial);
  const auto c = static_cast<std::size_t>(g.channels);
  auto x = random_vec(n, 3);
  auto dy = random_vec(n, 4);
  std::vector<double> gamma(c, 1.0), beta(c, 0.0), y(n), dx(n), mean(c), inv_std(c), dg(c), db(c);
  for (auto _ : state) {
    Fwd(g, x, gamma, beta, 1e-5, y, mean, inv_std);
    Bwd(g, x, gamma, mean, inv_std, dy, dx, dg, db);
    benchmark::DoNotOptimize(dx.data());
  }
  state.SetItemsProcessed(state.iterations() * g.batch);
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({16, 32})->Args({32, 16})->Args({64, 8})->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(conv_forward<mk::reference::conv2d_forward>)->Apply(shapes);
BENCHMARK(conv_forward<mk::parallel::conv2d_forward>)->Apply(shapes);
BENCHMARK(conv_backward_input<mk::reference::conv2d_backward_input>)->Apply(shapes);
BENCHMARK(conv_backward_input<mk::parallel::conv2d_backward_input>)->Apply(shapes);
BENCHMARK(conv_backward_weight<mk::reference::conv2d_backward_weight>)->Apply(shapes);
BENCHMARK(conv_backward_weight<mk::parallel::conv2d_backward_weight>)->Apply(shapes);
BENCHMARK(batchnorm<mk::reference::batchnorm_train_forward, mk::reference::batchnorm_train_backward>)
    ->Apply(shapes);
BENCHMARK(batchnorm<mk::parallel::batchnorm_train_forward, mk::parallel::batchnorm_train_backward>)
    ->Apply(shapes);

BENCHMARK_MAIN();
