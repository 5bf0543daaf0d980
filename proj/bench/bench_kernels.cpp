// Reference loops against the tiled OpenMP kernels, plus end-to-end training
// step and generation timings at desk size.

#include <benchmark/benchmark.h>

#include <vector>

#include "aoar/kernels.hpp"
#include "aoar/kernels_serial.hpp"
#include "aoar/model.hpp"
#include "aoar/objectives.hpp"
#include "aoar/sampler.hpp"

using namespace aoar;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) {
        x = static_cast<float>(rng.normal());
    }
    return v;
}

ModelConfig desk(int ctx = 256) {
    ModelConfig c;
    c.ctx_len = ctx;
    c.vocab_size = 98;
    return c;
}

// Activation-by-weight product of a d=256 model: rows x 256 times 256 x 768.
template <bool Serial>
void BM_matmul(benchmark::State& state) {
    const int m = static_cast<int>(state.range(0)), k = 256, n = 768;
    const auto a = random_vec(static_cast<std::size_t>(m) * k, 1);
    const auto b = random_vec(static_cast<std::size_t>(k) * n, 2);
    std::vector<float> c(static_cast<std::size_t>(m) * n);
    for (auto _ : state) {
        if constexpr (Serial) {
            kernels::serial::matmul(a.data(), b.data(), c.data(), m, k, n);
        } else {
            kernels::matmul(a.data(), b.data(), c.data(), m, k, n);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOP/s"] = benchmark::Counter(2.0 * m * k * n, benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::kIs1000);
}
BENCHMARK(BM_matmul<true>)->Name("matmul/serial")->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_matmul<false>)->Name("matmul/omp")->Arg(256)->Arg(1024)->Arg(4096)->Unit(benchmark::kMillisecond);

// Causal self-attention over n rows, 4 heads of 64.
template <bool Serial>
void BM_attention(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0)), heads = 4, hd = 64, d = heads * hd;
    const auto qkv = random_vec(static_cast<std::size_t>(n) * 3 * d, 3);
    const AttentionMask mask = AttentionMask::causal(n);
    kernels::AttentionArgs<float> args;
    args.heads = heads;
    args.head_dim = hd;
    args.n_query = n;
    args.n_key = n;
    args.q = qkv.data();
    args.q_stride = 3 * d;
    args.k = qkv.data() + d;
    args.v = qkv.data() + 2 * d;
    args.kv_stride = 3 * d;
    args.mask = mask.bits.data();
    std::vector<float> out(static_cast<std::size_t>(n) * d);
    for (auto _ : state) {
        if constexpr (Serial) {
            kernels::serial::attention_forward(args, out.data(), d, static_cast<float*>(nullptr));
        } else {
            kernels::attention_forward(args, out.data(), d, static_cast<float*>(nullptr));
        }
        benchmark::DoNotOptimize(out.data());
    }
}
BENCHMARK(BM_attention<true>)->Name("attention/serial")->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_attention<false>)->Name("attention/omp")->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_train_step(benchmark::State& state) {
    Transformer model(desk(), 1);
    TrainConfig cfg;
    AdamWState opt = make_adamw(model.params().size());
    std::vector<std::vector<int>> data;
    Rng rng(4);
    for (int b = 0; b < 16; ++b) {
        std::vector<int> t(256);
        for (auto& x : t) {
            x = rng.below(97);
        }
        data.push_back(t);
    }
    const std::vector<Block> blocks(data.begin(), data.end());
    std::int64_t step = 0;
    for (auto _ : state) {
        const WeightedBatch wb = make_training_batch(ModelFamily::decoder_any_order, 97, blocks, cfg.order_policy, rng);
        benchmark::DoNotOptimize(train_step(model, opt, wb, cfg, 1e-4, step, step));
        ++step;
    }
}
BENCHMARK(BM_train_step)->Name("train_step/desk_4096_tokens")->Unit(benchmark::kMillisecond)->Iterations(3);

void BM_generate(benchmark::State& state) {
    const Transformer model(desk(), 2);
    GenerationConfig g;
    g.seq_len = static_cast<int>(state.range(0));
    g.num_steps = g.seq_len;
    g.engine = static_cast<Engine>(state.range(1));
    for (auto _ : state) {
        benchmark::DoNotOptimize(generate(model, g).tokens.data());
    }
}
BENCHMARK(BM_generate)
    ->Name("generate/engine")
    ->ArgsProduct({{64, 256}, {static_cast<int>(Engine::decoder_cached), static_cast<int>(Engine::decoder_full_recompute)}})
    ->Unit(benchmark::kMillisecond)
    ->Iterations(1);

}  // namespace

BENCHMARK_MAIN();
