#pragma once

// Masked-diffusion reverse process: time grids, the two-stage Bernoulli draw,
// logit annealing, and the three generation engines.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "aoar/model.hpp"
#include "aoar/rng.hpp"
#include "json.hpp"

namespace aoar {

enum class ScheduleKind { linear, geometric };

// 1 = t_0 > t_1 > ... > t_T = 0. Linear: t_k = 1 - k / T. Geometric:
// t_k = t_min^(k / (T - 1)) for k < T with t_min = 1e-3, then 0.
std::vector<double> time_schedule(int num_steps, ScheduleKind kind = ScheduleKind::linear);

inline constexpr int kStillMasked = -1;

// Index i with cdf(i - 1) <= u < cdf(i); the last index with nonzero mass
// absorbs rounding.
int categorical_draw(std::span<const double> probs, double u);

// Stage 1: stay masked with probability s / t. Stage 2: draw from q0t.
// Throws std::invalid_argument when s >= t, s < 0, t > 1, or q0t is not
// normalized within 1e-5.
int lemma1_draw(std::span<const double> q0t, double s, double t, Rng& rng);

struct AnnealSpec {
    double top_p = 1.0;
    double temperature = 1.0;
};

// Temperature scaling, double-precision softmax, then the smallest
// descending-probability prefix whose mass reaches top_p (ties by lower
// token id), renormalized. Temperatures below 1e-6 give a one-hot at the
// first argmax.
std::vector<double> anneal_logits(std::span<const float> logits, const AnnealSpec& spec);

enum class Engine { decoder_cached, decoder_full_recompute, encoder_full };
// Order in which positions decoded in the same step join the commit order.
enum class CommitOrder { ascending, shuffled };

std::string to_string(Engine e);
Engine parse_engine(const std::string& s);

struct GenerationConfig {
    int seq_len = 256;
    int num_steps = 256;
    ScheduleKind schedule = ScheduleKind::linear;
    double top_p = 1.0;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    Engine engine = Engine::decoder_cached;
    CommitOrder commit_order = CommitOrder::ascending;

    AnnealSpec anneal() const { return {top_p, temperature}; }
    void validate() const;
    nlohmann::json to_json() const;
    // Unknown keys are rejected.
    static GenerationConfig from_json(const nlohmann::json& j);
};

struct SamplerState {
    std::vector<int> tokens;        // kStillMasked where masked
    std::vector<int> masked;        // ascending original positions
    std::vector<int> commit_order;  // committed positions in commitment order
    int step = 0;
};

struct GenerationStep {
    int step = 0;
    double t = 0.0;
    double s = 0.0;
    int decoded_count = 0;
    double wall_ms = 0.0;

    nlohmann::json to_json() const;
};

struct GenerationResult {
    std::vector<int> tokens;
    std::vector<int> commit_order;
    std::vector<GenerationStep> trace;
};

using StepObserver = std::function<void(const SamplerState&)>;

// Every masked position p at step k draws its stay-masked decision and its
// token from streams keyed by (seed, p, k), so the engines see identical
// randomness. Decoder engines score every decoded position of a step in one
// forward under the parallel-generation mask; the cached engine only feeds
// the rows committed since the previous step.
GenerationResult generate(const Transformer& model, const GenerationConfig& cfg, const StepObserver& observe = {});

struct BenchRow {
    Engine engine = Engine::decoder_cached;
    int n = 0;
    int steps = 0;
    double median_ms = 0.0;
};

struct BenchReport {
    std::vector<BenchRow> rows;
    // Least-squares log-log slope of time vs n over rows with steps == n.
    std::vector<std::pair<Engine, double>> slopes;

    double slope(Engine e) const;
    // median(b) / median(a) at (n, steps); 0 when either row is missing.
    double speedup(Engine a, Engine b, int n, int steps) const;
    std::string to_csv() const;
};

struct BenchOptions {
    std::vector<int> n_grid;
    std::vector<int> step_grid;  // empty: steps = n only
    std::vector<Engine> engines;
    int repeats = 5;
    int warmup = 1;
    std::uint64_t seed = 0;
};

BenchReport speed_bench(const Transformer& model, const BenchOptions& opts);

double loglog_slope(std::span<const double> x, std::span<const double> y);

}  // namespace aoar
