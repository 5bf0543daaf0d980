#include <cmath>
#include <map>
#include <set>

#include "aoar/kernels.hpp"
#include "aoar/sampler.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace aoar;
using aoar::test::tiny_config;

namespace {

struct DeterministicScope {
    DeterministicScope() { kernels::set_deterministic(true); }
    ~DeterministicScope() { kernels::set_deterministic(false); }
};

// Empirical law of lemma1_draw against the (V + 1)-outcome mixture drawn
// directly with one categorical draw.
double lemma1_tv(const std::vector<double>& q, double ratio, int draws, std::uint64_t seed) {
    Rng rng(seed);
    const int V = static_cast<int>(q.size());
    std::vector<double> mix(static_cast<std::size_t>(V) + 1);
    mix[0] = ratio;
    for (int i = 0; i < V; ++i) {
        mix[static_cast<std::size_t>(i) + 1] = (1 - ratio) * q[static_cast<std::size_t>(i)];
    }
    std::vector<double> emp(mix.size(), 0.0);
    for (int d = 0; d < draws; ++d) {
        const int x = lemma1_draw(q, ratio * 0.5, 0.5, rng);
        emp[static_cast<std::size_t>(x + 1)] += 1.0 / draws;
    }
    double tv = 0.0;
    for (std::size_t i = 0; i < mix.size(); ++i) {
        tv += 0.5 * std::abs(emp[i] - mix[i]);
    }
    return tv;
}

std::vector<double> random_simplex(int v, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> q(static_cast<std::size_t>(v));
    double s = 0.0;
    for (auto& x : q) {
        x = -std::log(1.0 - rng.uniform());
        s += x;
    }
    for (auto& x : q) {
        x /= s;
    }
    return q;
}

}  // namespace

TEST_SUITE("sampler") {
    TEST_CASE("time grids") {
        CHECK(time_schedule(1) == std::vector<double>{1.0, 0.0});
        CHECK(time_schedule(4) == std::vector<double>{1.0, 0.75, 0.5, 0.25, 0.0});
        for (ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::geometric}) {
            const auto t = time_schedule(37, kind);
            CHECK(t.front() == 1.0);
            CHECK(t.back() == 0.0);
            for (std::size_t k = 0; k + 1 < t.size(); ++k) {
                CHECK(t[k + 1] / t[k] >= 0.0);
                CHECK(t[k + 1] / t[k] < 1.0);
            }
        }
        CHECK_THROWS_AS(time_schedule(0), std::invalid_argument);
    }

    TEST_CASE("two-stage draw matches the direct mixture") {
        for (double ratio : {0.1, 0.4, 0.9}) {
            for (int v : {3, 7, 50}) {
                CAPTURE(ratio);
                CAPTURE(v);
                CHECK(lemma1_tv(random_simplex(v, static_cast<std::uint64_t>(v)), ratio, 100000, 11) < 0.02);
            }
        }
        Rng rng(1);
        const std::vector<double> q = {0.2, 0.8};
        for (int i = 0; i < 1000; ++i) {
            CHECK(lemma1_draw(q, 0.0, 0.3, rng) != kStillMasked);
        }
        int still = 0;
        for (int i = 0; i < 1000; ++i) {
            still += lemma1_draw(q, 0.5 - 1e-9, 0.5, rng) == kStillMasked;
        }
        CHECK(still >= 995);
        CHECK_THROWS_AS(lemma1_draw(q, 0.5, 0.5, rng), std::invalid_argument);
        CHECK_THROWS_AS(lemma1_draw(std::vector<double>{0.5, 0.4}, 0.1, 0.5, rng), std::invalid_argument);
    }

    TEST_CASE("annealing") {
        const std::vector<float> logits = {std::log(0.5f), std::log(0.3f), std::log(0.15f), std::log(0.05f)};
        const auto plain = anneal_logits(logits, {1.0, 1.0});
        const std::vector<double> expect = {0.5, 0.3, 0.15, 0.05};
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(std::abs(plain[i] - expect[i]) < 1e-7);
        }
        const auto nucleus = anneal_logits(logits, {0.9, 1.0});
        CHECK(nucleus[0] == doctest::Approx(0.5 / 0.95).epsilon(1e-6));
        CHECK(nucleus[1] == doctest::Approx(0.3 / 0.95).epsilon(1e-6));
        CHECK(nucleus[2] == doctest::Approx(0.15 / 0.95).epsilon(1e-6));
        CHECK(nucleus[3] == 0.0);

        const std::vector<float> tie = {1.0f, 3.0f, 3.0f, -2.0f};
        const auto cold = anneal_logits(tie, {1.0, 1e-9});
        CHECK(cold == std::vector<double>{0.0, 1.0, 0.0, 0.0});

        Rng rng(3);
        std::vector<float> big(97);
        for (auto& x : big) {
            x = static_cast<float>(rng.normal() * 3);
        }
        const auto p = anneal_logits(big, {1.0, 1.0});
        double mx = -1e300, s = 0.0;
        for (float x : big) {
            mx = std::max(mx, static_cast<double>(x));
        }
        for (float x : big) {
            s += std::exp(x - mx);
        }
        double worst = 0.0;
        for (std::size_t i = 0; i < big.size(); ++i) {
            worst = std::max(worst, std::abs(p[i] - std::exp(big[i] - mx) / s));
        }
        CHECK(worst < 1e-12);
        CHECK_THROWS_AS(anneal_logits(big, {0.0, 1.0}), std::invalid_argument);
    }

    TEST_CASE("categorical draw by inverse cdf") {
        const std::vector<double> p = {0.0, 0.25, 0.0, 0.75};
        CHECK(categorical_draw(p, 0.0) == 1);
        CHECK(categorical_draw(p, 0.2499) == 1);
        CHECK(categorical_draw(p, 0.25) == 3);
        CHECK(categorical_draw(p, 0.9999999999) == 3);
    }

    TEST_CASE("generation invariants") {
        const Transformer model(tiny_config(), 3);
        for (int steps : {1, 4, 16, 40}) {
            GenerationConfig g;
            g.seq_len = 16;
            g.num_steps = steps;
            g.seed = 9;
            std::vector<int> previous(16, kStillMasked);
            int observed = 0;
            const auto res = generate(model, g, [&](const SamplerState& st) {
                ++observed;
                std::set<int> committed(st.commit_order.begin(), st.commit_order.end());
                CHECK(committed.size() == st.commit_order.size());
                CHECK(committed.size() + st.masked.size() == 16);
                for (int p : st.masked) {
                    CHECK(committed.count(p) == 0);
                    CHECK(st.tokens[static_cast<std::size_t>(p)] == kStillMasked);
                }
                for (int p = 0; p < 16; ++p) {
                    if (previous[static_cast<std::size_t>(p)] != kStillMasked) {
                        CHECK(st.tokens[static_cast<std::size_t>(p)] == previous[static_cast<std::size_t>(p)]);
                    }
                }
                previous = st.tokens;
            });
            CHECK(observed == steps);
            CHECK(res.commit_order.size() == 16);
            for (int t : res.tokens) {
                CHECK(t >= 0);
                CHECK(t < 10);
            }
            if (steps == 1) {
                CHECK(res.trace[0].decoded_count == 16);
                CHECK(res.commit_order == Permutation::identity(16).order);
            }
        }
    }

    TEST_CASE("decode counts follow the schedule") {
        const Transformer model(tiny_config(), 3);
        // Step k decodes Binomial(|masked|, (t - s) / t); sum the standardized residuals.
        double z_sum = 0.0;
        int terms = 0;
        for (std::uint64_t seed = 0; seed < 40; ++seed) {
            GenerationConfig g;
            g.seq_len = 16;
            g.num_steps = 8;
            g.seed = seed;
            int masked = 16;
            for (const auto& step : generate(model, g).trace) {
                const double p = (step.t - step.s) / step.t;
                if (p < 1.0 && masked > 0) {
                    const double mean = masked * p;
                    const double sd = std::sqrt(masked * p * (1 - p));
                    z_sum += (step.decoded_count - mean) / sd;
                    ++terms;
                }
                masked -= step.decoded_count;
            }
        }
        CHECK(std::abs(z_sum / std::sqrt(terms)) < 5.0);
    }

    TEST_CASE("cached and recomputing engines emit identical tokens") {
        DeterministicScope det;
        Transformer model(tiny_config(), 5);
        aoar::test::randomize(model, "h1.ada_w", 0.3, 1);
        for (std::uint64_t seed = 0; seed < 6; ++seed) {
            for (CommitOrder order : {CommitOrder::ascending, CommitOrder::shuffled}) {
                GenerationConfig g;
                g.seq_len = 16;
                g.num_steps = 1 + static_cast<int>(seed) * 5;
                g.seed = seed;
                g.top_p = 0.95;
                g.temperature = 0.7;
                g.commit_order = order;
                const auto a = generate(model, g);
                g.engine = Engine::decoder_full_recompute;
                const auto b = generate(model, g);
                CHECK(a.tokens == b.tokens);
                CHECK(a.commit_order == b.commit_order);
            }
        }
    }

    TEST_CASE("encoder engine") {
        const Transformer enc(tiny_config(Injection::adaln, ModelFamily::encoder_mdm), 6);
        GenerationConfig g;
        g.seq_len = 12;
        g.num_steps = 6;
        g.engine = Engine::encoder_full;
        const auto res = generate(enc, g);
        for (int t : res.tokens) {
            CHECK(t >= 0);
            CHECK(t < 10);
        }
        g.engine = Engine::decoder_cached;
        CHECK_THROWS_AS(generate(enc, g), std::invalid_argument);
        g.seq_len = 17;
        g.engine = Engine::encoder_full;
        CHECK_THROWS_AS(generate(enc, g), std::invalid_argument);
    }

    TEST_CASE("config round trip") {
        GenerationConfig g;
        g.top_p = 0.95;
        g.engine = Engine::encoder_full;
        g.commit_order = CommitOrder::shuffled;
        CHECK(GenerationConfig::from_json(g.to_json()).to_json() == g.to_json());
        CHECK_THROWS_AS(GenerationConfig::from_json({{"steps", 3}}), std::invalid_argument);
        CHECK_THROWS_AS(GenerationConfig::from_json({{"top_p", 1.5}}), std::invalid_argument);
    }

    TEST_CASE("log-log slope and bench report") {
        const std::vector<double> x = {8, 16, 32, 64};
        std::vector<double> y;
        for (double v : x) {
            y.push_back(3.0 * v * v);
        }
        CHECK(loglog_slope(x, y) == doctest::Approx(2.0));
        const Transformer model(tiny_config(), 1);
        BenchOptions o;
        o.n_grid = {4, 8};
        o.engines = {Engine::decoder_cached, Engine::decoder_full_recompute};
        o.repeats = 2;
        const BenchReport r = speed_bench(model, o);
        CHECK(r.rows.size() == 4);
        CHECK(std::isfinite(r.slope(Engine::decoder_cached)));
        CHECK(r.speedup(Engine::decoder_cached, Engine::decoder_full_recompute, 8, 8) > 0.0);
        CHECK(r.to_csv().rfind("engine,n,T,median_ms,slope\n", 0) == 0);
    }
}
