#include "aoar/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace aoar {

std::vector<double> time_schedule(int num_steps, ScheduleKind kind) {
    if (num_steps < 1) {
        throw std::invalid_argument("num_steps must be >= 1");
    }
    std::vector<double> t(static_cast<std::size_t>(num_steps) + 1);
    const double T = num_steps;
    for (int k = 0; k <= num_steps; ++k) {
        if (k == num_steps) {
            t[static_cast<std::size_t>(k)] = 0.0;
        } else if (kind == ScheduleKind::linear) {
            t[static_cast<std::size_t>(k)] = 1.0 - k / T;
        } else {
            t[static_cast<std::size_t>(k)] = num_steps == 1 ? 1.0 : std::pow(1e-3, k / (T - 1.0));
        }
    }
    return t;
}

int categorical_draw(std::span<const double> probs, double u) {
    double cdf = 0.0;
    int last = -1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) {
            continue;
        }
        last = static_cast<int>(i);
        cdf += probs[i];
        if (u < cdf) {
            return last;
        }
    }
    if (last < 0) {
        throw std::invalid_argument("categorical_draw: no probability mass");
    }
    return last;
}

int lemma1_draw(std::span<const double> q0t, double s, double t, Rng& rng) {
    if (!(s >= 0.0 && s < t && t <= 1.0)) {
        throw std::invalid_argument("lemma1_draw requires 0 <= s < t <= 1");
    }
    const double total = std::accumulate(q0t.begin(), q0t.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-5) {
        throw std::invalid_argument("q0t is not normalized");
    }
    if (rng.bernoulli(s / t)) {
        return kStillMasked;
    }
    return categorical_draw(q0t, rng.uniform());
}

std::vector<double> anneal_logits(std::span<const float> logits, const AnnealSpec& spec) {
    if (!(spec.top_p > 0.0 && spec.top_p <= 1.0) || !(spec.temperature > 0.0)) {
        throw std::invalid_argument("anneal spec requires top_p in (0, 1] and temperature > 0");
    }
    const std::size_t V = logits.size();
    std::vector<double> p(V, 0.0);
    if (spec.temperature < 1e-6) {
        const auto it = std::max_element(logits.begin(), logits.end());
        p[static_cast<std::size_t>(it - logits.begin())] = 1.0;
        return p;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (float l : logits) {
        mx = std::max(mx, static_cast<double>(l) / spec.temperature);
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < V; ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) / spec.temperature - mx);
        sum += p[i];
    }
    for (double& x : p) {
        x /= sum;
    }
    if (spec.top_p >= 1.0) {
        return p;
    }
    std::vector<int> idx(V);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)]; });
    double mass = 0.0;
    std::size_t keep = 0;
    while (keep < V) {
        mass += p[static_cast<std::size_t>(idx[keep])];
        ++keep;
        if (mass >= spec.top_p) {
            break;
        }
    }
    std::vector<double> out(V, 0.0);
    for (std::size_t i = 0; i < keep; ++i) {
        const auto j = static_cast<std::size_t>(idx[i]);
        out[j] = p[j] / mass;
    }
    return out;
}

std::string to_string(Engine e) {
    switch (e) {
        case Engine::decoder_cached:
            return "decoder_cached";
        case Engine::decoder_full_recompute:
            return "decoder_full_recompute";
        case Engine::encoder_full:
            return "encoder_full";
    }
    return "?";
}

Engine parse_engine(const std::string& s) {
    for (Engine e : {Engine::decoder_cached, Engine::decoder_full_recompute, Engine::encoder_full}) {
        if (to_string(e) == s) {
            return e;
        }
    }
    throw std::invalid_argument("unknown engine: " + s);
}

void GenerationConfig::validate() const {
    if (seq_len < 1) {
        throw std::invalid_argument("seq_len must be >= 1");
    }
    if (num_steps < 1) {
        throw std::invalid_argument("num_steps must be >= 1");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw std::invalid_argument("top_p must lie in (0, 1]");
    }
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("temperature must be > 0");
    }
}

nlohmann::json GenerationConfig::to_json() const {
    return {{"seq_len", seq_len},
            {"num_steps", num_steps},
            {"schedule", schedule == ScheduleKind::linear ? "linear" : "geometric"},
            {"top_p", top_p},
            {"temperature", temperature},
            {"seed", seed},
            {"engine", to_string(engine)},
            {"commit_order", commit_order == CommitOrder::ascending ? "ascending" : "shuffled"}};
}

GenerationConfig GenerationConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> keys = {"seq_len", "num_steps", "schedule", "top_p",
                                                  "temperature", "seed", "engine", "commit_order"};
    for (const auto& [k, v] : j.items()) {
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
            throw std::invalid_argument("unknown generation key: " + k);
        }
    }
    GenerationConfig c;
    c.seq_len = j.value("seq_len", c.seq_len);
    c.num_steps = j.value("num_steps", c.num_steps);
    const std::string sched = j.value("schedule", std::string("linear"));
    if (sched != "linear" && sched != "geometric") {
        throw std::invalid_argument("schedule must be linear or geometric");
    }
    c.schedule = sched == "linear" ? ScheduleKind::linear : ScheduleKind::geometric;
    c.top_p = j.value("top_p", c.top_p);
    c.temperature = j.value("temperature", c.temperature);
    c.seed = j.value("seed", c.seed);
    c.engine = parse_engine(j.value("engine", to_string(c.engine)));
    const std::string order = j.value("commit_order", std::string("ascending"));
    if (order != "ascending" && order != "shuffled") {
        throw std::invalid_argument("commit_order must be ascending or shuffled");
    }
    c.commit_order = order == "ascending" ? CommitOrder::ascending : CommitOrder::shuffled;
    c.validate();
    return c;
}

nlohmann::json GenerationStep::to_json() const {
    return {{"step", step}, {"t", t}, {"s", s}, {"decoded_count", decoded_count}, {"wall_ms", wall_ms}};
}

GenerationResult generate(const Transformer& model, const GenerationConfig& cfg, const StepObserver& observe) {
    cfg.validate();
    const int n = cfg.seq_len;
    if (n > model.ctx_len()) {
        throw std::invalid_argument("seq_len exceeds the model ctx_len");
    }
    const bool decoder_engine = cfg.engine != Engine::encoder_full;
    if (decoder_engine != model.config().is_decoder()) {
        throw std::invalid_argument("engine " + to_string(cfg.engine) + " does not match the model family");
    }
    const std::vector<double> sched = time_schedule(cfg.num_steps, cfg.schedule);
    SamplerState st;
    st.tokens.assign(static_cast<std::size_t>(n), kStillMasked);
    st.masked.resize(static_cast<std::size_t>(n));
    std::iota(st.masked.begin(), st.masked.end(), 0);

    KvCache cache;
    if (cfg.engine == Engine::decoder_cached) {
        cache = model.make_cache();
    }
    DecoderRows pending;
    GenerationResult res;
    std::vector<int> decode;
    std::vector<int> enc_tokens(static_cast<std::size_t>(n));

    for (int k = 0; k < cfg.num_steps; ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        const double t = sched[static_cast<std::size_t>(k)];
        const double s = sched[static_cast<std::size_t>(k) + 1];
        const double keep = s / t;
        decode.clear();
        for (int p : st.masked) {
            if (!(keyed_uniform(cfg.seed, {static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(k), 0}) < keep)) {
                decode.push_back(p);
            }
        }
        if (!decode.empty()) {
            Matrix<float> logits;
            int first = 0;
            if (cfg.engine == Engine::decoder_cached) {
                const int last = st.commit_order.empty() ? -1 : st.commit_order.back();
                const int tok = last < 0 ? kBos : st.tokens[static_cast<std::size_t>(last)];
                DecoderRows q;
                for (int p : decode) {
                    q.push(tok, last, p);
                }
                logits = model.forward_incremental(cache, pending, q);
                pending = DecoderRows{};
            } else if (cfg.engine == Engine::decoder_full_recompute) {
                const int c = static_cast<int>(st.commit_order.size());
                logits = model.forward_decoder(parallel_rows(st.tokens, st.commit_order, decode),
                                               build_parallel_generation_mask(c, static_cast<int>(decode.size()),
                                                                              model.ctx_len()));
                first = c;
            } else {
                for (int i = 0; i < n; ++i) {
                    const int v = st.tokens[static_cast<std::size_t>(i)];
                    enc_tokens[static_cast<std::size_t>(i)] = v == kStillMasked ? model.mask_id() : v;
                }
                logits = model.forward_encoder(enc_tokens, AttentionMask::full(n));
            }
            std::vector<int> drawn(decode.size());
            const int V = model.vocab_size();
            for (std::size_t j = 0; j < decode.size(); ++j) {
                const int row = cfg.engine == Engine::encoder_full ? decode[j] : first + static_cast<int>(j);
                std::span<const float> lr(logits.row(row), static_cast<std::size_t>(V));
                // The mask symbol is never emitted.
                const std::vector<double> probs = anneal_logits(lr.first(static_cast<std::size_t>(V - 1)), cfg.anneal());
                drawn[j] = categorical_draw(
                    probs, keyed_uniform(cfg.seed, {static_cast<std::uint64_t>(decode[j]), static_cast<std::uint64_t>(k), 1}));
            }
            std::vector<std::size_t> order(decode.size());
            std::iota(order.begin(), order.end(), 0);
            if (cfg.commit_order == CommitOrder::shuffled) {
                Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(k), 2}));
                std::shuffle(order.begin(), order.end(), rng);
            }
            for (std::size_t j : order) {
                const int p = decode[j];
                const int last = st.commit_order.empty() ? -1 : st.commit_order.back();
                pending.push(last < 0 ? kBos : st.tokens[static_cast<std::size_t>(last)], last, p);
                st.tokens[static_cast<std::size_t>(p)] = drawn[j];
                st.commit_order.push_back(p);
            }
            st.masked.erase(std::remove_if(st.masked.begin(), st.masked.end(),
                                           [&](int p) { return st.tokens[static_cast<std::size_t>(p)] != kStillMasked; }),
                            st.masked.end());
        }
        st.step = k + 1;
        GenerationStep g;
        g.step = k;
        g.t = t;
        g.s = s;
        g.decoded_count = static_cast<int>(decode.size());
        g.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        res.trace.push_back(g);
        if (observe) {
            observe(st);
        }
    }
    res.tokens = st.tokens;
    res.commit_order = st.commit_order;
    return res;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw std::invalid_argument("slope needs at least two points");
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

double BenchReport::slope(Engine e) const {
    for (const auto& [eng, s] : slopes) {
        if (eng == e) {
            return s;
        }
    }
    return std::numeric_limits<double>::quiet_NaN();
}

double BenchReport::speedup(Engine a, Engine b, int n, int steps) const {
    double ta = 0.0, tb = 0.0;
    for (const auto& r : rows) {
        if (r.n == n && r.steps == steps) {
            if (r.engine == a) {
                ta = r.median_ms;
            }
            if (r.engine == b) {
                tb = r.median_ms;
            }
        }
    }
    return ta > 0 && tb > 0 ? tb / ta : 0.0;
}

std::string BenchReport::to_csv() const {
    std::ostringstream out;
    out << "engine,n,T,median_ms,slope\n";
    for (const auto& r : rows) {
        const double s = slope(r.engine);
        out << to_string(r.engine) << ',' << r.n << ',' << r.steps << ',' << r.median_ms << ',';
        if (std::isfinite(s)) {
            out << s;
        }
        out << '\n';
    }
    return out.str();
}

BenchReport speed_bench(const Transformer& model, const BenchOptions& opts) {
    if (opts.repeats < 1 || opts.n_grid.empty() || opts.engines.empty()) {
        throw std::invalid_argument("bench needs engines, an n grid and at least one repeat");
    }
    BenchReport rep;
    for (Engine e : opts.engines) {
        std::vector<double> xs, ys;
        for (int n : opts.n_grid) {
            std::vector<int> steps = opts.step_grid;
            if (steps.empty()) {
                steps = {n};
            }
            for (int T : steps) {
                GenerationConfig g;
                g.seq_len = n;
                g.num_steps = T;
                g.engine = e;
                g.seed = opts.seed;
                for (int w = 0; w < opts.warmup; ++w) {
                    generate(model, g);
                }
                std::vector<double> times;
                for (int r = 0; r < opts.repeats; ++r) {
                    const auto t0 = std::chrono::steady_clock::now();
                    generate(model, g);
                    times.push_back(
                        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
                }
                std::sort(times.begin(), times.end());
                const std::size_t m = times.size();
                const double med = m % 2 ? times[m / 2] : 0.5 * (times[m / 2 - 1] + times[m / 2]);
                rep.rows.push_back({e, n, T, med});
                if (T == n) {
                    xs.push_back(n);
                    ys.push_back(med);
                }
            }
        }
        if (xs.size() >= 2) {
            rep.slopes.emplace_back(e, loglog_slope(xs, ys));
        }
    }
    return rep;
}

}  // namespace aoar
