#include "aoar/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "aoar/errors.hpp"

namespace aoar {

std::string PplReport::mode_label() const {
    switch (mode) {
        case PplMode::l2r:
            return "l2r";
        case PplMode::any_order:
            return "any_order";
        case PplMode::any_order_ensemble:
            return "any_order_ensemble(" + std::to_string(members) + ")";
        case PplMode::generation:
            return "generation";
    }
    return "?";
}

PplReport make_report(const LossEstimate& e, std::string dataset, PplMode mode, int members, std::string model_id) {
    PplReport r;
    r.dataset = std::move(dataset);
    r.mode = mode;
    r.members = members;
    r.nll = e.nll_per_token;
    r.ppl = std::exp(e.nll_per_token);
    r.std_error = e.std_error;
    r.num_tokens = e.token_count;
    r.model_id = std::move(model_id);
    return r;
}

PplReport l2r_ppl(const SequenceModel& model, std::span<const Block> blocks, const std::string& dataset,
                  const std::string& model_id) {
    return make_report(summarize(ar_samples(model, blocks)), dataset, PplMode::l2r, 1, model_id);
}

PplReport anyorder_ppl(const SequenceModel& model, std::span<const Block> blocks, int num_orders, std::uint64_t seed,
                       const std::string& dataset, const std::string& model_id) {
    return make_report(summarize(aoar_samples(model, blocks, OrderPolicy::uniform(), num_orders, seed)), dataset,
                       PplMode::any_order, 1, model_id);
}

void EnsembleConfig::validate() const {
    if (members < 1) {
        throw std::invalid_argument("ensemble needs M >= 1");
    }
}

std::vector<std::vector<int>> ensemble_orders(std::span<const int> context, const EnsembleConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<std::vector<int>> out;
    out.reserve(static_cast<std::size_t>(cfg.members));
    for (int j = 0; j < cfg.members; ++j) {
        std::vector<int> c(context.begin(), context.end());
        if (!(j == 0 && cfg.include_identity) && c.size() > 1) {
            const Permutation p = uniform_permutation(static_cast<int>(c.size()), rng);
            for (std::size_t i = 0; i < c.size(); ++i) {
                c[i] = context[static_cast<std::size_t>(p.order[i])];
            }
        }
        out.push_back(std::move(c));
    }
    return out;
}

namespace {

void softmax_into(const float* logits, int V, std::vector<double>& p) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < V; ++i) {
        mx = std::max(mx, static_cast<double>(logits[i]));
    }
    double s = 0.0;
    for (int i = 0; i < V; ++i) {
        s += std::exp(static_cast<double>(logits[i]) - mx);
    }
    for (int i = 0; i < V; ++i) {
        p[static_cast<std::size_t>(i)] += std::exp(static_cast<double>(logits[i]) - mx) / s;
    }
}

// Member rows for one conditional: decoder rows under the parallel mask, or
// the encoder's (token, position) pairs in context order followed by the
// masked target.
void add_member(Batch& batch, const SequenceModel& model, std::span<const int> block, std::span<const int> context,
                int target) {
    if (model.family() == ModelFamily::decoder_any_order) {
        const int one[] = {target};
        batch.add(parallel_rows(block, context, one),
                  build_parallel_generation_mask(static_cast<int>(context.size()), 1, model.ctx_len()));
        return;
    }
    std::vector<int> tokens;
    std::vector<int> positions;
    for (int p : context) {
        tokens.push_back(block[static_cast<std::size_t>(p)]);
        positions.push_back(p);
    }
    tokens.push_back(model.mask_id());
    positions.push_back(target);
    add_encoder_segment(batch, tokens, positions);
}

constexpr int kMaxRows = 4096;

}  // namespace

std::vector<double> ensemble_conditional(const SequenceModel& model, std::span<const int> block,
                                         std::span<const int> context, int target, const EnsembleConfig& cfg,
                                         Rng& rng) {
    const auto orders = ensemble_orders(context, cfg, rng);
    const int V = model.vocab_size();
    std::vector<double> p(static_cast<std::size_t>(V), 0.0);
    Batch batch;
    for (const auto& o : orders) {
        add_member(batch, model, block, o, target);
    }
    const Matrix<float> logits = model.forward(batch);
    for (const auto& seg : batch.segments) {
        // The target row is the last row of every member segment.
        softmax_into(logits.row(seg.begin + seg.count - 1), V, p);
    }
    for (double& x : p) {
        x /= static_cast<double>(orders.size());
    }
    return p;
}

PplReport ensemble_ppl(const SequenceModel& model, std::span<const Block> blocks, int num_orders,
                       const EnsembleConfig& cfg, std::uint64_t seed, const std::string& dataset,
                       const std::string& model_id) {
    cfg.validate();
    if (model.family() != ModelFamily::decoder_any_order) {
        throw std::invalid_argument("context-order ensembles apply to the decoder family");
    }
    if (num_orders < 1) {
        throw std::invalid_argument("num_orders must be at least 1");
    }
    const int M = cfg.members;
    const int V = model.vocab_size();
    std::vector<SampleLoss> samples;

    struct Pending {
        std::size_t slot;  // index into logp
        int row;           // batch row holding the target logits
        int target;
    };
    std::vector<double> logp;  // [sample][step][member]
    Batch batch;
    std::vector<Pending> pending;
    auto flush = [&] {
        if (batch.size() == 0) {
            return;
        }
        const Matrix<float> logits = model.forward(batch);
        for (const auto& p : pending) {
            logp[p.slot] = -token_nll(logits.row(p.row), V, p.target);
        }
        batch = Batch{};
        pending.clear();
    };

    std::size_t base = 0;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const Block block = blocks[b];
        const int n = static_cast<int>(block.size());
        if (n < 2 || n > model.ctx_len()) {
            throw std::invalid_argument("block length must lie in [2, ctx_len]");
        }
        for (int j = 0; j < num_orders; ++j) {
            Rng order_rng(derive_seed(seed, {b, static_cast<std::uint64_t>(j)}));
            const Permutation sigma = sample_permutation(OrderPolicy::uniform(), n, order_rng);
            samples.push_back({0.0, n});
            logp.resize(base + static_cast<std::size_t>(n) * M);
            auto slot = [&](int step, int member) { return base + static_cast<std::size_t>(step) * M + member; };
            const int first_random = cfg.include_identity ? 1 : 0;
            if (cfg.include_identity) {
                // The identity member of every step shares one causal forward.
                if (batch.size() + n > kMaxRows) {
                    flush();
                }
                const int row0 = batch.size();
                batch.add(rows_for_order(block, sigma), AttentionMask::causal(n));
                for (int k = 0; k < n; ++k) {
                    pending.push_back({slot(k, 0), row0 + k, block[static_cast<std::size_t>(sigma.order[static_cast<std::size_t>(k)])]});
                }
            }
            for (int k = 0; k < n && first_random < M; ++k) {
                Rng member_rng(derive_seed(cfg.seed, {b, static_cast<std::uint64_t>(j), static_cast<std::uint64_t>(k)}));
                const std::span<const int> context(sigma.order.data(), static_cast<std::size_t>(k));
                const int target = sigma.order[static_cast<std::size_t>(k)];
                for (int m = first_random; m < M; ++m) {
                    std::vector<int> ctx(context.begin(), context.end());
                    if (k > 1) {
                        const Permutation p = uniform_permutation(k, member_rng);
                        for (int i = 0; i < k; ++i) {
                            ctx[static_cast<std::size_t>(i)] = context[static_cast<std::size_t>(p.order[static_cast<std::size_t>(i)])];
                        }
                    }
                    if (batch.size() + k + 1 > kMaxRows) {
                        flush();
                    }
                    const int row = batch.size() + k;
                    add_member(batch, model, block, ctx, target);
                    pending.push_back({slot(k, m), row, block[static_cast<std::size_t>(target)]});
                }
            }
            base += static_cast<std::size_t>(n) * M;
        }
    }
    flush();

    base = 0;
    for (auto& s : samples) {
        const int n = static_cast<int>(s.tokens);
        for (int k = 0; k < n; ++k) {
            const double* lp = logp.data() + base + static_cast<std::size_t>(k) * M;
            double mx = lp[0];
            for (int m = 1; m < M; ++m) {
                mx = std::max(mx, lp[m]);
            }
            double acc = 0.0;
            for (int m = 0; m < M; ++m) {
                acc += std::exp(lp[m] - mx);
            }
            s.nll += -(mx + std::log(acc) - std::log(static_cast<double>(M)));
        }
        base += static_cast<std::size_t>(n) * M;
    }
    return make_report(summarize(samples), dataset, PplMode::any_order_ensemble, M, model_id);
}

PplReport generation_ppl(std::span<const std::vector<int>> samples, const SequenceModel& scorer, int vocab_size,
                         const std::string& dataset, const std::string& model_id) {
    if (scorer.vocab_size() != vocab_size) {
        throw std::invalid_argument("scorer vocabulary does not match the generator vocabulary");
    }
    std::vector<Block> blocks;
    for (const auto& s : samples) {
        for (int t : s) {
            if (t < 0 || t >= vocab_size) {
                throw std::invalid_argument("sample token outside the scorer vocabulary");
            }
        }
        blocks.emplace_back(s);
    }
    return make_report(summarize(ar_samples(scorer, blocks)), dataset, PplMode::generation, 1, model_id);
}

std::string reports_csv(std::span<const PplReport> reports) {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "dataset,mode,members,nll,ppl,stderr,num_tokens,model,bound\n";
    for (const auto& r : reports) {
        out << r.dataset << ',' << r.mode_label() << ',' << r.members << ',' << r.nll << ',' << r.ppl << ','
            << r.std_error << ',' << r.num_tokens << ',' << r.model_id << ',' << (r.is_bound() ? "upper" : "exact")
            << '\n';
    }
    return out.str();
}

std::string reports_table(std::span<const PplReport> reports) {
    std::ostringstream out;
    out << std::left << std::setw(12) << "dataset" << std::setw(34) << "mode" << std::right << std::setw(10) << "nll"
        << std::setw(12) << "ppl" << std::setw(10) << "stderr" << std::setw(10) << "tokens" << '\n';
    for (const auto& r : reports) {
        out << std::left << std::setw(12) << r.dataset << std::setw(34) << (r.mode_label() + (r.is_bound() ? " (bound)" : ""))
            << std::right << std::fixed << std::setprecision(4) << std::setw(10) << r.nll << std::setw(12) << r.ppl
            << std::setw(10) << r.std_error << std::setw(10) << r.num_tokens << '\n';
        out.unsetf(std::ios::fixed);
    }
    return out.str();
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           std::span<const SeriesPoint> points) {
    const double W = 480, H = 320, L = 60, R = 20, T = 40, B = 50;
    std::ostringstream out;
    out << std::setprecision(6);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
        << title << "</text>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"" << H - 12
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << x_label << "</text>\n";
    out << "<text x=\"16\" y=\"" << H / 2 << "\" transform=\"rotate(-90 16 " << H / 2
        << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << y_label << "</text>\n";
    if (!points.empty()) {
        double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
        for (const auto& p : points) {
            x0 = std::min(x0, std::log(p.x));
            x1 = std::max(x1, std::log(p.x));
            y0 = std::min(y0, p.y);
            y1 = std::max(y1, p.y);
        }
        if (x1 - x0 < 1e-12) {
            x1 = x0 + 1;
        }
        if (y1 - y0 < 1e-12) {
            y1 = y0 + 1;
        }
        auto px = [&](double x) { return L + (std::log(x) - x0) / (x1 - x0) * (W - L - R); };
        auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
        out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
        for (const auto& p : points) {
            out << px(p.x) << ',' << py(p.y) << ' ';
        }
        out << "\"/>\n";
        for (const auto& p : points) {
            out << "<circle cx=\"" << px(p.x) << "\" cy=\"" << py(p.y) << "\" r=\"3\" fill=\"steelblue\"/>\n";
            out << "<text x=\"" << px(p.x) << "\" y=\"" << H - B + 16
                << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << p.x << "</text>\n";
        }
        out << "<text x=\"" << L - 4 << "\" y=\"" << py(y0) << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
            << y0 << "</text>\n";
        out << "<text x=\"" << L - 4 << "\" y=\"" << py(y1) + 8 << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
            << y1 << "</text>\n";
    }
    out << "</svg>\n";
    return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw IoError("cannot write " + path.string());
        }
        out << text;
        if (!out) {
            throw IoError("cannot write " + path.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace aoar
