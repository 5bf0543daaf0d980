#include <cmath>

#include "aoar/evalsuite.hpp"
#include "aoar/kernels.hpp"
#include "doctest.h"
#include "stub_models.hpp"
#include "test_util.hpp"

using namespace aoar;
using aoar::test::random_tokens;
using aoar::test::tiny_config;

namespace {

struct DeterministicScope {
    DeterministicScope() { kernels::set_deterministic(true); }
    ~DeterministicScope() { kernels::set_deterministic(false); }
};

struct BlockSet {
    std::vector<std::vector<int>> data;
    std::vector<Block> blocks;
};

BlockSet make_blocks(int count, int n, int vocab, std::uint64_t seed) {
    BlockSet s;
    for (int i = 0; i < count; ++i) {
        s.data.push_back(random_tokens(n, vocab, seed + static_cast<std::uint64_t>(i)));
    }
    for (const auto& d : s.data) {
        s.blocks.emplace_back(d);
    }
    return s;
}

}  // namespace

TEST_SUITE("evalsuite") {
    TEST_CASE("uniform model perplexity is the vocabulary size") {
        const test::UniformStub stub(27, 32);
        const auto bs = make_blocks(4, 20, 26, 1);
        CHECK(l2r_ppl(stub, bs.blocks).ppl == doctest::Approx(27.0).epsilon(1e-12));
        CHECK(anyorder_ppl(stub, bs.blocks, 3, 2).ppl == doctest::Approx(27.0).epsilon(1e-12));
        CHECK(ensemble_ppl(stub, bs.blocks, 1, {4, true, 3}, 2).ppl == doctest::Approx(27.0).epsilon(1e-12));
        const test::UniformStub enc(27, 32, ModelFamily::encoder_mdm);
        CHECK_THROWS_WITH_AS(l2r_ppl(enc, bs.blocks), "L2R likelihood requires n forwards; use any_order mode",
                             std::invalid_argument);
    }

    TEST_CASE("stderr shrinks with the number of orders") {
        const Transformer model(tiny_config(), 2);
        const auto bs = make_blocks(32, 16, 10, 10);
        const double a = anyorder_ppl(model, bs.blocks, 8, 5).std_error;
        const double b = anyorder_ppl(model, bs.blocks, 16, 5).std_error;
        CHECK(b / a == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(0.2));
    }

    TEST_CASE("single identity member reproduces the any-order estimate") {
        DeterministicScope det;
        const Transformer model(tiny_config(), 3);
        const auto bs = make_blocks(5, 12, 10, 20);
        const PplReport a = anyorder_ppl(model, bs.blocks, 3, 7);
        const PplReport e = ensemble_ppl(model, bs.blocks, 3, {1, true, 99}, 7);
        CHECK(a.nll == e.nll);
        CHECK(a.std_error == e.std_error);
        const PplReport e8 = ensemble_ppl(model, bs.blocks, 3, {8, true, 99}, 7);
        CHECK(e8.nll != e.nll);
        CHECK(std::isfinite(e8.nll));
    }

    TEST_CASE("ensemble conditional") {
        DeterministicScope det;
        Transformer model(tiny_config(), 4);
        aoar::test::randomize(model, "h0.ada_w", 0.3, 1);
        const auto block = random_tokens(10, 10, 5);
        const std::vector<int> ctx = {4, 1, 7, 2};
        Rng rng(1);
        const auto base = ensemble_conditional(model, block, ctx, 6, {1, true, 0}, rng);
        const Matrix<float> lg =
            model.forward_decoder(parallel_rows(block, ctx, std::vector<int>{6}), build_parallel_generation_mask(4, 1, 16));
        double mx = -1e300, s = 0.0;
        for (int v = 0; v < 11; ++v) {
            mx = std::max(mx, static_cast<double>(lg(4, v)));
        }
        for (int v = 0; v < 11; ++v) {
            s += std::exp(lg(4, v) - mx);
        }
        for (int v = 0; v < 11; ++v) {
            CHECK(base[static_cast<std::size_t>(v)] == doctest::Approx(std::exp(lg(4, v) - mx) / s).epsilon(1e-12));
        }
        const auto ens = ensemble_conditional(model, block, ctx, 6, {8, true, 0}, rng);
        double total = 0.0;
        for (double p : ens) {
            total += p;
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
        CHECK_THROWS_AS(ensemble_conditional(model, block, ctx, 6, {0, true, 0}, rng), std::invalid_argument);
    }

    TEST_CASE("ensemble of order-sensitive stub is the member mean") {
        // The distribution depends on which position was presented first.
        auto dist = [](int first, int v) { return std::log(1.0 + ((first + 1) * (v + 3)) % 7); };
        const test::RowStub stub(5, 16, [&](const Batch& b, const Segment& seg, int r, float* logits) {
            const int first = seg.count > 1 ? b.rows.target_positions[static_cast<std::size_t>(seg.begin)] : -1;
            (void)r;
            for (int v = 0; v < 5; ++v) {
                logits[v] = static_cast<float>(dist(first, v));
            }
        });
        const auto block = random_tokens(8, 4, 3);
        const std::vector<int> ctx = {0, 3, 5};
        const EnsembleConfig cfg{2, true, 0};
        Rng rng(42);
        const auto got = ensemble_conditional(stub, block, ctx, 6, cfg, rng);
        Rng replay(42);
        const auto orders = ensemble_orders(ctx, cfg, replay);
        REQUIRE(orders.size() == 2);
        CHECK(orders[0] == ctx);
        for (int v = 0; v < 5; ++v) {
            double mean = 0.0;
            for (const auto& o : orders) {
                double z = 0.0;
                for (int u = 0; u < 5; ++u) {
                    z += std::exp(static_cast<double>(static_cast<float>(dist(o[0], u))));
                }
                mean += std::exp(static_cast<double>(static_cast<float>(dist(o[0], v)))) / z / 2.0;
            }
            CHECK(got[static_cast<std::size_t>(v)] == doctest::Approx(mean).epsilon(1e-12));
        }
    }

    TEST_CASE("encoder ensembles are order invariant") {
        DeterministicScope det;
        const Transformer enc(tiny_config(Injection::adaln, ModelFamily::encoder_mdm), 8);
        const auto block = random_tokens(12, 10, 9);
        const std::vector<int> ctx = {11, 3, 0, 7, 5};
        Rng rng(3);
        const auto orders = ensemble_orders(ctx, {6, true, 0}, rng);
        Batch batch;
        for (const auto& o : orders) {
            std::vector<int> tokens, pos;
            for (int p : o) {
                tokens.push_back(block[static_cast<std::size_t>(p)]);
                pos.push_back(p);
            }
            tokens.push_back(enc.mask_id());
            pos.push_back(9);
            add_encoder_segment(batch, tokens, pos);
        }
        const Matrix<float> lg = enc.forward(batch);
        for (std::size_t m = 1; m < orders.size(); ++m) {
            for (int v = 0; v < 11; ++v) {
                CHECK(lg(static_cast<int>(m) * 6 + 5, v) == lg(5, v));
            }
        }
        Rng r1(4), r2(4);
        const auto one = ensemble_conditional(enc, block, ctx, 9, {1, true, 0}, r1);
        const auto many = ensemble_conditional(enc, block, ctx, 9, {6, true, 0}, r2);
        for (int v = 0; v < 11; ++v) {
            CHECK(std::abs(one[static_cast<std::size_t>(v)] - many[static_cast<std::size_t>(v)]) < 1e-15);
        }
    }

    TEST_CASE("generation perplexity") {
        const test::UniformStub stub(11, 16);
        const std::vector<std::vector<int>> samples = {{1, 2, 3, 4}, {5, 6, 7, 8, 9}};
        const PplReport r = generation_ppl(samples, stub, 11);
        CHECK(r.ppl == doctest::Approx(11.0));
        CHECK(r.num_tokens == 9);
        CHECK_THROWS_AS(generation_ppl(samples, stub, 12), std::invalid_argument);
        const std::vector<std::vector<int>> bad = {{1, 11}};
        CHECK_THROWS_AS(generation_ppl(bad, stub, 11), std::invalid_argument);
    }

    TEST_CASE("report output") {
        const test::UniformStub stub(9, 16);
        const auto bs = make_blocks(2, 8, 8, 3);
        std::vector<PplReport> reps = {l2r_ppl(stub, bs.blocks, "validation", "stub"),
                                       anyorder_ppl(stub, bs.blocks, 2, 1, "validation", "stub"),
                                       ensemble_ppl(stub, bs.blocks, 1, {8, true, 0}, 1, "validation", "stub")};
        for (const auto& r : reps) {
            CHECK(r.ppl == std::exp(r.nll));
        }
        const std::string csv = reports_csv(reps);
        CHECK(csv.rfind("dataset,mode,members,nll,ppl,stderr,num_tokens,model,bound\n", 0) == 0);
        CHECK(csv.find("any_order_ensemble(8)") != std::string::npos);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
        CHECK(reports_table(reps).find("(bound)") != std::string::npos);
        const std::vector<SeriesPoint> pts = {{1, 3.0}, {8, 2.5}, {64, 2.4}};
        const std::string svg = line_chart_svg("ppl vs M", "M", "ppl", pts);
        CHECK(svg.rfind("<svg", 0) == 0);
        CHECK(svg.find("polyline") != std::string::npos);
        CHECK(svg.find("</svg>") != std::string::npos);
    }
}
