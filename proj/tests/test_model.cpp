#include <filesystem>

#include "aoar/kernels.hpp"
#include "aoar/model.hpp"
#include "aoar/objectives.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace aoar;
using aoar::test::max_abs_diff;
using aoar::test::random_tokens;
using aoar::test::tiny_config;

namespace {

struct DeterministicScope {
    DeterministicScope() { kernels::set_deterministic(true); }
    ~DeterministicScope() { kernels::set_deterministic(false); }
};

double softmax_sum(const float* row, int v) {
    double mx = row[0];
    for (int i = 1; i < v; ++i) {
        mx = std::max(mx, static_cast<double>(row[i]));
    }
    double s = 0.0;
    for (int i = 0; i < v; ++i) {
        s += std::exp(row[i] - mx);
    }
    double t = 0.0;
    for (int i = 0; i < v; ++i) {
        t += std::exp(row[i] - mx) / s;
    }
    return t;
}

}  // namespace

TEST_SUITE("model") {
    TEST_CASE("config invariants") {
        ModelConfig c = tiny_config();
        CHECK_NOTHROW(c.validate());
        c.d_model = 15;
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
        c = tiny_config();
        c.ctx_len = 1;
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
        CHECK(ModelConfig::from_json(tiny_config().to_json()) == tiny_config());
        CHECK_THROWS_AS(ModelConfig::from_json({{"bogus", 1}}), std::invalid_argument);
    }

    TEST_CASE("parallel generation mask layout") {
        const AttentionMask a = build_parallel_generation_mask(0, 1, 8);
        CHECK(a.queries == 1);
        CHECK(a.allows(0, 0));
        const AttentionMask m = build_parallel_generation_mask(2, 2, 8);
        const std::vector<std::uint8_t> expect = {1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 0, 1, 1, 0, 1};
        CHECK(m.bits == expect);
        CHECK(m.kind == MaskKind::parallel_generation);
        CHECK_THROWS_AS(build_parallel_generation_mask(6, 3, 8), std::invalid_argument);
        CHECK_THROWS_AS(build_parallel_generation_mask(0, 0, 8), std::invalid_argument);
    }

    TEST_CASE("single row forward is a distribution") {
        const Transformer model(tiny_config(), 1);
        DecoderRows rows;
        rows.push(kBos, -1, 3);
        const Matrix<float> out = model.forward_decoder(rows, AttentionMask::causal(1));
        CHECK(out.rows == 1);
        CHECK(out.cols == 11);
        CHECK(std::abs(softmax_sum(out.row(0), 11) - 1.0) < 1e-5);
    }

    TEST_CASE("decoder input validation") {
        const Transformer model(tiny_config(), 1);
        DecoderRows rows;
        rows.push(kBos, -1, 3);
        rows.push(2, 3, 16);
        CHECK_THROWS_AS(model.forward_decoder(rows, AttentionMask::causal(2)), std::invalid_argument);
        rows.target_positions[1] = 4;
        CHECK_THROWS_AS(model.forward_decoder(rows, AttentionMask::full(2)), std::invalid_argument);
        rows.tokens.pop_back();
        CHECK_THROWS_AS(model.forward_decoder(rows, AttentionMask::causal(2)), std::invalid_argument);
    }

    TEST_CASE("causal rows ignore later inputs") {
        DeterministicScope det;
        for (Injection inj : {Injection::add_once, Injection::adaln}) {
            Transformer model(tiny_config(inj), 2);
            aoar::test::randomize(model, "h0.ln1_b", 0.1, 5);
            const auto block = random_tokens(10, 11, 3);
            Rng rng(4);
            const DecoderRows rows = rows_for_order(block, uniform_permutation(10, rng));
            const Matrix<float> base = model.forward_decoder(rows, AttentionMask::causal(10));
            for (int j = 1; j < 10; ++j) {
                DecoderRows r2 = rows;
                r2.tokens[static_cast<std::size_t>(j)] = (r2.tokens[static_cast<std::size_t>(j)] + 1) % 11;
                const Matrix<float> out = model.forward_decoder(r2, AttentionMask::causal(10));
                for (int k = 0; k < j; ++k) {
                    for (int v = 0; v < 11; ++v) {
                        REQUIRE(out(k, v) == base(k, v));
                    }
                }
                bool changed = false;
                for (int v = 0; v < 11; ++v) {
                    changed |= out(j, v) != base(j, v);
                }
                CHECK(changed);
            }
        }
    }

    TEST_CASE("gradients of a step never reach later inputs") {
        DeterministicScope det;
        const auto cfg = tiny_config(Injection::add_per_block_learned);
        const BasicTransformer<double> model(cfg, 3);
        const auto block = random_tokens(8, 11, 9);
        const int k = 3;
        WeightedBatch wb;
        wb.batch.add(rows_for_order(block, Permutation::identity(8)), AttentionMask::causal(8));
        for (int r = 0; r < 8; ++r) {
            wb.targets.push_back(block[static_cast<std::size_t>(r)]);
            wb.weights.push_back(r == k ? 1.0 : 0.0);
        }
        std::vector<double> grad(model.params().size(), 0.0);
        weighted_loss<double>(model, wb, grad);
        const auto& pos = model.layout().at("pos_emb");
        const auto& tgt = model.layout().at("h1.tgt_emb");
        for (int p = 0; p < 8; ++p) {
            double gp = 0.0;
            double gt = 0.0;
            for (int j = 0; j < cfg.d_model; ++j) {
                gp += std::abs(grad[pos.offset + static_cast<std::size_t>(p * cfg.d_model + j)]);
                gt += std::abs(grad[tgt.offset + static_cast<std::size_t>(p * cfg.d_model + j)]);
            }
            // Input position p feeds row p + 1; target position p belongs to row p.
            if (p >= k) {
                CHECK(gp == 0.0);
            } else {
                CHECK(gp > 0.0);
            }
            if (p > k) {
                CHECK(gt == 0.0);
            }
        }
    }

    TEST_CASE("add_once equals a per-block model whose later tables are zero") {
        DeterministicScope det;
        const Transformer once(tiny_config(Injection::add_once), 7);
        std::vector<float> params;
        const ParameterLayout learned_layout = make_layout(tiny_config(Injection::add_per_block_learned));
        params.assign(learned_layout.total(), 0.0f);
        for (const auto& t : learned_layout.tensors()) {
            const std::string src = t.name == "h0.tgt_emb" ? "tgt_emb" : t.name;
            if (const auto* s = once.layout().find(src)) {
                std::copy_n(once.params().begin() + static_cast<std::ptrdiff_t>(s->offset), s->size,
                            params.begin() + static_cast<std::ptrdiff_t>(t.offset));
            }
        }
        const Transformer learned(tiny_config(Injection::add_per_block_learned), params);
        const auto block = random_tokens(12, 11, 1);
        const DecoderRows rows = rows_for_order(block, Permutation::identity(12));
        const Matrix<float> a = once.forward_decoder(rows, AttentionMask::causal(12));
        const Matrix<float> b = learned.forward_decoder(rows, AttentionMask::causal(12));
        CHECK(a.data == b.data);

        // The shared per-block variant re-adds the same table at every block.
        std::vector<float> shared(once.params().begin(), once.params().end());
        const Transformer per_block(tiny_config(Injection::add_per_block_shared), shared);
        const Matrix<float> c = per_block.forward_decoder(rows, AttentionMask::causal(12));
        CHECK(max_abs_diff(a.data, c.data) > 0.0);
    }

    TEST_CASE("single parallel query degenerates to causal") {
        DeterministicScope det;
        const Transformer model(tiny_config(), 11);
        const auto block = random_tokens(4, 11, 2);
        const std::vector<int> ctx = {2, 0, 3};
        const std::vector<int> tgt = {1};
        const Matrix<float> par =
            model.forward_decoder(parallel_rows(block, ctx, tgt), build_parallel_generation_mask(3, 1, 16));
        const Permutation sigma{{2, 0, 3, 1}};
        const Matrix<float> causal = model.forward_decoder(rows_for_order(block, sigma), AttentionMask::causal(4));
        for (int v = 0; v < 11; ++v) {
            CHECK(par(3, v) == causal(3, v));
        }
    }

    TEST_CASE("parallel queries match separate single-query forwards") {
        Rng rng(21);
        for (Injection inj : {Injection::adaln, Injection::add_per_block_shared}) {
            Transformer model(tiny_config(inj), 5);
            if (inj == Injection::adaln) {
                aoar::test::randomize(model, "h0.ada_w", 0.2, 1);
                aoar::test::randomize(model, "h1.ada_w", 0.2, 2);
            }
            double worst = 0.0;
            for (int trial = 0; trial < 20; ++trial) {
                const int n = 2 + rng.below(15);
                const auto block = random_tokens(n, 11, 100 + trial);
                const Permutation sigma = uniform_permutation(n, rng);
                const int c = rng.below(n);
                std::vector<int> ctx(sigma.order.begin(), sigma.order.begin() + c);
                std::vector<int> tgt(sigma.order.begin() + c, sigma.order.end());
                const Matrix<float> par =
                    model.forward_decoder(parallel_rows(block, ctx, tgt), build_parallel_generation_mask(c, n - c, 16));
                for (std::size_t j = 0; j < tgt.size(); ++j) {
                    const std::vector<int> one = {tgt[j]};
                    const Matrix<float> single =
                        model.forward_decoder(parallel_rows(block, ctx, one), build_parallel_generation_mask(c, 1, 16));
                    for (int v = 0; v < 11; ++v) {
                        worst = std::max(worst, std::abs(static_cast<double>(par(c + static_cast<int>(j), v)) -
                                                         single(c, v)));
                    }
                }
            }
            CHECK(worst <= 1e-5);
        }
    }

    TEST_CASE("incremental decoding matches recomputation") {
        DeterministicScope det;
        Transformer model(tiny_config(), 8);
        aoar::test::randomize(model, "h1.ada_w", 0.2, 3);
        const auto block = random_tokens(16, 11, 4);

        SUBCASE("empty cache plus one row") {
            KvCache cache = model.make_cache();
            DecoderRows q;
            q.push(kBos, -1, 5);
            const Matrix<float> a = model.forward_incremental(cache, {}, q);
            const Matrix<float> b = model.forward_decoder(q, AttentionMask::causal(1));
            CHECK(a.data == b.data);
            CHECK(cache.rows == 0);
        }
        SUBCASE("two appends equal one") {
            Rng rng(3);
            const Permutation sigma = uniform_permutation(16, rng);
            const DecoderRows all = rows_for_order(block, sigma);
            DecoderRows first;
            DecoderRows second;
            for (int i = 0; i < 12; ++i) {
                (i < 6 ? first : second)
                    .push(all.tokens[static_cast<std::size_t>(i)], all.input_positions[static_cast<std::size_t>(i)],
                          all.target_positions[static_cast<std::size_t>(i)]);
            }
            DecoderRows both = first;
            both.append(second);
            DecoderRows q;
            q.push(all.tokens[12], all.input_positions[12], all.target_positions[12]);
            q.push(all.tokens[12], all.input_positions[12], all.target_positions[14]);
            KvCache c1 = model.make_cache();
            model.forward_incremental(c1, first, {});
            const Matrix<float> a = model.forward_incremental(c1, second, q);
            KvCache c2 = model.make_cache();
            const Matrix<float> b = model.forward_incremental(c2, both, q);
            CHECK(a.data == b.data);
            CHECK(c1.rows == 12);
            for (std::size_t l = 0; l < c1.k.size(); ++l) {
                CHECK(std::equal(c1.k[l].begin(), c1.k[l].begin() + 12 * 16, c2.k[l].begin()));
            }
        }
        SUBCASE("random prefixes and query sets") {
            Rng rng(17);
            double worst = 0.0;
            for (int trial = 0; trial < 30; ++trial) {
                const Permutation sigma = uniform_permutation(16, rng);
                const int c = rng.below(16);
                const int split = c == 0 ? 0 : rng.below(c + 1);
                std::vector<int> ctx(sigma.order.begin(), sigma.order.begin() + c);
                std::vector<int> tgt(sigma.order.begin() + c, sigma.order.end());
                const DecoderRows full = parallel_rows(block, ctx, tgt);
                const Matrix<float> ref = model.forward_decoder(full, build_parallel_generation_mask(c, 16 - c, 16));
                DecoderRows a;
                DecoderRows b;
                DecoderRows q;
                for (int i = 0; i < full.size(); ++i) {
                    DecoderRows& dst = i < split ? a : (i < c ? b : q);
                    dst.push(full.tokens[static_cast<std::size_t>(i)], full.input_positions[static_cast<std::size_t>(i)],
                             full.target_positions[static_cast<std::size_t>(i)]);
                }
                KvCache cache = model.make_cache();
                model.forward_incremental(cache, a, {});
                const Matrix<float> got = model.forward_incremental(cache, b, q);
                for (int j = 0; j < q.size(); ++j) {
                    for (int v = 0; v < 11; ++v) {
                        worst = std::max(worst, std::abs(static_cast<double>(got(j, v)) - ref(c + j, v)));
                    }
                }
            }
            CHECK(worst <= 1e-4);
        }
        SUBCASE("cache belongs to the model") {
            KvCache cache = Transformer(tiny_config(Injection::add_once, ModelFamily::decoder_any_order), 1).make_cache();
            cache.k.pop_back();
            DecoderRows q;
            q.push(kBos, -1, 0);
            CHECK_THROWS_AS(model.forward_incremental(cache, {}, q), std::invalid_argument);
        }
    }

    TEST_CASE("encoder ignores presentation order") {
        DeterministicScope det;
        const Transformer model(tiny_config(Injection::adaln, ModelFamily::encoder_mdm), 12);
        Rng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            const int n = 2 + rng.below(15);
            auto tokens = random_tokens(n, 11, 50 + trial);
            for (auto& t : tokens) {
                if (rng.bernoulli(0.4)) {
                    t = 10;
                }
            }
            const Matrix<float> base = model.forward_encoder(tokens, AttentionMask::full(n));
            const Permutation p = uniform_permutation(n, rng);
            std::vector<int> st;
            std::vector<int> sp;
            for (int i : p.order) {
                st.push_back(tokens[static_cast<std::size_t>(i)]);
                sp.push_back(i);
            }
            const Matrix<float> shuf = model.forward_encoder(st, sp, AttentionMask::full(n));
            for (int r = 0; r < n; ++r) {
                const int pos = p.order[static_cast<std::size_t>(r)];
                for (int v = 0; v < 11; ++v) {
                    REQUIRE(shuf(r, v) == base(pos, v));
                }
            }
        }
        CHECK_THROWS_AS(model.forward_encoder(std::vector<int>{1, 2}, AttentionMask::causal(2)), std::invalid_argument);
    }

    TEST_CASE("adaLN starts as the unmodulated network") {
        DeterministicScope det;
        Transformer model(tiny_config(Injection::adaln), 13);
        const auto block = random_tokens(9, 11, 6);
        const DecoderRows rows = rows_for_order(block, Permutation::identity(9));
        const Matrix<float> on = model.forward_decoder(rows, AttentionMask::causal(9));
        model.set_modulation_enabled(false);
        const Matrix<float> off = model.forward_decoder(rows, AttentionMask::causal(9));
        CHECK(on.data == off.data);
        model.set_modulation_enabled(true);
        aoar::test::randomize(model, "h0.ada_b", 0.5, 1);
        const Matrix<float> moved = model.forward_decoder(rows, AttentionMask::causal(9));
        CHECK(max_abs_diff(on.data, moved.data) > 1e-4);
    }

    TEST_CASE("unmodulated adaLN is the add_once network") {
        DeterministicScope det;
        const Transformer ada(tiny_config(Injection::adaln), 14);
        Transformer base(tiny_config(Injection::add_once), 1);
        for (const auto& t : base.layout().tensors()) {
            const auto src = ada.tensor(t.name);
            std::copy(src.begin(), src.end(), base.tensor(t.name).begin());
        }
        Rng rng(2);
        const auto block = random_tokens(12, 10, 7);
        const DecoderRows rows = rows_for_order(block, uniform_permutation(12, rng));
        const Matrix<float> a = ada.forward_decoder(rows, AttentionMask::causal(12));
        const Matrix<float> b = base.forward_decoder(rows, AttentionMask::causal(12));
        CHECK(a.data == b.data);
    }

    TEST_CASE("analytic gradients match central differences") {
        const std::vector<std::pair<Injection, ModelFamily>> variants = {
            {Injection::add_once, ModelFamily::decoder_any_order},
            {Injection::adaln, ModelFamily::decoder_any_order},
            {Injection::add_per_block_learned, ModelFamily::decoder_any_order},
            {Injection::add_once, ModelFamily::encoder_mdm}};
        for (const auto& [inj, fam] : variants) {
            CAPTURE(to_string(inj));
            CAPTURE(to_string(fam));
            ModelConfig cfg = tiny_config(inj, fam);
            cfg.ctx_len = 8;
            BasicTransformer<double> model(cfg, 31);
            if (inj == Injection::adaln) {
                for (int l = 0; l < 2; ++l) {
                    aoar::test::randomize(model, "h" + std::to_string(l) + ".ada_w", 0.3, 40 + l);
                    aoar::test::randomize(model, "h" + std::to_string(l) + ".ada_b", 0.3, 50 + l);
                }
            }
            Rng rng(77);
            const auto b1 = random_tokens(8, 10, 1);
            const auto b2 = random_tokens(8, 10, 2);
            const Block blocks[] = {b1, b2};
            const WeightedBatch wb = make_training_batch(fam, 10, blocks, OrderPolicy::uniform(), rng);
            std::vector<double> grad(model.params().size(), 0.0);
            weighted_loss<double>(model, wb, grad);
            Rng pick(99);
            double worst = 0.0;
            for (int i = 0; i < 200; ++i) {
                const std::size_t idx = static_cast<std::size_t>(pick.below(static_cast<int>(grad.size())));
                const double saved = model.params()[idx];
                const double eps = 1e-5;
                model.params()[idx] = saved + eps;
                const double up = weighted_loss<double>(model, wb, {});
                model.params()[idx] = saved - eps;
                const double down = weighted_loss<double>(model, wb, {});
                model.params()[idx] = saved;
                const double fd = (up - down) / (2 * eps);
                const double rel = std::abs(fd - grad[idx]) / std::max({std::abs(fd), std::abs(grad[idx]), 1e-6});
                worst = std::max(worst, rel);
            }
            CHECK(worst < 1e-3);
        }
    }

    TEST_CASE("checkpoint round trip") {
        const Transformer model(tiny_config(), 4);
        Checkpoint ck;
        ck.config = model.config();
        ck.step = 42;
        ck.ema_decay = 0.999;
        ck.params.assign(model.params().begin(), model.params().end());
        const auto path = std::filesystem::temp_directory_path() / "aoar_ckpt_test.bin";
        save_checkpoint(path, ck);
        const Checkpoint back = load_checkpoint(path);
        CHECK(back.config == ck.config);
        CHECK(back.step == 42);
        CHECK(back.ema_decay.value() == 0.999);
        CHECK(back.params == ck.params);
        std::filesystem::remove(path);
        CHECK_THROWS(load_checkpoint(path));
    }
}
