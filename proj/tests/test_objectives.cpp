#include <cmath>
#include <filesystem>
#include <fstream>

#include "aoar/errors.hpp"
#include "aoar/kernels.hpp"
#include "aoar/objectives.hpp"
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

double log_softmax_at(const float* row, int v, int target) {
    double mx = -1e300;
    for (int i = 0; i < v; ++i) {
        mx = std::max(mx, static_cast<double>(row[i]));
    }
    double s = 0.0;
    for (int i = 0; i < v; ++i) {
        s += std::exp(static_cast<double>(row[i]) - mx);
    }
    return static_cast<double>(row[target]) - mx - std::log(s);
}

PackedDataset dataset_of(const std::vector<int>& ids, int ctx) { return pack_blocks(ids, ctx); }

}  // namespace

TEST_SUITE("objectives") {
    TEST_CASE("uniform model scores ln V everywhere") {
        const test::UniformStub dec(13, 16);
        const test::UniformStub enc(13, 16, ModelFamily::encoder_mdm);
        const auto block = random_tokens(9, 12, 1);
        Rng rng(2);
        const double lnv = std::log(13.0);
        CHECK(ar_nll(dec, block).nll_per_token == doctest::Approx(lnv).epsilon(1e-12));
        CHECK(aoar_nll(dec, block, OrderPolicy::uniform(), 5, rng).nll_per_token == doctest::Approx(lnv).epsilon(1e-12));
        CHECK(mdm_nll(dec, block, 7, rng).nll_per_token == doctest::Approx(lnv).epsilon(1e-12));
        CHECK(mdm_nll(enc, block, 7, rng).nll_per_token == doctest::Approx(lnv).epsilon(1e-12));
        CHECK(aoar_nll(enc, block, OrderPolicy::uniform(), 3, rng).nll_per_token ==
              doctest::Approx(lnv).epsilon(1e-12));
        CHECK_THROWS_WITH_AS(ar_nll(enc, block), "L2R likelihood requires n forwards; use any_order mode",
                             std::invalid_argument);
        CHECK_THROWS_AS(ar_nll(dec, std::vector<int>{3}), std::invalid_argument);
        const Block blocks[] = {block};
        const ProbeReport r = equivalence_probe(dec, blocks, 50, 3);
        CHECK(r.z_score == 0.0);
        CHECK(r.pass);
    }

    TEST_CASE("memorizing model drives the loss to zero") {
        const test::RowStub stub(5, 16, [](const Batch&, const Segment&, int, float* logits) { logits[2] = 60.0f; });
        const std::vector<int> block(10, 2);
        CHECK(ar_nll(stub, block).nll_per_token < 1e-20);
    }

    TEST_CASE("left-to-right loss equals per-step cross entropy") {
        const Transformer model(tiny_config(), 3);
        const auto block = random_tokens(8, 10, 4);
        const Matrix<float> logits =
            model.forward_decoder(rows_for_order(block, Permutation::identity(8)), AttentionMask::causal(8));
        double sum = 0.0;
        for (int k = 0; k < 8; ++k) {
            sum -= log_softmax_at(logits.row(k), 11, block[static_cast<std::size_t>(k)]);
        }
        const LossEstimate e = ar_nll(model, block);
        CHECK(e.token_count == 8);
        CHECK(e.nll_per_token == doctest::Approx(sum / 8).epsilon(1e-9));
    }

    TEST_CASE("identity order reproduces the left-to-right loss bit for bit") {
        DeterministicScope det;
        const Transformer model(tiny_config(Injection::add_per_block_shared), 5);
        const auto block = random_tokens(16, 10, 6);
        Rng rng(1);
        CHECK(aoar_nll(model, block, OrderPolicy::identity(), 3, rng).nll_per_token == ar_nll(model, block).nll_per_token);
    }

    TEST_CASE("Monte-Carlo any-order estimate converges to the exhaustive average") {
        const Transformer model(tiny_config(), 7);
        const auto block = random_tokens(4, 10, 8);
        const LossEstimate exact = aoar_nll_exhaustive(model, block);
        Rng rng(9);
        const LossEstimate mc = aoar_nll(model, block, OrderPolicy::uniform(), 10000, rng);
        CHECK(std::abs(mc.nll_per_token - exact.nll_per_token) < 3 * mc.std_error);
        CHECK(mc.std_error > 0.0);
    }

    TEST_CASE("exhaustive any-order and masked-diffusion losses coincide") {
        for (Injection inj : {Injection::adaln, Injection::add_once}) {
            Transformer model(tiny_config(inj), 10);
            aoar::test::randomize(model, "h0.ln1_b", 0.3, 2);
            for (int n : {2, 4, 6}) {
                const auto block = random_tokens(n, 10, 20 + n);
                const double a = aoar_nll_exhaustive(model, block).nll_per_token;
                const double m = mdm_nll_exhaustive(model, block).nll_per_token;
                CHECK(std::abs(a - m) < 1e-6);
            }
        }
    }

    TEST_CASE("losses do not depend on batch composition") {
        const Transformer model(tiny_config(), 11);
        const auto b1 = random_tokens(12, 10, 1);
        const auto b2 = random_tokens(7, 10, 2);
        const Block both[] = {b1, b2};
        const Block first[] = {b1};
        const auto all = aoar_samples(model, both, OrderPolicy::uniform(), 3, 5);
        const auto one = aoar_samples(model, first, OrderPolicy::uniform(), 3, 5);
        for (std::size_t i = 0; i < one.size(); ++i) {
            CHECK(all[i].nll == doctest::Approx(one[i].nll).epsilon(1e-9));
        }
        const auto m_all = mdm_samples(model, both, 4, 6);
        const auto m_one = mdm_samples(model, first, 4, 6);
        for (std::size_t i = 0; i < m_one.size(); ++i) {
            CHECK(m_all[i].nll == doctest::Approx(m_one[i].nll).epsilon(1e-9));
        }
        const std::vector<SampleLoss> tail(all.begin() + 3, all.end());
        const LossEstimate whole = summarize(all);
        const LossEstimate a = summarize(one);
        const LossEstimate b = summarize(tail);
        const double mixed = (a.nll_per_token * static_cast<double>(a.token_count) + b.nll_per_token * static_cast<double>(b.token_count)) /
                             static_cast<double>(a.token_count + b.token_count);
        CHECK(std::abs(whole.nll_per_token - mixed) < 1e-6);
    }

    TEST_CASE("probe accepts the correct weighting and rejects the unweighted one") {
        const Transformer model(tiny_config(), 12);
        std::vector<std::vector<int>> data;
        std::vector<Block> blocks;
        for (int i = 0; i < 8; ++i) {
            data.push_back(random_tokens(6, 10, 100 + i));
        }
        for (const auto& d : data) {
            blocks.emplace_back(d);
        }
        const ProbeReport ok = equivalence_probe(model, blocks, 2000, 1);
        CHECK(ok.z_score < 3);
        CHECK(ok.pass);
        const ProbeReport bad = equivalence_probe(model, blocks, 2000, 1, MdmWeighting::unweighted);
        CHECK(bad.z_score > 10);
        CHECK_FALSE(bad.pass);
        CHECK(ok.to_json()["aoar"]["nll_per_token"].get<double>() == ok.aoar.nll_per_token);
    }

    TEST_CASE("encoder training batch masks a suffix of a random order") {
        Rng rng(3);
        const auto b1 = random_tokens(10, 10, 1);
        const Block blocks[] = {b1};
        const WeightedBatch wb = make_training_batch(ModelFamily::encoder_mdm, 10, blocks, OrderPolicy::uniform(), rng);
        REQUIRE(wb.batch.size() == 10);
        int masked = 0;
        double wsum = 0.0;
        for (int r = 0; r < 10; ++r) {
            if (wb.batch.rows.tokens[static_cast<std::size_t>(r)] == 10) {
                ++masked;
                CHECK(wb.targets[static_cast<std::size_t>(r)] == b1[static_cast<std::size_t>(wb.batch.rows.input_positions[static_cast<std::size_t>(r)])]);
            }
            wsum += wb.weights[static_cast<std::size_t>(r)];
        }
        CHECK(masked >= 1);
        CHECK(wsum == doctest::Approx(1.0));
    }

    TEST_CASE("config round trip and validation") {
        TrainConfig c;
        c.ema_decays = {0.999, 0.9999};
        c.order_policy = OrderPolicy::hybrid(0.1);
        const TrainConfig back = TrainConfig::from_json(c.to_json());
        CHECK(back.to_json() == c.to_json());
        CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rat", 1.0}}), std::invalid_argument);
        c.ema_decays = {1.0};
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
        TrainConfig w;
        w.total_steps = 100;
        w.learning_rate = 1.0;
        CHECK(learning_rate_at(w, 0) == doctest::Approx(0.5));
        CHECK(learning_rate_at(w, 1) == doctest::Approx(1.0));
        CHECK(learning_rate_at(w, 80) == 1.0);
    }

    TEST_CASE("training steps") {
        DeterministicScope det;
        std::vector<int> ids = random_tokens(32, 10, 5);
        const PackedDataset ds = dataset_of(ids, 16);
        const auto blocks = dataset_blocks(ds);
        TrainConfig cfg;
        cfg.learning_rate = 3e-3;
        cfg.warmup_fraction = 0.0;

        SUBCASE("zero learning rate leaves parameters unchanged") {
            Transformer model(tiny_config(), 1);
            const std::vector<float> before(model.params().begin(), model.params().end());
            AdamWState opt = make_adamw(model.params().size());
            Rng rng(1);
            const WeightedBatch wb = make_training_batch(ModelFamily::decoder_any_order, 10, blocks, cfg.order_policy, rng);
            train_step(model, opt, wb, cfg, 0.0, 0, 0);
            CHECK(std::equal(before.begin(), before.end(), model.params().begin()));
        }
        SUBCASE("overfitting two blocks lowers the loss and is reproducible") {
            auto run = [&] {
                Transformer model(tiny_config(), 2);
                AdamWState opt = make_adamw(model.params().size());
                Rng rng(2);
                std::vector<double> trace;
                for (int s = 0; s < 50; ++s) {
                    const WeightedBatch wb =
                        make_training_batch(ModelFamily::decoder_any_order, 10, blocks, OrderPolicy::identity(), rng);
                    trace.push_back(train_step(model, opt, wb, cfg, cfg.learning_rate, s, s).loss);
                }
                return trace;
            };
            const auto a = run();
            const auto b = run();
            CHECK(a == b);
            CHECK(a.back() < 0.5 * a.front());
        }
        SUBCASE("non-finite loss aborts with the step") {
            Transformer model(tiny_config(), 3);
            model.tensor("head_b")[0] = std::numeric_limits<float>::infinity();
            AdamWState opt = make_adamw(model.params().size());
            Rng rng(3);
            const WeightedBatch wb = make_training_batch(ModelFamily::decoder_any_order, 10, blocks, cfg.order_policy, rng);
            CHECK_THROWS_WITH_AS(train_step(model, opt, wb, cfg, 1e-3, 17, 4), doctest::Contains("step 17"),
                                 NumericalError);
        }
    }

    TEST_CASE("weight averaging") {
        std::vector<float> p = {1.0f, -2.0f, 0.5f};
        EmaState zero = make_ema(0.0, std::vector<float>{0, 0, 0});
        ema_update(zero, p);
        CHECK(zero.weights() == p);
        CHECK_THROWS_AS(ema_update(zero, std::vector<float>{1.0f}), std::invalid_argument);
        CHECK_THROWS_AS(make_ema(1.0, p), std::invalid_argument);

        EmaState c = make_ema(0.9, std::vector<float>{0, 0, 0});
        for (int k = 0; k < 30; ++k) {
            ema_update(c, p);
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            CHECK(std::abs(c.shadow[i] - p[i]) == doctest::Approx(std::pow(0.9, 30) * std::abs(p[i])).epsilon(1e-9));
        }

        const double d = 0.9999;
        EmaState e = make_ema(d, std::vector<float>{0.25f});
        double scalar = 0.25;
        for (int k = 0; k < 100; ++k) {
            const float value = static_cast<float>(std::sin(0.1 * k) + 0.01 * k);
            ema_update(e, std::vector<float>{value});
            scalar = d * scalar + (1 - d) * static_cast<double>(value);
        }
        CHECK(std::abs(e.shadow[0] - scalar) < 1e-6);

        EmaState warm = make_ema(0.99, std::vector<float>{0.0f}, true);
        CHECK(warm.effective_decay() == doctest::Approx(0.1));
    }

    TEST_CASE("trainer evaluates at the start, every interval and the end") {
        DeterministicScope det;
        std::vector<int> ids = random_tokens(16 * 12, 10, 7);
        const auto splits = split_train_validation(dataset_of(ids, 16), 0.2);
        TrainConfig cfg;
        cfg.total_steps = 20;
        cfg.eval_interval = 10;
        cfg.batch_tokens = 64;
        cfg.ema_decays = {0.9};
        cfg.order_policy = OrderPolicy::blockwise(4, 1);
        Transformer model(tiny_config(), 4);
        int hooks = 0;
        const TrainResult r = Trainer(model, cfg).run(splits.train, splits.validation, {},
                                                      [&](std::int64_t, const Transformer&, const std::vector<EmaState>&) {
                                                          ++hooks;
                                                      });
        REQUIRE(r.records.size() == 3);
        CHECK(r.records[0].step == 0);
        CHECK_FALSE(r.records[0].train_loss.has_value());
        CHECK(r.records[2].step == 20);
        CHECK(r.records[1].val_l2r_nll.has_value());
        CHECK(r.records[1].val_policy_nll.has_value());
        CHECK(r.records[1].ema_anyorder.size() == 1);
        CHECK(r.train_losses.size() == 20);
        CHECK(hooks == 1);
        const auto j = r.records[2].to_json();
        CHECK(j.contains("val_anyorder_nll"));
        CHECK(j["ema"].size() == 1);

        const auto path = std::filesystem::temp_directory_path() / "aoar_metrics_test.jsonl";
        std::filesystem::remove(path);
        for (const auto& rec : r.records) {
            append_jsonl(path, rec.to_json());
        }
        std::ifstream in(path);
        int lines = 0;
        for (std::string line; std::getline(in, line);) {
            CHECK(nlohmann::json::parse(line)["step"].is_number());
            ++lines;
        }
        CHECK(lines == 3);
        std::filesystem::remove(path);
    }
}
