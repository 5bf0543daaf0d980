#include "aoar/objectives.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "aoar/errors.hpp"
#include "aoar/scoring.hpp"

namespace aoar {

double LossEstimate::ppl() const { return std::exp(nll_per_token); }

nlohmann::json LossEstimate::to_json() const {
    return {{"nll_per_token", nll_per_token}, {"ppl", ppl()},           {"std_error", std_error},
            {"token_count", token_count},     {"sample_count", sample_count}};
}

LossEstimate summarize(std::span<const SampleLoss> samples) {
    LossEstimate e;
    e.sample_count = static_cast<std::int64_t>(samples.size());
    if (samples.empty()) {
        return e;
    }
    double mean_v = 0.0;
    for (const auto& s : samples) {
        e.total_nll += s.nll;
        e.token_count += s.tokens;
        mean_v += s.nll / static_cast<double>(s.tokens);
    }
    mean_v /= static_cast<double>(samples.size());
    e.nll_per_token = e.total_nll / static_cast<double>(e.token_count);
    if (samples.size() > 1) {
        double ss = 0.0;
        for (const auto& s : samples) {
            const double dv = s.nll / static_cast<double>(s.tokens) - mean_v;
            ss += dv * dv;
        }
        const double var = ss / static_cast<double>(samples.size() - 1);
        e.std_error = std::sqrt(var / static_cast<double>(samples.size()));
    }
    return e;
}

double token_nll(const float* logits, int vocab, int target) {
    double mx = logits[0];
    for (int i = 1; i < vocab; ++i) {
        mx = std::max(mx, static_cast<double>(logits[i]));
    }
    double sum = 0.0;
    for (int i = 0; i < vocab; ++i) {
        sum += std::exp(static_cast<double>(logits[i]) - mx);
    }
    return std::log(sum) + mx - static_cast<double>(logits[target]);
}

namespace {

void check_block(const SequenceModel& model, Block block) {
    if (block.size() < 2) {
        throw std::invalid_argument("block shorter than 2");
    }
    if (static_cast<int>(block.size()) > model.ctx_len()) {
        throw std::invalid_argument("block longer than ctx_len");
    }
}

DecoderRows encoder_rows(std::span<const int> tokens) {
    DecoderRows r;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        r.push(tokens[i], static_cast<int>(i), static_cast<int>(i));
    }
    return r;
}

void queue_order(ScoreQueue& q, const SequenceModel& model, Block block, const Permutation& sigma, std::size_t sample) {
    const int n = static_cast<int>(block.size());
    if (sigma.n() != n || !sigma.valid()) {
        throw std::invalid_argument("order policy produced an invalid permutation for this block");
    }
    if (model.family() == ModelFamily::decoder_any_order) {
        std::vector<ScoredRow> scored;
        for (int k = 0; k < n; ++k) {
            scored.push_back({k, block[static_cast<std::size_t>(sigma.order[static_cast<std::size_t>(k)])], 1.0, sample});
        }
        q.add(rows_for_order(block, sigma), AttentionMask::causal(n), {}, std::move(scored));
        return;
    }
    std::vector<int> tokens(block.begin(), block.end());
    for (int pos : sigma.order) {
        tokens[static_cast<std::size_t>(pos)] = model.mask_id();
    }
    // Step i: positions sigma[i..] masked, score sigma[i].
    for (int i = 0; i < n; ++i) {
        const int pos = sigma.order[static_cast<std::size_t>(i)];
        q.add(encoder_rows(tokens), AttentionMask::full(n), {}, {{pos, block[static_cast<std::size_t>(pos)], 1.0, sample}});
        tokens[static_cast<std::size_t>(pos)] = block[static_cast<std::size_t>(pos)];
    }
}

// l is 1-based: the prefix is sigma[0..l-2], the scored suffix sigma[l-1..].
void queue_mdm(ScoreQueue& q, const SequenceModel& model, Block block, const Permutation& sigma, int l,
               MdmWeighting weighting, std::size_t sample) {
    const int n = static_cast<int>(block.size());
    const int c = l - 1;
    const double w = weighting == MdmWeighting::elbo ? static_cast<double>(n) / (n - l + 1) : 1.0;
    std::span<const int> context(sigma.order.data(), static_cast<std::size_t>(c));
    std::span<const int> targets(sigma.order.data() + c, static_cast<std::size_t>(n - c));
    std::vector<ScoredRow> scored;
    if (model.family() == ModelFamily::decoder_any_order) {
        for (int j = 0; j < n - c; ++j) {
            scored.push_back({c + j, block[static_cast<std::size_t>(targets[static_cast<std::size_t>(j)])], w, sample});
        }
        q.add(parallel_rows(block, context, targets), build_parallel_generation_mask(c, n - c, model.ctx_len()), {},
              std::move(scored));
        return;
    }
    std::vector<int> tokens(block.begin(), block.end());
    for (int pos : targets) {
        tokens[static_cast<std::size_t>(pos)] = model.mask_id();
        scored.push_back({pos, block[static_cast<std::size_t>(pos)], w, sample});
    }
    q.add(encoder_rows(tokens), AttentionMask::full(n), {}, std::move(scored));
}

std::size_t new_sample(std::vector<SampleLoss>& samples, std::int64_t tokens) {
    samples.push_back({0.0, tokens});
    return samples.size() - 1;
}

}  // namespace

std::vector<SampleLoss> ar_samples(const SequenceModel& model, std::span<const Block> blocks) {
    if (model.family() != ModelFamily::decoder_any_order) {
        throw std::invalid_argument("L2R likelihood requires n forwards; use any_order mode");
    }
    std::vector<SampleLoss> samples;
    samples.reserve(blocks.size());
    ScoreQueue q(model, samples);
    for (Block b : blocks) {
        check_block(model, b);
        const std::size_t s = new_sample(samples, static_cast<std::int64_t>(b.size()));
        queue_order(q, model, b, Permutation::identity(static_cast<int>(b.size())), s);
    }
    q.flush();
    return samples;
}

LossEstimate ar_nll(const SequenceModel& model, Block block) {
    const Block one[] = {block};
    return summarize(ar_samples(model, one));
}

std::vector<SampleLoss> aoar_samples(const SequenceModel& model, std::span<const Block> blocks,
                                     const OrderPolicy& policy, int orders_per_block, std::uint64_t seed) {
    if (orders_per_block < 1) {
        throw std::invalid_argument("num_orders must be at least 1");
    }
    std::vector<SampleLoss> samples;
    samples.reserve(blocks.size() * static_cast<std::size_t>(orders_per_block));
    ScoreQueue q(model, samples);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        check_block(model, blocks[b]);
        for (int j = 0; j < orders_per_block; ++j) {
            Rng rng(derive_seed(seed, {b, static_cast<std::uint64_t>(j)}));
            const Permutation sigma = sample_permutation(policy, static_cast<int>(blocks[b].size()), rng);
            const std::size_t s = new_sample(samples, static_cast<std::int64_t>(blocks[b].size()));
            queue_order(q, model, blocks[b], sigma, s);
        }
    }
    q.flush();
    return samples;
}

LossEstimate aoar_nll(const SequenceModel& model, Block block, const OrderPolicy& policy, int num_orders, Rng& rng) {
    check_block(model, block);
    if (num_orders < 1) {
        throw std::invalid_argument("num_orders must be at least 1");
    }
    std::vector<SampleLoss> samples;
    ScoreQueue q(model, samples);
    for (int j = 0; j < num_orders; ++j) {
        const Permutation sigma = sample_permutation(policy, static_cast<int>(block.size()), rng);
        queue_order(q, model, block, sigma, new_sample(samples, static_cast<std::int64_t>(block.size())));
    }
    q.flush();
    return summarize(samples);
}

LossEstimate aoar_nll_exhaustive(const SequenceModel& model, Block block) {
    check_block(model, block);
    const int n = static_cast<int>(block.size());
    if (n > kEnumerationLimit) {
        throw std::invalid_argument("enumeration bound exceeded");
    }
    std::vector<SampleLoss> samples;
    ScoreQueue q(model, samples);
    Permutation sigma = Permutation::identity(n);
    do {
        queue_order(q, model, block, sigma, new_sample(samples, n));
    } while (std::next_permutation(sigma.order.begin(), sigma.order.end()));
    q.flush();
    return summarize(samples);
}

std::vector<SampleLoss> mdm_samples(const SequenceModel& model, std::span<const Block> blocks, int samples_per_block,
                                    std::uint64_t seed, MdmWeighting weighting) {
    if (samples_per_block < 1) {
        throw std::invalid_argument("num_samples must be at least 1");
    }
    std::vector<SampleLoss> samples;
    ScoreQueue q(model, samples);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        check_block(model, blocks[b]);
        const int n = static_cast<int>(blocks[b].size());
        for (int j = 0; j < samples_per_block; ++j) {
            Rng rng(derive_seed(seed, {b, static_cast<std::uint64_t>(j)}));
            const Permutation sigma = uniform_permutation(n, rng);
            const int l = 1 + rng.below(n);
            queue_mdm(q, model, blocks[b], sigma, l, weighting, new_sample(samples, n));
        }
    }
    q.flush();
    return samples;
}

LossEstimate mdm_nll(const SequenceModel& model, Block block, int num_samples, Rng& rng, MdmWeighting weighting) {
    check_block(model, block);
    if (num_samples < 1) {
        throw std::invalid_argument("num_samples must be at least 1");
    }
    const int n = static_cast<int>(block.size());
    std::vector<SampleLoss> samples;
    ScoreQueue q(model, samples);
    for (int j = 0; j < num_samples; ++j) {
        const Permutation sigma = uniform_permutation(n, rng);
        const int l = 1 + rng.below(n);
        queue_mdm(q, model, block, sigma, l, weighting, new_sample(samples, n));
    }
    q.flush();
    return summarize(samples);
}

LossEstimate mdm_nll_exhaustive(const SequenceModel& model, Block block) {
    check_block(model, block);
    const int n = static_cast<int>(block.size());
    if (n > kEnumerationLimit) {
        throw std::invalid_argument("enumeration bound exceeded");
    }
    std::vector<SampleLoss> samples;
    ScoreQueue q(model, samples);
    for (int l = 1; l <= n; ++l) {
        Permutation sigma = Permutation::identity(n);
        do {
            queue_mdm(q, model, block, sigma, l, MdmWeighting::elbo, new_sample(samples, n));
        } while (std::next_permutation(sigma.order.begin(), sigma.order.end()));
    }
    q.flush();
    return summarize(samples);
}

std::vector<Block> dataset_blocks(const PackedDataset& ds, std::size_t max_blocks) {
    const std::size_t n = max_blocks == 0 ? ds.size() : std::min(max_blocks, ds.size());
    std::vector<Block> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(ds.block(i));
    }
    return out;
}

WeightedBatch make_training_batch(ModelFamily family, int mask_id, std::span<const Block> blocks,
                                  const OrderPolicy& policy, Rng& rng) {
    WeightedBatch wb;
    const double inv_b = 1.0 / static_cast<double>(blocks.size());
    for (Block block : blocks) {
        const int n = static_cast<int>(block.size());
        if (family == ModelFamily::decoder_any_order) {
            const Permutation sigma = sample_permutation(policy, n, rng);
            wb.batch.add(rows_for_order(block, sigma), AttentionMask::causal(n));
            for (int k = 0; k < n; ++k) {
                wb.targets.push_back(block[static_cast<std::size_t>(sigma.order[static_cast<std::size_t>(k)])]);
                wb.weights.push_back(inv_b / n);
            }
        } else {
            const Permutation sigma = uniform_permutation(n, rng);
            const int l = 1 + rng.below(n);
            std::vector<int> tokens(block.begin(), block.end());
            std::vector<double> w(static_cast<std::size_t>(n), 0.0);
            for (int r = l - 1; r < n; ++r) {
                const int pos = sigma.order[static_cast<std::size_t>(r)];
                tokens[static_cast<std::size_t>(pos)] = mask_id;
                w[static_cast<std::size_t>(pos)] = inv_b / (n - l + 1);
            }
            wb.batch.add(encoder_rows(tokens), AttentionMask::full(n));
            wb.targets.insert(wb.targets.end(), block.begin(), block.end());
            wb.weights.insert(wb.weights.end(), w.begin(), w.end());
        }
    }
    return wb;
}

template <class T>
double weighted_loss(const BasicTransformer<T>& model, const WeightedBatch& wb, std::span<T> grad) {
    const bool backward = !grad.empty();
    Activations<T> acts;
    const Matrix<T> logits = model.logits(wb.batch, backward ? &acts : nullptr);
    const int V = logits.cols;
    double loss = 0.0;
    Matrix<T> dlogits;
    if (backward) {
        dlogits.resize(logits.rows, V);
    }
    std::vector<double> prob(static_cast<std::size_t>(V));
    for (int r = 0; r < logits.rows; ++r) {
        const double w = wb.weights[static_cast<std::size_t>(r)];
        if (w == 0.0) {
            continue;
        }
        const T* lr = logits.row(r);
        double mx = lr[0];
        for (int i = 1; i < V; ++i) {
            mx = std::max(mx, static_cast<double>(lr[i]));
        }
        double sum = 0.0;
        for (int i = 0; i < V; ++i) {
            prob[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(lr[i]) - mx);
            sum += prob[static_cast<std::size_t>(i)];
        }
        const int t = wb.targets[static_cast<std::size_t>(r)];
        loss += w * (std::log(sum) + mx - static_cast<double>(lr[t]));
        if (backward) {
            T* d = dlogits.row(r);
            for (int i = 0; i < V; ++i) {
                d[i] = static_cast<T>(w * (prob[static_cast<std::size_t>(i)] / sum - (i == t ? 1.0 : 0.0)));
            }
        }
    }
    if (backward) {
        model.backward(wb.batch, acts, dlogits, grad);
    }
    return loss;
}

template double weighted_loss<float>(const BasicTransformer<float>&, const WeightedBatch&, std::span<float>);
template double weighted_loss<double>(const BasicTransformer<double>&, const WeightedBatch&, std::span<double>);

int TrainConfig::batch_size(int ctx_len) const { return std::max(1, batch_tokens / ctx_len); }

void TrainConfig::validate() const {
    if (!(adam_beta1 > 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1)) {
        throw std::invalid_argument("adam betas must lie in (0, 1)");
    }
    if (!(learning_rate >= 0) || !(weight_decay >= 0) || !(grad_clip > 0)) {
        throw std::invalid_argument("learning_rate and weight_decay must be >= 0, grad_clip > 0");
    }
    for (double d : ema_decays) {
        if (!(d >= 0 && d < 1)) {
            throw std::invalid_argument("ema decays must lie in [0, 1)");
        }
    }
    if (batch_tokens < 1 || total_steps < 0 || eval_interval < 1 || eval_blocks < 1 || eval_orders < 1) {
        throw std::invalid_argument("batch_tokens, eval_interval, eval_blocks, eval_orders must be positive");
    }
    if (!(warmup_fraction >= 0 && warmup_fraction <= 1)) {
        throw std::invalid_argument("warmup_fraction must lie in [0, 1]");
    }
    order_policy.validate();
}

nlohmann::json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"weight_decay", weight_decay},
            {"grad_clip", grad_clip},
            {"batch_tokens", batch_tokens},
            {"total_steps", total_steps},
            {"warmup_fraction", warmup_fraction},
            {"lr_schedule", lr_schedule == LrSchedule::constant ? "constant" : "cosine"},
            {"order_policy", order_policy.to_json()},
            {"ema_decays", ema_decays},
            {"ema_warmup", ema_warmup},
            {"eval_interval", eval_interval},
            {"eval_blocks", eval_blocks},
            {"eval_orders", eval_orders},
            {"eval_seed", eval_seed},
            {"seed", seed},
            {"checkpoint_interval", checkpoint_interval}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    const nlohmann::json defaults = c.to_json();
    for (const auto& [k, v] : j.items()) {
        if (!defaults.contains(k)) {
            throw std::invalid_argument("unknown train key '" + k + "'");
        }
    }
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.batch_tokens = j.value("batch_tokens", c.batch_tokens);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    const std::string sched = j.value("lr_schedule", std::string("constant"));
    if (sched == "constant") {
        c.lr_schedule = LrSchedule::constant;
    } else if (sched == "cosine") {
        c.lr_schedule = LrSchedule::cosine;
    } else {
        throw std::invalid_argument("lr_schedule must be 'constant' or 'cosine'");
    }
    if (j.contains("order_policy")) {
        c.order_policy = OrderPolicy::from_json(j["order_policy"]);
    }
    c.ema_decays = j.value("ema_decays", c.ema_decays);
    c.ema_warmup = j.value("ema_warmup", c.ema_warmup);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.eval_blocks = j.value("eval_blocks", c.eval_blocks);
    c.eval_orders = j.value("eval_orders", c.eval_orders);
    c.eval_seed = j.value("eval_seed", c.eval_seed);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.validate();
    return c;
}

double learning_rate_at(const TrainConfig& cfg, int step) {
    const int warmup = static_cast<int>(std::round(cfg.warmup_fraction * cfg.total_steps));
    if (step < warmup) {
        return cfg.learning_rate * (step + 1) / warmup;
    }
    if (cfg.lr_schedule == LrSchedule::constant || cfg.total_steps <= warmup) {
        return cfg.learning_rate;
    }
    const double progress = static_cast<double>(step - warmup) / (cfg.total_steps - warmup);
    return cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress))));
}

AdamWState make_adamw(std::size_t n) { return {std::vector<float>(n, 0.0f), std::vector<float>(n, 0.0f), 0}; }

StepResult train_step(Transformer& model, AdamWState& opt, const WeightedBatch& wb, const TrainConfig& cfg, double lr,
                      std::int64_t step, std::int64_t batch_id) {
    std::span<float> params = model.params();
    if (opt.m.size() != params.size() || opt.v.size() != params.size()) {
        throw std::invalid_argument("optimizer state does not match the model");
    }
    std::vector<float> grad(params.size(), 0.0f);
    StepResult res;
    res.loss = weighted_loss<float>(model, wb, grad);
    double sq = 0.0;
    for (float g : grad) {
        sq += static_cast<double>(g) * g;
    }
    res.grad_norm = std::sqrt(sq);
    if (!std::isfinite(res.loss) || !std::isfinite(res.grad_norm)) {
        throw NumericalError("non-finite loss at step " + std::to_string(step) + " (batch " + std::to_string(batch_id) +
                             ")");
    }
    const double clip = res.grad_norm > cfg.grad_clip ? cfg.grad_clip / (res.grad_norm + 1e-12) : 1.0;
    opt.t += 1;
    const double b1 = cfg.adam_beta1;
    const double b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.t));
    for (const auto& t : model.layout().tensors()) {
        const double wd = t.decay ? cfg.weight_decay : 0.0;
        for (std::size_t i = t.offset; i < t.offset + t.size; ++i) {
            const double g = grad[i] * clip;
            const double m = b1 * opt.m[i] + (1.0 - b1) * g;
            const double v = b2 * opt.v[i] + (1.0 - b2) * g * g;
            opt.m[i] = static_cast<float>(m);
            opt.v[i] = static_cast<float>(v);
            const double update = (m / c1) / (std::sqrt(v / c2) + cfg.adam_eps) + wd * params[i];
            params[i] = static_cast<float>(params[i] - lr * update);
        }
    }
    return res;
}

double EmaState::effective_decay() const {
    if (!warmup) {
        return decay;
    }
    return std::min(decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
}

std::vector<float> EmaState::weights() const { return {shadow.begin(), shadow.end()}; }

EmaState make_ema(double decay, std::span<const float> params, bool warmup) {
    if (!(decay >= 0 && decay < 1)) {
        throw std::invalid_argument("ema decay must lie in [0, 1)");
    }
    EmaState e;
    e.decay = decay;
    e.warmup = warmup;
    e.shadow.assign(params.begin(), params.end());
    return e;
}

void ema_update(EmaState& ema, std::span<const float> params) {
    if (ema.shadow.size() != params.size()) {
        throw std::invalid_argument("ema shadow shape does not match parameters");
    }
    const double d = ema.effective_decay();
    for (std::size_t i = 0; i < params.size(); ++i) {
        ema.shadow[i] = d * ema.shadow[i] + (1.0 - d) * params[i];
    }
    ++ema.step;
}

nlohmann::json EvalRecord::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json j = {{"step", step},
                        {"train_loss", opt(train_loss)},
                        {"val_l2r_nll", opt(val_l2r_nll)},
                        {"val_anyorder_nll", val_anyorder_nll},
                        {"val_policy_nll", opt(val_policy_nll)},
                        {"elapsed_s", elapsed_s}};
    nlohmann::json ema = nlohmann::json::object();
    for (std::size_t i = 0; i < ema_anyorder.size(); ++i) {
        nlohmann::json e = {{"val_anyorder_nll", ema_anyorder[i].second}};
        if (i < ema_l2r.size()) {
            e["val_l2r_nll"] = ema_l2r[i].second;
        }
        ema[std::to_string(ema_anyorder[i].first)] = e;
    }
    j["ema"] = ema;
    return j;
}

EvalLosses evaluate_validation(const Transformer& model, std::span<const Block> blocks, const TrainConfig& cfg) {
    EvalLosses out;
    if (model.family() == ModelFamily::decoder_any_order) {
        out.l2r = summarize(ar_samples(model, blocks)).nll_per_token;
        out.anyorder =
            summarize(aoar_samples(model, blocks, OrderPolicy::uniform(), cfg.eval_orders, cfg.eval_seed)).nll_per_token;
        const auto& k = cfg.order_policy.kind;
        if (std::holds_alternative<FixedRandomOrder>(k) || std::holds_alternative<BlockwiseOrder>(k)) {
            out.policy = summarize(aoar_samples(model, blocks, cfg.order_policy, 1, cfg.eval_seed)).nll_per_token;
        } else if (std::holds_alternative<IdentityOrder>(k)) {
            out.policy = out.l2r;
        }
    } else {
        out.anyorder = summarize(mdm_samples(model, blocks, cfg.eval_orders, cfg.eval_seed)).nll_per_token;
    }
    return out;
}

Trainer::Trainer(Transformer& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) { cfg_.validate(); }

TrainResult Trainer::run(const PackedDataset& train, const PackedDataset& validation, Callback on_eval,
                         CheckpointHook on_checkpoint) {
    if (train.empty() || validation.empty()) {
        throw std::invalid_argument("training needs non-empty train and validation splits");
    }
    if (train.ctx_len > model_.ctx_len()) {
        throw std::invalid_argument("dataset ctx_len exceeds the model ctx_len");
    }
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result;
    BatchIterator batches(train.size(), static_cast<std::size_t>(cfg_.batch_size(train.ctx_len)),
                          derive_seed(cfg_.seed, {1}));
    Rng order_rng(derive_seed(cfg_.seed, {2}));
    AdamWState opt = make_adamw(model_.params().size());
    for (double d : cfg_.ema_decays) {
        result.emas.push_back(make_ema(d, model_.params(), cfg_.ema_warmup));
    }
    const std::vector<Block> val_blocks = dataset_blocks(validation, static_cast<std::size_t>(cfg_.eval_blocks));

    double loss_sum = 0.0;
    int loss_count = 0;
    auto evaluate = [&](std::int64_t step) {
        EvalRecord rec;
        rec.step = step;
        if (loss_count > 0) {
            rec.train_loss = loss_sum / loss_count;
        }
        loss_sum = 0.0;
        loss_count = 0;
        const EvalLosses raw = evaluate_validation(model_, val_blocks, cfg_);
        rec.val_l2r_nll = raw.l2r;
        rec.val_anyorder_nll = raw.anyorder;
        rec.val_policy_nll = raw.policy;
        for (const auto& ema : result.emas) {
            const Transformer shadow(model_.config(), ema.weights());
            const EvalLosses e = evaluate_validation(shadow, val_blocks, cfg_);
            if (e.l2r) {
                rec.ema_l2r.emplace_back(ema.decay, *e.l2r);
            }
            rec.ema_anyorder.emplace_back(ema.decay, e.anyorder);
        }
        rec.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.records.push_back(rec);
        if (on_eval) {
            on_eval(rec);
        }
    };

    std::vector<Block> blocks;
    for (int step = 0; step < cfg_.total_steps; ++step) {
        if (step % cfg_.eval_interval == 0) {
            evaluate(step);
        }
        blocks.clear();
        for (std::size_t i : batches.next()) {
            blocks.push_back(train.block(i));
        }
        const WeightedBatch wb =
            make_training_batch(model_.family(), model_.mask_id(), blocks, cfg_.order_policy, order_rng);
        const StepResult r = train_step(model_, opt, wb, cfg_, learning_rate_at(cfg_, step), step, step);
        result.train_losses.push_back(r.loss);
        loss_sum += r.loss;
        ++loss_count;
        for (auto& ema : result.emas) {
            ema_update(ema, model_.params());
        }
        if (on_checkpoint && cfg_.checkpoint_interval > 0 && (step + 1) % cfg_.checkpoint_interval == 0 &&
            step + 1 < cfg_.total_steps) {
            on_checkpoint(step + 1, model_, result.emas);
        }
    }
    evaluate(cfg_.total_steps);
    if (on_checkpoint) {
        on_checkpoint(cfg_.total_steps, model_, result.emas);
    }
    return result;
}

void append_jsonl(const std::filesystem::path& path, const nlohmann::json& row) {
    std::ofstream out(path, std::ios::app);
    if (!out) {
        throw IoError("cannot append to " + path.string());
    }
    out << row.dump() << '\n';
}

nlohmann::json ProbeReport::to_json() const {
    return {{"aoar", aoar.to_json()}, {"mdm", mdm.to_json()}, {"z_score", z_score}, {"pass", pass}};
}

ProbeReport equivalence_probe(const SequenceModel& model, std::span<const Block> blocks, int budget, std::uint64_t seed,
                              MdmWeighting weighting) {
    if (blocks.empty() || budget < 1) {
        throw std::invalid_argument("probe needs at least one block and a positive budget");
    }
    std::vector<SampleLoss> a;
    std::vector<SampleLoss> m;
    {
        ScoreQueue qa(model, a);
        for (int j = 0; j < budget; ++j) {
            const Block b = blocks[static_cast<std::size_t>(j) % blocks.size()];
            check_block(model, b);
            Rng rng(derive_seed(seed, {0, static_cast<std::uint64_t>(j)}));
            queue_order(qa, model, b, uniform_permutation(static_cast<int>(b.size()), rng),
                        new_sample(a, static_cast<std::int64_t>(b.size())));
        }
        qa.flush();
    }
    {
        ScoreQueue qm(model, m);
        for (int j = 0; j < budget; ++j) {
            const Block b = blocks[static_cast<std::size_t>(j) % blocks.size()];
            const int n = static_cast<int>(b.size());
            Rng rng(derive_seed(seed, {1, static_cast<std::uint64_t>(j)}));
            const Permutation sigma = uniform_permutation(n, rng);
            const int l = 1 + rng.below(n);
            queue_mdm(qm, model, b, sigma, l, weighting, new_sample(m, n));
        }
        qm.flush();
    }
    ProbeReport r;
    r.aoar = summarize(a);
    r.mdm = summarize(m);
    r.z_score = z_score(r.aoar, r.mdm);
    r.pass = r.z_score < 3.0;
    return r;
}

}  // namespace aoar
