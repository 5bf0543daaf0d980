#pragma once

// Training and evaluation objectives (left-to-right, any-order, masked
// diffusion), AdamW, weight EMA, the trainer loop, and the Monte-Carlo probe
// comparing the any-order and masked-diffusion estimators.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aoar/corpus.hpp"
#include "aoar/model.hpp"
#include "aoar/ordering.hpp"
#include "aoar/rng.hpp"
#include "json.hpp"

namespace aoar {

// Loss of one Monte-Carlo sample (one order of one sequence, or one masking
// draw): summed nll over `tokens` tokens.
struct SampleLoss {
    double nll = 0.0;
    std::int64_t tokens = 0;
};

struct LossEstimate {
    double nll_per_token = 0.0;  // nats per token
    std::int64_t token_count = 0;
    double std_error = 0.0;  // across samples of the per-token value
    std::int64_t sample_count = 0;
    double total_nll = 0.0;

    double ppl() const;
    nlohmann::json to_json() const;
};

LossEstimate summarize(std::span<const SampleLoss> samples);

// -log softmax(logits)[target], evaluated in double precision.
double token_nll(const float* logits, int vocab, int target);

using Block = std::span<const int>;

// Identity-order decoder likelihood of the whole block, first token included
// through the begin-of-order row. Throws std::invalid_argument for blocks
// shorter than 2 or longer than ctx_len, and for the encoder family.
LossEstimate ar_nll(const SequenceModel& model, Block block);

// One sample per sampled order. Decoder: one causal forward per order.
// Encoder: one masked forward per prefix length of each order.
LossEstimate aoar_nll(const SequenceModel& model, Block block, const OrderPolicy& policy, int num_orders, Rng& rng);
// Every order of S_n (n <= 8), exact average.
LossEstimate aoar_nll_exhaustive(const SequenceModel& model, Block block);

enum class MdmWeighting { elbo, unweighted };

// sigma ~ U(S_n), l ~ U{1..n}; the suffix sigma_l..sigma_n is scored against
// the prefix in one forward and weighted by n / (n - l + 1). Unweighted drops
// that factor (negative control only).
LossEstimate mdm_nll(const SequenceModel& model, Block block, int num_samples, Rng& rng,
                     MdmWeighting weighting = MdmWeighting::elbo);
// Exact sum over every (sigma, l), n <= 8.
LossEstimate mdm_nll_exhaustive(const SequenceModel& model, Block block);

// Multi-block estimators. Sample j of block b uses the stream
// derive_seed(seed, {b, j}), so results do not depend on batching.
std::vector<SampleLoss> ar_samples(const SequenceModel& model, std::span<const Block> blocks);
std::vector<SampleLoss> aoar_samples(const SequenceModel& model, std::span<const Block> blocks,
                                     const OrderPolicy& policy, int orders_per_block, std::uint64_t seed);
std::vector<SampleLoss> mdm_samples(const SequenceModel& model, std::span<const Block> blocks, int samples_per_block,
                                    std::uint64_t seed, MdmWeighting weighting = MdmWeighting::elbo);

std::vector<Block> dataset_blocks(const PackedDataset& ds, std::size_t max_blocks = 0);

// Rows, per-row targets and per-row loss weights of one training batch.
struct WeightedBatch {
    Batch batch;
    std::vector<int> targets;
    std::vector<double> weights;
};

// Decoder: one order per sequence from `policy`, every row weighted
// 1 / (B * n). Encoder: one masking draw per sequence, masked rows weighted
// 1 / (B * (n - l + 1)).
WeightedBatch make_training_batch(ModelFamily family, int mask_id, std::span<const Block> blocks,
                                  const OrderPolicy& policy, Rng& rng);

// sum_r w_r * nll_r; when grad is non-empty d/dparams is accumulated into it.
template <class T>
double weighted_loss(const BasicTransformer<T>& model, const WeightedBatch& wb, std::span<T> grad);

extern template double weighted_loss<float>(const BasicTransformer<float>&, const WeightedBatch&, std::span<float>);
extern template double weighted_loss<double>(const BasicTransformer<double>&, const WeightedBatch&, std::span<double>);

enum class LrSchedule { constant, cosine };

struct TrainConfig {
    double learning_rate = 6e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.05;
    double grad_clip = 1.0;
    int batch_tokens = 4096;
    int total_steps = 1000;
    double warmup_fraction = 0.02;
    LrSchedule lr_schedule = LrSchedule::constant;
    OrderPolicy order_policy = OrderPolicy::uniform();
    std::vector<double> ema_decays;
    // Ramp each EMA decay as min(decay, (1 + k) / (10 + k)).
    bool ema_warmup = true;
    int eval_interval = 100;
    int eval_blocks = 32;
    int eval_orders = 1;
    std::uint64_t eval_seed = 1234;
    std::uint64_t seed = 0;
    int checkpoint_interval = 0;

    int batch_size(int ctx_len) const;
    void validate() const;
    nlohmann::json to_json() const;
    // Unknown keys are rejected.
    static TrainConfig from_json(const nlohmann::json& j);
};

double learning_rate_at(const TrainConfig& cfg, int step);

struct AdamWState {
    std::vector<float> m;
    std::vector<float> v;
    std::int64_t t = 0;
};

AdamWState make_adamw(std::size_t n);

struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
};

// One AdamW step (decoupled weight decay on matrix-shaped tensors, global
// gradient-norm clipping). Throws NumericalError on a non-finite loss.
StepResult train_step(Transformer& model, AdamWState& opt, const WeightedBatch& wb, const TrainConfig& cfg, double lr,
                      std::int64_t step, std::int64_t batch_id);

struct EmaState {
    double decay = 0.0;
    bool warmup = false;
    std::vector<double> shadow;
    std::int64_t step = 0;

    double effective_decay() const;
    std::vector<float> weights() const;
};

EmaState make_ema(double decay, std::span<const float> params, bool warmup = false);
// shadow <- d * shadow + (1 - d) * params. Throws std::invalid_argument on a
// size mismatch.
void ema_update(EmaState& ema, std::span<const float> params);

struct EvalRecord {
    std::int64_t step = 0;
    std::optional<double> train_loss;  // mean over the steps since the previous record
    std::optional<double> val_l2r_nll;
    double val_anyorder_nll = 0.0;
    std::optional<double> val_policy_nll;
    std::vector<std::pair<double, double>> ema_l2r;        // (decay, nll)
    std::vector<std::pair<double, double>> ema_anyorder;   // (decay, nll)
    double elapsed_s = 0.0;

    nlohmann::json to_json() const;
};

// Validation losses on a fixed subset with fixed streams, so every evaluation
// point (and every run sharing eval_seed) sees the same orders.
struct EvalLosses {
    std::optional<double> l2r;
    double anyorder = 0.0;
    std::optional<double> policy;
};
EvalLosses evaluate_validation(const Transformer& model, std::span<const Block> blocks, const TrainConfig& cfg);

struct TrainResult {
    std::vector<EvalRecord> records;
    std::vector<double> train_losses;
    std::vector<EmaState> emas;
};

class Trainer {
public:
    using Callback = std::function<void(const EvalRecord&)>;
    using CheckpointHook = std::function<void(std::int64_t step, const Transformer&, const std::vector<EmaState>&)>;

    Trainer(Transformer& model, TrainConfig cfg);

    // Evaluates at step 0, every eval_interval steps, and at the end.
    TrainResult run(const PackedDataset& train, const PackedDataset& validation, Callback on_eval = {},
                    CheckpointHook on_checkpoint = {});

private:
    Transformer& model_;
    TrainConfig cfg_;
};

void append_jsonl(const std::filesystem::path& path, const nlohmann::json& row);

struct ProbeReport {
    LossEstimate aoar;
    LossEstimate mdm;
    double z_score = 0.0;
    bool pass = false;

    nlohmann::json to_json() const;
};

inline double z_score(const LossEstimate& a, const LossEstimate& b) {
    const double se = std::sqrt(a.std_error * a.std_error + b.std_error * b.std_error);
    const double diff = std::abs(a.nll_per_token - b.nll_per_token);
    return se > 0 ? diff / se : (diff == 0 ? 0.0 : std::numeric_limits<double>::infinity());
}

// `budget` any-order samples and `budget` masked-diffusion samples spread
// round robin over the blocks; pass when z < 3.
ProbeReport equivalence_probe(const SequenceModel& model, std::span<const Block> blocks, int budget, std::uint64_t seed,
                              MdmWeighting weighting = MdmWeighting::elbo);

}  // namespace aoar
