#pragma once

// Decoder (any-order, target-position conditioned) and encoder (mask-token)
// transformers, their attention masks, the incremental KV cache, and the
// checkpoint container.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aoar/ordering.hpp"
#include "aoar/tensor.hpp"
#include "json.hpp"

namespace aoar {

enum class ModelFamily { decoder_any_order, encoder_mdm };
enum class Injection { add_once, add_per_block_shared, add_per_block_learned, adaln };

std::string to_string(ModelFamily f);
std::string to_string(Injection i);
ModelFamily parse_family(const std::string& s);
Injection parse_injection(const std::string& s);

struct ModelConfig {
    ModelFamily family = ModelFamily::decoder_any_order;
    int n_layers = 4;
    int d_model = 256;
    int n_heads = 4;
    int d_head = 64;
    int ctx_len = 256;
    int vocab_size = 0;
    Injection injection = Injection::adaln;
    int target_pe_dim = 128;

    bool is_decoder() const { return family == ModelFamily::decoder_any_order; }
    // Throws std::invalid_argument when an invariant is violated.
    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

// Input token of the first decoder row: a learned begin-of-order vector used
// in place of a token and input-position embedding.
inline constexpr int kBos = -1;

enum class MaskKind { causal, full, parallel_generation };

struct AttentionMask {
    MaskKind kind = MaskKind::causal;
    int queries = 0;
    int keys = 0;
    std::vector<std::uint8_t> bits;  // queries x keys, row major

    bool allows(int q, int k) const { return bits[static_cast<std::size_t>(q) * keys + k] != 0; }
    const std::uint8_t* row(int q) const { return bits.data() + static_cast<std::size_t>(q) * keys; }

    static AttentionMask causal(int length);
    static AttentionMask full(int length);
};

// Rows 0..c-1 attend causally among themselves; query row c+j attends to
// rows 0..c-1 and to itself. Throws std::invalid_argument when m < 1, c < 0
// or c + m > ctx_len.
AttentionMask build_parallel_generation_mask(int committed, int queries, int ctx_len);

// One decoder row per prediction: the input token (kBos for the first row),
// its original position (-1 with kBos), and the original position whose token
// the row predicts. The encoder uses tokens and input_positions only.
struct DecoderRows {
    std::vector<int> tokens;
    std::vector<int> input_positions;
    std::vector<int> target_positions;

    int size() const { return static_cast<int>(tokens.size()); }
    void push(int token, int input_pos, int target_pos) {
        tokens.push_back(token);
        input_positions.push_back(input_pos);
        target_positions.push_back(target_pos);
    }
    void append(const DecoderRows& other);
};

// n rows modelling the full joint of `block` in the order `sigma`: row k reads
// x[sigma[k-1]] at position sigma[k-1] (kBos for k = 0) and predicts sigma[k].
DecoderRows rows_for_order(std::span<const int> block, const Permutation& sigma);

// Context rows for `context` (original positions in presentation order) plus
// one query row per target: c rows as in rows_for_order, then queries whose
// input is the last context token (kBos when the context is empty). Pair with
// build_parallel_generation_mask(c, targets.size()).
DecoderRows parallel_rows(std::span<const int> block, std::span<const int> context, std::span<const int> targets);

// A batch stacks independent segments; each segment attends only within its
// own rows. key_order (local indices) fixes the order keys are visited.
struct Segment {
    int begin = 0;
    int count = 0;
    AttentionMask mask;
    std::vector<int> key_order;
};

struct Batch {
    DecoderRows rows;
    std::vector<Segment> segments;

    void add(const DecoderRows& r, AttentionMask mask, std::vector<int> key_order = {});
    int size() const { return rows.size(); }
};

// Encoder segment: full attention, keys visited by ascending input position so
// the result does not depend on the order pairs are presented in.
void add_encoder_segment(Batch& batch, std::span<const int> tokens, std::span<const int> positions);

struct ParamTensor {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
    bool decay = false;
};

class ParameterLayout {
public:
    std::size_t add(const std::string& name, std::vector<int> shape, bool decay);
    const ParamTensor& at(const std::string& name) const;
    const ParamTensor* find(const std::string& name) const;
    const std::vector<ParamTensor>& tensors() const { return tensors_; }
    std::size_t total() const { return total_; }
    bool operator==(const ParameterLayout& o) const;

private:
    std::vector<ParamTensor> tensors_;
    std::size_t total_ = 0;
};

ParameterLayout make_layout(const ModelConfig& cfg);

// Anything that maps a batch to per-row logits. The transformer implements it;
// tests and evaluation plug in analytic stubs.
class SequenceModel {
public:
    virtual ~SequenceModel() = default;
    virtual ModelFamily family() const = 0;
    virtual int vocab_size() const = 0;
    virtual int ctx_len() const = 0;
    virtual int mask_id() const { return vocab_size() - 1; }
    virtual Matrix<float> forward(const Batch& batch) const = 0;

    Matrix<float> forward_decoder(const DecoderRows& rows, const AttentionMask& mask) const;
    Matrix<float> forward_encoder(std::span<const int> tokens, const AttentionMask& mask) const;
    Matrix<float> forward_encoder(std::span<const int> tokens, std::span<const int> positions,
                                  const AttentionMask& mask) const;
};

template <class T>
struct BasicKvCache {
    int rows = 0;
    int capacity = 0;
    std::vector<std::vector<T>> k;  // per layer, capacity x d_model
    std::vector<std::vector<T>> v;
};

template <class T>
struct LayerActivations {
    Matrix<T> x_in, xhat1, z1, a1, qkv, att, x_mid, xhat2, z2, a2, fc_pre, fc_act, mod;
    std::vector<T> rstd1, rstd2;
    std::vector<std::vector<T>> probs;  // per segment
};

template <class T>
struct Activations {
    std::vector<LayerActivations<T>> layers;
    Matrix<T> cond_pre, cond;  // adaLN conditioning before / after SiLU
    Matrix<T> x_final, xhat_f, y_f;
    std::vector<T> rstd_f;
};

template <class T>
class BasicTransformer {
public:
    BasicTransformer(const ModelConfig& cfg, std::uint64_t seed);
    BasicTransformer(const ModelConfig& cfg, std::vector<T> params);

    const ModelConfig& config() const { return cfg_; }
    const ParameterLayout& layout() const { return layout_; }
    std::span<T> params() { return params_; }
    std::span<const T> params() const { return params_; }
    std::span<const T> tensor(const std::string& name) const;
    std::span<T> tensor(const std::string& name);

    // With modulation off the adaLN projections are skipped entirely.
    void set_modulation_enabled(bool on) { modulation_ = on; }
    bool modulation_enabled() const { return modulation_; }

    // Logits [rows x V]. When acts is given every intermediate needed by
    // backward() is kept.
    Matrix<T> logits(const Batch& batch, Activations<T>* acts = nullptr) const;
    // Accumulates d(loss)/d(params) into grad given d(loss)/d(logits).
    void backward(const Batch& batch, const Activations<T>& acts, const Matrix<T>& dlogits, std::span<T> grad) const;

    BasicKvCache<T> make_cache() const;
    // Appends `append` rows to the cache (causal over the cache and over each
    // other) and scores `query` rows, which see the cache, every append row,
    // and themselves. Returns logits for the query rows only.
    Matrix<T> forward_incremental(BasicKvCache<T>& cache, const DecoderRows& append, const DecoderRows& query) const;

    template <class U>
    BasicTransformer<U> cast() const {
        return BasicTransformer<U>(cfg_, std::vector<U>(params_.begin(), params_.end()));
    }

private:
    struct LayerOffsets {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
        std::size_t tgt_emb, ada_w, ada_b;
    };

    void embed(const DecoderRows& rows, Matrix<T>& x) const;
    void add_target(const DecoderRows& rows, int layer, Matrix<T>& x) const;
    bool uses_adaln() const { return cfg_.is_decoder() && cfg_.injection == Injection::adaln && modulation_; }
    bool per_block_target(int layer) const;
    const T* p(std::size_t off) const { return params_.data() + off; }
    void validate_rows(const DecoderRows& rows) const;
    Matrix<T> run(const DecoderRows& rows, const std::vector<Segment>* segments, BasicKvCache<T>* cache, int n_append,
                  Activations<T>* acts) const;

    ModelConfig cfg_;
    ParameterLayout layout_;
    std::vector<T> params_;
    std::vector<LayerOffsets> off_;
    std::size_t tok_emb_ = 0, pos_emb_ = 0, bos_emb_ = 0, ada_tgt_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, head_w_ = 0,
                head_b_ = 0;
    bool modulation_ = true;
};

extern template class BasicTransformer<float>;
extern template class BasicTransformer<double>;

using KvCache = BasicKvCache<float>;

class Transformer : public SequenceModel, public BasicTransformer<float> {
public:
    using BasicTransformer<float>::BasicTransformer;
    explicit Transformer(BasicTransformer<float> base) : BasicTransformer<float>(std::move(base)) {}

    ModelFamily family() const override { return config().family; }
    int vocab_size() const override { return config().vocab_size; }
    int ctx_len() const override { return config().ctx_len; }
    Matrix<float> forward(const Batch& batch) const override { return logits(batch); }
};

struct Checkpoint {
    ModelConfig config;
    std::int64_t step = 0;
    std::optional<double> ema_decay;
    nlohmann::json extra = nlohmann::json::object();
    std::vector<float> params;
};

// Container layout, little endian:
//   char[8] magic "AOARCKPT"
//   u64     header length H
//   char[H] JSON header {config, step, ema_decay, extra, tensors: [{name, shape, offset}]}
//   f32[]   tensor data, row major, offsets in bytes from the start of the data
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Transformer model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace aoar
