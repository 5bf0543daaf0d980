#include "aoar/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "aoar/errors.hpp"
#include "aoar/kernels.hpp"
#include "aoar/rng.hpp"

namespace aoar {

namespace kn = kernels;

std::string to_string(ModelFamily f) { return f == ModelFamily::decoder_any_order ? "decoder_any_order" : "encoder_mdm"; }

std::string to_string(Injection i) {
    switch (i) {
        case Injection::add_once:
            return "add_once";
        case Injection::add_per_block_shared:
            return "add_per_block_shared";
        case Injection::add_per_block_learned:
            return "add_per_block_learned";
        case Injection::adaln:
            return "adaln";
    }
    return "?";
}

ModelFamily parse_family(const std::string& s) {
    if (s == "decoder_any_order" || s == "decoder") {
        return ModelFamily::decoder_any_order;
    }
    if (s == "encoder_mdm" || s == "encoder") {
        return ModelFamily::encoder_mdm;
    }
    throw std::invalid_argument("unknown model family '" + s + "'");
}

Injection parse_injection(const std::string& s) {
    for (Injection i : {Injection::add_once, Injection::add_per_block_shared, Injection::add_per_block_learned,
                        Injection::adaln}) {
        if (to_string(i) == s) {
            return i;
        }
    }
    throw std::invalid_argument("unknown injection '" + s + "'");
}

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) {
            throw std::invalid_argument(std::string(name) + " must be positive");
        }
    };
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_head, "d_head");
    positive(vocab_size, "vocab_size");
    positive(target_pe_dim, "target_pe_dim");
    if (d_model != n_heads * d_head) {
        throw std::invalid_argument("d_model must equal n_heads * d_head");
    }
    if (ctx_len < 2) {
        throw std::invalid_argument("ctx_len must be at least 2");
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"family", to_string(family)}, {"n_layers", n_layers}, {"d_model", d_model},
            {"n_heads", n_heads},          {"d_head", d_head},     {"ctx_len", ctx_len},
            {"vocab_size", vocab_size},    {"injection", to_string(injection)}, {"target_pe_dim", target_pe_dim}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> keys = {"family",     "n_layers",  "d_model",       "n_heads", "d_head",
                                                  "ctx_len",    "vocab_size", "injection",    "target_pe_dim"};
    for (const auto& [k, v] : j.items()) {
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
            throw std::invalid_argument("unknown model key '" + k + "'");
        }
    }
    ModelConfig c;
    c.family = parse_family(j.value("family", to_string(c.family)));
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_head = j.value("d_head", c.d_head);
    c.d_model = j.value("d_model", c.n_heads * c.d_head);
    c.ctx_len = j.value("ctx_len", c.ctx_len);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.injection = parse_injection(j.value("injection", to_string(c.injection)));
    c.target_pe_dim = j.value("target_pe_dim", c.target_pe_dim);
    return c;
}

AttentionMask AttentionMask::causal(int length) {
    AttentionMask m{MaskKind::causal, length, length, std::vector<std::uint8_t>(static_cast<std::size_t>(length) * length)};
    for (int q = 0; q < length; ++q) {
        std::fill_n(m.bits.begin() + static_cast<std::ptrdiff_t>(q) * length, q + 1, 1);
    }
    return m;
}

AttentionMask AttentionMask::full(int length) {
    return {MaskKind::full, length, length, std::vector<std::uint8_t>(static_cast<std::size_t>(length) * length, 1)};
}

AttentionMask build_parallel_generation_mask(int committed, int queries, int ctx_len) {
    if (committed < 0 || queries < 1) {
        throw std::invalid_argument("parallel mask needs c >= 0 and m >= 1");
    }
    if (committed + queries > ctx_len) {
        throw std::invalid_argument("parallel mask exceeds ctx_len");
    }
    const int n = committed + queries;
    AttentionMask m = AttentionMask::causal(n);
    m.kind = MaskKind::parallel_generation;
    for (int q = committed; q < n; ++q) {
        std::uint8_t* row = m.bits.data() + static_cast<std::size_t>(q) * n;
        std::fill(row + committed, row + n, 0);
        row[q] = 1;
    }
    return m;
}

void DecoderRows::append(const DecoderRows& other) {
    tokens.insert(tokens.end(), other.tokens.begin(), other.tokens.end());
    input_positions.insert(input_positions.end(), other.input_positions.begin(), other.input_positions.end());
    target_positions.insert(target_positions.end(), other.target_positions.begin(), other.target_positions.end());
}

DecoderRows rows_for_order(std::span<const int> block, const Permutation& sigma) {
    if (static_cast<int>(block.size()) != sigma.n()) {
        throw std::invalid_argument("permutation length does not match block length");
    }
    DecoderRows r;
    for (int k = 0; k < sigma.n(); ++k) {
        if (k == 0) {
            r.push(kBos, -1, sigma.order[0]);
        } else {
            const int prev = sigma.order[static_cast<std::size_t>(k - 1)];
            r.push(block[static_cast<std::size_t>(prev)], prev, sigma.order[static_cast<std::size_t>(k)]);
        }
    }
    return r;
}

DecoderRows parallel_rows(std::span<const int> block, std::span<const int> context, std::span<const int> targets) {
    DecoderRows r;
    for (std::size_t k = 0; k < context.size(); ++k) {
        if (k == 0) {
            r.push(kBos, -1, context[0]);
        } else {
            r.push(block[static_cast<std::size_t>(context[k - 1])], context[k - 1], context[k]);
        }
    }
    const int last = context.empty() ? -1 : context.back();
    const int tok = context.empty() ? kBos : block[static_cast<std::size_t>(last)];
    for (int t : targets) {
        r.push(tok, last, t);
    }
    return r;
}

void Batch::add(const DecoderRows& r, AttentionMask mask, std::vector<int> key_order) {
    if (mask.queries != r.size() || mask.keys != r.size()) {
        throw std::invalid_argument("segment mask shape does not match its rows");
    }
    Segment s;
    s.begin = rows.size();
    s.count = r.size();
    s.mask = std::move(mask);
    s.key_order = std::move(key_order);
    rows.append(r);
    segments.push_back(std::move(s));
}

void add_encoder_segment(Batch& batch, std::span<const int> tokens, std::span<const int> positions) {
    if (tokens.size() != positions.size()) {
        throw std::invalid_argument("encoder tokens and positions differ in length");
    }
    DecoderRows r;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        r.push(tokens[i], positions[i], positions[i]);
    }
    std::vector<int> order(tokens.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return positions[static_cast<std::size_t>(a)] < positions[static_cast<std::size_t>(b)];
    });
    batch.add(r, AttentionMask::full(r.size()), std::move(order));
}

std::size_t ParameterLayout::add(const std::string& name, std::vector<int> shape, bool decay) {
    if (find(name)) {
        throw std::invalid_argument("duplicate tensor " + name);
    }
    std::size_t size = 1;
    for (int s : shape) {
        size *= static_cast<std::size_t>(s);
    }
    tensors_.push_back({name, std::move(shape), total_, size, decay});
    total_ += size;
    return tensors_.back().offset;
}

const ParamTensor* ParameterLayout::find(const std::string& name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

const ParamTensor& ParameterLayout::at(const std::string& name) const {
    if (const auto* t = find(name)) {
        return *t;
    }
    throw std::invalid_argument("no tensor named " + name);
}

bool ParameterLayout::operator==(const ParameterLayout& o) const {
    if (total_ != o.total_ || tensors_.size() != o.tensors_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        const auto& a = tensors_[i];
        const auto& b = o.tensors_[i];
        if (a.name != b.name || a.shape != b.shape || a.offset != b.offset) {
            return false;
        }
    }
    return true;
}

namespace {

std::string layer_name(int l, const char* what) { return "h" + std::to_string(l) + "." + what; }

}  // namespace

ParameterLayout make_layout(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.d_model;
    ParameterLayout lay;
    lay.add("tok_emb", {cfg.vocab_size, d}, true);
    lay.add("pos_emb", {cfg.ctx_len, d}, true);
    if (cfg.is_decoder()) {
        lay.add("bos_emb", {d}, false);
        switch (cfg.injection) {
            case Injection::add_once:
            case Injection::add_per_block_shared:
                lay.add("tgt_emb", {cfg.ctx_len, d}, true);
                break;
            case Injection::add_per_block_learned:
                for (int l = 0; l < cfg.n_layers; ++l) {
                    lay.add(layer_name(l, "tgt_emb"), {cfg.ctx_len, d}, true);
                }
                break;
            case Injection::adaln:
                lay.add("tgt_emb", {cfg.ctx_len, d}, true);
                lay.add("ada_tgt_emb", {cfg.ctx_len, cfg.target_pe_dim}, true);
                break;
        }
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        lay.add(layer_name(l, "ln1_g"), {d}, false);
        lay.add(layer_name(l, "ln1_b"), {d}, false);
        lay.add(layer_name(l, "w_qkv"), {d, 3 * d}, true);
        lay.add(layer_name(l, "b_qkv"), {3 * d}, false);
        lay.add(layer_name(l, "w_o"), {d, d}, true);
        lay.add(layer_name(l, "b_o"), {d}, false);
        lay.add(layer_name(l, "ln2_g"), {d}, false);
        lay.add(layer_name(l, "ln2_b"), {d}, false);
        lay.add(layer_name(l, "w_fc"), {d, 4 * d}, true);
        lay.add(layer_name(l, "b_fc"), {4 * d}, false);
        lay.add(layer_name(l, "w_proj"), {4 * d, d}, true);
        lay.add(layer_name(l, "b_proj"), {d}, false);
        if (cfg.is_decoder() && cfg.injection == Injection::adaln) {
            lay.add(layer_name(l, "ada_w"), {cfg.target_pe_dim, 4 * d}, true);
            lay.add(layer_name(l, "ada_b"), {4 * d}, false);
        }
    }
    lay.add("lnf_g", {d}, false);
    lay.add("lnf_b", {d}, false);
    lay.add("head_w", {d, cfg.vocab_size}, true);
    lay.add("head_b", {cfg.vocab_size}, false);
    return lay;
}

Matrix<float> SequenceModel::forward_decoder(const DecoderRows& rows, const AttentionMask& mask) const {
    if (family() != ModelFamily::decoder_any_order) {
        throw std::invalid_argument("forward_decoder on an encoder model");
    }
    if (mask.kind != MaskKind::causal && mask.kind != MaskKind::parallel_generation) {
        throw std::invalid_argument("decoder forward needs a causal or parallel-generation mask");
    }
    if (rows.target_positions.size() != rows.tokens.size() || rows.input_positions.size() != rows.tokens.size()) {
        throw std::invalid_argument("decoder row arrays differ in length");
    }
    Batch b;
    b.add(rows, mask);
    return forward(b);
}

Matrix<float> SequenceModel::forward_encoder(std::span<const int> tokens, const AttentionMask& mask) const {
    std::vector<int> pos(tokens.size());
    std::iota(pos.begin(), pos.end(), 0);
    return forward_encoder(tokens, pos, mask);
}

Matrix<float> SequenceModel::forward_encoder(std::span<const int> tokens, std::span<const int> positions,
                                             const AttentionMask& mask) const {
    if (family() != ModelFamily::encoder_mdm) {
        throw std::invalid_argument("forward_encoder on a decoder model");
    }
    if (mask.kind != MaskKind::full || mask.queries != static_cast<int>(tokens.size())) {
        throw std::invalid_argument("encoder forward needs a full mask of matching length");
    }
    Batch b;
    add_encoder_segment(b, tokens, positions);
    return forward(b);
}

template <class T>
BasicTransformer<T>::BasicTransformer(const ModelConfig& cfg, std::vector<T> params)
    : cfg_(cfg), layout_(make_layout(cfg)), params_(std::move(params)) {
    if (params_.size() != layout_.total()) {
        throw std::invalid_argument("parameter vector size does not match the model layout");
    }
    auto off = [&](const std::string& name) { return layout_.at(name).offset; };
    tok_emb_ = off("tok_emb");
    pos_emb_ = off("pos_emb");
    lnf_g_ = off("lnf_g");
    lnf_b_ = off("lnf_b");
    head_w_ = off("head_w");
    head_b_ = off("head_b");
    if (cfg_.is_decoder()) {
        bos_emb_ = off("bos_emb");
        if (cfg_.injection == Injection::adaln) {
            ada_tgt_emb_ = off("ada_tgt_emb");
        }
    }
    off_.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
        auto& o = off_[static_cast<std::size_t>(l)];
        o.ln1_g = off(layer_name(l, "ln1_g"));
        o.ln1_b = off(layer_name(l, "ln1_b"));
        o.w_qkv = off(layer_name(l, "w_qkv"));
        o.b_qkv = off(layer_name(l, "b_qkv"));
        o.w_o = off(layer_name(l, "w_o"));
        o.b_o = off(layer_name(l, "b_o"));
        o.ln2_g = off(layer_name(l, "ln2_g"));
        o.ln2_b = off(layer_name(l, "ln2_b"));
        o.w_fc = off(layer_name(l, "w_fc"));
        o.b_fc = off(layer_name(l, "b_fc"));
        o.w_proj = off(layer_name(l, "w_proj"));
        o.b_proj = off(layer_name(l, "b_proj"));
        o.tgt_emb = o.ada_w = o.ada_b = 0;
        if (cfg_.is_decoder()) {
            if (cfg_.injection == Injection::add_per_block_learned) {
                o.tgt_emb = off(layer_name(l, "tgt_emb"));
            } else {
                o.tgt_emb = off("tgt_emb");
            }
            if (cfg_.injection == Injection::adaln) {
                o.ada_w = off(layer_name(l, "ada_w"));
                o.ada_b = off(layer_name(l, "ada_b"));
            }
        }
    }
}

template <class T>
BasicTransformer<T>::BasicTransformer(const ModelConfig& cfg, std::uint64_t seed)
    : BasicTransformer(cfg, std::vector<T>(make_layout(cfg).total(), T{})) {
    Rng rng(seed);
    const double resid_std = 0.02 / std::sqrt(2.0 * cfg_.n_layers);
    for (const auto& t : layout_.tensors()) {
        T* w = params_.data() + t.offset;
        const std::string& n = t.name;
        auto ends_with = [&](const char* suffix) {
            const std::size_t len = std::strlen(suffix);
            return n.size() >= len && n.compare(n.size() - len, len, suffix) == 0;
        };
        double stddev = 0.0;
        if (ends_with("_g")) {
            std::fill(w, w + t.size, T(1));
            continue;
        }
        if (ends_with("ada_w") || ends_with("ada_b") || (t.shape.size() == 1 && n != "bos_emb")) {
            continue;
        }
        if (ends_with("w_o") || ends_with("w_proj")) {
            stddev = resid_std;
        } else if (n == "ada_tgt_emb") {
            stddev = 1.0;
        } else {
            stddev = 0.02;
        }
        for (std::size_t i = 0; i < t.size; ++i) {
            w[i] = static_cast<T>(rng.normal() * stddev);
        }
    }
}

template <class T>
std::span<const T> BasicTransformer<T>::tensor(const std::string& name) const {
    const auto& t = layout_.at(name);
    return {params_.data() + t.offset, t.size};
}

template <class T>
std::span<T> BasicTransformer<T>::tensor(const std::string& name) {
    const auto& t = layout_.at(name);
    return {params_.data() + t.offset, t.size};
}

template <class T>
bool BasicTransformer<T>::per_block_target(int layer) const {
    if (!cfg_.is_decoder()) {
        return false;
    }
    switch (cfg_.injection) {
        case Injection::add_once:
        case Injection::adaln:
            return layer == 0;
        case Injection::add_per_block_shared:
        case Injection::add_per_block_learned:
            return true;
    }
    return false;
}

template <class T>
void BasicTransformer<T>::validate_rows(const DecoderRows& rows) const {
    const std::size_t n = rows.tokens.size();
    if (rows.input_positions.size() != n || rows.target_positions.size() != n) {
        throw std::invalid_argument("row arrays differ in length");
    }
    for (std::size_t i = 0; i < n; ++i) {
        const int tok = rows.tokens[i];
        const int in = rows.input_positions[i];
        if (tok == kBos) {
            if (!cfg_.is_decoder() || in != -1) {
                throw std::invalid_argument("begin-of-order row is only valid on the decoder with position -1");
            }
        } else {
            if (tok < 0 || tok >= cfg_.vocab_size) {
                throw std::invalid_argument("token id out of range");
            }
            if (in < 0 || in >= cfg_.ctx_len) {
                throw std::invalid_argument("input position out of range");
            }
        }
        if (cfg_.is_decoder()) {
            const int tg = rows.target_positions[i];
            if (tg < 0 || tg >= cfg_.ctx_len) {
                throw std::invalid_argument("target position out of range");
            }
        }
    }
}

template <class T>
void BasicTransformer<T>::embed(const DecoderRows& rows, Matrix<T>& x) const {
    const int d = cfg_.d_model;
    x.resize(rows.size(), d);
    for (int r = 0; r < rows.size(); ++r) {
        T* xr = x.row(r);
        const int tok = rows.tokens[static_cast<std::size_t>(r)];
        if (tok == kBos) {
            std::copy_n(p(bos_emb_), d, xr);
            continue;
        }
        const T* te = p(tok_emb_) + static_cast<std::size_t>(tok) * d;
        const T* pe = p(pos_emb_) + static_cast<std::size_t>(rows.input_positions[static_cast<std::size_t>(r)]) * d;
        for (int j = 0; j < d; ++j) {
            xr[j] = te[j] + pe[j];
        }
    }
}

template <class T>
void BasicTransformer<T>::add_target(const DecoderRows& rows, int layer, Matrix<T>& x) const {
    const int d = cfg_.d_model;
    const T* table = p(off_[static_cast<std::size_t>(layer)].tgt_emb);
    for (int r = 0; r < rows.size(); ++r) {
        const T* e = table + static_cast<std::size_t>(rows.target_positions[static_cast<std::size_t>(r)]) * d;
        T* xr = x.row(r);
        for (int j = 0; j < d; ++j) {
            xr[j] += e[j];
        }
    }
}

namespace {

template <class T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// a = z * (1 + scale) + shift with scale/shift taken from columns of mod.
template <class T>
void modulate(const Matrix<T>& z, const Matrix<T>& mod, int scale_col, int shift_col, Matrix<T>& a) {
    const int d = z.cols;
    a.resize(z.rows, d);
    for (int r = 0; r < z.rows; ++r) {
        const T* zr = z.row(r);
        const T* sc = mod.row(r) + scale_col;
        const T* sh = mod.row(r) + shift_col;
        T* ar = a.row(r);
        for (int j = 0; j < d; ++j) {
            ar[j] = zr[j] * (T(1) + sc[j]) + sh[j];
        }
    }
}

// Backward of modulate: returns dz, writes dscale/dshift into dmod.
template <class T>
void modulate_backward(const Matrix<T>& da, const Matrix<T>& z, const Matrix<T>& mod, int scale_col, int shift_col,
                       Matrix<T>& dz, Matrix<T>& dmod) {
    const int d = z.cols;
    dz.resize(z.rows, d);
    for (int r = 0; r < z.rows; ++r) {
        const T* g = da.row(r);
        const T* zr = z.row(r);
        const T* sc = mod.row(r) + scale_col;
        T* dzr = dz.row(r);
        T* dsc = dmod.row(r) + scale_col;
        T* dsh = dmod.row(r) + shift_col;
        for (int j = 0; j < d; ++j) {
            dzr[j] = g[j] * (T(1) + sc[j]);
            dsc[j] = g[j] * zr[j];
            dsh[j] = g[j];
        }
    }
}

// Gain/bias gradients and dxhat of y = xhat * g + b.
template <class T>
void affine_backward(const Matrix<T>& dy, const Matrix<T>& xhat, const T* gain, T* dgain, T* dbias, Matrix<T>& dxhat) {
    const int d = dy.cols;
    dxhat.resize(dy.rows, d);
    for (int r = 0; r < dy.rows; ++r) {
        const T* g = dy.row(r);
        const T* h = xhat.row(r);
        T* o = dxhat.row(r);
        for (int j = 0; j < d; ++j) {
            dgain[j] += g[j] * h[j];
            dbias[j] += g[j];
            o[j] = g[j] * gain[j];
        }
    }
}

template <class T>
void linear(const Matrix<T>& x, const T* w, const T* b, int out, Matrix<T>& y) {
    y.resize(x.rows, out);
    kn::matmul(x.data.data(), w, y.data.data(), x.rows, x.cols, out);
    kn::add_bias(y.data.data(), b, x.rows, out);
}

}  // namespace

template <class T>
Matrix<T> BasicTransformer<T>::run(const DecoderRows& rows, const std::vector<Segment>* segments,
                                   BasicKvCache<T>* cache, int n_append, Activations<T>* acts) const {
    validate_rows(rows);
    const int R = rows.size();
    const int d = cfg_.d_model;
    const int V = cfg_.vocab_size;
    const int P = cfg_.target_pe_dim;
    const bool keep = acts != nullptr;
    Activations<T> local;
    Activations<T>& A = keep ? *acts : local;
    A.layers.resize(keep ? static_cast<std::size_t>(cfg_.n_layers) : 1);

    // Incremental attention: keys are the cache rows followed by these rows.
    std::vector<std::uint8_t> inc_mask;
    int past = 0;
    if (cache) {
        past = cache->rows;
        if (past + R > cache->capacity) {
            throw std::invalid_argument("KV cache capacity exceeded");
        }
        const int nk = past + R;
        inc_mask.assign(static_cast<std::size_t>(R) * nk, 0);
        for (int i = 0; i < R; ++i) {
            std::uint8_t* m = inc_mask.data() + static_cast<std::size_t>(i) * nk;
            if (i < n_append) {
                std::fill(m, m + past + i + 1, 1);
            } else {
                std::fill(m, m + past + n_append, 1);
                m[past + i] = 1;
            }
        }
    }

    Matrix<T> x;
    embed(rows, x);
    if (uses_adaln()) {
        A.cond_pre.resize(R, P);
        A.cond.resize(R, P);
        for (int r = 0; r < R; ++r) {
            const T* e = p(ada_tgt_emb_) + static_cast<std::size_t>(rows.target_positions[static_cast<std::size_t>(r)]) * P;
            T* cp = A.cond_pre.row(r);
            T* c = A.cond.row(r);
            for (int j = 0; j < P; ++j) {
                cp[j] = e[j];
                c[j] = e[j] * sigmoid(e[j]);
            }
        }
    }

    for (int l = 0; l < cfg_.n_layers; ++l) {
        const auto& o = off_[static_cast<std::size_t>(l)];
        auto& la = A.layers[keep ? static_cast<std::size_t>(l) : 0];
        if (per_block_target(l)) {
            add_target(rows, l, x);
        }
        la.x_in = x;
        la.z1.resize(R, d);
        la.xhat1.resize(R, d);
        la.rstd1.assign(static_cast<std::size_t>(R), T{});
        kn::layernorm_forward(x.data.data(), p(o.ln1_g), p(o.ln1_b), la.z1.data.data(), la.xhat1.data.data(),
                              la.rstd1.data(), R, d);
        if (uses_adaln()) {
            linear(A.cond, p(o.ada_w), p(o.ada_b), 4 * d, la.mod);
            modulate(la.z1, la.mod, 0, d, la.a1);
        } else {
            la.a1 = la.z1;
        }
        linear(la.a1, p(o.w_qkv), p(o.b_qkv), 3 * d, la.qkv);

        la.att.resize(R, d);
        if (cache) {
            auto& kc = cache->k[static_cast<std::size_t>(l)];
            auto& vc = cache->v[static_cast<std::size_t>(l)];
            for (int i = 0; i < R; ++i) {
                const T* src = la.qkv.row(i);
                std::copy_n(src + d, d, kc.data() + static_cast<std::size_t>(past + i) * d);
                std::copy_n(src + 2 * d, d, vc.data() + static_cast<std::size_t>(past + i) * d);
            }
            kn::AttentionArgs<T> args;
            args.heads = cfg_.n_heads;
            args.head_dim = cfg_.d_head;
            args.n_query = R;
            args.n_key = past + R;
            args.q = la.qkv.data.data();
            args.q_stride = 3 * d;
            args.k = kc.data();
            args.v = vc.data();
            args.kv_stride = d;
            args.mask = inc_mask.data();
            kn::attention_forward(args, la.att.data.data(), d, static_cast<T*>(nullptr));
        } else {
            la.probs.resize(segments->size());
            for (std::size_t s = 0; s < segments->size(); ++s) {
                const Segment& seg = (*segments)[s];
                kn::AttentionArgs<T> args;
                args.heads = cfg_.n_heads;
                args.head_dim = cfg_.d_head;
                args.n_query = seg.count;
                args.n_key = seg.count;
                args.q = la.qkv.row(seg.begin);
                args.q_stride = 3 * d;
                args.k = args.q + d;
                args.v = args.q + 2 * d;
                args.kv_stride = 3 * d;
                args.mask = seg.mask.bits.data();
                args.key_order = seg.key_order.empty() ? nullptr : seg.key_order.data();
                T* probs = nullptr;
                if (keep) {
                    la.probs[s].assign(static_cast<std::size_t>(cfg_.n_heads) * seg.count * seg.count, T{});
                    probs = la.probs[s].data();
                }
                kn::attention_forward(args, la.att.row(seg.begin), d, probs);
            }
        }

        la.x_mid = la.x_in;
        kn::matmul(la.att.data.data(), p(o.w_o), la.x_mid.data.data(), R, d, d, true);
        kn::add_bias(la.x_mid.data.data(), p(o.b_o), R, d);

        la.z2.resize(R, d);
        la.xhat2.resize(R, d);
        la.rstd2.assign(static_cast<std::size_t>(R), T{});
        kn::layernorm_forward(la.x_mid.data.data(), p(o.ln2_g), p(o.ln2_b), la.z2.data.data(), la.xhat2.data.data(),
                              la.rstd2.data(), R, d);
        if (uses_adaln()) {
            modulate(la.z2, la.mod, 2 * d, 3 * d, la.a2);
        } else {
            la.a2 = la.z2;
        }
        linear(la.a2, p(o.w_fc), p(o.b_fc), 4 * d, la.fc_pre);
        la.fc_act.resize(R, 4 * d);
        kn::gelu_forward(la.fc_pre.data.data(), la.fc_act.data.data(), la.fc_pre.size());

        x = la.x_mid;
        kn::matmul(la.fc_act.data.data(), p(o.w_proj), x.data.data(), R, 4 * d, d, true);
        kn::add_bias(x.data.data(), p(o.b_proj), R, d);
    }

    A.x_final = x;
    A.y_f.resize(R, d);
    A.xhat_f.resize(R, d);
    A.rstd_f.assign(static_cast<std::size_t>(R), T{});
    kn::layernorm_forward(x.data.data(), p(lnf_g_), p(lnf_b_), A.y_f.data.data(), A.xhat_f.data.data(), A.rstd_f.data(),
                          R, d);
    Matrix<T> out;
    linear(A.y_f, p(head_w_), p(head_b_), V, out);
    if (cache) {
        cache->rows += n_append;
    }
    return out;
}

template <class T>
Matrix<T> BasicTransformer<T>::logits(const Batch& batch, Activations<T>* acts) const {
    int next = 0;
    for (const auto& s : batch.segments) {
        if (s.begin != next || s.mask.queries != s.count || s.mask.keys != s.count) {
            throw std::invalid_argument("malformed batch segments");
        }
        if (!s.key_order.empty() && static_cast<int>(s.key_order.size()) != s.count) {
            throw std::invalid_argument("key_order must list every key of its segment");
        }
        next += s.count;
    }
    if (next != batch.size()) {
        throw std::invalid_argument("segments do not cover the batch");
    }
    return run(batch.rows, &batch.segments, nullptr, 0, acts);
}

template <class T>
BasicKvCache<T> BasicTransformer<T>::make_cache() const {
    if (!cfg_.is_decoder()) {
        throw std::invalid_argument("KV cache requires the decoder family");
    }
    BasicKvCache<T> c;
    c.capacity = 2 * cfg_.ctx_len;
    const std::size_t n = static_cast<std::size_t>(c.capacity) * cfg_.d_model;
    c.k.assign(static_cast<std::size_t>(cfg_.n_layers), std::vector<T>(n));
    c.v.assign(static_cast<std::size_t>(cfg_.n_layers), std::vector<T>(n));
    return c;
}

template <class T>
Matrix<T> BasicTransformer<T>::forward_incremental(BasicKvCache<T>& cache, const DecoderRows& append,
                                                   const DecoderRows& query) const {
    if (!cfg_.is_decoder()) {
        throw std::invalid_argument("incremental forward requires the decoder family");
    }
    if (cache.k.size() != static_cast<std::size_t>(cfg_.n_layers) ||
        cache.capacity * static_cast<std::size_t>(cfg_.d_model) != cache.k.front().size()) {
        throw std::invalid_argument("KV cache does not belong to this model");
    }
    if (cache.rows + append.size() > cfg_.ctx_len) {
        throw std::invalid_argument("committed prefix exceeds ctx_len");
    }
    DecoderRows all = append;
    all.append(query);
    Matrix<T> out = run(all, nullptr, &cache, append.size(), nullptr);
    Matrix<T> q(query.size(), cfg_.vocab_size);
    std::copy(out.data.begin() + static_cast<std::ptrdiff_t>(append.size()) * cfg_.vocab_size, out.data.end(),
              q.data.begin());
    return q;
}

template <class T>
void BasicTransformer<T>::backward(const Batch& batch, const Activations<T>& A, const Matrix<T>& dlogits,
                                   std::span<T> grad) const {
    if (grad.size() != params_.size()) {
        throw std::invalid_argument("gradient buffer size mismatch");
    }
    if (A.layers.size() != static_cast<std::size_t>(cfg_.n_layers)) {
        throw std::invalid_argument("backward needs activations kept by the forward pass");
    }
    const DecoderRows& rows = batch.rows;
    const int R = rows.size();
    const int d = cfg_.d_model;
    const int V = cfg_.vocab_size;
    const int P = cfg_.target_pe_dim;
    T* g = grad.data();

    Matrix<T> dy(R, d);
    kn::matmul_a_bt(dlogits.data.data(), p(head_w_), dy.data.data(), R, V, d);
    kn::matmul_at_b(A.y_f.data.data(), dlogits.data.data(), g + head_w_, R, d, V);
    kn::column_sums(dlogits.data.data(), g + head_b_, R, V);

    Matrix<T> dxhat;
    affine_backward(dy, A.xhat_f, p(lnf_g_), g + lnf_g_, g + lnf_b_, dxhat);
    Matrix<T> dx(R, d);
    kn::layernorm_backward(dxhat.data.data(), A.xhat_f.data.data(), A.rstd_f.data(), dx.data.data(), R, d);

    Matrix<T> dcond;
    Matrix<T> dmod;
    if (uses_adaln()) {
        dcond.resize(R, P);
        dmod.resize(R, 4 * d);
    }
    Matrix<T> dfc, da, dz, dx_mid, datt, dqkv;
    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
        const auto& o = off_[static_cast<std::size_t>(l)];
        const auto& la = A.layers[static_cast<std::size_t>(l)];

        // x_out = x_mid + gelu(a2 W_fc + b_fc) W_proj + b_proj
        kn::matmul_at_b(la.fc_act.data.data(), dx.data.data(), g + o.w_proj, R, 4 * d, d);
        kn::column_sums(dx.data.data(), g + o.b_proj, R, d);
        dfc.resize(R, 4 * d);
        kn::matmul_a_bt(dx.data.data(), p(o.w_proj), dfc.data.data(), R, d, 4 * d);
        kn::gelu_backward(la.fc_pre.data.data(), dfc.data.data(), dfc.size());
        kn::matmul_at_b(la.a2.data.data(), dfc.data.data(), g + o.w_fc, R, d, 4 * d);
        kn::column_sums(dfc.data.data(), g + o.b_fc, R, 4 * d);
        da.resize(R, d);
        kn::matmul_a_bt(dfc.data.data(), p(o.w_fc), da.data.data(), R, 4 * d, d);
        if (uses_adaln()) {
            modulate_backward(da, la.z2, la.mod, 2 * d, 3 * d, dz, dmod);
        } else {
            dz = da;
        }
        affine_backward(dz, la.xhat2, p(o.ln2_g), g + o.ln2_g, g + o.ln2_b, dxhat);
        dx_mid = dx;
        kn::layernorm_backward(dxhat.data.data(), la.xhat2.data.data(), la.rstd2.data(), dx_mid.data.data(), R, d);

        // x_mid = x_in + attn(a1) W_o + b_o
        kn::matmul_at_b(la.att.data.data(), dx_mid.data.data(), g + o.w_o, R, d, d);
        kn::column_sums(dx_mid.data.data(), g + o.b_o, R, d);
        datt.resize(R, d);
        kn::matmul_a_bt(dx_mid.data.data(), p(o.w_o), datt.data.data(), R, d, d);
        dqkv.resize(R, 3 * d);
        for (std::size_t s = 0; s < batch.segments.size(); ++s) {
            const Segment& seg = batch.segments[s];
            kn::AttentionArgs<T> args;
            args.heads = cfg_.n_heads;
            args.head_dim = cfg_.d_head;
            args.n_query = seg.count;
            args.n_key = seg.count;
            args.q = la.qkv.row(seg.begin);
            args.q_stride = 3 * d;
            args.k = args.q + d;
            args.v = args.q + 2 * d;
            args.kv_stride = 3 * d;
            args.mask = seg.mask.bits.data();
            args.key_order = seg.key_order.empty() ? nullptr : seg.key_order.data();
            T* dq = dqkv.row(seg.begin);
            kn::attention_backward(args, la.probs[s].data(), datt.row(seg.begin), d, dq, dq + d, dq + 2 * d);
        }
        kn::matmul_at_b(la.a1.data.data(), dqkv.data.data(), g + o.w_qkv, R, d, 3 * d);
        kn::column_sums(dqkv.data.data(), g + o.b_qkv, R, 3 * d);
        da.resize(R, d);
        kn::matmul_a_bt(dqkv.data.data(), p(o.w_qkv), da.data.data(), R, 3 * d, d);
        if (uses_adaln()) {
            modulate_backward(da, la.z1, la.mod, 0, d, dz, dmod);
        } else {
            dz = da;
        }
        affine_backward(dz, la.xhat1, p(o.ln1_g), g + o.ln1_g, g + o.ln1_b, dxhat);
        dx = dx_mid;
        kn::layernorm_backward(dxhat.data.data(), la.xhat1.data.data(), la.rstd1.data(), dx.data.data(), R, d);

        if (uses_adaln()) {
            kn::matmul_at_b(A.cond.data.data(), dmod.data.data(), g + o.ada_w, R, P, 4 * d);
            kn::column_sums(dmod.data.data(), g + o.ada_b, R, 4 * d);
            kn::matmul_a_bt(dmod.data.data(), p(o.ada_w), dcond.data.data(), R, 4 * d, P, true);
        }
        if (per_block_target(l)) {
            T* table = g + o.tgt_emb;
            for (int r = 0; r < R; ++r) {
                T* e = table + static_cast<std::size_t>(rows.target_positions[static_cast<std::size_t>(r)]) * d;
                const T* src = dx.row(r);
                for (int j = 0; j < d; ++j) {
                    e[j] += src[j];
                }
            }
        }
    }

    for (int r = 0; r < R; ++r) {
        const T* src = dx.row(r);
        const int tok = rows.tokens[static_cast<std::size_t>(r)];
        if (tok == kBos) {
            for (int j = 0; j < d; ++j) {
                g[bos_emb_ + static_cast<std::size_t>(j)] += src[j];
            }
            continue;
        }
        T* te = g + tok_emb_ + static_cast<std::size_t>(tok) * d;
        T* pe = g + pos_emb_ + static_cast<std::size_t>(rows.input_positions[static_cast<std::size_t>(r)]) * d;
        for (int j = 0; j < d; ++j) {
            te[j] += src[j];
            pe[j] += src[j];
        }
    }
    if (uses_adaln()) {
        for (int r = 0; r < R; ++r) {
            T* e = g + ada_tgt_emb_ + static_cast<std::size_t>(rows.target_positions[static_cast<std::size_t>(r)]) * P;
            const T* c = A.cond_pre.row(r);
            const T* gc = dcond.row(r);
            for (int j = 0; j < P; ++j) {
                const T s = sigmoid(c[j]);
                e[j] += gc[j] * s * (T(1) + c[j] * (T(1) - s));
            }
        }
    }
}

template class BasicTransformer<float>;
template class BasicTransformer<double>;

namespace {

constexpr char kCkptMagic[8] = {'A', 'O', 'A', 'R', 'C', 'K', 'P', 'T'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const ParameterLayout lay = make_layout(ckpt.config);
    if (lay.total() != ckpt.params.size()) {
        throw std::invalid_argument("checkpoint parameters do not match the config layout");
    }
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : lay.tensors()) {
        tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset * sizeof(float)}});
    }
    nlohmann::json header = {{"config", ckpt.config.to_json()},
                             {"step", ckpt.step},
                             {"ema_decay", ckpt.ema_decay ? nlohmann::json(*ckpt.ema_decay) : nlohmann::json(nullptr)},
                             {"extra", ckpt.extra},
                             {"tensors", tensors}};
    const std::string text = header.dump();
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw IoError("cannot write " + tmp.string());
        }
        out.write(kCkptMagic, 8);
        const std::uint64_t len = text.size();
        unsigned char lb[8];
        for (int i = 0; i < 8; ++i) {
            lb[i] = static_cast<unsigned char>(len >> (8 * i));
        }
        out.write(reinterpret_cast<const char*>(lb), 8);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        static_assert(sizeof(float) == 4);
        std::vector<unsigned char> buf(ckpt.params.size() * 4);
        for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, &ckpt.params[i], 4);
            for (int b = 0; b < 4; ++b) {
                buf[i * 4 + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
            }
        }
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!out) {
            throw IoError("failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    char magic[8];
    unsigned char lb[8];
    if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kCkptMagic) || !in.read(reinterpret_cast<char*>(lb), 8)) {
        throw IoError("not a checkpoint: " + path.string());
    }
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) {
        len |= static_cast<std::uint64_t>(lb[i]) << (8 * i);
    }
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
        throw IoError("truncated checkpoint header: " + path.string());
    }
    Checkpoint c;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
        c.config = ModelConfig::from_json(header.at("config"));
        c.step = header.at("step").get<std::int64_t>();
        if (!header.at("ema_decay").is_null()) {
            c.ema_decay = header["ema_decay"].get<double>();
        }
        c.extra = header.value("extra", nlohmann::json::object());
    } catch (const std::exception& e) {
        throw IoError("bad checkpoint header in " + path.string() + ": " + e.what());
    }
    const ParameterLayout lay = make_layout(c.config);
    const auto& manifest = header.at("tensors");
    if (manifest.size() != lay.tensors().size()) {
        throw IoError("checkpoint tensor manifest does not match its config");
    }
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        const auto& t = lay.tensors()[i];
        if (manifest[i].at("name") != t.name || manifest[i].at("shape").get<std::vector<int>>() != t.shape ||
            manifest[i].at("offset").get<std::size_t>() != t.offset * sizeof(float)) {
            throw IoError("checkpoint tensor '" + t.name + "' does not match its config");
        }
    }
    std::vector<unsigned char> buf(lay.total() * 4);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
        throw IoError("truncated checkpoint data: " + path.string());
    }
    c.params.resize(lay.total());
    for (std::size_t i = 0; i < c.params.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(buf[i * 4 + static_cast<std::size_t>(b)]) << (8 * b);
        }
        std::memcpy(&c.params[i], &bits, 4);
    }
    return c;
}

Transformer model_from_checkpoint(const Checkpoint& ckpt) { return Transformer(ckpt.config, ckpt.params); }

}  // namespace aoar
