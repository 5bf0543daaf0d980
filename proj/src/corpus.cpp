#include "aoar/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "aoar/errors.hpp"
#include "aoar/rng.hpp"

namespace aoar {

namespace {

constexpr char kPackMagic[8] = {'A', 'O', 'A', 'R', 'P', 'A', 'K', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
    put_u32(out, static_cast<std::uint32_t>(v));
    put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw IoError("truncated packed dataset");
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& in) {
    const std::uint64_t lo = get_u32(in);
    const std::uint64_t hi = get_u32(in);
    return lo | (hi << 32);
}

}  // namespace

std::vector<int> Vocabulary::encode(std::string_view text) const {
    std::array<int, 256> lookup;
    lookup.fill(-1);
    for (int i = 0; i < size(); ++i) {
        if (i != mask_id && symbols[static_cast<std::size_t>(i)].size() == 1) {
            lookup[static_cast<unsigned char>(symbols[static_cast<std::size_t>(i)][0])] = i;
        }
    }
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        const int id = lookup[c];
        if (id < 0) {
            throw std::invalid_argument("character outside vocabulary: code " + std::to_string(c));
        }
        ids.push_back(id);
    }
    return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= size()) {
            throw std::invalid_argument("token id out of range: " + std::to_string(id));
        }
        out += id == mask_id ? std::string("_") : symbols[static_cast<std::size_t>(id)];
    }
    return out;
}

nlohmann::json Vocabulary::to_json() const { return {{"symbols", symbols}, {"mask_id", mask_id}}; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    Vocabulary v;
    v.symbols = j.at("symbols").get<std::vector<std::string>>();
    v.mask_id = j.at("mask_id").get<int>();
    if (v.mask_id < 0 || v.mask_id >= v.size()) {
        throw std::invalid_argument("vocabulary mask_id out of range");
    }
    return v;
}

Vocabulary build_vocab(std::string_view text) {
    if (text.empty()) {
        throw std::invalid_argument("empty corpus");
    }
    std::array<bool, 256> seen{};
    for (unsigned char c : text) {
        seen[c] = true;
    }
    Vocabulary v;
    for (int c = 0; c < 256; ++c) {
        if (seen[static_cast<std::size_t>(c)]) {
            v.symbols.emplace_back(1, static_cast<char>(c));
        }
    }
    v.mask_id = v.size();
    v.symbols.emplace_back(kMaskSymbol);
    return v;
}

std::string_view to_string(Split s) { return s == Split::train ? "train" : "validation"; }

PackedDataset pack_blocks(std::span<const int> token_ids, int ctx_len) {
    if (ctx_len < 2) {
        throw std::invalid_argument("ctx_len must be at least 2");
    }
    PackedDataset ds;
    ds.ctx_len = ctx_len;
    const std::size_t count = token_ids.size() / static_cast<std::size_t>(ctx_len);
    ds.tokens.assign(token_ids.begin(), token_ids.begin() + static_cast<std::ptrdiff_t>(count * ctx_len));
    return ds;
}

DatasetSplits split_train_validation(const PackedDataset& all, double validation_fraction) {
    const std::size_t blocks = all.size();
    std::size_t held = static_cast<std::size_t>(std::ceil(validation_fraction * static_cast<double>(blocks)));
    if (blocks >= 2) {
        held = std::clamp<std::size_t>(held, 1, blocks - 1);
    } else {
        held = 0;
    }
    const std::size_t cut = (blocks - held) * static_cast<std::size_t>(all.ctx_len);
    DatasetSplits s;
    s.train.ctx_len = s.validation.ctx_len = all.ctx_len;
    s.train.corpus_hash = s.validation.corpus_hash = all.corpus_hash;
    s.train.split = Split::train;
    s.validation.split = Split::validation;
    s.train.tokens.assign(all.tokens.begin(), all.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
    s.validation.tokens.assign(all.tokens.begin() + static_cast<std::ptrdiff_t>(cut), all.tokens.end());
    return s;
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void write_packed(const std::filesystem::path& path, const PackedDataset& ds) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(kPackMagic, sizeof(kPackMagic));
    put_u32(out, static_cast<std::uint32_t>(ds.ctx_len));
    put_u32(out, static_cast<std::uint32_t>(ds.split));
    put_u64(out, ds.size());
    put_u64(out, ds.corpus_hash);
    for (std::int32_t t : ds.tokens) {
        put_u32(out, static_cast<std::uint32_t>(t));
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

PackedDataset read_packed(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    char magic[8];
    if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kPackMagic)) {
        throw IoError("not a packed dataset: " + path.string());
    }
    PackedDataset ds;
    ds.ctx_len = static_cast<int>(get_u32(in));
    ds.split = static_cast<Split>(get_u32(in));
    const std::uint64_t count = get_u64(in);
    ds.corpus_hash = get_u64(in);
    ds.tokens.resize(count * static_cast<std::uint64_t>(ds.ctx_len));
    for (auto& t : ds.tokens) {
        t = static_cast<std::int32_t>(get_u32(in));
    }
    return ds;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

BatchIterator::BatchIterator(std::size_t block_count, std::size_t batch_size, std::uint64_t seed)
    : block_count_(block_count), batch_size_(batch_size), seed_(seed) {
    if (block_count == 0) {
        throw std::invalid_argument("batch iteration over an empty dataset");
    }
    if (batch_size == 0) {
        throw std::invalid_argument("batch_size must be positive");
    }
    reshuffle();
}

std::size_t BatchIterator::batches_per_epoch() const { return (block_count_ + batch_size_ - 1) / batch_size_; }

void BatchIterator::reshuffle() {
    order_.resize(block_count_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, {epoch_}));
    for (std::size_t i = block_count_; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(static_cast<int>(i)));
        std::swap(order_[i - 1], order_[j]);
    }
    cursor_ = 0;
}

std::vector<std::size_t> BatchIterator::next() {
    if (cursor_ >= block_count_) {
        ++epoch_;
        reshuffle();
    }
    const std::size_t end = std::min(block_count_, cursor_ + batch_size_);
    std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                   order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return batch;
}

}  // namespace aoar
