#pragma once

// Character-level corpus handling: vocabulary, fixed-length block packing, the
// packed-dataset container, and seeded batch iteration.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace aoar {

inline constexpr std::string_view kMaskSymbol = "[MASK]";

struct Vocabulary {
    // One entry per token id. Character tokens hold a single byte; the mask
    // token is stored as kMaskSymbol and always comes last.
    std::vector<std::string> symbols;
    int mask_id = -1;

    int size() const { return static_cast<int>(symbols.size()); }

    // Throws std::invalid_argument on a character outside the vocabulary.
    std::vector<int> encode(std::string_view text) const;
    // Mask tokens decode as '_'.
    std::string decode(std::span<const int> ids) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

    bool operator==(const Vocabulary&) const = default;
};

// Every distinct byte of `text` sorted by code point, then the mask token.
// Throws std::invalid_argument("empty corpus") on empty input.
Vocabulary build_vocab(std::string_view text);

enum class Split : std::uint32_t { train = 0, validation = 1 };

std::string_view to_string(Split s);

struct PackedDataset {
    int ctx_len = 0;
    Split split = Split::train;
    std::uint64_t corpus_hash = 0;
    std::vector<std::int32_t> tokens;  // block i occupies [i * ctx_len, (i + 1) * ctx_len)

    std::size_t size() const { return ctx_len > 0 ? tokens.size() / static_cast<std::size_t>(ctx_len) : 0; }
    bool empty() const { return size() == 0; }
    std::span<const std::int32_t> block(std::size_t i) const {
        return {tokens.data() + i * static_cast<std::size_t>(ctx_len), static_cast<std::size_t>(ctx_len)};
    }
    std::vector<int> block_ids(std::size_t i) const {
        auto b = block(i);
        return {b.begin(), b.end()};
    }
};

// Consecutive non-overlapping windows of ctx_len tokens; a trailing remainder
// shorter than ctx_len is dropped. Throws std::invalid_argument when
// ctx_len < 2.
PackedDataset pack_blocks(std::span<const int> token_ids, int ctx_len);

// Fixed held-out tail: the last ceil(fraction * B) blocks become validation
// (at least one when B >= 2).
struct DatasetSplits {
    PackedDataset train;
    PackedDataset validation;
};
DatasetSplits split_train_validation(const PackedDataset& all, double validation_fraction = 0.05);

std::uint64_t fnv1a64(std::string_view bytes);

// Binary container, little endian:
//   char[8]  magic "AOARPAK1"
//   u32      ctx_len
//   u32      split (0 train, 1 validation)
//   u64      block count
//   u64      corpus hash (FNV-1a 64 of the raw corpus bytes)
//   u32[count * ctx_len] token ids
void write_packed(const std::filesystem::path& path, const PackedDataset& ds);
PackedDataset read_packed(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);

// Seeded shuffled batches over block indices. Each epoch visits every block
// exactly once; the order of epoch e depends only on (seed, e). The stream is
// endless: next() rolls over into the following epoch.
class BatchIterator {
public:
    BatchIterator(std::size_t block_count, std::size_t batch_size, std::uint64_t seed);

    std::vector<std::size_t> next();
    std::size_t epoch() const { return epoch_; }
    std::size_t batches_per_epoch() const;

private:
    void reshuffle();

    std::size_t block_count_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> order_;
};

}  // namespace aoar
