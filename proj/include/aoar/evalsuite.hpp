#pragma once

// Perplexity reports: left-to-right, any-order, context-order ensembles and
// generation perplexity under a scorer, plus CSV, table and SVG output.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "aoar/model.hpp"
#include "aoar/objectives.hpp"
#include "aoar/rng.hpp"

namespace aoar {

enum class PplMode { l2r, any_order, any_order_ensemble, generation };

struct PplReport {
    std::string dataset;
    PplMode mode = PplMode::l2r;
    int members = 1;  // ensemble size M
    double nll = 0.0;
    double ppl = 0.0;
    double std_error = 0.0;
    std::int64_t num_tokens = 0;
    std::string model_id;

    std::string mode_label() const;
    // Any-order values are upper bounds on the true nll.
    bool is_bound() const { return mode == PplMode::any_order || mode == PplMode::any_order_ensemble; }
};

PplReport make_report(const LossEstimate& e, std::string dataset, PplMode mode, int members, std::string model_id);

// Decoder identity-order perplexity. The encoder family throws.
PplReport l2r_ppl(const SequenceModel& model, std::span<const Block> blocks, const std::string& dataset = "validation",
                  const std::string& model_id = "");

// Decoder: uniform orders. Encoder: the same orders scored through masked forwards.
PplReport anyorder_ppl(const SequenceModel& model, std::span<const Block> blocks, int num_orders, std::uint64_t seed,
                       const std::string& dataset = "validation", const std::string& model_id = "");

struct EnsembleConfig {
    int members = 1;
    bool include_identity = true;
    std::uint64_t seed = 0;

    void validate() const;
};

// The M context orders used for one conditional: member 0 is the given order
// when include_identity, the rest are uniform reorderings.
std::vector<std::vector<int>> ensemble_orders(std::span<const int> context, const EnsembleConfig& cfg, Rng& rng);

// Mean over members of p(x_target | reordered context); every context token
// keeps its original position. `block` supplies the context tokens.
std::vector<double> ensemble_conditional(const SequenceModel& model, std::span<const int> block,
                                         std::span<const int> context, int target, const EnsembleConfig& cfg, Rng& rng);

// Any-order chain estimate with every conditional replaced by its ensemble.
// Order j of block b draws from derive_seed(seed, {b, j}) exactly as
// anyorder_ppl, so M = 1 with the identity member reproduces it; member
// reorderings use an independent stream keyed by cfg.seed.
PplReport ensemble_ppl(const SequenceModel& model, std::span<const Block> blocks, int num_orders,
                       const EnsembleConfig& cfg, std::uint64_t seed, const std::string& dataset = "validation",
                       const std::string& model_id = "");

// Left-to-right perplexity of generated samples under the scorer. Throws
// std::invalid_argument when the scorer vocabulary differs from `vocab_size`
// or a sample holds an id outside it.
PplReport generation_ppl(std::span<const std::vector<int>> samples, const SequenceModel& scorer, int vocab_size,
                         const std::string& dataset = "generated", const std::string& model_id = "");

std::string reports_csv(std::span<const PplReport> reports);
std::string reports_table(std::span<const PplReport> reports);

struct SeriesPoint {
    double x = 0.0;
    double y = 0.0;
};

// Static line chart, log-scaled x axis.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           std::span<const SeriesPoint> points);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace aoar
