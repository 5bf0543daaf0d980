#include "aoar/scoring.hpp"

#include "aoar/objectives.hpp"

namespace aoar {

ScoreQueue::ScoreQueue(const SequenceModel& model, std::vector<SampleLoss>& samples, int max_rows)
    : model_(model), samples_(samples), max_rows_(max_rows) {}

ScoreQueue::~ScoreQueue() {
    // Flushing may throw; callers flush explicitly on the success path.
}

void ScoreQueue::add(const DecoderRows& rows, AttentionMask mask, std::vector<int> key_order,
                     std::vector<ScoredRow> scored) {
    if (batch_.size() > 0 && batch_.size() + rows.size() > max_rows_) {
        flush();
    }
    const int base = batch_.size();
    batch_.add(rows, std::move(mask), std::move(key_order));
    for (auto& s : scored) {
        s.row += base;
        pending_.push_back(s);
    }
}

void ScoreQueue::flush() {
    if (batch_.size() == 0) {
        return;
    }
    const Matrix<float> logits = model_.forward(batch_);
    const int V = logits.cols;
    for (const auto& s : pending_) {
        const double nll = token_nll(logits.row(s.row), V, s.target);
        samples_[s.sample].nll += s.weight * nll;
    }
    batch_ = Batch{};
    pending_.clear();
}

}  // namespace aoar
