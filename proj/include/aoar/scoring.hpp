#pragma once

// Batched scoring of many small forwards: segments are queued with the rows
// whose nll should be charged to a sample, and flushed in large batches.
// Accumulation follows queue order, so totals do not depend on chunking.

#include <cstdint>
#include <vector>

#include "aoar/model.hpp"

namespace aoar {

struct ScoredRow {
    int row = 0;  // local row inside the segment
    int target = 0;
    double weight = 1.0;
    std::size_t sample = 0;
};

struct SampleLoss;

class ScoreQueue {
public:
    ScoreQueue(const SequenceModel& model, std::vector<SampleLoss>& samples, int max_rows = 4096);
    ~ScoreQueue();

    void add(const DecoderRows& rows, AttentionMask mask, std::vector<int> key_order, std::vector<ScoredRow> scored);
    void flush();

private:
    const SequenceModel& model_;
    std::vector<SampleLoss>& samples_;
    int max_rows_;
    Batch batch_;
    std::vector<ScoredRow> pending_;  // rows shifted to batch coordinates
};

}  // namespace aoar
