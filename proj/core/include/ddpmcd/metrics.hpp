#pragma once

#include <cstdint>
#include <string>

#include "ddpmcd/tensor.hpp"

namespace ddpmcd::metrics {

// Binary confusion counts with the change class as positive. Mergeable, so
// shards can be accumulated independently and combined.
struct ConfusionCounts {
    uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& merge(const ConfusionCounts& other);
    bool operator==(const ConfusionCounts&) const = default;
};

// Adds pixel-wise counts for one prediction/ground-truth pair; both [H,W]
// with values in {0,1} (DataError otherwise).
void accumulate(ConfusionCounts& counts, const Tensor& pred, const Tensor& gt);

struct Scores {
    double precision = 0, recall = 0, f1 = 0, iou = 0, oa = 0;
    // True when tp = fp = fn = 0: the change class is absent from both
    // prediction and ground truth, so precision/recall/f1/iou are undefined
    // and reported as zero rather than one.
    bool undefined_as_zero = false;
};

// ContractError when no pixels have been accumulated. 0/0 ratios report as 0.
Scores scores(const ConfusionCounts& counts);

// {"f1":..,"iou":..,"oa":..,"counts":{..}} with fractional values.
std::string to_json(const ConfusionCounts& counts);
// Percent formatting with 2 decimals, one metric per column.
std::string format_row(const std::string& label, const Scores& s);
std::string table_header(const std::string& label_col);

}  // namespace ddpmcd::metrics
