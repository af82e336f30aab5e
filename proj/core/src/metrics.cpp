#include "ddpmcd/metrics.hpp"

#include <json.hpp>

#include <cstdio>

namespace ddpmcd::metrics {

ConfusionCounts& ConfusionCounts::merge(const ConfusionCounts& other) {
    tp += other.tp;
    fp += other.fp;
    fn += other.fn;
    tn += other.tn;
    return *this;
}

void accumulate(ConfusionCounts& counts, const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape())
        throw DimensionError("metrics::accumulate: shape mismatch " + shape_str(pred.shape()) +
                             " vs " + shape_str(gt.shape()));
    if (pred.dtype() != DType::f32 || gt.dtype() != DType::f32)
        throw ContractError("metrics::accumulate: expected f32 masks");
    auto pv = pred.data<float>();
    auto gv = gt.data<float>();
    ConfusionCounts local;
    for (size_t i = 0; i < pv.size(); ++i) {
        float p = pv[i], g = gv[i];
        if ((p != 0.0f && p != 1.0f) || (g != 0.0f && g != 1.0f))
            throw DataError("metrics::accumulate: non-binary value at index " + std::to_string(i) +
                            " (pred=" + std::to_string(p) + ", gt=" + std::to_string(g) + ")");
        if (p == 1.0f && g == 1.0f)
            ++local.tp;
        else if (p == 1.0f)
            ++local.fp;
        else if (g == 1.0f)
            ++local.fn;
        else
            ++local.tn;
    }
    counts.merge(local);
}

Scores scores(const ConfusionCounts& c) {
    if (c.total() == 0) throw ContractError("metrics::scores: empty counts");
    Scores s;
    auto ratio = [](uint64_t num, uint64_t den) {
        return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    s.precision = ratio(c.tp, c.tp + c.fp);
    s.recall = ratio(c.tp, c.tp + c.fn);
    s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    s.iou = ratio(c.tp, c.tp + c.fp + c.fn);
    s.oa = ratio(c.tp + c.tn, c.total());
    s.undefined_as_zero = c.tp == 0 && c.fp == 0 && c.fn == 0;
    return s;
}

std::string to_json(const ConfusionCounts& c) {
    Scores s = scores(c);
    nlohmann::json j;
    j["f1"] = s.f1;
    j["iou"] = s.iou;
    j["oa"] = s.oa;
    j["precision"] = s.precision;
    j["recall"] = s.recall;
    j["undefined_as_zero"] = s.undefined_as_zero;
    j["counts"] = {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"tn", c.tn}};
    return j.dump();
}

std::string table_header(const std::string& label_col) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-18s %8s %8s %8s", label_col.c_str(), "F1", "IoU", "OA");
    return buf;
}

std::string format_row(const std::string& label, const Scores& s) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-18s %8.2f %8.2f %8.2f", label.c_str(), s.f1 * 100.0,
                  s.iou * 100.0, s.oa * 100.0);
    return buf;
}

}  // namespace ddpmcd::metrics
