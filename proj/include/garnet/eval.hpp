#pragma once

#include <functional>
#include <string>
#include <vector>

#include "garnet/data.hpp"
#include "garnet/model.hpp"

namespace garnet {

struct EvalRecord {
    std::string object_id;
    int n_views = 0;
    double iou = 0.0;
    double fscore = 0.0;
};

struct EvalSummary {
    int n_views = 0;
    double mean_iou = 0.0;
    double mean_fscore = 0.0;
    int64_t objects = 0;
};

// Anything that maps a view list to refined occupancy probabilities (1,32^3).
using Predictor = std::function<Tensor(const std::vector<Tensor>&)>;

Predictor model_predictor(const Model& model);

// Evaluates every object of the split at each requested view count. View
// subsets are nested prefixes of one seeded per-object permutation, so a
// larger count always extends the smaller one. Deterministic; parallel over
// objects with ordered aggregation.
std::vector<EvalRecord> evaluate_split(const Manifest& manifest, const std::string& split,
                                       const Predictor& predictor, const std::vector<int>& view_counts,
                                       uint64_t seed, double threshold, int threads);

std::vector<EvalSummary> summarize(const std::vector<EvalRecord>& records);

// Line-delimited `object_id, n_views, iou, fscore` records with trailing
// per-count mean comment lines.
void write_metrics(const std::string& path, const std::vector<EvalRecord>& records,
                   const std::vector<EvalSummary>& summaries);

} // namespace garnet
