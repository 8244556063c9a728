#pragma once

#include <cstdint>
#include <vector>

#include "garnet/tensor.hpp"

namespace garnet {

struct LossWeights {
    double alpha = 10.0; // coarse-volume BCE
    double beta = 10.0;  // fine-volume BCE
    double gamma = 0.5;  // recall term
    double mu = 0.5;     // precision term
};

enum class LossPhase { kBceOnly, kFull };

// Mean binary cross-entropy over cells; probabilities are clamped to
// [1e-7, 1-1e-7] before the logs.
Tensor bce_loss(const Tensor& p, const Tensor& gt);

// 1 - sum(p*gt) / (sum(gt) + 1e-8). Requires a non-empty ground truth.
Tensor recall_loss(const Tensor& p, const Tensor& gt);

// 1 - sum(p*gt) / (sum(p) + 1e-8); differentiable through the denominator.
Tensor precision_loss(const Tensor& p, const Tensor& gt);

// alpha*BCE(Vc) + beta*BCE(V) [+ gamma*recall(V) + mu*precision(V)].
// The shape terms supervise the fine volume only.
Tensor total_loss(const Tensor& coarse, const Tensor& fine, const Tensor& gt, const LossWeights& w,
                  LossPhase phase);

struct BinaryGrid {
    int d = 0, h = 0, w = 0;
    std::vector<uint8_t> cells; // row-major, 0 or 1

    int64_t size() const { return static_cast<int64_t>(d) * h * w; }
    bool at(int z, int y, int x) const { return cells[static_cast<size_t>((z * h + y) * w + x)] != 0; }
    int64_t count_occupied() const;
    bool operator==(const BinaryGrid&) const = default;
};

// Cell occupied iff p > threshold (strict).
BinaryGrid binarize(const Tensor& p, double threshold = 0.3);

// Ground-truth grid as a constant tensor for the loss functions.
Tensor grid_to_tensor(const BinaryGrid& g, bool with_channel_dim = true);

// |a AND b| / |a OR b|; 1.0 when both grids are empty.
double iou(const BinaryGrid& a, const BinaryGrid& b);

// Surface F-score at a distance threshold given in unit-cube coordinates.
// Surface cells are occupied cells with an empty 6-neighbour (the grid
// boundary counts as empty); cell centers are mapped into the unit cube.
double fscore_1pct(const BinaryGrid& a, const BinaryGrid& b, double tau = 0.01);

} // namespace garnet
