#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "garnet/data.hpp"
#include "garnet/losses.hpp"
#include "garnet/model.hpp"

namespace garnet {

struct TrainConfig {
    std::string strategy = "dynamic"; // dynamic | faset | pix2vox
    int n_max = 3;
    int epochs = 60;
    int bce_only_epochs = 40;
    int batch_size = 8;
    double base_lr = 1e-3;
    std::vector<int> lr_milestones = {12, 18, 24, 30, 42, 54};
    double fusion_lr_multiplier = 2.0; // the mergers train less often, so slightly hotter
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 1;
    LossWeights loss_weights;
    int threads = 1;

    void validate() const;
    static TrainConfig desk() { return {}; }
    static TrainConfig paper_scale();
};

// Uniform on {1..n_max}, drawn fresh per iteration.
int sample_view_count(Rng& rng, int n_max);

// base_lr * 0.5^(number of milestones <= epoch).
double lr_at(int epoch, const TrainConfig& cfg);

struct AdamState {
    struct Slot {
        std::vector<double> m, v;
        int64_t step = 0;
    };
    std::unordered_map<const TensorImpl*, Slot> slots;
};

enum class ParamFilter { kAll, kFusionOnly };

// One Adam update over every parameter with a fresh gradient in `grads`.
// Parameters without a gradient this step stay bitwise untouched.
void adam_step(ParamStore& params, const GradMap& grads, AdamState& state, double lr,
               double fusion_lr_multiplier, double beta1, double beta2, double eps,
               ParamFilter filter = ParamFilter::kAll);

struct TrainBatchObject {
    const LoadedObject* object = nullptr;
    std::vector<int> view_indices;
};

// Forward + backward + one optimizer step over the batch; returns the mean
// loss. Gradients reduce across objects in batch order, so results do not
// depend on the number of worker threads.
double train_step(Model& model, const std::vector<TrainBatchObject>& batch, LossPhase phase,
                  const LossWeights& weights, AdamState& opt, double lr, const TrainConfig& cfg,
                  ParamFilter filter = ParamFilter::kAll);

struct TrainLogEntry {
    int epoch = 0, iter = 0, n_views = 0;
    LossPhase phase = LossPhase::kBceOnly;
    double loss = 0.0;
};

struct TrainResult {
    std::vector<TrainLogEntry> log;
};

// Full training loop over the manifest's train split. Writes the log as
// line-delimited `epoch, iter, n_views, phase, loss` records when log_path
// is non-empty. Raises numeric_error on a non-finite loss.
TrainResult run_training(Model& model, const Manifest& manifest, const TrainConfig& cfg,
                         const std::string& log_path = "");

} // namespace garnet
