#include "garnet/training.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

namespace garnet {

void TrainConfig::validate() const {
    if (strategy != "dynamic" && strategy != "faset" && strategy != "pix2vox")
        throw contract_error("unknown training strategy: " + strategy);
    if (n_max < 1) throw contract_error("n_max must be >= 1");
    if (strategy == "faset" && n_max < 2)
        throw contract_error("faset needs n_max >= 2: its second stage is multi-view only");
    if (epochs < 0 || bce_only_epochs < 0 || bce_only_epochs > epochs)
        throw contract_error("need 0 <= bce_only_epochs <= epochs");
    if (batch_size < 1) throw contract_error("batch_size must be >= 1");
    if (!(base_lr > 0.0) || !(fusion_lr_multiplier > 0.0)) throw contract_error("learning rates must be positive");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0))
        throw contract_error("adam betas must lie in (0,1)");
    if (threads < 1) throw contract_error("threads must be >= 1");
}

TrainConfig TrainConfig::paper_scale() {
    TrainConfig c;
    c.epochs = 200;
    c.bce_only_epochs = 140;
    c.batch_size = 32;
    c.lr_milestones = {40, 60, 80, 100, 140, 180};
    return c;
}

int sample_view_count(Rng& rng, int n_max) {
    if (n_max < 1) throw contract_error("sample_view_count: n_max must be >= 1");
    return rng.uniform_int(1, n_max);
}

double lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw contract_error("lr_at: epoch must be >= 0");
    int halvings = 0;
    for (int m : cfg.lr_milestones)
        if (m <= epoch) ++halvings;
    return cfg.base_lr * std::pow(0.5, halvings);
}

void adam_step(ParamStore& params, const GradMap& grads, AdamState& state, double lr,
               double fusion_lr_multiplier, double beta1, double beta2, double eps, ParamFilter filter) {
    for (const auto& [name, param] : params.items()) {
        auto found = grads.find(param.impl());
        if (found == grads.end()) continue; // structurally untouched this step
        const bool fusion = Model::is_fusion_param(name);
        if (filter == ParamFilter::kFusionOnly && !fusion) continue;
        const std::vector<double>& g = found->second;

        AdamState::Slot& slot = state.slots[param.impl()];
        if (slot.m.empty()) {
            slot.m.assign(g.size(), 0.0);
            slot.v.assign(g.size(), 0.0);
        }
        slot.step += 1;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(slot.step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(slot.step));
        const double step_lr = fusion ? lr * fusion_lr_multiplier : lr;

        Tensor p = param;
        auto data = p.mutable_data();
        for (size_t i = 0; i < g.size(); ++i) {
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g[i];
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            data[i] -= step_lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

double train_step(Model& model, const std::vector<TrainBatchObject>& batch, LossPhase phase,
                  const LossWeights& weights, AdamState& opt, double lr, const TrainConfig& cfg,
                  ParamFilter filter) {
    if (batch.empty()) throw contract_error("train_step: empty batch");
    for (const TrainBatchObject& b : batch) {
        if (b.view_indices.empty()) throw contract_error("train_step: zero views requested");
        if (b.view_indices.size() > b.object->views.size())
            throw contract_error("train_step: object " + b.object->id + " has only " +
                                 std::to_string(b.object->views.size()) + " views");
    }

    const size_t count = batch.size();
    const double inv = 1.0 / static_cast<double>(count);
    std::vector<GradMap> worker_grads(count);
    std::vector<double> losses(count, 0.0);

    auto process = [&](size_t i) {
        const TrainBatchObject& item = batch[i];
        std::vector<Tensor> images;
        images.reserve(item.view_indices.size());
        for (int vi : item.view_indices) images.push_back(item.object->views[static_cast<size_t>(vi)]);
        ForwardResult fwd = model.forward(images);
        Tensor gt = grid_to_tensor(item.object->gt);
        Tensor loss = total_loss(fwd.coarse, fwd.refined, gt, weights, phase);
        losses[i] = loss.item();
        backward(scale(loss, inv), worker_grads[i]);
    };

    const int threads = std::min<int>(cfg.threads, static_cast<int>(count));
    if (threads <= 1) {
        for (size_t i = 0; i < count; ++i) process(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(threads));
        for (int t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) process(i);
            });
        for (std::thread& t : pool) t.join();
    }

    // ordered reduction: batch order fixes the floating-point result
    GradMap total;
    for (size_t i = 0; i < count; ++i)
        for (auto& [leaf, g] : worker_grads[i]) {
            auto& dst = total[leaf];
            if (dst.empty())
                dst = std::move(g);
            else
                for (size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
        }

    adam_step(model.params(), total, opt, lr, cfg.fusion_lr_multiplier, cfg.adam_beta1, cfg.adam_beta2,
              cfg.adam_eps, filter);

    double mean = 0.0;
    for (double l : losses) mean += l;
    return mean * inv;
}

TrainResult run_training(Model& model, const Manifest& manifest, const TrainConfig& cfg,
                         const std::string& log_path) {
    cfg.validate();
    const auto records = manifest.with_split("train");
    if (records.empty()) throw contract_error("run_training: manifest has no train records");

    std::vector<LoadedObject> objects;
    objects.reserve(records.size());
    for (const ManifestRecord& r : records) objects.push_back(load_object(manifest, r));

    Rng seed_rng(cfg.seed);
    Rng order_rng = seed_rng.stream("data-order");
    Rng count_rng = seed_rng.stream("view-count");
    Rng choice_rng = seed_rng.stream("view-choice");

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, std::ios::trunc);
        if (!log) throw io_error("cannot open for writing: " + log_path);
        log << "# epoch, iter, n_views, phase, loss\n";
    }

    AdamState opt;
    TrainResult result;
    const int stage1_epochs = cfg.epochs / 2; // stage split for the two-stage baselines

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(objects.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);

        const double lr = lr_at(epoch, cfg);
        const LossPhase phase = epoch < cfg.bce_only_epochs ? LossPhase::kBceOnly : LossPhase::kFull;
        const bool stage2 = epoch >= stage1_epochs;

        int epoch_n_fixed = 0;
        if (cfg.strategy == "pix2vox")
            epoch_n_fixed = stage2 ? sample_view_count(count_rng, cfg.n_max) : 1;

        const size_t iters = (objects.size() + cfg.batch_size - 1) / static_cast<size_t>(cfg.batch_size);
        for (size_t it = 0; it < iters; ++it) {
            int n_views;
            ParamFilter filter = ParamFilter::kAll;
            if (cfg.strategy == "dynamic") {
                n_views = sample_view_count(count_rng, cfg.n_max);
            } else if (cfg.strategy == "faset") {
                if (!stage2) {
                    n_views = 1;
                } else {
                    n_views = count_rng.uniform_int(2, cfg.n_max);
                    filter = ParamFilter::kFusionOnly;
                }
            } else { // pix2vox: per-epoch draw in stage 2, single view before
                n_views = epoch_n_fixed;
            }

            std::vector<TrainBatchObject> batch;
            for (size_t k = it * cfg.batch_size; k < std::min(objects.size(), (it + 1) * cfg.batch_size);
                 ++k) {
                const LoadedObject& obj = objects[order[k]];
                if (static_cast<size_t>(n_views) > obj.views.size())
                    throw contract_error("object " + obj.id + " has fewer than " + std::to_string(n_views) +
                                         " views");
                TrainBatchObject item;
                item.object = &obj;
                item.view_indices =
                    choice_rng.sample_without_replacement(static_cast<int>(obj.views.size()), n_views);
                batch.push_back(std::move(item));
            }

            const double loss = train_step(model, batch, phase, cfg.loss_weights, opt, lr, cfg, filter);
            if (!std::isfinite(loss))
                throw numeric_error("non-finite loss at epoch " + std::to_string(epoch) + " iteration " +
                                    std::to_string(it));

            TrainLogEntry entry{epoch, static_cast<int>(it), n_views, phase, loss};
            result.log.push_back(entry);
            if (log.is_open()) {
                log << epoch << ", " << it << ", " << n_views << ", "
                    << (phase == LossPhase::kBceOnly ? "bce_only" : "full") << ", " << loss << "\n";
            }
        }
        if (log.is_open()) log.flush();
    }
    return result;
}

} // namespace garnet
