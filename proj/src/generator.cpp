#include "garnet/model.hpp"

namespace garnet {

namespace {

std::pair<Tensor, Tensor> conv3d_params(ParamStore& params, const std::string& name, int co, int ci, int k,
                                        Rng& rng) {
    Tensor w = params.create(name + ".w", {co, ci, k, k, k});
    kaiming_uniform_(w, static_cast<int64_t>(ci) * k * k * k, rng);
    Tensor b = params.create(name + ".b", {co});
    return {w, b};
}

} // namespace

Generator::Generator(const ModelConfig& cfg, ParamStore& params, Rng& rng) : cfg_(cfg) {
    std::tie(d1_w_, d1_b_) = conv3d_params(params, "decoder.d1", cfg.c1, cfg.seed_ch, 4, rng);

    // pre-merger: a shared 1D conv over the channel axis plus one 3D conv
    // over the pooled two-channel spatial map
    ch_w_ = params.create("premerger.channel.w", {1, 1, 3});
    kaiming_uniform_(ch_w_, 3, rng);
    ch_b_ = params.create("premerger.channel.b", {1});
    std::tie(sp_w_, sp_b_) = conv3d_params(params, "premerger.spatial", 1, 2, 3, rng);

    std::tie(t1_w_, t1_b_) = conv3d_params(params, "decoder.d2.t1", cfg.d2_mid, cfg.c1, 4, rng);
    std::tie(t2_w_, t2_b_) = conv3d_params(params, "decoder.d2.t2", cfg.c4, cfg.d2_mid, 4, rng);
    std::tie(t3_w_, t3_b_) = conv3d_params(params, "decoder.d2.t3", cfg.c4, cfg.c4, 4, rng);
    std::tie(head_w_, head_b_) = conv3d_params(params, "decoder.d2.head", 1, cfg.c4, 1, rng);

    int in_ch = 2 * cfg.feature_ch();
    for (size_t i = 0; i < cfg.postmerge_ch.size(); ++i) {
        auto [w, b] = conv3d_params(params, "postmerger.conv" + std::to_string(i), cfg.postmerge_ch[i], in_ch,
                                    3, rng);
        pm_w_.push_back(w);
        pm_b_.push_back(b);
        in_ch = cfg.postmerge_ch[i];
    }
}

Tensor Generator::decode_stage1(const Tensor& seed) const {
    const Shape expect{cfg_.seed_ch, 2, 2, 2};
    if (seed.shape() != expect)
        throw contract_error("decode_stage1: seed must be " + shape_str(expect) + ", got " +
                             shape_str(seed.shape()));
    return relu(conv(seed, d1_w_, d1_b_, {.dims = 3, .stride = 2, .pad = 1, .transposed = true}));
}

std::vector<Tensor> Generator::premerge_logits(const std::vector<Tensor>& f_primes) const {
    std::vector<Tensor> logits;
    logits.reserve(f_primes.size());
    const int c1 = f_primes[0].shape()[0];
    for (const Tensor& f : f_primes) {
        Tensor gm = global_pool(f, PoolKind::kMax);
        Tensor ga = global_pool(f, PoolKind::kAvg);
        const ConvSpec c1d{.dims = 1, .stride = 1, .pad = 1};
        Tensor cm = conv(reshape(gm, {1, c1}), ch_w_, ch_b_, c1d);
        Tensor ca = conv(reshape(ga, {1, c1}), ch_w_, ch_b_, c1d);
        Tensor ch_vec = reshape(add(cm, ca), {c1});

        Tensor sm = channel_pool(f, PoolKind::kMax);
        Tensor sa = channel_pool(f, PoolKind::kAvg);
        Tensor sp = conv(concat({sm, sa}, 0), sp_w_, sp_b_, {.dims = 3, .stride = 1, .pad = 1});

        logits.push_back(add(broadcast_channels(ch_vec, f.shape()), broadcast_spatial(sp, c1)));
    }
    return logits;
}

ScoreMapSet Generator::premerge_scores(const std::vector<Tensor>& f_primes) const {
    if (f_primes.size() < 2)
        throw contract_error("premerge_scores: needs at least two branches (single view bypasses fusion)");
    for (const Tensor& f : f_primes)
        if (f.shape() != f_primes[0].shape()) throw contract_error("premerge_scores: branch shape mismatch");
    return {softmax_over_branches(premerge_logits(f_primes))};
}

Tensor Generator::fuse_initial(const std::vector<Tensor>& f_primes, const ScoreMapSet& scores) const {
    if (f_primes.size() != scores.size()) throw contract_error("fuse_initial: branch/score count mismatch");
    if (f_primes.empty()) throw contract_error("fuse_initial: empty branch list");
    Tensor acc = mul(scores.maps[0], f_primes[0]);
    for (size_t i = 1; i < f_primes.size(); ++i) acc = add(acc, mul(scores.maps[i], f_primes[i]));
    return acc;
}

BranchFeature Generator::decode_stage2(const Tensor& f_prime) const {
    const Shape expect{cfg_.c1, 4, 4, 4};
    if (f_prime.shape() != expect)
        throw contract_error("decode_stage2: input must be " + shape_str(expect) + ", got " +
                             shape_str(f_prime.shape()));
    const ConvSpec up{.dims = 3, .stride = 2, .pad = 1, .transposed = true};
    Tensor t = relu(conv(f_prime, t1_w_, t1_b_, up));
    t = relu(conv(t, t2_w_, t2_b_, up));
    t = relu(conv(t, t3_w_, t3_b_, up));
    Tensor v = sigmoid(conv(t, head_w_, head_b_, {.dims = 3, .stride = 1, .pad = 0}));
    return {concat({t, v}, 0), v};
}

ScoreMapSet Generator::postmerge_scores(const std::vector<Tensor>& branch_features,
                                        const Tensor& global_feature) const {
    if (branch_features.size() < 2)
        throw contract_error("postmerge_scores: needs at least two branches (single view bypasses fusion)");
    for (const Tensor& f : branch_features)
        if (f.shape() != global_feature.shape())
            throw contract_error("postmerge_scores: branch/global shape mismatch");
    std::vector<Tensor> logits;
    logits.reserve(branch_features.size());
    const ConvSpec k3{.dims = 3, .stride = 1, .pad = 1};
    for (const Tensor& f : branch_features) {
        Tensor h = concat({f, sub(global_feature, f)}, 0);
        for (size_t i = 0; i < pm_w_.size(); ++i) {
            h = conv(h, pm_w_[i], pm_b_[i], k3);
            if (i + 1 < pm_w_.size()) h = leaky_relu(h, 0.2);
        }
        logits.push_back(h);
    }
    return {softmax_over_branches(logits)};
}

Tensor Generator::fuse_volumes(const std::vector<Tensor>& volumes, const ScoreMapSet& scores) const {
    if (volumes.size() != scores.size()) throw contract_error("fuse_volumes: volume/score count mismatch");
    if (volumes.empty()) throw contract_error("fuse_volumes: empty volume list");
    Tensor acc = mul(scores.maps[0], volumes[0]);
    for (size_t i = 1; i < volumes.size(); ++i) acc = add(acc, mul(scores.maps[i], volumes[i]));
    return acc;
}

GenerateResult Generator::generate(const std::vector<EncodedView>& views) const {
    if (views.empty()) throw contract_error("generate: empty view list");
    std::vector<Tensor> f_primes;
    f_primes.reserve(views.size());
    for (const EncodedView& v : views) f_primes.push_back(decode_stage1(v.seed));

    if (views.size() == 1) {
        // single view: propagation does not go through the fusion modules
        BranchFeature bf = decode_stage2(f_primes[0]);
        return {bf.v, {bf}, {}};
    }

    ScoreMapSet pre = premerge_scores(f_primes);
    Tensor fused = fuse_initial(f_primes, pre);

    std::vector<BranchFeature> branches;
    branches.reserve(views.size() + 1);
    for (const Tensor& f : f_primes) branches.push_back(decode_stage2(f));
    BranchFeature global_branch = decode_stage2(fused); // its volume is discarded

    std::vector<Tensor> features, volumes;
    for (const BranchFeature& b : branches) {
        features.push_back(b.f_dprime);
        volumes.push_back(b.v);
    }
    ScoreMapSet post = postmerge_scores(features, global_branch.f_dprime);
    Tensor coarse = fuse_volumes(volumes, post);
    return {coarse, std::move(branches), std::move(post)};
}

} // namespace garnet
