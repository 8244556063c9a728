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

Refiner::Refiner(const ModelConfig& cfg, ParamStore& params, Rng& rng) : cfg_(cfg) {
    const int r1 = cfg.refiner_ch1, r2 = cfg.refiner_ch2, r3 = std::max(1, r1 / 2);
    std::tie(down1_w_, down1_b_) = conv3d_params(params, "refiner.down1", r1, 1, 4, rng);
    std::tie(down2_w_, down2_b_) = conv3d_params(params, "refiner.down2", r2, r1, 4, rng);
    std::tie(r1a_w_, r1a_b_) = conv3d_params(params, "refiner.res1.conv1", r2, r2, 3, rng);
    std::tie(r1b_w_, r1b_b_) = conv3d_params(params, "refiner.res1.conv2", r2, r2, 3, rng);
    std::tie(r2a_w_, r2a_b_) = conv3d_params(params, "refiner.res2.conv1", r2, r2, 3, rng);
    std::tie(r2b_w_, r2b_b_) = conv3d_params(params, "refiner.res2.conv2", r2, r2, 3, rng);
    std::tie(up1_w_, up1_b_) = conv3d_params(params, "refiner.up1", r1, r2, 4, rng);
    std::tie(mid_w_, mid_b_) = conv3d_params(params, "refiner.mid1", r1, 2 * r1, 3, rng);
    std::tie(up2_w_, up2_b_) = conv3d_params(params, "refiner.up2", r3, r1, 4, rng);
    std::tie(mid2_w_, mid2_b_) = conv3d_params(params, "refiner.mid2", r3, r3, 3, rng);
    // zero-initialized head: the refiner is the identity map until trained
    head_w_ = params.create("refiner.head.w", {1, r3, 3, 3, 3});
    head_b_ = params.create("refiner.head.b", {1});
}

Tensor Refiner::refine(const Tensor& coarse) const {
    if (coarse.shape() != Shape{1, 32, 32, 32})
        throw contract_error("refine: input must be (1,32,32,32), got " + shape_str(coarse.shape()));
    const ConvSpec down{.dims = 3, .stride = 2, .pad = 1};
    const ConvSpec up{.dims = 3, .stride = 2, .pad = 1, .transposed = true};
    const ConvSpec k3{.dims = 3, .stride = 1, .pad = 1};

    Tensor d1 = leaky_relu(conv(coarse, down1_w_, down1_b_, down), 0.2);
    Tensor d2 = leaky_relu(conv(d1, down2_w_, down2_b_, down), 0.2);

    Tensor r = d2;
    r = leaky_relu(add(conv(leaky_relu(conv(r, r1a_w_, r1a_b_, k3), 0.2), r1b_w_, r1b_b_, k3), r), 0.2);
    r = leaky_relu(add(conv(leaky_relu(conv(r, r2a_w_, r2a_b_, k3), 0.2), r2b_w_, r2b_b_, k3), r), 0.2);

    Tensor u1 = leaky_relu(conv(r, up1_w_, up1_b_, up), 0.2);
    Tensor m = leaky_relu(conv(concat({u1, d1}, 0), mid_w_, mid_b_, k3), 0.2);
    Tensor u2 = leaky_relu(conv(m, up2_w_, up2_b_, up), 0.2);
    Tensor m2 = leaky_relu(conv(u2, mid2_w_, mid2_b_, k3), 0.2);
    Tensor residual = conv(m2, head_w_, head_b_, k3);

    // long skip in logit space: the network learns a correction on top of
    // the coarse volume
    Tensor pc = clamp(coarse, 1e-6, 1.0 - 1e-6);
    Tensor logits = sub(log(pc), log(add_const(scale(pc, -1.0), 1.0)));
    return sigmoid(add(residual, logits));
}

ImbHead::ImbHead(const ModelConfig& cfg, ParamStore& params, Rng& rng) : cfg_(cfg) {
    const int in = 2 * cfg.early_ch, h1 = cfg.imb_hidden[0], h2 = cfg.imb_hidden[1];
    fc1_w_ = params.create("imb.fc1.w", {h1, in});
    kaiming_uniform_(fc1_w_, in, rng);
    fc1_b_ = params.create("imb.fc1.b", {h1});
    fc2_w_ = params.create("imb.fc2.w", {h2, h1});
    kaiming_uniform_(fc2_w_, h1, rng);
    fc2_b_ = params.create("imb.fc2.b", {h2});
    fc3_w_ = params.create("imb.fc3.w", {cfg.imb_dim, h2});
    kaiming_uniform_(fc3_w_, h2, rng);
    fc3_b_ = params.create("imb.fc3.b", {cfg.imb_dim});
}

Tensor ImbHead::embed(const Tensor& early_feature) const {
    if (early_feature.shape().size() != 3 || early_feature.shape()[0] != cfg_.early_ch)
        throw contract_error("embed: early feature must be (" + std::to_string(cfg_.early_ch) +
                             ",H,W), got " + shape_str(early_feature.shape()));
    Tensor gm = global_pool(early_feature, PoolKind::kMax);
    Tensor ga = global_pool(early_feature, PoolKind::kAvg);
    Tensor x = concat({gm, ga}, 0);
    x = leaky_relu(linear(x, fc1_w_, fc1_b_), 0.2);
    x = leaky_relu(linear(x, fc2_w_, fc2_b_), 0.2);
    return linear(x, fc3_w_, fc3_b_);
}

} // namespace garnet
