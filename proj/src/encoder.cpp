#include "garnet/model.hpp"

namespace garnet {

namespace {

std::pair<Tensor, Tensor> conv2d_params(ParamStore& params, const std::string& name, int co, int ci, int k,
                                        Rng& rng) {
    Tensor w = params.create(name + ".w", {co, ci, k, k});
    kaiming_uniform_(w, static_cast<int64_t>(ci) * k * k, rng);
    Tensor b = params.create(name + ".b", {co});
    return {w, b};
}

} // namespace

Encoder::Encoder(const ModelConfig& cfg, ParamStore& params, Rng& rng) : cfg_(cfg) {
    std::tie(stem_w_, stem_b_) = conv2d_params(params, "encoder.stem", cfg.stem_ch, 3, 3, rng);
    std::tie(a1_w_, a1_b_) = conv2d_params(params, "encoder.block_a.conv1", cfg.early_ch, cfg.stem_ch, 3, rng);
    std::tie(a2_w_, a2_b_) = conv2d_params(params, "encoder.block_a.conv2", cfg.early_ch, cfg.early_ch, 3, rng);
    std::tie(askip_w_, askip_b_) = conv2d_params(params, "encoder.block_a.skip", cfg.early_ch, cfg.stem_ch, 1, rng);
    std::tie(b1_w_, b1_b_) = conv2d_params(params, "encoder.block_b.conv1", cfg.mid_ch, cfg.early_ch, 3, rng);
    std::tie(b2_w_, b2_b_) = conv2d_params(params, "encoder.block_b.conv2", cfg.mid_ch, cfg.mid_ch, 3, rng);
    std::tie(bskip_w_, bskip_b_) = conv2d_params(params, "encoder.block_b.skip", cfg.mid_ch, cfg.early_ch, 1, rng);
    std::tie(pre_w_, pre_b_) = conv2d_params(params, "encoder.pre", cfg.pre_ch, cfg.mid_ch, 3, rng);
    std::tie(mix_w_, mix_b_) = conv2d_params(params, "encoder.mix", cfg.pre_ch, cfg.pre_ch, 1, rng);
    std::tie(head_w_, head_b_) = conv2d_params(params, "encoder.head", 2 * cfg.seed_ch, cfg.pre_ch, 3, rng);
}

EncodedView Encoder::encode(const Tensor& image) const {
    validate_view_image(image, cfg_.image_size);
    const ConvSpec k3s1{.dims = 2, .stride = 1, .pad = 1};
    const ConvSpec k3s2{.dims = 2, .stride = 2, .pad = 1};
    const ConvSpec k1s1{.dims = 2, .stride = 1, .pad = 0};
    const ConvSpec k1s2{.dims = 2, .stride = 2, .pad = 0};

    Tensor x = relu(conv(image, stem_w_, stem_b_, k3s1));

    // residual block A, stride 2: the early feature other subsystems tap
    Tensor m = relu(conv(x, a1_w_, a1_b_, k3s2));
    m = conv(m, a2_w_, a2_b_, k3s1);
    Tensor early = relu(add(m, conv(x, askip_w_, askip_b_, k1s2)));

    // residual block B, stride 2
    m = relu(conv(early, b1_w_, b1_b_, k3s2));
    m = conv(m, b2_w_, b2_b_, k3s1);
    Tensor y = relu(add(m, conv(early, bskip_w_, bskip_b_, k1s2)));

    y = relu(conv(y, pre_w_, pre_b_, k3s1));
    y = relu(conv(y, mix_w_, mix_b_, k1s1));

    // collapse to a 2x2 map, then widen so the flat feature is (2*C0, 2, 2)
    const int spatial = cfg_.image_size / 4;
    const int k = std::max(1, spatial / 2);
    const int s = std::max(1, spatial - k);
    y = avg_pool2d(y, k, s);
    y = relu(conv(y, head_w_, head_b_, k3s1));

    return {early, reshape_to_volume(y)};
}

} // namespace garnet
