#include "garnet/model.hpp"

#include <bit>
#include <cmath>

#include "garnet/checkpoint.hpp"

namespace garnet {

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
    ModelConfig c;
    c.preset = "tiny";
    c.image_size = 8;
    c.stem_ch = 4;
    c.early_ch = 4;
    c.mid_ch = 6;
    c.pre_ch = 8;
    c.seed_ch = 8;
    c.c1 = 6;
    c.d2_mid = 4;
    c.c4 = 2;
    c.postmerge_ch = {4, 3, 2, 2, 1};
    c.imb_dim = 3;
    c.imb_hidden = {8, 6};
    c.refiner_ch1 = 4;
    c.refiner_ch2 = 6;
    return c;
}

ModelConfig ModelConfig::paper_scale() {
    // Constants for the full-size configuration; stored, not exercised here.
    ModelConfig c;
    c.preset = "paper";
    c.image_size = 224;
    c.stem_ch = 64;
    c.early_ch = 96;
    c.mid_ch = 128;
    c.pre_ch = 256;
    c.seed_ch = 256;
    c.c1 = 128;
    c.d2_mid = 64;
    c.c4 = 8;
    c.postmerge_ch = {16, 8, 4, 2, 1};
    c.imb_dim = 5;
    c.imb_hidden = {64, 32};
    c.refiner_ch1 = 32;
    c.refiner_ch2 = 64;
    return c;
}

ModelConfig ModelConfig::from_preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "tiny") return tiny();
    if (name == "paper") return paper_scale();
    throw contract_error("unknown model preset: " + name);
}

void ModelConfig::validate() const {
    if (image_size < 8 || image_size % 4 != 0)
        throw contract_error("image_size must be >= 8 and divisible by 4");
    if (stem_ch < 1 || early_ch < 1 || mid_ch < 1 || pre_ch < 1 || seed_ch < 1 || c1 < 1 || d2_mid < 1 ||
        c4 < 1 || imb_dim < 1 || refiner_ch1 < 2 || refiner_ch2 < 1)
        throw contract_error("all channel extents must be positive");
    if (postmerge_ch.size() != 5 || postmerge_ch.back() != 1)
        throw contract_error("post-merger must be five conv layers ending in one channel");
    if (imb_hidden.size() != 2) throw contract_error("embedding head expects two hidden layers");
    if (!(binarize_threshold > 0.0 && binarize_threshold < 1.0))
        throw contract_error("binarize threshold must lie in (0,1)");
}

std::vector<double> ModelConfig::encode() const {
    std::vector<double> v;
    v.push_back(1.0); // layout version
    const double preset_id = preset == "desk" ? 0.0 : preset == "tiny" ? 1.0 : preset == "paper" ? 2.0 : 3.0;
    v.push_back(preset_id);
    v.insert(v.end(), {static_cast<double>(image_size), static_cast<double>(stem_ch),
                       static_cast<double>(early_ch), static_cast<double>(mid_ch), static_cast<double>(pre_ch),
                       static_cast<double>(seed_ch), static_cast<double>(c1), static_cast<double>(d2_mid),
                       static_cast<double>(c4)});
    v.push_back(static_cast<double>(postmerge_ch.size()));
    for (int c : postmerge_ch) v.push_back(static_cast<double>(c));
    v.push_back(static_cast<double>(imb_dim));
    v.push_back(static_cast<double>(imb_hidden.size()));
    for (int c : imb_hidden) v.push_back(static_cast<double>(c));
    v.push_back(static_cast<double>(refiner_ch1));
    v.push_back(static_cast<double>(refiner_ch2));
    v.push_back(binarize_threshold);
    return v;
}

ModelConfig ModelConfig::decode(const std::vector<double>& v) {
    size_t i = 0;
    auto next = [&]() -> double {
        if (i >= v.size()) throw format_error("model config record truncated");
        return v[i++];
    };
    if (static_cast<int>(next()) != 1) throw format_error("unsupported model config version");
    ModelConfig c;
    const int preset_id = static_cast<int>(next());
    c.preset = preset_id == 0 ? "desk" : preset_id == 1 ? "tiny" : preset_id == 2 ? "paper" : "custom";
    c.image_size = static_cast<int>(next());
    c.stem_ch = static_cast<int>(next());
    c.early_ch = static_cast<int>(next());
    c.mid_ch = static_cast<int>(next());
    c.pre_ch = static_cast<int>(next());
    c.seed_ch = static_cast<int>(next());
    c.c1 = static_cast<int>(next());
    c.d2_mid = static_cast<int>(next());
    c.c4 = static_cast<int>(next());
    c.postmerge_ch.resize(static_cast<size_t>(next()));
    for (int& x : c.postmerge_ch) x = static_cast<int>(next());
    c.imb_dim = static_cast<int>(next());
    c.imb_hidden.resize(static_cast<size_t>(next()));
    for (int& x : c.imb_hidden) x = static_cast<int>(next());
    c.refiner_ch1 = static_cast<int>(next());
    c.refiner_ch2 = static_cast<int>(next());
    c.binarize_threshold = next();
    c.validate();
    return c;
}

void validate_view_image(const Tensor& image, int expected_size) {
    if (image.shape().size() != 3 || image.shape()[0] != 3)
        throw contract_error("view image must be (3,H,W), got " + shape_str(image.shape()));
    const int h = image.shape()[1], w = image.shape()[2];
    if (h != expected_size || w != expected_size)
        throw contract_error("view image must be " + std::to_string(expected_size) + "x" +
                             std::to_string(expected_size) + ", got " + shape_str(image.shape()));
    if (h < 8 || h % 4 || w < 8 || w % 4) throw contract_error("view extents must be >= 8 and divisible by 4");
    for (double v : image.data())
        if (!(v >= 0.0 && v <= 1.0)) throw contract_error("view image values must lie in [0,1]");
}

Model::Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = Rng(seed).stream("model-init");
    encoder_ = std::make_unique<Encoder>(cfg_, params_, rng);
    generator_ = std::make_unique<Generator>(cfg_, params_, rng);
    refiner_ = std::make_unique<Refiner>(cfg_, params_, rng);
    imb_ = std::make_unique<ImbHead>(cfg_, params_, rng);
}

GenerateResult Model::generate(const std::vector<Tensor>& images) const {
    std::vector<EncodedView> views;
    views.reserve(images.size());
    for (const Tensor& img : images) views.push_back(encoder_->encode(img));
    return generator_->generate(views);
}

ForwardResult Model::forward(const std::vector<Tensor>& images) const {
    GenerateResult g = generate(images);
    Tensor refined = refiner_->refine(g.coarse);
    return {g.coarse, refined, std::move(g.post_scores)};
}

bool Model::is_fusion_param(const std::string& name) {
    return name.rfind("premerger.", 0) == 0 || name.rfind("postmerger.", 0) == 0;
}

void Model::save_checkpoint(const std::string& path) const {
    std::vector<std::pair<std::string, Tensor>> items;
    const std::vector<double> meta = cfg_.encode();
    items.emplace_back("meta.config",
                       Tensor::from_data({static_cast<int>(meta.size())}, std::vector<double>(meta)));
    for (const auto& [name, t] : params_.items()) items.emplace_back(name, t);
    save_named_tensors(path, items);
}

Model Model::load_checkpoint(const std::string& path) {
    auto items = load_named_tensors(path);
    if (items.empty() || items[0].first != "meta.config")
        throw format_error("checkpoint lacks the leading meta.config record: " + path);
    const auto& meta = items[0].second;
    ModelConfig cfg = ModelConfig::decode({meta.data().begin(), meta.data().end()});
    Model model(cfg, /*seed=*/0);
    size_t filled = 0;
    for (size_t i = 1; i < items.size(); ++i) {
        const auto& [name, t] = items[i];
        if (!model.params_.has(name)) throw format_error("checkpoint has unknown parameter " + name);
        Tensor& dst = model.params_.at(name);
        if (dst.shape() != t.shape())
            throw format_error("checkpoint parameter " + name + " has shape " + shape_str(t.shape()) +
                               ", expected " + shape_str(dst.shape()));
        auto out = dst.mutable_data();
        std::copy(t.data().begin(), t.data().end(), out.begin());
        ++filled;
    }
    if (filled != model.params_.size())
        throw format_error("checkpoint is missing parameters: has " + std::to_string(filled) + ", expected " +
                           std::to_string(model.params_.size()));
    return model;
}

void Model::load_parameters(const std::string& path) {
    Model loaded = load_checkpoint(path);
    if (loaded.cfg_.encode() != cfg_.encode())
        throw contract_error("checkpoint model configuration does not match this model");
    for (const auto& [name, t] : loaded.params_.items()) {
        auto out = params_.at(name).mutable_data();
        std::copy(t.data().begin(), t.data().end(), out.begin());
    }
}

Tensor reshape_to_volume(const Tensor& flat) {
    if (flat.shape().size() != 3) throw contract_error("reshape_to_volume: (C,H,W) input required");
    const int c = flat.shape()[0], h = flat.shape()[1], w = flat.shape()[2];
    if (c % 2 != 0) throw contract_error("reshape_to_volume: channel extent must be even");
    // (c,h,w) -> (c mod C0, c div C0, h, w): the lower channel half becomes
    // depth slab 0, the upper half depth slab 1.
    const int c0 = c / 2;
    Tensor lo = reshape(slice_axis0(flat, 0, c0), {c0, 1, h, w});
    Tensor hi = reshape(slice_axis0(flat, c0, c), {c0, 1, h, w});
    return concat({lo, hi}, 1);
}

} // namespace garnet
