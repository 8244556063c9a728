#pragma once

#include <optional>
#include <string>
#include <vector>

#include "garnet/params.hpp"
#include "garnet/tensor.hpp"

namespace garnet {

// Channel plan and input geometry for the reconstruction network. The desk
// preset is the tested default; tiny shrinks everything for fast gradient
// checks; paper_scale records the 224x224 constants without being exercised
// at that size.
struct ModelConfig {
    std::string preset = "desk";

    int image_size = 32; // H == W, >= 8, divisible by 4
    int stem_ch = 8;
    int early_ch = 8; // C_e: early residual feature, the embedding tap point
    int mid_ch = 16;
    int pre_ch = 32;
    int seed_ch = 32; // C0: volumetric seed channels at 2^3
    int c1 = 16;      // first decoder block output at 4^3
    int d2_mid = 8;
    int c4 = 4; // last decoder feature channels at 32^3
    std::vector<int> postmerge_ch = {16, 8, 4, 2, 1};
    int imb_dim = 5;
    std::vector<int> imb_hidden = {32, 16};
    int refiner_ch1 = 8;
    int refiner_ch2 = 16;
    double binarize_threshold = 0.3;

    int feature_ch() const { return c4 + 1; } // C_f: concat of last two decoder layers

    static ModelConfig desk();
    static ModelConfig tiny();
    static ModelConfig paper_scale();
    static ModelConfig from_preset(const std::string& name);

    void validate() const;

    // Flat numeric encoding carried inside checkpoints so a model can be
    // reopened from the file alone.
    std::vector<double> encode() const;
    static ModelConfig decode(const std::vector<double>& v);
};

// Pure reinterpretation bridging 2D features to the 3D decoder:
// (2*C0, H, W) -> (C0, 2, H, W) under (c,h,w) -> (c mod C0, c div C0, h, w).
Tensor reshape_to_volume(const Tensor& flat);

struct EncodedView {
    Tensor early; // (C_e, H/2, W/2)
    Tensor seed;  // (C0, 2, 2, 2)
};

struct BranchFeature {
    Tensor f_dprime; // (C_f, 32^3)
    Tensor v;        // (1, 32^3) in (0,1)
};

struct ScoreMapSet {
    std::vector<Tensor> maps; // per-cell sums across maps equal 1
    bool empty() const { return maps.empty(); }
    size_t size() const { return maps.size(); }
};

struct GenerateResult {
    Tensor coarse;                       // V_c (1, 32^3)
    std::vector<BranchFeature> branches; // one per input view
    ScoreMapSet post_scores;             // empty when fusion was bypassed (n == 1)
};

class Encoder {
public:
    Encoder(const ModelConfig& cfg, ParamStore& params, Rng& rng);
    EncodedView encode(const Tensor& image) const;

private:
    const ModelConfig& cfg_;
    Tensor stem_w_, stem_b_;
    Tensor a1_w_, a1_b_, a2_w_, a2_b_, askip_w_, askip_b_;
    Tensor b1_w_, b1_b_, b2_w_, b2_b_, bskip_w_, bskip_b_;
    Tensor pre_w_, pre_b_;
    Tensor mix_w_, mix_b_;
    Tensor head_w_, head_b_;
};

class Generator {
public:
    Generator(const ModelConfig& cfg, ParamStore& params, Rng& rng);

    Tensor decode_stage1(const Tensor& seed) const;
    ScoreMapSet premerge_scores(const std::vector<Tensor>& f_primes) const;
    Tensor fuse_initial(const std::vector<Tensor>& f_primes, const ScoreMapSet& scores) const;
    BranchFeature decode_stage2(const Tensor& f_prime) const;
    ScoreMapSet postmerge_scores(const std::vector<Tensor>& branch_features, const Tensor& global_feature) const;
    Tensor fuse_volumes(const std::vector<Tensor>& volumes, const ScoreMapSet& scores) const;

    GenerateResult generate(const std::vector<EncodedView>& views) const;

private:
    std::vector<Tensor> premerge_logits(const std::vector<Tensor>& f_primes) const;

    const ModelConfig& cfg_;
    Tensor d1_w_, d1_b_;
    Tensor ch_w_, ch_b_; // shared 1D conv over the channel axis
    Tensor sp_w_, sp_b_; // 3D conv over pooled spatial maps
    Tensor t1_w_, t1_b_, t2_w_, t2_b_, t3_w_, t3_b_, head_w_, head_b_;
    std::vector<Tensor> pm_w_, pm_b_; // post-merger conv stack
};

class Refiner {
public:
    Refiner(const ModelConfig& cfg, ParamStore& params, Rng& rng);
    Tensor refine(const Tensor& coarse) const;

private:
    const ModelConfig& cfg_;
    Tensor down1_w_, down1_b_, down2_w_, down2_b_;
    Tensor r1a_w_, r1a_b_, r1b_w_, r1b_b_, r2a_w_, r2a_b_, r2b_w_, r2b_b_;
    Tensor up1_w_, up1_b_, mid_w_, mid_b_;
    Tensor up2_w_, up2_b_, mid2_w_, mid2_b_;
    Tensor head_w_, head_b_; // zero-initialized: identity at init
};

// Small embedding head mapping the early encoder feature of a view to a
// d-dimensional point whose distances track score-map dissimilarity.
class ImbHead {
public:
    ImbHead(const ModelConfig& cfg, ParamStore& params, Rng& rng);
    Tensor embed(const Tensor& early_feature) const;

private:
    const ModelConfig& cfg_;
    Tensor fc1_w_, fc1_b_, fc2_w_, fc2_b_, fc3_w_, fc3_b_;
};

struct ForwardResult {
    Tensor coarse; // V_c
    Tensor refined; // V
    ScoreMapSet post_scores;
};

class Model {
public:
    Model(ModelConfig cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    const Encoder& encoder() const { return *encoder_; }
    const Generator& generator() const { return *generator_; }
    const Refiner& refiner() const { return *refiner_; }
    const ImbHead& imb() const { return *imb_; }

    EncodedView encode_view(const Tensor& image) const { return encoder_->encode(image); }
    GenerateResult generate(const std::vector<Tensor>& images) const;
    ForwardResult forward(const std::vector<Tensor>& images) const;

    // Parameter-group predicate used by training: the fusion modules are the
    // two mergers, structurally skipped for single-view input.
    static bool is_fusion_param(const std::string& name);

    void save_checkpoint(const std::string& path) const;
    static Model load_checkpoint(const std::string& path);
    void load_parameters(const std::string& path); // shapes must match

private:
    ModelConfig cfg_;
    ParamStore params_;
    std::unique_ptr<Encoder> encoder_;
    std::unique_ptr<Generator> generator_;
    std::unique_ptr<Refiner> refiner_;
    std::unique_ptr<ImbHead> imb_;
};

void validate_view_image(const Tensor& image, int expected_size);

} // namespace garnet
