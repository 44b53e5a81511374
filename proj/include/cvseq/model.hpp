#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cvseq/nn.hpp"

namespace cvseq {

struct ModelConfig {
    int d = 256;        // token dim after channel reduction
    int c = 1024;       // extractor channel dim
    int n = 32;         // satellite grid side; n*n tokens / classification cells
    int m = 4;          // SAB/CAB fusion rounds
    int num_heads = 8;
    int t = 6;          // sequence length
    int sat_px = 256;   // model input side for the satellite view
    int ground_downsample = 8;
    int ffn_hidden = 0;              // 0 -> 2*d
    std::string extractor = "identity";  // "identity" | "conv"

    int ffn_width() const { return ffn_hidden > 0 ? ffn_hidden : 2 * d; }
    double cell_px() const { return static_cast<double>(sat_px) / n; }
    void validate() const;
};

// Contract: ground image -> [C x H/8 x W/8]; satellite image -> [C x N x N].
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual Tensor extract_ground(const Tensor& img) = 0;
    virtual Tensor extract_satellite(const Tensor& img) = 0;
    virtual void collect(const std::string& prefix, ParamList& out) const {}
    virtual bool trainable() const { return false; }
};

// Pass-through embedder for precomputed feature grids: satellite input is a
// [C x N x N] grid, a ground frame is a single [C] feature vector.
class IdentityFeatureExtractor : public FeatureExtractor {
public:
    IdentityFeatureExtractor(int c, int n) : c_(c), n_(n) {}
    Tensor extract_ground(const Tensor& img) override;
    Tensor extract_satellite(const Tensor& img) override;

private:
    int c_ = 0, n_ = 0;
};

// Desk-scale replacement for the paper-scale backbone: three stride-2
// convolutions (k4 s2 p1), each spatial side maps to floor(side/2).
class ConvFeatureExtractor : public FeatureExtractor {
public:
    ConvFeatureExtractor(int in_channels, int c, Rng& rng);
    Tensor extract_ground(const Tensor& img) override;
    Tensor extract_satellite(const Tensor& img) override;
    void collect(const std::string& prefix, ParamList& out) const override;
    bool trainable() const override { return true; }

    static int out_side(int in_side) { return in_side / 2 / 2 / 2; }

private:
    Tensor forward(const Tensor& img) const;
    Tensor w1, b1, w2, b2, w3, b3;
};

struct GridPrediction {
    Tensor logits;   // {n*n}
    Tensor offsets;  // {1,2}, sigmoid outputs in (0,1)
};

struct HiddenState {
    Tensor tokens;  // [n*n x d]
    int step_index = 0;
};

// k = argmax logits (ties -> lowest index); pixel = (cell + offset) * cell_px
std::pair<double, double> decode(const GridPrediction& pred, const ModelConfig& cfg);
std::pair<double, double> decode_cell(int cell, double off_x, double off_y,
                                      const ModelConfig& cfg);

struct EncodedTarget {
    int cell = 0;
    double off_x = 0.0;
    double off_y = 0.0;
};

// inverse of decode on cell + fractional offsets; throws on out-of-patch pixels
EncodedTarget encode_target(double u, double v, const ModelConfig& cfg);

// Current fusion feature queries the previous hidden state (Eq.-style
// projections, then multi-head attention with 2-D positional encodings on
// queries and keys), the extracted context is added back to the fusion
// feature and refined by a feed-forward residual.
class TemporalAttention {
public:
    TemporalAttention() = default;
    TemporalAttention(int dim, int num_heads, int ffn_hidden, Rng& rng);

    Tensor forward(const Tensor& fusion, const Tensor& hidden, const Tensor& pe) const;
    void collect(const std::string& prefix, ParamList& out) const;

    // zeroes the value path and FFN output so the module is exactly the identity
    void zero_for_baseline();

    Linear proj_q, proj_k, proj_v;
    MultiHeadAttention mha;
    FeedForward ffn;
    LayerNorm norm_f, norm_h, norm2;
};

struct FusionRound {
    SelfAttentionBlock sab_ground;
    SelfAttentionBlock sab_sat;
    CrossAttentionBlock cab;
};

class LocalizationModel {
public:
    LocalizationModel(const ModelConfig& cfg, std::shared_ptr<FeatureExtractor> ground_extractor,
                      std::shared_ptr<FeatureExtractor> sat_extractor, uint64_t seed,
                      bool use_tam);

    // flatten both views to token lists and reduce channels C -> D
    std::pair<Tensor, Tensor> extract_and_project(const Tensor& ground_img,
                                                  const Tensor& sat_img);

    // M x (SAB ground, SAB sat, CAB sat<-ground), then one closing CAB
    Tensor fuse(const Tensor& ground_tokens, const Tensor& sat_tokens) const;

    GridPrediction predict_heads(const Tensor& feat) const;

    struct StepResult {
        GridPrediction pred;
        HiddenState hidden;
    };
    // t == 0 must come without a hidden state; t > 0 must carry the state
    // from exactly the previous step
    StepResult step(const Tensor& ground_img, const Tensor& sat_img,
                    const std::optional<HiddenState>& prev, int t);

    ParamList parameters() const;  // deterministic registration order
    ParamList trainable_parameters(bool freeze_extractor) const;

    bool use_tam() const { return use_tam_; }
    const ModelConfig& config() const { return cfg_; }
    FeatureExtractor& ground_extractor() { return *ground_ex_; }
    TemporalAttention& tam() { return tam_; }

    const Tensor& satellite_pe() const { return pe_sat_; }
    const Tensor& ground_pe(int length) const;  // cached per token count

private:
    ModelConfig cfg_;
    std::shared_ptr<FeatureExtractor> ground_ex_, sat_ex_;
    bool use_tam_ = true;

    Linear projection_;  // shared C -> D reduction for both views
    std::vector<FusionRound> rounds_;
    CrossAttentionBlock final_cab_;
    TemporalAttention tam_;
    Linear cls1_, cls2_, cls3_;  // per-token scoring MLP
    Linear reg1_, reg2_, reg3_;  // pooled offset MLP
    Tensor pe_sat_;
    mutable std::map<int, Tensor> pe_ground_cache_;

    Tensor project_ground(const Tensor& ground_img);

    // Per-sequence reuse of the ground-independent satellite branch
    // (projection and the round-0 satellite self-attention). Valid while the
    // same satellite tensor is stepped and its tape has not been consumed by
    // a backward pass; gradients simply accumulate through the shared
    // subgraph, which matches the recomputed sum exactly.
    Tensor satellite_branch(const Tensor& sat_img);
    Tensor fuse_from(const Tensor& ground_tokens, const Tensor& sat_tokens,
                     bool round0_done) const;
    std::weak_ptr<TensorNode> sat_cache_key_;
    std::vector<double> sat_cache_data_;
    Tensor sat_tokens_cache_;
    Tensor sat_round0_cache_;
};

}  // namespace cvseq
