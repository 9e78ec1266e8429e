#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "scd/tape.hpp"

namespace scd {

// Learnable tensors by name; std::map keeps iteration deterministic for
// initialization, checkpoints and gradient application.
using ParamStore = std::map<std::string, Tensor4>;

struct DecoderConfig {
    int num_classes = 5;  // semantic head channels: class 0 = no-change + K classes
    std::array<int, 4> encoder_widths = {8, 16, 24, 32};
    int decoder_width = 16;
    int num_blocks = 3;
    int cbam_reduction = 4;
    bool use_cagm = true;  // ablation: gated blend replaced by plain addition

    void validate() const;
};

// He-normal conv kernels (variance 2/fan_in), zero biases; the layout and
// creation order are fixed, so the store is a pure function of (cfg, seed).
ParamStore init_model_params(const DecoderConfig& cfg, std::uint64_t seed);

// The (pre-change, post-change, change) trio flowing between decoder blocks.
struct FeatureTriplet {
    NodeId a = -1;
    NodeId b = -1;
    NodeId c = -1;
};

// Per-scale (F_A, F_B) pairs, strides 4/8/16/32.
struct MultiScaleFeatures {
    std::array<std::pair<NodeId, NodeId>, 4> scales;
};

// Binds ParamStore entries to tape leaves, memoized by name: branches that
// share weights (the siamese A/B paths) resolve to the same leaf node.
class ParamBinder {
public:
    ParamBinder(Tape& tape, const ParamStore& params) : tape_(tape), params_(params) {}

    NodeId leaf(const std::string& name);
    // Convolution from `<prefix>.w` / `<prefix>.b`.
    NodeId conv(NodeId x, const std::string& prefix, int stride, int padding);
    Tape& tape() { return tape_; }

private:
    Tape& tape_;
    const ParamStore& params_;
    std::map<std::string, NodeId> bound_;
};

// Siamese strided conv stack standing in for the pre-trained backbone;
// both dates run through identical weights. H and W must be divisible by 32.
MultiScaleFeatures toy_encoder(ParamBinder& pb, NodeId image_a, NodeId image_b,
                               const DecoderConfig& cfg);

// Channel attention (shared MLP over GAP and GMP) followed by spatial
// attention (7x7 conv over the channel mean/max maps).
NodeId cbam(ParamBinder& pb, NodeId f, const std::string& prefix);

// CBAM followed by a 1x1 compression to the decoder width.
NodeId feature_compress(ParamBinder& pb, NodeId f, const std::string& prefix);

// z_A/z_B via a shared compress path, z_C from |z_A - z_B| via its own.
FeatureTriplet shallow_branch(ParamBinder& pb, NodeId f_a, NodeId f_b,
                              const std::string& sem_prefix, const std::string& chg_prefix);

// DoubleConv on both semantic paths (shared weights), change refinement from
// the concatenated trio, then x2 upsampling of all three.
FeatureTriplet deep_branch(ParamBinder& pb, const FeatureTriplet& prev,
                           const std::string& prefix);

struct CagmResult {
    FeatureTriplet fused;
    NodeId w_z = -1;  // shallow-feature weight map, (n,1,h,w)
    NodeId w_h = -1;  // deep-feature weight map
};

// Change-aware gating: local and global weight maps from the concatenated
// change features, blended as (1 + W_global) * W_local and applied to both
// triplets before per-path fusion convolutions. With use_cagm=false the blend
// degenerates to plain addition (no weight maps are produced).
CagmResult cagm(ParamBinder& pb, const FeatureTriplet& deep, const FeatureTriplet& shallow,
                const std::string& prefix, bool use_cagm);

struct ForwardNodes {
    NodeId sem_logits_a = -1;
    NodeId sem_logits_b = -1;
    NodeId change_logit = -1;
    NodeId sem_feats_a = -1;  // final-resolution pre-classifier features
    NodeId sem_feats_b = -1;
    std::vector<std::pair<NodeId, NodeId>> gate_maps;  // (w_z, w_h) per block
};

ForwardNodes cg_decoder_forward(ParamBinder& pb, NodeId image_a, NodeId image_b,
                                const DecoderConfig& cfg);

// Plain-tensor prediction bundle for inference-side consumers.
struct ScdPrediction {
    Tensor4 sem_logits_a;
    Tensor4 sem_logits_b;
    Tensor4 change_logit;
    std::vector<std::pair<Tensor4, Tensor4>> gate_maps;
};

ScdPrediction predict(const ParamStore& params, const Tensor4& image_a, const Tensor4& image_b,
                      const DecoderConfig& cfg);

struct ScdMaps {
    LabelImage label_a;
    LabelImage label_b;
    LabelImage change_mask;
};

// Thresholded change mask plus per-date class maps. Changed pixels take the
// argmax over the semantic classes 1..K (ties to the lowest index); unchanged
// pixels take the reserved class 0.
ScdMaps predict_scd_map(const ScdPrediction& pred, double threshold);

}  // namespace scd
