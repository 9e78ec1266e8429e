#include "scd/decoder.hpp"

#include <cmath>

#include "scd/rng.hpp"

namespace scd {

void DecoderConfig::validate() const {
    if (num_classes < 2) throw ParamError("DecoderConfig: num_classes must be >= 2");
    for (int w : encoder_widths)
        if (w < 1) throw ParamError("DecoderConfig: encoder widths must be >= 1");
    if (decoder_width < 1) throw ParamError("DecoderConfig: decoder width must be >= 1");
    if (num_blocks != 3)
        throw ParamError("DecoderConfig: the cascade consumes one shallower scale per block; "
                         "4 scales fix num_blocks = 3");
    if (cbam_reduction < 1) throw ParamError("DecoderConfig: cbam_reduction must be >= 1");
}

namespace {

struct ConvSpec {
    std::string prefix;
    int c_out, c_in, kh, kw;
};

// Every conv in creation order; initialization, binding and checkpoints all
// walk the same layout.
std::vector<ConvSpec> model_layout(const DecoderConfig& cfg) {
    const auto& e = cfg.encoder_widths;
    const int d = cfg.decoder_width;
    std::vector<ConvSpec> specs;
    auto fc = [&](const std::string& prefix, int c_in) {
        const int hidden = std::max(1, c_in / cfg.cbam_reduction);
        specs.push_back({prefix + ".cbam.mlp1", hidden, c_in, 1, 1});
        specs.push_back({prefix + ".cbam.mlp2", c_in, hidden, 1, 1});
        specs.push_back({prefix + ".cbam.sp", 1, 2, 7, 7});
        specs.push_back({prefix + ".compress", d, c_in, 1, 1});
    };
    specs.push_back({"enc.s1a", e[0], 3, 3, 3});
    specs.push_back({"enc.s1b", e[0], e[0], 3, 3});
    specs.push_back({"enc.s2", e[1], e[0], 3, 3});
    specs.push_back({"enc.s3", e[2], e[1], 3, 3});
    specs.push_back({"enc.s4", e[3], e[2], 3, 3});
    fc("init.fc_sem", e[3]);
    fc("init.fc_chg", d);
    for (int k = 1; k <= cfg.num_blocks; ++k) {
        const std::string blk = "blk" + std::to_string(k);
        specs.push_back({blk + ".deep_sem.c1", d, d, 3, 3});
        specs.push_back({blk + ".deep_sem.c2", d, d, 3, 3});
        // The change conv ties its h_A and h_B kernel slices (it sees their
        // sum), which keeps the whole change path invariant under date swap.
        specs.push_back({blk + ".deep_chg.c1", d, 2 * d, 3, 3});
        specs.push_back({blk + ".deep_chg.c2", d, d, 3, 3});
        fc(blk + ".fc_sem", e[3 - k]);
        fc(blk + ".fc_chg", d);
        specs.push_back({blk + ".gate.local", 2, 2 * d, 3, 3});
        specs.push_back({blk + ".gate.global", 2, 2 * d, 1, 1});
        specs.push_back({blk + ".fuse_sem", d, d, 3, 3});
        specs.push_back({blk + ".fuse_chg", d, d, 3, 3});
    }
    specs.push_back({"head.sem", cfg.num_classes, d, 1, 1});
    specs.push_back({"head.chg", 1, d, 1, 1});
    return specs;
}

}  // namespace

ParamStore init_model_params(const DecoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ParamStore store;
    for (const ConvSpec& s : model_layout(cfg)) {
        Tensor4 w(s.c_out, s.c_in, s.kh, s.kw);
        const double std = std::sqrt(2.0 / (static_cast<double>(s.c_in) * s.kh * s.kw));
        for (double& v : w.vec()) v = std * rng.normal();
        store.emplace(s.prefix + ".w", std::move(w));
        store.emplace(s.prefix + ".b", Tensor4(1, s.c_out, 1, 1, 0.0));
    }
    return store;
}

NodeId ParamBinder::leaf(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    auto pit = params_.find(name);
    if (pit == params_.end()) throw ParamError("ParamBinder: unknown parameter " + name);
    const NodeId id = tape_.param(name, pit->second);
    bound_.emplace(name, id);
    return id;
}

NodeId ParamBinder::conv(NodeId x, const std::string& prefix, int stride, int padding) {
    return tape_.conv2d(x, leaf(prefix + ".w"), leaf(prefix + ".b"), stride, padding);
}

MultiScaleFeatures toy_encoder(ParamBinder& pb, NodeId image_a, NodeId image_b,
                               const DecoderConfig& cfg) {
    Tape& t = pb.tape();
    const Shape4& sa = t.value(image_a).shape();
    const Shape4& sb = t.value(image_b).shape();
    if (!(sa == sb)) throw ShapeError("toy_encoder: image shapes differ");
    if (sa.c != 3) throw ShapeError("toy_encoder: expected 3-channel images");
    if (sa.h % 32 != 0 || sa.w % 32 != 0)
        throw ShapeError("toy_encoder: H and W must be divisible by 32, got " + sa.str());
    (void)cfg;
    auto stack = [&](NodeId img) {
        std::array<NodeId, 4> scales;
        NodeId x = t.relu(pb.conv(img, "enc.s1a", 2, 1));
        x = t.relu(pb.conv(x, "enc.s1b", 2, 1));
        scales[0] = x;  // stride 4
        x = t.relu(pb.conv(x, "enc.s2", 2, 1));
        scales[1] = x;  // stride 8
        x = t.relu(pb.conv(x, "enc.s3", 2, 1));
        scales[2] = x;  // stride 16
        x = t.relu(pb.conv(x, "enc.s4", 2, 1));
        scales[3] = x;  // stride 32
        return scales;
    };
    const auto fa = stack(image_a);
    const auto fb = stack(image_b);
    MultiScaleFeatures out;
    for (int s = 0; s < 4; ++s) out.scales[static_cast<std::size_t>(s)] = {fa[static_cast<std::size_t>(s)], fb[static_cast<std::size_t>(s)]};
    return out;
}

NodeId cbam(ParamBinder& pb, NodeId f, const std::string& prefix) {
    Tape& t = pb.tape();
    auto mlp = [&](NodeId x) {
        return pb.conv(t.relu(pb.conv(x, prefix + ".mlp1", 1, 0)), prefix + ".mlp2", 1, 0);
    };
    const NodeId att_c =
        t.sigmoid(t.add(mlp(t.global_avg_pool(f)), mlp(t.global_max_pool(f))));
    const NodeId f1 = t.mul(f, att_c);
    const NodeId sp_in = t.concat_channels({t.channel_mean(f1), t.channel_max(f1)});
    const NodeId att_s = t.sigmoid(pb.conv(sp_in, prefix + ".sp", 1, 3));
    return t.mul(f1, att_s);
}

NodeId feature_compress(ParamBinder& pb, NodeId f, const std::string& prefix) {
    return pb.conv(cbam(pb, f, prefix + ".cbam"), prefix + ".compress", 1, 0);
}

FeatureTriplet shallow_branch(ParamBinder& pb, NodeId f_a, NodeId f_b,
                              const std::string& sem_prefix, const std::string& chg_prefix) {
    Tape& t = pb.tape();
    FeatureTriplet z;
    z.a = feature_compress(pb, f_a, sem_prefix);
    z.b = feature_compress(pb, f_b, sem_prefix);
    z.c = feature_compress(pb, t.abs(t.sub(z.a, z.b)), chg_prefix);
    return z;
}

FeatureTriplet deep_branch(ParamBinder& pb, const FeatureTriplet& prev,
                           const std::string& prefix) {
    Tape& t = pb.tape();
    auto double_conv = [&](NodeId x, const std::string& p) {
        return t.relu(pb.conv(t.relu(pb.conv(x, p + ".c1", 1, 1)), p + ".c2", 1, 1));
    };
    const NodeId h_a = double_conv(prev.a, prefix + ".deep_sem");
    const NodeId h_b = double_conv(prev.b, prefix + ".deep_sem");
    const NodeId h_c =
        double_conv(t.concat_channels({prev.c, t.add(h_a, h_b)}), prefix + ".deep_chg");
    FeatureTriplet up;
    up.a = t.bilinear_upsample(h_a, 2);
    up.b = t.bilinear_upsample(h_b, 2);
    up.c = t.bilinear_upsample(h_c, 2);
    return up;
}

CagmResult cagm(ParamBinder& pb, const FeatureTriplet& deep, const FeatureTriplet& shallow,
                const std::string& prefix, bool use_cagm) {
    Tape& t = pb.tape();
    if (!(t.value(deep.a).shape() == t.value(shallow.a).shape()))
        throw ShapeError("cagm: deep and shallow triplets differ: " +
                         t.value(deep.a).shape().str() + " vs " + t.value(shallow.a).shape().str());
    CagmResult out;
    auto fuse = [&](NodeId blended, const char* which) {
        return pb.conv(blended, prefix + (which[0] == 'c' ? ".fuse_chg" : ".fuse_sem"), 1, 1);
    };
    if (!use_cagm) {
        out.fused.a = fuse(t.add(shallow.a, deep.a), "sem");
        out.fused.b = fuse(t.add(shallow.b, deep.b), "sem");
        out.fused.c = fuse(t.add(shallow.c, deep.c), "chg");
        return out;
    }
    const NodeId g = t.concat_channels({deep.c, shallow.c});
    const NodeId w_local = t.sigmoid(pb.conv(g, prefix + ".gate.local", 1, 1));
    const NodeId w_global = t.sigmoid(pb.conv(t.global_avg_pool(g), prefix + ".gate.global", 1, 0));
    const NodeId weights = t.mul(t.affine(w_global, 1.0, 1.0), w_local);
    out.w_z = t.slice_channels(weights, 0, 1);
    out.w_h = t.slice_channels(weights, 1, 1);
    auto blend = [&](NodeId z, NodeId h) { return t.add(t.mul(out.w_z, z), t.mul(out.w_h, h)); };
    out.fused.a = fuse(blend(shallow.a, deep.a), "sem");
    out.fused.b = fuse(blend(shallow.b, deep.b), "sem");
    out.fused.c = fuse(blend(shallow.c, deep.c), "chg");
    return out;
}

ForwardNodes cg_decoder_forward(ParamBinder& pb, NodeId image_a, NodeId image_b,
                                const DecoderConfig& cfg) {
    cfg.validate();
    Tape& t = pb.tape();
    const MultiScaleFeatures feats = toy_encoder(pb, image_a, image_b, cfg);

    // deepest scale seeds the triplet through the compress path
    FeatureTriplet triplet = shallow_branch(pb, feats.scales[3].first, feats.scales[3].second,
                                            "init.fc_sem", "init.fc_chg");
    ForwardNodes out;
    for (int k = 1; k <= cfg.num_blocks; ++k) {
        const std::string blk = "blk" + std::to_string(k);
        const FeatureTriplet deep = deep_branch(pb, triplet, blk);
        const auto& [f_a, f_b] = feats.scales[static_cast<std::size_t>(3 - k)];
        const FeatureTriplet shallow =
            shallow_branch(pb, f_a, f_b, blk + ".fc_sem", blk + ".fc_chg");
        const CagmResult fused = cagm(pb, deep, shallow, blk, cfg.use_cagm);
        triplet = fused.fused;
        if (cfg.use_cagm) out.gate_maps.emplace_back(fused.w_z, fused.w_h);
    }

    out.sem_feats_a = t.bilinear_upsample(triplet.a, 4);
    out.sem_feats_b = t.bilinear_upsample(triplet.b, 4);
    const NodeId chg_full = t.bilinear_upsample(triplet.c, 4);
    out.sem_logits_a = pb.conv(out.sem_feats_a, "head.sem", 1, 0);
    out.sem_logits_b = pb.conv(out.sem_feats_b, "head.sem", 1, 0);
    out.change_logit = pb.conv(chg_full, "head.chg", 1, 0);
    return out;
}

ScdPrediction predict(const ParamStore& params, const Tensor4& image_a, const Tensor4& image_b,
                      const DecoderConfig& cfg) {
    Tape tape;
    ParamBinder pb(tape, params);
    const ForwardNodes nodes =
        cg_decoder_forward(pb, tape.input(image_a), tape.input(image_b), cfg);
    ScdPrediction pred;
    pred.sem_logits_a = tape.value(nodes.sem_logits_a);
    pred.sem_logits_b = tape.value(nodes.sem_logits_b);
    pred.change_logit = tape.value(nodes.change_logit);
    for (const auto& [wz, wh] : nodes.gate_maps)
        pred.gate_maps.emplace_back(tape.value(wz), tape.value(wh));
    return pred;
}

ScdMaps predict_scd_map(const ScdPrediction& pred, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ParamError("predict_scd_map: threshold must lie in (0,1)");
    const Shape4& s = pred.sem_logits_a.shape();
    ScdMaps maps{LabelImage(s.n, s.h, s.w), LabelImage(s.n, s.h, s.w), LabelImage(s.n, s.h, s.w)};
    auto argmax_changed = [&](const Tensor4& logits, int n, int y, int x) {
        int best = 1;
        for (int c = 2; c < s.c; ++c)
            if (logits.at(n, c, y, x) > logits.at(n, best, y, x)) best = c;
        return best;
    };
    for (int n = 0; n < s.n; ++n)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                const bool changed =
                    stable_sigmoid(pred.change_logit.at(n, 0, y, x)) > threshold;
                maps.change_mask.at(n, y, x) = changed ? 1 : 0;
                maps.label_a.at(n, y, x) = changed ? argmax_changed(pred.sem_logits_a, n, y, x) : 0;
                maps.label_b.at(n, y, x) = changed ? argmax_changed(pred.sem_logits_b, n, y, x) : 0;
            }
    return maps;
}

}  // namespace scd
