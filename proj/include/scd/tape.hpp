#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "scd/tensor.hpp"

namespace scd {

using NodeId = int;

enum class Precision {
    Fp32Ref,       // plain double arithmetic end to end
    Fp16Emulated,  // every cached forward value and backward adjoint is
                   // rounded to binary16 (stored widened to double)
};

// Per-parameter gradients of one backward pass.
struct GradReport {
    std::map<std::string, Tensor4> grads;
    double max_abs_grad = 0.0;
    std::int64_t nonfinite_count = 0;

    bool all_finite() const { return nonfinite_count == 0; }
};

// Recorded computation graph with cached forward values. Nodes only ever
// reference earlier nodes, so creation order is a topological order. A tape
// is single-owner: built, evaluated, and differentiated by one thread.
class Tape {
public:
    explicit Tape(Precision precision = Precision::Fp32Ref);
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaves. Parameters are named and appear in every GradReport; plain
    // inputs do not receive gradients.
    NodeId param(const std::string& name, Tensor4 value);
    NodeId input(Tensor4 value);

    // Differentiable ops. conv2d uses cross-correlation semantics (no kernel
    // flip); kernel shape is (c_out, c_in, kh, kw), bias is (1, c_out, 1, 1).
    NodeId conv2d(NodeId x, NodeId kernel, NodeId bias, int stride, int padding);
    NodeId bilinear_upsample(NodeId x, int factor);
    NodeId global_avg_pool(NodeId x);
    NodeId global_max_pool(NodeId x);
    NodeId channel_mean(NodeId x);
    NodeId channel_max(NodeId x);
    NodeId relu(NodeId x);
    NodeId sigmoid(NodeId x);
    NodeId abs(NodeId x);
    NodeId softplus(NodeId x);
    NodeId concat_channels(const std::vector<NodeId>& xs);
    // add/sub/mul broadcast: every dim must match or be 1 on one side.
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId affine(NodeId x, double scale, double shift);
    NodeId slice_channels(NodeId x, int from, int count);
    NodeId reduce_sum(NodeId x);
    NodeId reduce_mean(NodeId x);

    // Per-pixel cosine similarity over the channel axis -> (n,1,h,w),
    // clamped to [-1,1]; gradient is zero at the clamp boundary.
    NodeId cosine_map(NodeId a, NodeId b);

    // Scalar losses. `y` uses +1 unchanged, -1 changed, 0 ignore.
    NodeId sc_loss(NodeId cos, const LabelImage& y, double margin);
    NodeId ssc_loss(NodeId cos, const LabelImage& y, double margin, double tau);
    NodeId semantic_ce(NodeId logits, const LabelImage& labels, int ignore_index);
    NodeId change_bce(NodeId logit, const LabelImage& targets);

    const Tensor4& value(NodeId id) const;
    int size() const;
    Precision precision() const { return precision_; }
    // Non-finite values produced while caching forward results (fp16 mode
    // saturates to infinity instead of failing).
    std::int64_t forward_nonfinite_count() const { return forward_nonfinite_; }

    // Reverse-topological gradient accumulation from a scalar loss node.
    GradReport backward(NodeId loss) const;
    // Same, with the seed adjoint multiplied by loss_scale and (optionally)
    // every accumulated adjoint rounded to binary16 before use; gradients
    // are divided by loss_scale in full precision at the end.
    GradReport backward_scaled(NodeId loss, double loss_scale, bool quantize_adjoints) const;

    // Central-difference check of every parameter entry against backward();
    // returns the max relative error with denominator max(|a|,|n|,1e-8).
    // Only meaningful on Fp32Ref tapes.
    double finite_diff_check(NodeId loss, double eps);

    // Mutate one parameter entry and recompute the affected cached values.
    void poke_param(NodeId leaf, std::int64_t entry, double v);

    // Distance of the forward pass from the nearest non-differentiable point:
    // |x| over relu/abs inputs, |cos - m| over hinge pixels, 1-|raw| at the
    // cosine clamp. Finite-difference fixtures require this to clear the
    // sampling margin so no kink is crossed by a perturbation.
    double min_kink_distance() const;

private:
    struct Node;
    NodeId push(Node&& node);
    Tensor4 eval(const Node& node) const;
    void recompute_dependents(NodeId leaf);
    const Node& node(NodeId id) const;

    std::vector<Node> nodes_;
    Precision precision_;
    std::int64_t forward_nonfinite_ = 0;
};

// Overflow-safe softplus on raw doubles: max(x,0) + log1p(exp(-|x|)).
double stable_softplus(double x);
// Numerically stable logistic function.
double stable_sigmoid(double x);

}  // namespace scd
