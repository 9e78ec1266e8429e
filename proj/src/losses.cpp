#include "scd/losses.hpp"

#include "scd/errors.hpp"

namespace scd {

LabelImage make_change_labels(const LabelImage& change_mask, const LabelImage& sem_a,
                              const LabelImage& sem_b, int ignore_index) {
    if (change_mask.n != sem_a.n || change_mask.h != sem_a.h || change_mask.w != sem_a.w ||
        change_mask.n != sem_b.n || change_mask.h != sem_b.h || change_mask.w != sem_b.w)
        throw ShapeError("make_change_labels: map dims differ");
    LabelImage y(change_mask.n, change_mask.h, change_mask.w);
    for (std::size_t i = 0; i < y.v.size(); ++i) {
        if (sem_a.v[i] == ignore_index || sem_b.v[i] == ignore_index) {
            y.v[i] = 0;
        } else {
            y.v[i] = change_mask.v[i] != 0 ? -1 : 1;
        }
    }
    return y;
}

double gradient_activation_ratio(const Tensor4& cos, const LabelImage& y, double margin) {
    const Shape4& s = cos.shape();
    if (s.c != 1 || y.n != s.n || y.h != s.h || y.w != s.w)
        throw ShapeError("gradient_activation_ratio: label dims do not match cosine map");
    std::int64_t changed = 0, active = 0;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        if (y.v[static_cast<std::size_t>(i)] != -1) continue;
        ++changed;
        if (cos[i] > margin) ++active;
    }
    if (changed == 0)
        throw EmptyReductionError("gradient_activation_ratio: no changed pixels");
    return static_cast<double>(active) / static_cast<double>(changed);
}

TotalLossNodes total_loss(Tape& tape, NodeId sem_logits_a, NodeId sem_logits_b,
                          NodeId change_logit, NodeId sem_feats_a, NodeId sem_feats_b,
                          const BatchLabels& labels, const LossConfig& cfg) {
    TotalLossNodes out;

    const NodeId ce_a = tape.semantic_ce(sem_logits_a, labels.sem_a, cfg.ignore_index);
    const NodeId ce_b = tape.semantic_ce(sem_logits_b, labels.sem_b, cfg.ignore_index);
    const NodeId bce = tape.change_bce(change_logit, labels.change_mask);

    const LabelImage y =
        make_change_labels(labels.change_mask, labels.sem_a, labels.sem_b, cfg.ignore_index);
    const NodeId cos = tape.cosine_map(sem_feats_a, sem_feats_b);

    bool any_changed = false;
    for (int v : y.v)
        if (v == -1) any_changed = true;
    out.values.activation_ratio =
        any_changed ? gradient_activation_ratio(tape.value(cos), y, cfg.margin) : 0.0;

    NodeId total = tape.add(tape.add(ce_a, ce_b), bce);
    if (cfg.variant != ConsistencyVariant::None) {
        const NodeId sc = cfg.variant == ConsistencyVariant::Sc
                              ? tape.sc_loss(cos, y, cfg.margin)
                              : tape.ssc_loss(cos, y, cfg.margin, cfg.tau);
        out.values.sc_term = tape.value(sc)[0];
        total = tape.add(total, tape.affine(sc, cfg.sc_weight, 0.0));
    }

    out.total = total;
    out.values.ce_a = tape.value(ce_a)[0];
    out.values.ce_b = tape.value(ce_b)[0];
    out.values.change_term = tape.value(bce)[0];
    out.values.total = tape.value(total)[0];
    return out;
}

}  // namespace scd
