#pragma once

#include "scd/tape.hpp"

namespace scd {

enum class ConsistencyVariant { None, Sc, Ssc };

struct LossConfig {
    double margin = 0.1;
    double tau = 0.5;
    double sc_weight = 1.0;
    ConsistencyVariant variant = ConsistencyVariant::Ssc;
    int ignore_index = 255;
};

struct LossBreakdown {
    double total = 0.0;
    double ce_a = 0.0;
    double ce_b = 0.0;
    double change_term = 0.0;
    double sc_term = 0.0;
    double activation_ratio = 0.0;
};

// Consistency-loss labels from a binary change mask: +1 unchanged, -1
// changed, 0 where either semantic map carries the ignore value.
LabelImage make_change_labels(const LabelImage& change_mask, const LabelImage& sem_a,
                              const LabelImage& sem_b, int ignore_index);

// Fraction of changed (-1) pixels whose cosine exceeds the margin, i.e.
// whose hinge gradient would be nonzero. Requires at least one changed pixel.
double gradient_activation_ratio(const Tensor4& cos, const LabelImage& y, double margin);

struct BatchLabels {
    LabelImage sem_a;        // class indices, ignore_index allowed
    LabelImage sem_b;
    LabelImage change_mask;  // 0/1
};

struct TotalLossNodes {
    NodeId total = -1;  // scalar node to run backward from
    LossBreakdown values;
};

// total = ce_A + ce_B + bce + lambda * (sc | ssc | 0). The consistency term
// runs on the final-resolution pre-classifier semantic features; the
// activation ratio is monitored on every call regardless of variant.
TotalLossNodes total_loss(Tape& tape, NodeId sem_logits_a, NodeId sem_logits_b,
                          NodeId change_logit, NodeId sem_feats_a, NodeId sem_feats_b,
                          const BatchLabels& labels, const LossConfig& cfg);

}  // namespace scd
