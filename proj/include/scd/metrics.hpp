#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "scd/tensor.hpp"

namespace scd {

// (K+1) x (K+1) tally matrix over {no-change} U {K semantic classes};
// rows are ground truth, columns are prediction, index 0 is no-change.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    int num_classes() const { return k_; }
    int side() const { return k_ + 1; }
    std::uint64_t at(int gt, int pred) const {
        return counts_[static_cast<std::size_t>(gt) * side() + pred];
    }
    void bump(int gt, int pred) {
        ++counts_[static_cast<std::size_t>(gt) * side() + pred];
        ++total_;
    }
    std::uint64_t total() const { return total_; }
    const std::vector<std::uint64_t>& counts() const { return counts_; }

private:
    int k_;
    std::vector<std::uint64_t> counts_;
    std::uint64_t total_ = 0;

    friend ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b);
};

// Streaming tallies for the semantic-change F1: a date-pixel counts as
// predicted-changed / gt-changed when its label is nonzero, and as a correct
// semantic change when both are nonzero and equal.
struct FscdCounts {
    std::uint64_t predicted_changed = 0;
    std::uint64_t gt_changed = 0;
    std::uint64_t correct = 0;
};

struct MetricReport {
    double oa = 0.0;
    double f_scd = 0.0;
    double miou = 0.0;
    double sek = 0.0;
    double p_scd = 0.0;
    double r_scd = 0.0;
    double iou_changed = 0.0;
    double iou_unchanged = 0.0;
    double kappa = 0.0;

    // `oa,f_scd,miou,sek,p_scd,r_scd` with values x100, two decimals.
    std::string csv_row() const;
    static std::string csv_header();
};

// One tally per date per pixel; a pixel contributes nothing if any of its
// four labels is 255. Labels must lie in {0..K} U {255}.
void accumulate(ConfusionMatrix& cm, const LabelImage& gt_a, const LabelImage& gt_b,
                const LabelImage& pred_a, const LabelImage& pred_b);
void accumulate_fscd(FscdCounts& fc, const LabelImage& gt_a, const LabelImage& gt_b,
                     const LabelImage& pred_a, const LabelImage& pred_b);

ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b);
FscdCounts merge(const FscdCounts& a, const FscdCounts& b);

double compute_oa(const ConfusionMatrix& cm);
// Binary change/no-change mean IoU; every degenerate ratio resolves to 0.
double compute_miou(const ConfusionMatrix& cm, double* iou_changed = nullptr,
                    double* iou_unchanged = nullptr);
// Cohen's kappa with the no-change/no-change cell zeroed, scaled by
// exp(iou_changed - 1).
double compute_sek(const ConfusionMatrix& cm, double* kappa_out = nullptr);
double compute_f_scd(const FscdCounts& fc, double* p_scd = nullptr, double* r_scd = nullptr);

// Convenience bundle used by evaluation: matrix-driven metrics plus the
// independent streaming F_scd counters.
class ScdAccumulator {
public:
    explicit ScdAccumulator(int num_classes) : cm_(num_classes) {}

    void add(const LabelImage& gt_a, const LabelImage& gt_b, const LabelImage& pred_a,
             const LabelImage& pred_b) {
        accumulate(cm_, gt_a, gt_b, pred_a, pred_b);
        accumulate_fscd(fc_, gt_a, gt_b, pred_a, pred_b);
    }
    void merge_from(const ScdAccumulator& other) {
        cm_ = merge(cm_, other.cm_);
        fc_ = merge(fc_, other.fc_);
    }
    const ConfusionMatrix& matrix() const { return cm_; }
    const FscdCounts& fscd_counts() const { return fc_; }
    MetricReport report() const;

private:
    ConfusionMatrix cm_;
    FscdCounts fc_;
};

}  // namespace scd
