#include "scd/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "scd/errors.hpp"

namespace scd {

namespace {
constexpr int kIgnore = 255;

void check_dims(const LabelImage& a, const LabelImage& b, const char* what) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw ShapeError(std::string("accumulate: ") + what + " dims differ");
}

int checked_label(int v, int k) {
    if (v == kIgnore) return v;
    if (v < 0 || v > k)
        throw DataError("accumulate: label " + std::to_string(v) + " outside [0," +
                        std::to_string(k) + "] and not 255");
    return v;
}
}  // namespace

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
    if (num_classes < 1) throw ParamError("ConfusionMatrix: needs at least one semantic class");
    counts_.assign(static_cast<std::size_t>(side()) * side(), 0);
}

void accumulate(ConfusionMatrix& cm, const LabelImage& gt_a, const LabelImage& gt_b,
                const LabelImage& pred_a, const LabelImage& pred_b) {
    check_dims(gt_a, gt_b, "gt");
    check_dims(gt_a, pred_a, "pred A");
    check_dims(gt_a, pred_b, "pred B");
    const int k = cm.num_classes();
    for (std::int64_t i = 0; i < gt_a.numel(); ++i) {
        const std::size_t s = static_cast<std::size_t>(i);
        const int ga = checked_label(gt_a.v[s], k);
        const int gb = checked_label(gt_b.v[s], k);
        const int pa = checked_label(pred_a.v[s], k);
        const int pb = checked_label(pred_b.v[s], k);
        if (ga == kIgnore || gb == kIgnore || pa == kIgnore || pb == kIgnore) continue;
        cm.bump(ga, pa);
        cm.bump(gb, pb);
    }
}

void accumulate_fscd(FscdCounts& fc, const LabelImage& gt_a, const LabelImage& gt_b,
                     const LabelImage& pred_a, const LabelImage& pred_b) {
    check_dims(gt_a, gt_b, "gt");
    check_dims(gt_a, pred_a, "pred A");
    check_dims(gt_a, pred_b, "pred B");
    for (std::int64_t i = 0; i < gt_a.numel(); ++i) {
        const std::size_t s = static_cast<std::size_t>(i);
        const int ga = gt_a.v[s], gb = gt_b.v[s], pa = pred_a.v[s], pb = pred_b.v[s];
        if (ga == kIgnore || gb == kIgnore || pa == kIgnore || pb == kIgnore) continue;
        for (const auto& [g, p] : {std::pair{ga, pa}, std::pair{gb, pb}}) {
            if (p != 0) ++fc.predicted_changed;
            if (g != 0) ++fc.gt_changed;
            if (g != 0 && p != 0 && g == p) ++fc.correct;
        }
    }
}

ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    if (a.num_classes() != b.num_classes())
        throw ShapeError("merge: confusion matrices have different class counts");
    ConfusionMatrix out(a.num_classes());
    for (std::size_t i = 0; i < out.counts_.size(); ++i)
        out.counts_[i] = a.counts_[i] + b.counts_[i];
    out.total_ = a.total_ + b.total_;
    return out;
}

FscdCounts merge(const FscdCounts& a, const FscdCounts& b) {
    return FscdCounts{a.predicted_changed + b.predicted_changed, a.gt_changed + b.gt_changed,
                      a.correct + b.correct};
}

double compute_oa(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw EmptyReductionError("compute_oa: empty confusion matrix");
    std::uint64_t diag = 0;
    for (int i = 0; i < cm.side(); ++i) diag += cm.at(i, i);
    return static_cast<double>(diag) / static_cast<double>(cm.total());
}

double compute_miou(const ConfusionMatrix& cm, double* iou_changed, double* iou_unchanged) {
    if (cm.total() == 0) throw EmptyReductionError("compute_miou: empty confusion matrix");
    const std::uint64_t tn = cm.at(0, 0);
    std::uint64_t fp = 0, fn = 0, tp = 0;
    for (int j = 1; j < cm.side(); ++j) fp += cm.at(0, j);
    for (int i = 1; i < cm.side(); ++i) fn += cm.at(i, 0);
    for (int i = 1; i < cm.side(); ++i)
        for (int j = 1; j < cm.side(); ++j) tp += cm.at(i, j);
    const std::uint64_t du = tn + fp + fn;
    const std::uint64_t dc = tp + fp + fn;
    const double iou_u = du == 0 ? 0.0 : static_cast<double>(tn) / static_cast<double>(du);
    const double iou_c = dc == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(dc);
    if (iou_changed) *iou_changed = iou_c;
    if (iou_unchanged) *iou_unchanged = iou_u;
    return 0.5 * (iou_u + iou_c);
}

double compute_sek(const ConfusionMatrix& cm, double* kappa_out) {
    if (cm.total() == 0) throw EmptyReductionError("compute_sek: empty confusion matrix");
    double iou_c = 0.0;
    (void)compute_miou(cm, &iou_c, nullptr);
    // Q-hat: the no-change/no-change cell is discarded before chance correction
    const int side = cm.side();
    std::vector<double> q(static_cast<std::size_t>(side) * side, 0.0);
    double total = 0.0;
    for (int i = 0; i < side; ++i)
        for (int j = 0; j < side; ++j) {
            if (i == 0 && j == 0) continue;
            const double v = static_cast<double>(cm.at(i, j));
            q[static_cast<std::size_t>(i) * side + j] = v;
            total += v;
        }
    double kappa = 0.0;
    if (total > 0.0) {
        double diag = 0.0;
        for (int i = 0; i < side; ++i) diag += q[static_cast<std::size_t>(i) * side + i];
        const double po = diag / total;
        double pe = 0.0;
        for (int i = 0; i < side; ++i) {
            double row = 0.0, col = 0.0;
            for (int j = 0; j < side; ++j) {
                row += q[static_cast<std::size_t>(i) * side + j];
                col += q[static_cast<std::size_t>(j) * side + i];
            }
            pe += row * col;
        }
        pe /= total * total;
        kappa = pe == 1.0 ? 0.0 : (po - pe) / (1.0 - pe);
    }
    if (kappa_out) *kappa_out = kappa;
    return kappa * std::exp(iou_c - 1.0);
}

double compute_f_scd(const FscdCounts& fc, double* p_scd, double* r_scd) {
    const double p = fc.predicted_changed == 0
                         ? 0.0
                         : static_cast<double>(fc.correct) / static_cast<double>(fc.predicted_changed);
    const double r = fc.gt_changed == 0
                         ? 0.0
                         : static_cast<double>(fc.correct) / static_cast<double>(fc.gt_changed);
    if (p_scd) *p_scd = p;
    if (r_scd) *r_scd = r;
    return (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

MetricReport ScdAccumulator::report() const {
    MetricReport rep;
    rep.oa = compute_oa(cm_);
    rep.miou = compute_miou(cm_, &rep.iou_changed, &rep.iou_unchanged);
    rep.sek = compute_sek(cm_, &rep.kappa);
    rep.f_scd = compute_f_scd(fc_, &rep.p_scd, &rep.r_scd);
    return rep;
}

std::string MetricReport::csv_header() { return "oa,f_scd,miou,sek,p_scd,r_scd"; }

std::string MetricReport::csv_row() const {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%.2f,%.2f,%.2f,%.2f,%.2f,%.2f", 100.0 * oa, 100.0 * f_scd,
                  100.0 * miou, 100.0 * sek, 100.0 * p_scd, 100.0 * r_scd);
    return buf;
}

}  // namespace scd
