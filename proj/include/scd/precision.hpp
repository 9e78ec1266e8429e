#pragma once

#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "scd/losses.hpp"
#include "scd/tape.hpp"

namespace scd {

struct PrecisionMode {
    Precision precision = Precision::Fp32Ref;
    double loss_scale = 1024.0;  // static scaling; unscaling runs in full precision
    std::optional<double> grad_clip;

    void validate() const;
};

// fp32-ref delegates to plain backward (bit-identical); fp16-emulated seeds
// the adjoint with loss_scale, rounds every intermediate adjoint to binary16
// and divides the final gradients by loss_scale in double precision. The
// tape must have been built under the same precision so forward values were
// quantized consistently.
GradReport emulated_backward(const Tape& tape, NodeId loss, const PrecisionMode& mode);

struct InstabilityConfig {
    int population = 4096;  // feature pairs; half changed, half unchanged
    int feature_dim = 16;
    double margin = 0.1;
    double tau = 0.5;
    ConsistencyVariant variant = ConsistencyVariant::Sc;
    double lr_peak = 1.0;
    double lr_floor = 0.5;
    double momentum = 0.9;
    int steps = 200;
    std::uint64_t seed = 0;
    PrecisionMode mode;
    // population shaping: changed cosines land in [margin - changed_below_hi,
    // margin - changed_below_lo], unchanged around unchanged_cos. The band
    // sits within one binary16 ulp-tick of the shared gain, so a single
    // quantized gain step sweeps the whole band across the margin at once;
    // fp32 moves the same gain continuously and crosses pair by pair.
    double changed_below_lo = 5e-5;
    double changed_below_hi = 3e-4;
    double unchanged_cos = 0.9;
    // share of vector energy on the shared nuisance axis where the dates
    // disagree; aligning unchanged pairs suppresses that axis of the gain,
    // which drags every changed cosine toward the margin
    double nuisance_unchanged = 1.2e-6;
    double nuisance_changed = 0.06;
    // initial gain on the nuisance axis; placed where the binary16 ulp is
    // coarse so one quantized tick of the shared gain moves the whole band
    double nuisance_gain = 3.0;
    // changed-pair vector norm; larger norms slow the per-pair hinge
    // pushback, keeping the pile packed against the margin
    double changed_norm = 2.0;
    // fraction of changed pairs whose dates agree on the nuisance axis; the
    // two sub-bands react to gain motion with opposite signs, trapping the
    // gain between them
    double changed_agree_fraction = 0.4;

    void validate() const;
};

struct StepRecord {
    int step = 0;
    double loss = 0.0;
    double activation_ratio = 0.0;
    double grad_norm = 0.0;
    bool nonfinite = false;
    // activation-relevant gradient mass: sum over changed pairs of |dL/dcos|
    double grad_mass = 0.0;
};

struct StabilityTrace {
    std::vector<StepRecord> records;  // truncated at the first non-finite step
    bool instability = false;
    int first_event_step = -1;
};

// SGD with momentum on a synthetic near-margin population (feature pairs
// coupled through a shared gain vector), driven by the consistency loss
// alone under the configured precision/variant/clipping.
StabilityTrace run_instability_experiment(const InstabilityConfig& cfg);

// Cliff events after burn_in: an activation-ratio jump >= 0.5 in one step, a
// loss change >= max(5 * trailing-20-step MAD, 0.1), or a non-finite step.
std::pair<bool, int> detect_instability(const StabilityTrace& trace, int burn_in);

// CSV: step,loss,activation_ratio,grad_norm,nonfinite
void write_trace_csv(const StabilityTrace& trace, const std::filesystem::path& path);

}  // namespace scd
