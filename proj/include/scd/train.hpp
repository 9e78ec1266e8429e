#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "scd/decoder.hpp"
#include "scd/losses.hpp"
#include "scd/metrics.hpp"
#include "scd/synthetic.hpp"
#include "scd/tape.hpp"

namespace scd {

struct TrainConfig {
    double lr_peak = 0.1;
    double lr_floor = 0.0;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    int batch_size = 8;
    int epochs = 30;
    double warmup_fraction = 0.10;
    double poly_power = 1.0;
    std::optional<double> grad_clip;
    std::uint64_t seed = 0;
    LossConfig loss;
    Precision precision = Precision::Fp32Ref;
    double loss_scale = 1024.0;
    DecoderConfig model;  // num_classes is derived from the dataset
    double change_threshold = 0.5;
    std::filesystem::path train_dir;
    std::filesystem::path val_dir;
    std::filesystem::path out_dir;

    void validate() const;
};

// Linear warmup over floor(warmup_fraction * total) steps to lr_peak, then
// polynomial decay from lr_peak to lr_floor. Defined on 0 <= step <= total.
double lr_schedule(int step, int total_steps, const TrainConfig& cfg);

struct TrainState {
    ParamStore params;
    ParamStore momentum_buf;
    long long step = 0;
};

// Clips the global gradient norm (when configured), applies weight decay,
// updates momentum buffers and parameters in place. Non-finite gradients
// abort in fp32 mode and skip the update in fp16 mode.
void sgd_step(TrainState& state, const GradReport& grads, double lr, const TrainConfig& cfg);

// Self-describing binary checkpoint: magic "SCD1", u32 version, u32 tensor
// count; per tensor u32 name length + bytes, 4 u32 dims, row-major f64
// little-endian payload.
void save_checkpoint(const ParamStore& params, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

struct Dataset {
    std::vector<std::string> ids;
    std::vector<SamplePair> pairs;
    int num_semantic_classes = 0;  // K (labels 1..K)
};

// Loads `{id}_A.ppm`, `{id}_B.ppm`, `{id}_semA.pgm`, `{id}_semB.pgm`
// quadruples, sorted by id; the change mask is derived from the labels.
Dataset load_dataset(const std::filesystem::path& dir);

MetricReport evaluate_model(const ParamStore& params, const DecoderConfig& cfg, const Dataset& ds,
                            double change_threshold);

// Streams `{id}_semA.pgm` / `{id}_semB.pgm` pairs from matched directories
// through the metric accumulator.
MetricReport evaluate_dirs(const std::filesystem::path& pred_dir,
                           const std::filesystem::path& gt_dir);

struct TrainResult {
    TrainState state;
    ParamStore best_params;
    double best_val_fscd = -1.0;
    MetricReport best_report;
    std::filesystem::path curves_csv;
    std::filesystem::path checkpoint_path;
};

// The full loop: seeded shuffling, per-step forward/loss/backward/update,
// per-epoch validation, curve rows and a best-by-F_scd checkpoint.
TrainResult train(const TrainConfig& cfg);

// One W_z and one W_h PGM per block per sample, values round(255*w/2).
void export_heatmaps(const ParamStore& params, const DecoderConfig& cfg, const Dataset& ds,
                     const std::filesystem::path& out_dir);

}  // namespace scd
