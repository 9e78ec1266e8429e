#include "scd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>

#include "scd/netpbm.hpp"
#include "scd/precision.hpp"
#include "scd/rng.hpp"

namespace scd {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (!(lr_floor >= 0.0 && lr_peak > 0.0 && lr_floor <= lr_peak))
        throw ParamError("TrainConfig: need 0 <= lr_floor <= lr_peak, lr_peak > 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
        throw ParamError("TrainConfig: warmup_fraction must lie in [0,1)");
    if (batch_size < 1) throw ParamError("TrainConfig: batch_size must be >= 1");
    if (epochs < 1) throw ParamError("TrainConfig: epochs must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ParamError("TrainConfig: momentum in [0,1)");
    if (weight_decay < 0.0) throw ParamError("TrainConfig: weight_decay must be >= 0");
    if (grad_clip && !(*grad_clip > 0.0)) throw ParamError("TrainConfig: grad_clip must be > 0");
    if (!(change_threshold > 0.0 && change_threshold < 1.0))
        throw ParamError("TrainConfig: change_threshold must lie in (0,1)");
    if (!(loss_scale > 0.0)) throw ParamError("TrainConfig: loss_scale must be > 0");
}

double lr_schedule(int step, int total_steps, const TrainConfig& cfg) {
    if (step < 0 || step > total_steps)
        throw ParamError("lr_schedule: step " + std::to_string(step) + " outside [0," +
                         std::to_string(total_steps) + "]");
    const int warmup = static_cast<int>(std::floor(cfg.warmup_fraction * total_steps));
    if (step < warmup)
        return cfg.lr_peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double t =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * std::pow(1.0 - t, cfg.poly_power);
}

void sgd_step(TrainState& state, const GradReport& grads, double lr, const TrainConfig& cfg) {
    bool finite = grads.nonfinite_count == 0;
    double norm2 = 0.0;
    for (const auto& [name, g] : grads.grads) {
        for (const double v : g.vec()) {
            if (!std::isfinite(v)) finite = false;
            norm2 += v * v;
        }
    }
    if (!finite) {
        if (cfg.precision == Precision::Fp32Ref)
            throw NumericError("sgd_step: non-finite gradient at step " +
                               std::to_string(state.step));
        ++state.step;  // fp16 emulation: skip the update, as scaled AMP would
        return;
    }
    double scale = 1.0;
    if (cfg.grad_clip) {
        const double norm = std::sqrt(norm2);
        if (norm > *cfg.grad_clip) scale = *cfg.grad_clip / norm;
    }
    for (auto& [name, param] : state.params) {
        const Tensor4& g = grads.grads.at(name);
        Tensor4& buf = state.momentum_buf.at(name);
        for (std::int64_t i = 0; i < param.numel(); ++i) {
            const double adjusted = g[i] * scale + cfg.weight_decay * param[i];
            buf[i] = cfg.momentum * buf[i] + adjusted;
            param[i] -= lr * buf[i];
        }
    }
    ++state.step;
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, const fs::path& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError(path.string() + ": truncated checkpoint");
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

void put_f64(std::ofstream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::ifstream& in, const fs::path& path) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw DataError(path.string() + ": truncated checkpoint");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const ParamStore& params, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path.string() + ": cannot open for writing");
    out.write("SCD1", 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Shape4& s = tensor.shape();
        put_u32(out, static_cast<std::uint32_t>(s.n));
        put_u32(out, static_cast<std::uint32_t>(s.c));
        put_u32(out, static_cast<std::uint32_t>(s.h));
        put_u32(out, static_cast<std::uint32_t>(s.w));
        for (const double v : tensor.vec()) put_f64(out, v);
    }
    if (!out) throw DataError(path.string() + ": write failed");
}

ParamStore load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path.string() + ": cannot open");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "SCD1", 4) != 0)
        throw DataError(path.string() + ": not a checkpoint (bad magic)");
    const std::uint32_t version = get_u32(in, path);
    if (version != kCheckpointVersion)
        throw DataError(path.string() + ": unsupported checkpoint version " +
                        std::to_string(version));
    const std::uint32_t count = get_u32(in, path);
    ParamStore params;
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = get_u32(in, path);
        if (name_len > 4096) throw DataError(path.string() + ": implausible name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw DataError(path.string() + ": truncated checkpoint");
        const int n = static_cast<int>(get_u32(in, path));
        const int c = static_cast<int>(get_u32(in, path));
        const int h = static_cast<int>(get_u32(in, path));
        const int w = static_cast<int>(get_u32(in, path));
        Tensor4 tensor(n, c, h, w);
        for (std::int64_t i = 0; i < tensor.numel(); ++i) tensor[i] = get_f64(in, path);
        params.emplace(std::move(name), std::move(tensor));
    }
    return params;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

Dataset load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError(dir.string() + ": not a directory");
    std::set<std::string> ids;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        const std::string suffix = "_A.ppm";
        if (name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            ids.insert(name.substr(0, name.size() - suffix.size()));
    }
    if (ids.empty()) throw DataError(dir.string() + ": no `<id>_A.ppm` samples found");
    Dataset ds;
    for (const std::string& id : ids) {
        for (const char* part : {"_B.ppm", "_semA.pgm", "_semB.pgm"})
            if (!fs::exists(dir / (id + part)))
                throw DataError(dir.string() + ": sample " + id + " is missing " + id + part);
        SamplePair pair;
        pair.image_a = read_ppm(dir / (id + "_A.ppm"));
        pair.image_b = read_ppm(dir / (id + "_B.ppm"));
        pair.sem_a = read_pgm(dir / (id + "_semA.pgm"));
        pair.sem_b = read_pgm(dir / (id + "_semB.pgm"));
        if (pair.image_a.shape() != pair.image_b.shape() || pair.sem_a.h != pair.image_a.shape().h ||
            pair.sem_a.w != pair.image_a.shape().w || pair.sem_b.h != pair.sem_a.h ||
            pair.sem_b.w != pair.sem_a.w)
            throw DataError(dir.string() + ": sample " + id + " has mismatched dimensions");
        pair.change_mask = LabelImage(1, pair.sem_a.h, pair.sem_a.w);
        for (std::size_t i = 0; i < pair.change_mask.v.size(); ++i) {
            const int a = pair.sem_a.v[i], b = pair.sem_b.v[i];
            const bool ignored = a == 255 || b == 255;
            pair.change_mask.v[i] = (!ignored && (a != 0 || b != 0)) ? 1 : 0;
            if (!ignored) ds.num_semantic_classes = std::max({ds.num_semantic_classes, a, b});
        }
        ds.ids.push_back(id);
        ds.pairs.push_back(std::move(pair));
    }
    if (ds.num_semantic_classes < 1)
        throw DataError(dir.string() + ": no semantic labels present in any sample");
    return ds;
}

namespace {

struct Batch {
    Tensor4 image_a;
    Tensor4 image_b;
    BatchLabels labels;
};

Batch make_batch(const Dataset& ds, const std::vector<int>& order, std::size_t from,
                 std::size_t count) {
    const Shape4& s = ds.pairs[0].image_a.shape();
    Batch batch;
    batch.image_a = Tensor4(static_cast<int>(count), 3, s.h, s.w);
    batch.image_b = Tensor4(static_cast<int>(count), 3, s.h, s.w);
    batch.labels.sem_a = LabelImage(static_cast<int>(count), s.h, s.w);
    batch.labels.sem_b = LabelImage(static_cast<int>(count), s.h, s.w);
    batch.labels.change_mask = LabelImage(static_cast<int>(count), s.h, s.w);
    const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    for (std::size_t i = 0; i < count; ++i) {
        const SamplePair& p = ds.pairs[static_cast<std::size_t>(order[from + i])];
        std::copy_n(p.image_a.data(), 3 * plane, batch.image_a.data() + 3 * plane * static_cast<std::int64_t>(i));
        std::copy_n(p.image_b.data(), 3 * plane, batch.image_b.data() + 3 * plane * static_cast<std::int64_t>(i));
        std::copy_n(p.sem_a.v.data(), plane, batch.labels.sem_a.v.data() + plane * static_cast<std::int64_t>(i));
        std::copy_n(p.sem_b.v.data(), plane, batch.labels.sem_b.v.data() + plane * static_cast<std::int64_t>(i));
        std::copy_n(p.change_mask.v.data(), plane,
                    batch.labels.change_mask.v.data() + plane * static_cast<std::int64_t>(i));
    }
    return batch;
}

}  // namespace

MetricReport evaluate_model(const ParamStore& params, const DecoderConfig& cfg, const Dataset& ds,
                            double change_threshold) {
    ScdAccumulator acc(cfg.num_classes - 1);
    for (const SamplePair& p : ds.pairs) {
        const ScdPrediction pred = predict(params, p.image_a, p.image_b, cfg);
        const ScdMaps maps = predict_scd_map(pred, change_threshold);
        acc.add(p.sem_a, p.sem_b, maps.label_a, maps.label_b);
    }
    return acc.report();
}

MetricReport evaluate_dirs(const fs::path& pred_dir, const fs::path& gt_dir) {
    if (!fs::is_directory(pred_dir)) throw DataError(pred_dir.string() + ": not a directory");
    if (!fs::is_directory(gt_dir)) throw DataError(gt_dir.string() + ": not a directory");
    std::set<std::string> ids;
    for (const auto& entry : fs::directory_iterator(gt_dir)) {
        const std::string name = entry.path().filename().string();
        const std::string suffix = "_semA.pgm";
        if (name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            ids.insert(name.substr(0, name.size() - suffix.size()));
    }
    if (ids.empty()) throw EmptyReductionError(gt_dir.string() + ": no `<id>_semA.pgm` maps found");

    int k = 1;
    std::vector<std::array<LabelImage, 4>> quads;
    for (const std::string& id : ids) {
        std::array<LabelImage, 4> q;
        const fs::path paths[4] = {gt_dir / (id + "_semA.pgm"), gt_dir / (id + "_semB.pgm"),
                                   pred_dir / (id + "_semA.pgm"), pred_dir / (id + "_semB.pgm")};
        for (int i = 0; i < 4; ++i) {
            if (!fs::exists(paths[i]))
                throw DataError("evaluate: sample " + id + " is missing " + paths[i].string());
            q[static_cast<std::size_t>(i)] = read_pgm(paths[i]);
        }
        for (const auto& m : q)
            for (const int v : m.v)
                if (v != 255) k = std::max(k, v);
        quads.push_back(std::move(q));
    }
    ScdAccumulator acc(k);
    for (const auto& q : quads) acc.add(q[0], q[1], q[2], q[3]);
    return acc.report();
}

TrainResult train(const TrainConfig& cfg) {
    cfg.validate();
    const Dataset train_ds = load_dataset(cfg.train_dir);
    const Dataset val_ds = load_dataset(cfg.val_dir);

    DecoderConfig model = cfg.model;
    model.num_classes =
        std::max(train_ds.num_semantic_classes, val_ds.num_semantic_classes) + 1;
    model.validate();

    fs::create_directories(cfg.out_dir);
    const fs::path curves_path = cfg.out_dir / "curves.csv";
    const fs::path ckpt_path = cfg.out_dir / "checkpoint_best.bin";
    std::ofstream curves(curves_path);
    if (!curves) throw DataError(curves_path.string() + ": cannot open for writing");
    curves << "epoch,step,lr,total,ce_A,ce_B,change,sc,activation_ratio,"
              "val_fscd,val_miou,val_oa,val_sek\n";

    TrainState state;
    state.params = init_model_params(model, cfg.seed);
    for (const auto& [name, tensor] : state.params) {
        const Shape4& s = tensor.shape();
        state.momentum_buf.emplace(name, Tensor4(s.n, s.c, s.h, s.w, 0.0));
    }

    const int n_train = static_cast<int>(train_ds.pairs.size());
    const int steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = steps_per_epoch * cfg.epochs;
    Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    const PrecisionMode mode{cfg.precision, cfg.loss_scale, cfg.grad_clip};

    TrainResult result;
    std::vector<int> order(static_cast<std::size_t>(n_train));
    for (int i = 0; i < n_train; ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double sum_total = 0, sum_ce_a = 0, sum_ce_b = 0, sum_change = 0, sum_sc = 0,
               sum_ratio = 0;
        double last_lr = 0.0;
        int batches = 0;
        for (std::size_t from = 0; from < order.size(); from += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t count =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - from);
            const Batch batch = make_batch(train_ds, order, from, count);

            Tape tape(cfg.precision);
            ParamBinder pb(tape, state.params);
            const ForwardNodes f =
                cg_decoder_forward(pb, tape.input(batch.image_a), tape.input(batch.image_b), model);
            const TotalLossNodes loss = total_loss(tape, f.sem_logits_a, f.sem_logits_b,
                                                   f.change_logit, f.sem_feats_a, f.sem_feats_b,
                                                   batch.labels, cfg.loss);
            if (!std::isfinite(loss.values.total) && cfg.precision == Precision::Fp32Ref)
                throw NumericError("train: non-finite loss at step " + std::to_string(state.step));

            const GradReport grads = emulated_backward(tape, loss.total, mode);
            const double lr = lr_schedule(static_cast<int>(state.step), total_steps, cfg);
            sgd_step(state, grads, lr, cfg);

            last_lr = lr;
            sum_total += loss.values.total;
            sum_ce_a += loss.values.ce_a;
            sum_ce_b += loss.values.ce_b;
            sum_change += loss.values.change_term;
            sum_sc += loss.values.sc_term;
            sum_ratio += loss.values.activation_ratio;
            ++batches;
        }

        const MetricReport val = evaluate_model(state.params, model, val_ds, cfg.change_threshold);
        char row[512];
        std::snprintf(row, sizeof(row),
                      "%d,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      epoch, state.step - 1, last_lr, sum_total / batches, sum_ce_a / batches,
                      sum_ce_b / batches, sum_change / batches, sum_sc / batches,
                      sum_ratio / batches, val.f_scd, val.miou, val.oa, val.sek);
        curves << row;
        curves.flush();

        if (val.f_scd > result.best_val_fscd) {
            result.best_val_fscd = val.f_scd;
            result.best_params = state.params;
            result.best_report = val;
            save_checkpoint(state.params, ckpt_path);
        }
    }

    result.state = std::move(state);
    result.curves_csv = curves_path;
    result.checkpoint_path = ckpt_path;
    return result;
}

void export_heatmaps(const ParamStore& params, const DecoderConfig& cfg, const Dataset& ds,
                     const fs::path& out_dir) {
    fs::create_directories(out_dir);
    for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
        const ScdPrediction pred = predict(params, ds.pairs[i].image_a, ds.pairs[i].image_b, cfg);
        for (std::size_t k = 0; k < pred.gate_maps.size(); ++k) {
            const auto& [wz, wh] = pred.gate_maps[k];
            auto to_pgm = [&](const Tensor4& map) {
                LabelImage img(1, map.shape().h, map.shape().w);
                for (std::int64_t j = 0; j < map.numel(); ++j) {
                    long v = std::llround(255.0 * map[j] / 2.0);
                    img.v[static_cast<std::size_t>(j)] =
                        static_cast<int>(std::clamp(v, 0L, 255L));
                }
                return img;
            };
            const std::string base = ds.ids[i] + "_block" + std::to_string(k + 1);
            write_pgm(to_pgm(wz), out_dir / (base + "_Wz.pgm"));
            write_pgm(to_pgm(wh), out_dir / (base + "_Wh.pgm"));
        }
    }
}

}  // namespace scd
