#pragma once

// Shared fixtures for gradient-check tests.

#include <cmath>
#include <string>

#include "scd/decoder.hpp"
#include "scd/rng.hpp"

namespace scd::testing {

inline Tensor4 random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1.0,
                             double hi = 1.0) {
    Tensor4 t(n, c, h, w);
    for (double& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

// Well-conditioned weights for end-to-end finite-difference checks: positive
// fan-in-normalised kernels remove sign cancellation (no microscopically
// coupled parameters and no relu kinks under positive inputs), the 1.5 gain
// keeps per-block gradient attenuation near unity, and the damped heads stay
// clear of sigmoid saturation.
inline ParamStore fd_conditioned_params(const DecoderConfig& cfg, std::uint64_t seed) {
    ParamStore params = init_model_params(cfg, seed);
    Rng wr(seed * 977 + 13);
    for (auto& [name, tensor] : params) {
        const bool gate_like = name.find(".cbam.") != std::string::npos ||
                               name.find(".gate.") != std::string::npos;
        const bool head = name.rfind("head.", 0) == 0;
        if (name.ends_with(".w")) {
            const Shape4& s = tensor.shape();
            const double fan_in = static_cast<double>(s.c) * s.h * s.w;
            const double boost = head ? 0.3 : (gate_like ? 1.0 : 1.5);
            for (double& v : tensor.vec()) v = wr.uniform(0.5, 1.5) * boost / fan_in;
        } else {
            for (double& v : tensor.vec()) v = 0.05;
        }
    }
    return params;
}

// Scalar probe loss over every model output surface (both semantic heads,
// the change head and the exported gate maps).
inline NodeId fd_probe_loss(Tape& tape, const ForwardNodes& f) {
    NodeId loss = tape.reduce_mean(f.sem_logits_a);
    loss = tape.add(loss, tape.reduce_mean(tape.mul(f.sem_logits_b, f.sem_logits_b)));
    loss = tape.add(loss, tape.reduce_mean(tape.sigmoid(f.change_logit)));
    for (const auto& [wz, wh] : f.gate_maps) {
        loss = tape.add(loss, tape.reduce_mean(tape.mul(wz, wz)));
        loss = tape.add(loss, tape.reduce_mean(tape.mul(wh, wh)));
    }
    return loss;
}

}  // namespace scd::testing
