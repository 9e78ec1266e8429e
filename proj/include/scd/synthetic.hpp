#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "scd/tensor.hpp"

namespace scd {

// Bi-temporal sample: images in [0,1], semantic maps with 0 = no-change,
// 1..K = classes (annotated only where change occurs), 255 = ignore, and the
// binary change mask. change_mask(p) = 1 exactly when a semantic label is
// present at p.
struct SamplePair {
    Tensor4 image_a;
    Tensor4 image_b;
    LabelImage sem_a;
    LabelImage sem_b;
    LabelImage change_mask;
};

// Seeded region growth: a T1 class map over K classes, a region subset of
// roughly change_rate area re-assigned to different classes at T2, and flat
// class colours rendered with independent +-0.1 uniform noise per date.
SamplePair gen_synthetic_pair(std::uint64_t seed, int h, int w, int k, double change_rate);

// Writes the sample quadruple `{id}_A.ppm`, `{id}_B.ppm`, `{id}_semA.pgm`,
// `{id}_semB.pgm`; the change mask is recoverable from the label maps.
void write_sample_pair(const SamplePair& pair, const std::filesystem::path& dir,
                       const std::string& id);

}  // namespace scd
