#include "scd/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <vector>

#include "scd/errors.hpp"
#include "scd/netpbm.hpp"
#include "scd/rng.hpp"

namespace scd {

namespace {

// Flat class colour from an HSV wheel.
void class_color(int cls, int k, double rgb[3]) {
    const double h6 = 6.0 * (cls - 1) / static_cast<double>(k);
    const double s = 0.65, v = 0.9;
    const int i = static_cast<int>(h6) % 6;
    const double f = h6 - std::floor(h6);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    switch (i) {
        case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
        default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
    }
}

struct FrontierCell {
    double cost;
    std::uint32_t order;  // insertion tiebreak keeps the pop order defined
    int pos;
    int region;
    bool operator>(const FrontierCell& o) const {
        if (cost != o.cost) return cost > o.cost;
        return order > o.order;
    }
};

// Multi-source randomized flood fill: organic Voronoi-like regions.
std::vector<int> grow_regions(Rng& rng, int h, int w, int region_count) {
    std::vector<int> region(static_cast<std::size_t>(h) * w, -1);
    std::priority_queue<FrontierCell, std::vector<FrontierCell>, std::greater<>> frontier;
    std::uint32_t order = 0;
    for (int r = 0; r < region_count; ++r) {
        int pos = 0;
        do {
            pos = rng.uniform_int(0, h * w - 1);
        } while (region[static_cast<std::size_t>(pos)] != -1);
        region[static_cast<std::size_t>(pos)] = r;
        frontier.push({rng.uniform01(), order++, pos, r});
    }
    const int dy[4] = {-1, 1, 0, 0};
    const int dx[4] = {0, 0, -1, 1};
    while (!frontier.empty()) {
        const FrontierCell cell = frontier.top();
        frontier.pop();
        const int cy = cell.pos / w, cx = cell.pos % w;
        for (int d = 0; d < 4; ++d) {
            const int ny = cy + dy[d], nx = cx + dx[d];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const int npos = ny * w + nx;
            if (region[static_cast<std::size_t>(npos)] != -1) continue;
            region[static_cast<std::size_t>(npos)] = cell.region;
            frontier.push({cell.cost + rng.uniform01(), order++, npos, cell.region});
        }
    }
    return region;
}

}  // namespace

SamplePair gen_synthetic_pair(std::uint64_t seed, int h, int w, int k, double change_rate) {
    if (h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0)
        throw ParamError("gen_synthetic_pair: H and W must be positive multiples of 32");
    if (k < 2) throw ParamError("gen_synthetic_pair: need at least two classes");
    if (!(change_rate > 0.0 && change_rate < 1.0))
        throw ParamError("gen_synthetic_pair: change_rate must lie in (0,1)");

    Rng rng(seed);
    const int region_count = std::max(8, h * w / 128);
    const std::vector<int> region = grow_regions(rng, h, w, region_count);

    std::vector<int> class_t1(static_cast<std::size_t>(region_count));
    for (int& c : class_t1) c = rng.uniform_int(1, k);

    // Pick a shuffled region subset whose area lands closest to the target.
    std::vector<std::int64_t> area(static_cast<std::size_t>(region_count), 0);
    for (int r : region) ++area[static_cast<std::size_t>(r)];
    std::vector<int> order(static_cast<std::size_t>(region_count));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    const double target = change_rate * h * w;
    std::vector<char> changed(static_cast<std::size_t>(region_count), 0);
    std::int64_t covered = 0;
    for (int r : order) {
        const std::int64_t next = covered + area[static_cast<std::size_t>(r)];
        if (std::llabs(next - static_cast<std::int64_t>(target)) <
            std::llabs(covered - static_cast<std::int64_t>(target))) {
            changed[static_cast<std::size_t>(r)] = 1;
            covered = next;
        }
        if (covered >= target) break;
    }

    std::vector<int> class_t2 = class_t1;
    for (int r = 0; r < region_count; ++r) {
        if (!changed[static_cast<std::size_t>(r)]) continue;
        const int shift = rng.uniform_int(1, k - 1);
        class_t2[static_cast<std::size_t>(r)] = (class_t1[static_cast<std::size_t>(r)] - 1 + shift) % k + 1;
    }

    SamplePair out;
    out.image_a = Tensor4(1, 3, h, w);
    out.image_b = Tensor4(1, 3, h, w);
    out.sem_a = LabelImage(1, h, w);
    out.sem_b = LabelImage(1, h, w);
    out.change_mask = LabelImage(1, h, w);

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int r = region[static_cast<std::size_t>(y) * w + x];
            const bool chg = changed[static_cast<std::size_t>(r)] != 0;
            const int c1 = class_t1[static_cast<std::size_t>(r)];
            const int c2 = class_t2[static_cast<std::size_t>(r)];
            out.change_mask.at(0, y, x) = chg ? 1 : 0;
            out.sem_a.at(0, y, x) = chg ? c1 : 0;
            out.sem_b.at(0, y, x) = chg ? c2 : 0;
            double rgb1[3], rgb2[3];
            class_color(c1, k, rgb1);
            class_color(c2, k, rgb2);
            for (int ch = 0; ch < 3; ++ch) {
                const double va = rgb1[ch] + rng.uniform(-0.1, 0.1);
                const double vb = rgb2[ch] + rng.uniform(-0.1, 0.1);
                out.image_a.at(0, ch, y, x) = std::clamp(va, 0.0, 1.0);
                out.image_b.at(0, ch, y, x) = std::clamp(vb, 0.0, 1.0);
            }
        }
    }
    return out;
}

void write_sample_pair(const SamplePair& pair, const std::filesystem::path& dir,
                       const std::string& id) {
    std::filesystem::create_directories(dir);
    write_ppm(pair.image_a, dir / (id + "_A.ppm"));
    write_ppm(pair.image_b, dir / (id + "_B.ppm"));
    write_pgm(pair.sem_a, dir / (id + "_semA.pgm"));
    write_pgm(pair.sem_b, dir / (id + "_semB.pgm"));
}

}  // namespace scd
