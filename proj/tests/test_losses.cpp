#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "scd/losses.hpp"
#include "scd/rng.hpp"

using namespace scd;

namespace {

Tensor4 random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
    Tensor4 t(n, c, h, w);
    for (double& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
}

LabelImage all_labels(int n, int h, int w, int v) { return LabelImage(n, h, w, v); }

}  // namespace

TEST_CASE("cosine map self similarity and orthogonality") {
    Rng rng(1);
    Tape tape;
    Tensor4 x = random_tensor(rng, 1, 4, 3, 3, 0.2, 1.0);
    NodeId c = tape.cosine_map(tape.input(x), tape.input(x));
    REQUIRE(tape.value(c).shape() == Shape4{1, 1, 3, 3});
    for (std::int64_t i = 0; i < 9; ++i) CHECK(tape.value(c)[i] == doctest::Approx(1.0).epsilon(1e-12));

    Tensor4 a(1, 2, 1, 1), b(1, 2, 1, 1);
    a.at(0, 0, 0, 0) = 1.0;
    b.at(0, 1, 0, 0) = 1.0;
    NodeId o = tape.cosine_map(tape.input(a), tape.input(b));
    CHECK(tape.value(o)[0] == 0.0);

    CHECK_THROWS_AS(tape.cosine_map(tape.input(a), tape.input(Tensor4(1, 3, 1, 1))), ShapeError);
}

TEST_CASE("cosine map gradient matches finite differences") {
    for (int seed = 0; seed < 5; ++seed) {
        Rng rng(100 + static_cast<std::uint64_t>(seed));
        Tape tape;
        NodeId a = tape.param("a", random_tensor(rng, 1, 4, 3, 3));
        NodeId b = tape.param("b", random_tensor(rng, 1, 4, 3, 3));
        NodeId loss = tape.reduce_mean(tape.cosine_map(a, b));
        CHECK(tape.finite_diff_check(loss, 1e-5) < 1e-4);
    }
}

TEST_CASE("sc loss closed forms") {
    // all unchanged with perfect alignment
    Tape tape;
    Tensor4 ones(1, 1, 2, 2, 1.0);
    NodeId c = tape.input(ones);
    CHECK(tape.value(tape.sc_loss(c, all_labels(1, 2, 2, 1), 0.1))[0] == 0.0);

    // one changed pixel inside the margin
    Tensor4 cv(1, 1, 1, 1, 0.05);
    Tape t2;
    CHECK(t2.value(t2.sc_loss(t2.input(cv), all_labels(1, 1, 1, -1), 0.1))[0] == 0.0);

    // one changed pixel above the margin
    Tensor4 cv2(1, 1, 1, 1, 0.5);
    Tape t3;
    CHECK(t3.value(t3.sc_loss(t3.input(cv2), all_labels(1, 1, 1, -1), 0.1))[0] ==
          doctest::Approx(0.4).epsilon(1e-15));

    // zero contributing pixels
    Tape t4;
    NodeId cz = t4.input(cv2);
    CHECK_THROWS_AS(t4.sc_loss(cz, all_labels(1, 1, 1, 0), 0.1), EmptyReductionError);
}

TEST_CASE("ssc loss closed forms") {
    // changed pixel exactly at the margin
    Tape tape;
    Tensor4 cv(1, 1, 1, 1, 0.1);
    const double got = tape.value(tape.ssc_loss(tape.input(cv), all_labels(1, 1, 1, -1), 0.1, 0.5))[0];
    CHECK(got == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-14));

    // changed pixel at cos 0.9: frozen from a 40-digit evaluation of
    // 0.5*log(1+exp(1.6))
    Tensor4 cv2(1, 1, 1, 1, 0.9);
    Tape t2;
    CHECK(t2.value(t2.ssc_loss(t2.input(cv2), all_labels(1, 1, 1, -1), 0.1, 0.5))[0] ==
          doctest::Approx(0.8919503704441694).epsilon(1e-14));

    // the unchanged branch is shared with sc_loss
    Rng rng(7);
    Tensor4 cm = random_tensor(rng, 1, 1, 3, 3, -0.9, 0.9);
    Tape t3;
    NodeId cn = t3.input(cm);
    const double sc = t3.value(t3.sc_loss(cn, all_labels(1, 3, 3, 1), 0.1))[0];
    const double ssc = t3.value(t3.ssc_loss(cn, all_labels(1, 3, 3, 1), 0.1, 0.25))[0];
    CHECK(sc == ssc);

    Tape t4;
    NodeId c4 = t4.input(cv2);
    CHECK_THROWS_AS(t4.ssc_loss(c4, all_labels(1, 1, 1, -1), 0.1, 0.0), ParamError);
}

TEST_CASE("ssc stays within tau*ln2 above the hinge over the full grid") {
    // The changed-branch difference tau*softplus((c-m)/tau) - max(0, c-m)
    // collapses to the closed form tau*log1p(exp(-|c-m|/tau)) on both sides
    // of the margin; subtracting the two losses directly would cancel to the
    // last ulp for small tau, so the bound is checked on the closed form and
    // the direct evaluation is pinned to it within rounding.
    const double m = 0.1;
    for (double tau : {1.0, 0.5, 0.1, 0.02, 0.01, 0.005}) {
        double max_gap = 0.0, min_gap = 1e9, max_mismatch = 0.0;
        for (int i = 0; i <= 20000; ++i) {
            const double c = -1.0 + i * 1e-4;
            const double gap = tau * std::log1p(std::exp(-std::fabs(c - m) / tau));
            max_gap = std::max(max_gap, gap);
            min_gap = std::min(min_gap, gap);
            const double direct =
                tau * stable_softplus((c - m) / tau) - std::max(0.0, c - m);
            max_mismatch = std::max(max_mismatch, std::fabs(direct - gap));
        }
        INFO("tau = ", tau);
        CHECK(min_gap > 0.0);
        CHECK(max_gap <= tau * std::log(2.0) + 1e-9);
        CHECK(max_mismatch <= 1e-14);
    }
}

TEST_CASE("ssc changed-branch derivative is the logistic of the scaled gap") {
    const double m = 0.1;
    for (double tau : {0.5, 0.02}) {
        for (int i = 0; i <= 200; ++i) {
            const double c = -1.0 + i * 0.01;
            Tape tape;
            NodeId p = tape.param("c", Tensor4(1, 1, 1, 1, c));
            NodeId loss = tape.ssc_loss(p, all_labels(1, 1, 1, -1), m, tau);
            const double grad = tape.backward(loss).grads.at("c")[0];
            CHECK(std::fabs(grad - stable_sigmoid((c - m) / tau)) <= 1e-10);
        }
        // exactly one half at the margin
        Tape tape;
        NodeId p = tape.param("c", Tensor4(1, 1, 1, 1, m));
        CHECK(tape.backward(tape.ssc_loss(p, all_labels(1, 1, 1, -1), m, tau)).grads.at("c")[0] ==
              0.5);
    }
    // the sc counterpart is the step function
    for (double c : {-0.5, 0.0, 0.0999, 0.1001, 0.7}) {
        Tape tape;
        NodeId p = tape.param("c", Tensor4(1, 1, 1, 1, c));
        const double g = tape.backward(tape.sc_loss(p, all_labels(1, 1, 1, -1), m)).grads.at("c")[0];
        CHECK(g == (c > m ? 1.0 : 0.0));
    }
}

TEST_CASE("ssc changed branch increases strictly in the cosine") {
    double prev = -1.0;
    for (int i = 0; i <= 2000; ++i) {
        const double c = -1.0 + i * 0.001;
        const double v = 0.5 * stable_softplus((c - 0.1) / 0.5);
        CHECK(v > prev);
        prev = v;
    }
}

TEST_CASE("gradient activation ratio counts hinge-active changed pixels") {
    Tensor4 cos(1, 1, 2, 2);
    cos[0] = -1.0;
    cos[1] = -1.0;
    cos[2] = -1.0;
    cos[3] = -1.0;
    const LabelImage changed = all_labels(1, 2, 2, -1);
    CHECK(gradient_activation_ratio(cos, changed, 0.1) == 0.0);
    for (std::int64_t i = 0; i < 4; ++i) cos[i] = 1.0;
    CHECK(gradient_activation_ratio(cos, changed, 0.1) == 1.0);
    cos[0] = -0.5;
    CHECK(gradient_activation_ratio(cos, changed, 0.1) == 0.75);
    CHECK_THROWS_AS(gradient_activation_ratio(cos, all_labels(1, 2, 2, 1), 0.1),
                    EmptyReductionError);
}

TEST_CASE("semantic cross entropy closed forms and gradient") {
    // saturated one-hot logits
    Tape tape;
    Tensor4 logits(1, 4, 2, 2);
    LabelImage labels(1, 2, 2);
    Rng rng(11);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) {
            const int t = rng.uniform_int(0, 3);
            labels.at(0, y, x) = t;
            logits.at(0, t, y, x) = 1000.0;
        }
    CHECK(tape.value(tape.semantic_ce(tape.input(logits), labels, 255))[0] < 1e-6);

    // uniform zero logits
    Tape t2;
    CHECK(t2.value(t2.semantic_ce(t2.input(Tensor4(1, 4, 3, 3)), all_labels(1, 3, 3, 2), 255))[0] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-14));

    // finite differences
    Tape t3;
    NodeId p = t3.param("logits", random_tensor(rng, 1, 4, 3, 3));
    LabelImage mixed(1, 3, 3);
    for (auto& v : mixed.v) v = rng.uniform_int(0, 3);
    mixed.v[4] = 255;  // one ignored pixel
    CHECK(t3.finite_diff_check(t3.semantic_ce(p, mixed, 255), 1e-5) < 1e-4);

    // label outside the class range
    Tape t4;
    NodeId q = t4.input(Tensor4(1, 3, 1, 1));
    CHECK_THROWS_AS(t4.semantic_ce(q, all_labels(1, 1, 1, 3), 255), DataError);
    CHECK_THROWS_AS(t4.semantic_ce(q, all_labels(1, 1, 1, 255), 255), EmptyReductionError);
}

TEST_CASE("change bce closed forms and gradient") {
    Tape tape;
    CHECK(tape.value(tape.change_bce(tape.input(Tensor4(1, 1, 1, 1, 1000.0)),
                                     all_labels(1, 1, 1, 1)))[0] < 1e-6);
    CHECK(tape.value(tape.change_bce(tape.input(Tensor4(1, 1, 2, 2, 0.0)),
                                     all_labels(1, 2, 2, 0)))[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-14));

    Rng rng(13);
    Tape t2;
    NodeId p = t2.param("logit", random_tensor(rng, 1, 1, 3, 3, -2.0, 2.0));
    LabelImage target(1, 3, 3);
    for (auto& v : target.v) v = rng.uniform_int(0, 1);
    CHECK(t2.finite_diff_check(t2.change_bce(p, target), 1e-5) < 1e-4);

    Tape t3;
    NodeId q = t3.input(Tensor4(1, 1, 1, 1));
    CHECK_THROWS_AS(t3.change_bce(q, all_labels(1, 1, 1, 2)), DataError);
}

TEST_CASE("consistency losses pass finite differences through the cosine") {
    for (int seed = 0; seed < 4; ++seed) {
        Rng rng(500 + static_cast<std::uint64_t>(seed));
        LabelImage y(1, 3, 3);
        for (auto& v : y.v) v = rng.uniform01() < 0.5 ? 1 : -1;
        Tape tape;
        NodeId a = tape.param("a", random_tensor(rng, 1, 4, 3, 3));
        NodeId b = tape.param("b", random_tensor(rng, 1, 4, 3, 3));
        NodeId loss = tape.ssc_loss(tape.cosine_map(a, b), y, 0.1, 0.5);
        CHECK(tape.finite_diff_check(loss, 1e-5) < 1e-4);
    }
}

namespace {
struct TotalLossFixture {
    int n = 1, k = 5, h = 4, w = 4, d = 6;
    Tensor4 logits_a, logits_b, change_logit, feats_a, feats_b;
    BatchLabels labels;

    explicit TotalLossFixture(Rng& rng)
        : logits_a(random_tensor(rng, n, k, h, w)),
          logits_b(random_tensor(rng, n, k, h, w)),
          change_logit(random_tensor(rng, n, 1, h, w)),
          feats_a(random_tensor(rng, n, d, h, w)),
          feats_b(random_tensor(rng, n, d, h, w)) {
        labels.sem_a = LabelImage(n, h, w);
        labels.sem_b = LabelImage(n, h, w);
        labels.change_mask = LabelImage(n, h, w);
        for (std::size_t i = 0; i < labels.change_mask.v.size(); ++i) {
            const bool changed = rng.uniform01() < 0.5;
            labels.change_mask.v[i] = changed ? 1 : 0;
            labels.sem_a.v[i] = changed ? rng.uniform_int(1, k - 1) : 0;
            labels.sem_b.v[i] = changed ? rng.uniform_int(1, k - 1) : 0;
        }
    }
};
}  // namespace

TEST_CASE("total loss composition and breakdown identity") {
    Rng rng(2121);
    for (int it = 0; it < 10; ++it) {
        TotalLossFixture fx(rng);
        LossConfig cfg;
        cfg.variant = it % 2 == 0 ? ConsistencyVariant::Ssc : ConsistencyVariant::Sc;
        cfg.sc_weight = rng.uniform(0.25, 2.0);
        Tape tape;
        TotalLossNodes r = total_loss(
            tape, tape.input(fx.logits_a), tape.input(fx.logits_b), tape.input(fx.change_logit),
            tape.input(fx.feats_a), tape.input(fx.feats_b), fx.labels, cfg);
        const double recomputed =
            r.values.ce_a + r.values.ce_b + r.values.change_term + cfg.sc_weight * r.values.sc_term;
        CHECK(std::fabs(r.values.total - recomputed) <= 1e-12);
        CHECK(r.values.activation_ratio >= 0.0);
        CHECK(r.values.activation_ratio <= 1.0);
    }
}

TEST_CASE("total loss with variant none drops the consistency term") {
    Rng rng(77);
    TotalLossFixture fx(rng);
    LossConfig cfg;
    cfg.variant = ConsistencyVariant::None;
    Tape tape;
    TotalLossNodes r = total_loss(
        tape, tape.input(fx.logits_a), tape.input(fx.logits_b), tape.input(fx.change_logit),
        tape.input(fx.feats_a), tape.input(fx.feats_b), fx.labels, cfg);
    CHECK(r.values.sc_term == 0.0);
    CHECK(std::fabs(r.values.total - (r.values.ce_a + r.values.ce_b + r.values.change_term)) <=
          1e-12);
}

TEST_CASE("perfect predictions drive every component to zero") {
    const int n = 1, k = 3, h = 4, w = 4, d = 4;
    Rng rng(31);
    BatchLabels labels;
    labels.sem_a = LabelImage(n, h, w);
    labels.sem_b = LabelImage(n, h, w);
    labels.change_mask = LabelImage(n, h, w);
    Tensor4 logits_a(n, k, h, w), logits_b(n, k, h, w), change(n, 1, h, w);
    Tensor4 fa(n, d, h, w), fb(n, d, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool changed = (y + x) % 2 == 0;
            labels.change_mask.at(0, y, x) = changed ? 1 : 0;
            const int ca = changed ? rng.uniform_int(1, k - 1) : 0;
            const int cb = changed ? rng.uniform_int(1, k - 1) : 0;
            labels.sem_a.at(0, y, x) = ca;
            labels.sem_b.at(0, y, x) = cb;
            logits_a.at(0, ca, y, x) = 1000.0;
            logits_b.at(0, cb, y, x) = 1000.0;
            change.at(0, 0, y, x) = changed ? 1000.0 : -1000.0;
            if (changed) {
                fa.at(0, 0, y, x) = 1.0;  // orthogonal pair: cosine 0, inside the margin
                fb.at(0, 1, y, x) = 1.0;
            } else {
                for (int c = 0; c < d; ++c) {
                    fa.at(0, c, y, x) = 0.7;
                    fb.at(0, c, y, x) = 0.7;
                }
            }
        }
    LossConfig cfg;
    cfg.variant = ConsistencyVariant::Sc;
    Tape tape;
    TotalLossNodes r = total_loss(tape, tape.input(logits_a), tape.input(logits_b),
                                  tape.input(change), tape.input(fa), tape.input(fb), labels, cfg);
    CHECK(r.values.ce_a < 1e-6);
    CHECK(r.values.ce_b < 1e-6);
    CHECK(r.values.change_term < 1e-6);
    CHECK(r.values.sc_term < 1e-6);
    CHECK(r.values.total < 1e-6);
}

TEST_CASE("sc is non-negative and ssc strictly positive with changed pixels") {
    Rng rng(41);
    for (int it = 0; it < 20; ++it) {
        Tensor4 cos = random_tensor(rng, 1, 1, 4, 4, -1.0, 1.0);
        LabelImage y(1, 4, 4);
        bool any_changed = false;
        for (auto& v : y.v) {
            v = rng.uniform01() < 0.5 ? -1 : 1;
            any_changed |= v == -1;
        }
        if (!any_changed) y.v[0] = -1;
        Tape tape;
        NodeId c = tape.input(cos);
        CHECK(tape.value(tape.sc_loss(c, y, 0.1))[0] >= 0.0);
        LabelImage changed_only = y;
        for (auto& v : changed_only.v) v = -1;
        CHECK(tape.value(tape.ssc_loss(c, changed_only, 0.1, 0.05))[0] > 0.0);
    }
}

TEST_CASE("change labels derive from mask and ignore pixels") {
    LabelImage mask(1, 2, 2), sa(1, 2, 2), sb(1, 2, 2);
    mask.at(0, 0, 0) = 1;
    sa.at(0, 0, 0) = 2;
    sb.at(0, 0, 0) = 3;
    sa.at(0, 1, 1) = 255;
    const LabelImage y = make_change_labels(mask, sa, sb, 255);
    CHECK(y.at(0, 0, 0) == -1);
    CHECK(y.at(0, 0, 1) == 1);
    CHECK(y.at(0, 1, 1) == 0);
}
