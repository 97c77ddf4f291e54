#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "casnet/errors.hpp"
#include "casnet/losses.hpp"
#include "casnet/models.hpp"
#include "casnet/optim.hpp"
#include "casnet/rng.hpp"
#include "casnet/volume.hpp"

using namespace casnet;

namespace {

// ||theta||^2 over one or two blocks.
struct QuadObjective final : Objective {
    std::vector<double> a, b;
    bool split = false;

    ParamSet params() override {
        ParamSet ps;
        ps.blocks.push_back({"a", a.data(), a.size()});
        if (split) ps.blocks.push_back({"b", b.data(), b.size()});
        return ps;
    }
    double value() override {
        double s = 0.0;
        for (double v : a) s += v * v;
        if (split)
            for (double v : b) s += v * v;
        return s;
    }
    void gradient(std::vector<std::vector<double>>& out) override {
        out.assign(split ? 2 : 1, {});
        out[0].resize(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) out[0][i] = 2.0 * a[i];
        if (split) {
            out[1].resize(b.size());
            for (std::size_t i = 0; i < b.size(); ++i) out[1][i] = 2.0 * b[i];
        }
    }
};

// Mean of squared field components.
struct MeanSqFieldObjective final : Objective {
    VectorField u;

    explicit MeanSqFieldObjective(const GridSpec& g) : u(g) {}
    ParamSet params() override { return {{{"u", u.data.data(), u.data.size()}}}; }
    double value() override {
        double s = 0.0;
        for (double v : u.data) s += v * v;
        return s / double(u.data.size());
    }
    void gradient(std::vector<std::vector<double>>& out) override {
        out.assign(1, std::vector<double>(u.data.size()));
        for (std::size_t i = 0; i < u.data.size(); ++i)
            out[0][i] = 2.0 * u.data[i] / double(u.data.size());
    }
};

// seg_loss(softmax(theta), S) with every voxel identical. Grids require
// extents >= 2, so the one-voxel closed form is realized as 8 equal voxels;
// the per-voxel 1/(n*c) scaling cancels against the n-voxel sum and the
// gradient values are unchanged.
struct SoftmaxMseObjective final : Objective {
    FeatureVolume feats;
    ProbLabelVolume target;
    SegModelParams theta;

    SoftmaxMseObjective() : feats(GridSpec{2, 2, 2}), target(GridSpec{2, 2, 2}, 2), theta(2) {
        for (std::int64_t v = 0; v < 8; ++v) target.data[v * 2] = 1.0; // class 0
    }
    ParamSet params() override {
        return {{{"theta", theta.theta.data(), theta.theta.size()}}};
    }
    double value() override { return seg_loss(ss_predict_features(feats, theta), target); }
    void gradient(std::vector<std::vector<double>>& out) override {
        const ProbLabelVolume probs = ss_predict_features(feats, theta);
        ProbLabelVolume grad_out(probs.grid, 2);
        seg_loss_backward(probs, target, 1.0, grad_out);
        SegModelParams grad(2);
        ss_backward(feats, probs, grad_out, grad);
        out.assign(1, grad.theta);
    }
};

struct CorruptedObjective final : Objective {
    QuadObjective inner;

    ParamSet params() override { return inner.params(); }
    double value() override { return inner.value(); }
    void gradient(std::vector<std::vector<double>>& out) override {
        inner.gradient(out);
        for (auto& block : out)
            for (auto& v : block) v *= 1.05; // deliberately wrong adjoint
    }
};

struct NanObjective final : Objective {
    double theta = 0.0;
    ParamSet params() override { return {{{"theta", &theta, 1}}}; }
    double value() override { return std::numeric_limits<double>::quiet_NaN(); }
    void gradient(std::vector<std::vector<double>>& out) override { out.assign(1, {0.0}); }
};

} // namespace

TEST_CASE("grad returns exact derivatives and rejects non-finite losses") {
    SUBCASE("mean squared field at the minimum has zero gradient") {
        MeanSqFieldObjective obj(GridSpec{4, 4, 4});
        const auto g = grad(obj);
        REQUIRE(g.size() == 1);
        for (double v : g[0]) CHECK(v == 0.0);
    }

    SUBCASE("softmax-MSE at uniform output matches the closed form") {
        // S = (1,0), output = (1/2,1/2): dL/ds = (s0-1, s1)/1... scaled by
        // 2/(n*c) = 1; softmax backward gives dtheta_bias = (-1/4, +1/4).
        SoftmaxMseObjective obj;
        CHECK(obj.value() == doctest::Approx(0.25).epsilon(1e-15));
        const auto g = grad(obj);
        REQUIRE(g.size() == 1);
        REQUIRE(g[0].size() == 8);
        // Features of the zero image are all zero, so coefficient gradients
        // vanish and only the biases move.
        for (int j = 0; j < 3; ++j) {
            CHECK(g[0][static_cast<std::size_t>(j)] == 0.0);
            CHECK(g[0][static_cast<std::size_t>(4 + j)] == 0.0);
        }
        CHECK(g[0][3] == doctest::Approx(-0.25).epsilon(1e-15));
        CHECK(g[0][7] == doctest::Approx(0.25).epsilon(1e-15));
    }

    SUBCASE("non-finite loss is refused") {
        NanObjective obj;
        CHECK_THROWS_AS((void)grad(obj), NumericError);
    }
}

TEST_CASE("grad is linear in the loss combination") {
    const GridSpec g{4, 3, 3};
    Rng rng(150);
    ScalarVolume x(g), t1(g), t2(g);
    for (auto& v : x.data) v = rng.uniform(-1, 1);
    for (auto& v : t1.data) v = rng.uniform(-1, 1);
    for (auto& v : t2.data) v = rng.uniform(-1, 1);
    const double a = 0.7, b = 1.9;

    // Combined adjoint pass with coefficients folded in.
    ScalarVolume combined(g);
    mean_squared_diff_backward(x, t1, a, combined);
    mean_squared_diff_backward(x, t2, b, combined);

    // Separate unit-coefficient gradients combined afterwards.
    ScalarVolume g1(g), g2(g);
    mean_squared_diff_backward(x, t1, 1.0, g1);
    mean_squared_diff_backward(x, t2, 1.0, g2);
    for (std::size_t i = 0; i < combined.data.size(); ++i)
        CHECK(combined.data[i] ==
              doctest::Approx(a * g1.data[i] + b * g2.data[i]).epsilon(1e-12));
}

TEST_CASE("grad_check classifies correct and corrupted adjoints") {
    SUBCASE("quadratic loss is exact for central differences") {
        QuadObjective obj;
        obj.a = {0.3, -1.2, 2.0, 0.7};
        const GradCheckReport r = grad_check(obj, 32, 1e-4, 42);
        CHECK(r.worst() < 1e-10);
        CHECK(r.probes == 32);
        int landed = 0;
        for (int n : r.block_probes) landed += n;
        CHECK(landed == 32);
    }

    SUBCASE("both blocks of a split objective are probed") {
        QuadObjective obj;
        obj.split = true;
        obj.a = {0.5, -0.25};
        obj.b = {1.5, 2.5, -3.0};
        const GradCheckReport r = grad_check(obj, 64, 1e-4, 43);
        REQUIRE(r.block_names.size() == 2);
        CHECK(r.block_probes[0] > 0);
        CHECK(r.block_probes[1] > 0);
        CHECK(r.worst() < 1e-10);
    }

    SUBCASE("a 5% wrong adjoint is flagged") {
        CorruptedObjective obj;
        obj.inner.a = {0.4, -0.9, 1.1};
        const GradCheckReport r = grad_check(obj, 16, 1e-4, 44);
        CHECK(r.worst() > 1e-2);
    }

    SUBCASE("reports are deterministic under a fixed seed") {
        QuadObjective obj;
        obj.a = {0.3, -1.2, 2.0};
        const GradCheckReport r1 = grad_check(obj, 10, 1e-4, 7);
        const GradCheckReport r2 = grad_check(obj, 10, 1e-4, 7);
        CHECK(r1.max_rel_err == r2.max_rel_err);
        CHECK(r1.block_probes == r2.block_probes);
    }

    SUBCASE("step size outside [1e-7, 1e-3] is rejected") {
        QuadObjective obj;
        obj.a = {1.0};
        CHECK_THROWS_AS((void)grad_check(obj, 4, 1e-8, 1), ConfigError);
        CHECK_THROWS_AS((void)grad_check(obj, 4, 1e-2, 1), ConfigError);
    }
}

TEST_CASE("adam_step follows the bias-corrected update") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        AdamState st(1e-2);
        std::vector<double> p{1.0, -2.0, 3.0};
        const std::vector<double> before = p;
        adam_step(st, p, {0.0, 0.0, 0.0});
        CHECK(p == before);
        CHECK(st.t == 1);
    }

    SUBCASE("first step matches the closed form") {
        AdamState st(0.05);
        std::vector<double> p{1.0, -1.0};
        const std::vector<double> g{0.3, -2.0};
        adam_step(st, p, g);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double expect =
                (i == 0 ? 1.0 : -1.0) - 0.05 * g[i] / (std::fabs(g[i]) + st.eps);
            CHECK(p[i] == doctest::Approx(expect).epsilon(1e-12));
        }
    }

    SUBCASE("convex quadratic converges within 5000 steps at lr 1e-2") {
        AdamState st(1e-2);
        std::vector<double> p{1.0, -2.0, 0.5};
        std::vector<double> sampled;
        for (int step = 0; step < 5000; ++step) {
            if (step % 250 == 0) {
                double l = 0.0;
                for (double v : p) l += v * v;
                sampled.push_back(l);
            }
            std::vector<double> g(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) g[i] = 2.0 * p[i];
            adam_step(st, p, g);
        }
        double norm = 0.0;
        for (double v : p) norm += v * v;
        CHECK(std::sqrt(norm) < 1e-3);
        // Monotone decrease after burn-in.
        for (std::size_t i = 4; i + 1 < sampled.size(); ++i)
            CHECK(sampled[i + 1] <= sampled[i] * (1.0 + 1e-9));
    }

    SUBCASE("shape mismatches are rejected") {
        AdamState st(1e-2);
        std::vector<double> p{1.0, 2.0};
        CHECK_THROWS_AS(adam_step(st, p, {1.0}), ShapeError);
        adam_step(st, p, {0.1, 0.1});
        std::vector<double> q{1.0, 2.0, 3.0};
        CHECK_THROWS_AS(adam_step(st, q, {0.1, 0.1, 0.1}), ShapeError);
    }
}
