#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "casnet/errors.hpp"
#include "casnet/interp.hpp"
#include "casnet/losses.hpp"
#include "casnet/rng.hpp"
#include "support/fields.hpp"

using namespace casnet;

namespace {

ProbLabelVolume random_prob(const GridSpec& g, int c, Rng& rng, double lo = 0.1,
                            double hi = 1.0) {
    ProbLabelVolume p(g, c);
    for (auto& v : p.data) v = rng.uniform(lo, hi);
    return p;
}

ScalarVolume random_scalar(const GridSpec& g, Rng& rng) {
    ScalarVolume s(g);
    for (auto& v : s.data) v = rng.uniform(-1.0, 1.0);
    return s;
}

// Independent recomputation of the mean-squared segmentation loss.
double naive_seg_loss(const ProbLabelVolume& a, const ProbLabelVolume& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / (double(a.grid.voxels()) * a.channels);
}

} // namespace

TEST_CASE("seg_loss basics") {
    const GridSpec g{2, 2, 2};
    ProbLabelVolume s(g, 2);
    for (std::int64_t v = 0; v < g.voxels(); ++v) s.data[v * 2] = 1.0;
    CHECK(seg_loss(s, s) == 0.0);

    // Flip one voxel's one-hot assignment: two channels differ by 1 each.
    ProbLabelVolume s_hat = s;
    s_hat.data[3 * 2] = 0.0;
    s_hat.data[3 * 2 + 1] = 1.0;
    CHECK(seg_loss(s_hat, s) == doctest::Approx(0.125).epsilon(1e-15));

    ProbLabelVolume wrong_c(g, 3);
    CHECK_THROWS_AS((void)seg_loss(wrong_c, s), ShapeError);
    ProbLabelVolume wrong_g(GridSpec{2, 2, 3}, 2);
    CHECK_THROWS_AS((void)seg_loss(wrong_g, s), ShapeError);
}

TEST_CASE("seg_loss and mean_squared_diff match naive loops") {
    const GridSpec g{5, 4, 3};
    Rng rng(90);
    for (int trial = 0; trial < 4; ++trial) {
        ProbLabelVolume a = random_prob(g, 3, rng);
        ProbLabelVolume b = random_prob(g, 3, rng);
        CHECK(seg_loss(a, b) == doctest::Approx(naive_seg_loss(a, b)).epsilon(1e-12));

        ScalarVolume x = random_scalar(g, rng);
        ScalarVolume y = random_scalar(g, rng);
        double acc = 0.0;
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            const double d = x.data[i] - y.data[i];
            acc += d * d;
        }
        CHECK(mean_squared_diff(x, y) ==
              doctest::Approx(acc / double(g.voxels())).epsilon(1e-12));
    }
}

TEST_CASE("loss weight schedule switches at the configured epoch, inclusive") {
    const LossWeights base;
    CHECK(at_epoch(base, 0).lambda_i == 2.0);
    CHECK(at_epoch(base, 0).lambda_l == 1.0);
    CHECK(at_epoch(base, 199).lambda_i == 2.0);
    CHECK(at_epoch(base, 200).lambda_i == 1.0);
    CHECK(at_epoch(base, 200).lambda_l == 2.0);
    CHECK(at_epoch(base, 500).lambda_l == 2.0);
    CHECK(at_epoch(base, 500).lambda_g == 200.0);

    LossWeights bad;
    bad.lambda_d = -1.0;
    CHECK_THROWS_AS((void)at_epoch(bad, 0), ConfigError);
}

TEST_CASE("registration_loss trivial anchors") {
    const GridSpec g{6, 5, 4};
    Rng rng(91);
    ScalarVolume i = random_scalar(g, rng);
    // The label-term anchor needs channel sums that are exactly 1 so the
    // identity warp's renormalization is a bitwise no-op; one-hot maps are.
    LabelMap lm(g);
    for (auto& v : lm.data) v = static_cast<int>(rng.below(3));
    ProbLabelVolume s = one_hot(lm, 3);
    DeformationField id(g);
    LossWeights w;

    CHECK(registration_loss(i, s, id, i, s, w) == 0.0);

    ScalarVolume a = i;
    for (auto& v : a.data) v += 1.0;
    CHECK(registration_loss(a, s, id, i, s, w) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("registration_loss matches a naive trilinear recomputation") {
    const GridSpec g{7, 6, 5};
    Rng rng(92);
    ScalarVolume a = random_scalar(g, rng);
    ProbLabelVolume a_s = random_prob(g, 3, rng);
    ScalarVolume i = random_scalar(g, rng);
    ProbLabelVolume s = random_prob(g, 3, rng);
    DeformationField phi(testsupport::smooth_field(g, 93, 1.0));
    LossWeights w;
    w.lambda_i = 0.7;
    w.lambda_l = 1.3;

    double img_acc = 0.0;
    double lab_acc = 0.0;
    const int c = a_s.channels;
    for (std::int64_t z = 0; z < g.h; ++z)
        for (std::int64_t y = 0; y < g.w; ++y)
            for (std::int64_t x = 0; x < g.l; ++x) {
                const std::int64_t v = g.index(x, y, z);
                const double px = x + phi.displacement.at(x, y, z, 0);
                const double py = y + phi.displacement.at(x, y, z, 1);
                const double pz = z + phi.displacement.at(x, y, z, 2);
                const double wi = trilinear_sample(a, px, py, pz);
                img_acc += (wi - i.data[v]) * (wi - i.data[v]);
                double raw[3];
                double sum = 0.0;
                for (int k = 0; k < c; ++k) {
                    raw[k] = trilinear_sample(a_s, k, px, py, pz);
                    sum += raw[k];
                }
                for (int k = 0; k < c; ++k) {
                    const double d = raw[k] / sum - s.data[v * c + k];
                    lab_acc += d * d;
                }
            }
    const double expect = w.lambda_l * lab_acc / (double(g.voxels()) * c) +
                          w.lambda_i * img_acc / double(g.voxels());
    CHECK(registration_loss(a, a_s, phi, i, s, w) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("regularization_loss anchors and naive oracle") {
    const GridSpec g{6, 6, 6};
    VectorField zero(g);
    LossWeights w;
    CHECK(regularization_loss(zero, zero, w) == 0.0);

    VectorField unit_x(g);
    for (std::int64_t v = 0; v < g.voxels(); ++v) unit_x.data[v * 3] = 1.0;
    CHECK(regularization_loss(unit_x, zero, w) ==
          doctest::Approx(500.0 / 3.0).epsilon(1e-12));

    Rng rng(94);
    VectorField u(g), u_bar(g);
    for (auto& x : u.data) x = rng.uniform(-1.0, 1.0);
    for (auto& x : u_bar.data) x = rng.uniform(-1.0, 1.0);
    const FieldJacobian jac = spatial_gradient(u);
    double jac_acc = 0.0;
    for (double x : jac.data) jac_acc += x * x;
    double u_acc = 0.0;
    for (double x : u.data) u_acc += x * x;
    double ub_acc = 0.0;
    for (double x : u_bar.data) ub_acc += x * x;
    const double n = double(g.voxels());
    const double expect = w.lambda_g * jac_acc / (9.0 * n) + w.lambda_d * u_acc / (3.0 * n) +
                          w.lambda_m * ub_acc / (3.0 * n);
    CHECK(regularization_loss(u, u_bar, w) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("total_loss sums finite parts") {
    CHECK(total_loss(0, 0, 0, 0) == 0.0);
    CHECK(total_loss(1, 2, 3, 4) == 10.0);
    CHECK_THROWS_AS((void)total_loss(1, std::nan(""), 3, 4), NumericError);
}

TEST_CASE("losses are invariant under consistent voxel relabeling") {
    const GridSpec g{4, 4, 4};
    Rng rng(95);
    ProbLabelVolume a = random_prob(g, 3, rng);
    ProbLabelVolume b = random_prob(g, 3, rng);
    // Arbitrary voxel permutation applied to both arguments.
    std::vector<std::int64_t> perm(static_cast<std::size_t>(g.voxels()));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.below(i))]);
    ProbLabelVolume pa(g, 3), pb(g, 3);
    for (std::size_t v = 0; v < perm.size(); ++v)
        for (int k = 0; k < 3; ++k) {
            pa.data[v * 3 + k] = a.data[static_cast<std::size_t>(perm[v]) * 3 + k];
            pb.data[v * 3 + k] = b.data[static_cast<std::size_t>(perm[v]) * 3 + k];
        }
    CHECK(seg_loss(pa, pb) == doctest::Approx(seg_loss(a, b)).epsilon(1e-12));

    // The gradient term is not invariant under arbitrary permutations, but a
    // mirror flip preserves the finite-difference stencil structure.
    VectorField u(g), u_bar(g);
    for (auto& x : u.data) x = rng.uniform(-1.0, 1.0);
    for (auto& x : u_bar.data) x = rng.uniform(-1.0, 1.0);
    VectorField fu(g), fub(g);
    for (std::int64_t z = 0; z < g.h; ++z)
        for (std::int64_t y = 0; y < g.w; ++y)
            for (std::int64_t x = 0; x < g.l; ++x)
                for (int comp = 0; comp < 3; ++comp) {
                    fu.at(x, y, z, comp) = u.at(g.l - 1 - x, y, z, comp);
                    fub.at(x, y, z, comp) = u_bar.at(g.l - 1 - x, y, z, comp);
                }
    LossWeights w;
    CHECK(regularization_loss(fu, fub, w) ==
          doctest::Approx(regularization_loss(u, u_bar, w)).epsilon(1e-12));
}

TEST_CASE("loss gradients match central finite differences") {
    const GridSpec g{4, 3, 3};
    Rng rng(96);
    const double step = 1e-5;

    SUBCASE("seg_loss") {
        ProbLabelVolume s_hat = random_prob(g, 3, rng);
        ProbLabelVolume s = random_prob(g, 3, rng);
        ProbLabelVolume grad(g, 3);
        seg_loss_backward(s_hat, s, 1.0, grad);
        for (int probe = 0; probe < 24; ++probe) {
            const std::size_t i = static_cast<std::size_t>(rng.below(s_hat.data.size()));
            const double saved = s_hat.data[i];
            s_hat.data[i] = saved + step;
            const double fp = seg_loss(s_hat, s);
            s_hat.data[i] = saved - step;
            const double fm = seg_loss(s_hat, s);
            s_hat.data[i] = saved;
            const double fd = (fp - fm) / (2 * step);
            CHECK(std::fabs(grad.data[i] - fd) /
                      std::max({std::fabs(grad.data[i]), std::fabs(fd), 1e-12}) <
                  1e-6);
        }
    }

    SUBCASE("mean_squared_diff with scaling coefficient") {
        ScalarVolume a = random_scalar(g, rng);
        ScalarVolume b = random_scalar(g, rng);
        ScalarVolume grad(g);
        const double coeff = 0.37;
        mean_squared_diff_backward(a, b, coeff, grad);
        for (int probe = 0; probe < 16; ++probe) {
            const std::size_t i = static_cast<std::size_t>(rng.below(a.data.size()));
            const double saved = a.data[i];
            a.data[i] = saved + step;
            const double fp = coeff * mean_squared_diff(a, b);
            a.data[i] = saved - step;
            const double fm = coeff * mean_squared_diff(a, b);
            a.data[i] = saved;
            const double fd = (fp - fm) / (2 * step);
            CHECK(std::fabs(grad.data[i] - fd) /
                      std::max({std::fabs(grad.data[i]), std::fabs(fd), 1e-12}) <
                  1e-6);
        }
    }

    SUBCASE("regularization_loss wrt both fields") {
        VectorField u(g), u_bar(g);
        for (auto& x : u.data) x = rng.uniform(-1.0, 1.0);
        for (auto& x : u_bar.data) x = rng.uniform(-1.0, 1.0);
        LossWeights w;
        VectorField grad_u(g), grad_ub(g);
        regularization_loss_backward(u, u_bar, w, 1.0, grad_u, &grad_ub);
        for (int probe = 0; probe < 32; ++probe) {
            const std::size_t i = static_cast<std::size_t>(rng.below(u.data.size()));
            const double saved = u.data[i];
            u.data[i] = saved + step;
            const double fp = regularization_loss(u, u_bar, w);
            u.data[i] = saved - step;
            const double fm = regularization_loss(u, u_bar, w);
            u.data[i] = saved;
            const double fd = (fp - fm) / (2 * step);
            CHECK(std::fabs(grad_u.data[i] - fd) /
                      std::max({std::fabs(grad_u.data[i]), std::fabs(fd), 1e-12}) <
                  1e-6);
        }
        for (int probe = 0; probe < 8; ++probe) {
            const std::size_t i = static_cast<std::size_t>(rng.below(u_bar.data.size()));
            const double saved = u_bar.data[i];
            u_bar.data[i] = saved + step;
            const double fp = regularization_loss(u, u_bar, w);
            u_bar.data[i] = saved - step;
            const double fm = regularization_loss(u, u_bar, w);
            u_bar.data[i] = saved;
            const double fd = (fp - fm) / (2 * step);
            CHECK(std::fabs(grad_ub.data[i] - fd) /
                      std::max({std::fabs(grad_ub.data[i]), std::fabs(fd), 1e-12}) <
                  1e-6);
        }
    }
}
