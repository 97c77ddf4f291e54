#include <doctest.h>

#include <cmath>
#include <cstring>
#include <utility>
#include <vector>

#include "casnet/atlas.hpp"
#include "casnet/errors.hpp"
#include "casnet/interp.hpp"
#include "casnet/phantom.hpp"
#include "casnet/rng.hpp"
#include "support/fields.hpp"
#include "support/volumes.hpp"

using namespace casnet;

namespace {

VectorField negated(const VectorField& v) {
    VectorField out(v.grid);
    for (std::size_t i = 0; i < v.data.size(); ++i) out.data[i] = -v.data[i];
    return out;
}

double image_mae(const ScalarVolume& a, const ScalarVolume& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) acc += std::fabs(a.data[i] - b.data[i]);
    return acc / double(a.data.size());
}

// Phantom cohort with smoothed intensities (see support/volumes.hpp).
std::vector<PhantomSubject> make_cohort(int n, double age_lo, double age_hi,
                                        std::uint64_t seed0) {
    std::vector<PhantomSubject> subs;
    for (int i = 0; i < n; ++i) {
        PhantomSpec sp;
        sp.age = age_lo + (age_hi - age_lo) * i / std::max(1, n - 1);
        sp.seed = seed0 + static_cast<std::uint64_t>(i);
        sp.noise_sd = 0.0;
        subs.push_back(gen_phantom(sp));
        subs.back().image = testsupport::box_smooth3(subs.back().image);
    }
    return subs;
}

std::vector<AtlasInput> inputs_of(const std::vector<PhantomSubject>& subs) {
    std::vector<AtlasInput> in;
    for (const auto& s : subs) in.push_back({&s.image, &s.labels});
    return in;
}

} // namespace

TEST_CASE("age_group_of bins equal widths and clamps the top edge") {
    CHECK(age_group_of(kAgeMin, kAgeMin, kAgeMax, 4).index == 0);
    CHECK(age_group_of(kAgeMax, kAgeMin, kAgeMax, 4).index == 3);
    CHECK(age_group_of(kAgeMin + 0.2499 * (kAgeMax - kAgeMin), kAgeMin, kAgeMax, 4).index == 0);
    CHECK(age_group_of(kAgeMin + 0.5 * (kAgeMax - kAgeMin), kAgeMin, kAgeMax, 4).index == 2);
    CHECK(age_group_of(30.0, kAgeMin, kAgeMax, 1).index == 0);
    const AgeGroup g = age_group_of(25.0, kAgeMin, kAgeMax, 4);
    const std::vector<double> hot = g.one_hot();
    CHECK(hot.size() == 4);
    double sum = 0.0;
    for (double v : hot) sum += v;
    CHECK(sum == 1.0);
    CHECK(hot[static_cast<std::size_t>(g.index)] == 1.0);
    CHECK_THROWS_AS((void)age_group_of(25.0, 30.0, 30.0, 4), ConfigError);
    CHECK_THROWS_AS((void)age_group_of(25.0, kAgeMin, kAgeMax, 0), ConfigError);
}

TEST_CASE("init_global_atlas averages images and labelmaps") {
    const GridSpec g{6, 5, 4};

    SUBCASE("single subject is reproduced bitwise") {
        Rng rng(130);
        ScalarVolume img(g);
        for (auto& v : img.data) v = rng.uniform(0.0, 1.0);
        LabelMap lm(g);
        for (auto& v : lm.data) v = static_cast<int>(rng.below(3));
        const ProbLabelVolume lab = one_hot(lm, 3);
        const GlobalAtlas atlas = init_global_atlas({{&img, &lab}});
        CHECK(std::memcmp(atlas.image.data.data(), img.data.data(),
                          img.data.size() * sizeof(double)) == 0);
        CHECK(std::memcmp(atlas.labels.data.data(), lab.data.data(),
                          lab.data.size() * sizeof(double)) == 0);
        CHECK(atlas.epoch == 0);
    }

    SUBCASE("two constant images 0 and 2 average to 1") {
        ScalarVolume a(g), b(g);
        for (auto& v : b.data) v = 2.0;
        ProbLabelVolume lab(g, 2);
        for (std::int64_t v = 0; v < g.voxels(); ++v) lab.data[v * 2] = 1.0;
        const GlobalAtlas atlas = init_global_atlas({{&a, &lab}, {&b, &lab}});
        for (double v : atlas.image.data) CHECK(v == 1.0);
    }

    SUBCASE("mean of one-hot labelmaps keeps unit channel sums") {
        Rng rng(131);
        std::vector<LabelMap> lms;
        std::vector<ProbLabelVolume> labs;
        std::vector<ScalarVolume> imgs(5, ScalarVolume(g));
        for (int i = 0; i < 5; ++i) {
            LabelMap lm(g);
            for (auto& v : lm.data) v = static_cast<int>(rng.below(4));
            labs.push_back(one_hot(lm, 4));
        }
        std::vector<AtlasInput> in;
        for (int i = 0; i < 5; ++i) in.push_back({&imgs[static_cast<std::size_t>(i)],
                                                  &labs[static_cast<std::size_t>(i)]});
        const GlobalAtlas atlas = init_global_atlas(in);
        for (std::int64_t v = 0; v < g.voxels(); ++v) {
            double sum = 0.0;
            for (int k = 0; k < 4; ++k) sum += atlas.labels.data[v * 4 + k];
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
        CHECK(is_valid_prob(atlas.labels));
    }

    SUBCASE("empty dataset and mismatched grids are rejected") {
        CHECK_THROWS_AS((void)init_global_atlas({}), ConfigError);
        ScalarVolume a(g), b(GridSpec{4, 5, 6});
        ProbLabelVolume la(g, 2), lb(GridSpec{4, 5, 6}, 2);
        CHECK_THROWS_AS((void)init_global_atlas({{&a, &la}, {&b, &lb}}), ShapeError);
    }
}

TEST_CASE("conditional_field integrates the group's velocity both ways") {
    const GridSpec g{16, 16, 16};
    ConditionalParams params(g, 4);
    const IntegrationConfig cfg;

    SUBCASE("zero parameters yield the identity for every group") {
        for (int a = 0; a < 4; ++a) {
            const auto [psi, psi_inv] = conditional_field(params, AgeGroup{a, 4}, cfg);
            for (double v : psi.displacement.data) CHECK(v == 0.0);
            for (double v : psi_inv.displacement.data) CHECK(v == 0.0);
        }
    }

    SUBCASE("distinct groups get distinct fields") {
        params.q[1] = testsupport::smooth_field(g, 140, 1.0);
        const auto [psi0, i0] = conditional_field(params, AgeGroup{0, 4}, cfg);
        const auto [psi1, i1] = conditional_field(params, AgeGroup{1, 4}, cfg);
        CHECK(testsupport::interior_magnitude(psi0.displacement).max_mag == 0.0);
        CHECK(testsupport::interior_magnitude(psi1.displacement).max_mag > 0.1);
    }

    SUBCASE("psi composed with its inverse stays near the identity") {
        params.q[2] = testsupport::smooth_field(g, 141, 1.5);
        const auto [psi, psi_inv] = conditional_field(params, AgeGroup{2, 4}, cfg);
        const DeformationField round = compose(psi, psi_inv);
        const auto delta = testsupport::interior_magnitude(round.displacement);
        CHECK(delta.mean_mag < 0.05);
        CHECK(delta.max_mag < 0.2);
    }

    SUBCASE("group index is validated") {
        CHECK_THROWS_AS((void)conditional_field(params, AgeGroup{4, 4}, cfg), ConfigError);
        CHECK_THROWS_AS((void)conditional_field(params, AgeGroup{-1, 4}, cfg), ConfigError);
    }
}

TEST_CASE("conditional_atlas warps both channels") {
    // Four subjects: power-of-two count keeps the label means exact, so the
    // identity warp's renormalization is a bitwise no-op.
    const std::vector<PhantomSubject> subs = make_cohort(4, 22.0, 36.0, 950);
    const GlobalAtlas ga = init_global_atlas(inputs_of(subs));
    const GridSpec& g = ga.image.grid;

    SUBCASE("identity deformation reproduces the atlas") {
        const AtlasPair pair = conditional_atlas(ga, DeformationField(g));
        CHECK(std::memcmp(pair.image.data.data(), ga.image.data.data(),
                          ga.image.data.size() * sizeof(double)) == 0);
        CHECK(std::memcmp(pair.labels.data.data(), ga.labels.data.data(),
                          ga.labels.data.size() * sizeof(double)) == 0);
    }

    SUBCASE("integer translation shifts interior voxels") {
        DeformationField shift(g);
        for (std::int64_t v = 0; v < g.voxels(); ++v) shift.displacement.data[v * 3 + 1] = 2.0;
        const AtlasPair pair = conditional_atlas(ga, shift);
        for (std::int64_t z = 4; z < g.h - 4; ++z)
            for (std::int64_t y = 4; y < g.w - 4; ++y)
                for (std::int64_t x = 4; x < g.l - 4; ++x)
                    CHECK(pair.image.at(x, y, z) == ga.image.at(x, y + 2, z));
    }

    SUBCASE("warp there and back is within 1e-2 mean absolute error") {
        for (std::uint64_t seed : {601, 602, 603}) {
            const VectorField q = testsupport::smooth_field(g, seed, 1.5);
            const DeformationField psi = exp_svf(q, {});
            const DeformationField psi_inv = exp_svf(negated(q), {});
            const AtlasPair fwd = conditional_atlas(ga, psi);
            const GlobalAtlas fwd_atlas{fwd.image, fwd.labels, 0};
            const AtlasPair back = conditional_atlas(fwd_atlas, psi_inv);
            INFO("seed ", seed);
            CHECK(image_mae(back.image, ga.image) < 1e-2);
            CHECK(is_valid_prob(back.labels));
        }
    }

    SUBCASE("grid mismatch is rejected") {
        CHECK_THROWS_AS((void)conditional_atlas(ga, DeformationField(GridSpec{8, 8, 8})),
                        ShapeError);
    }
}

TEST_CASE("update_global_atlas refreshes from inverse-warped subjects") {
    SUBCASE("identity fields reproduce initialization") {
        const std::vector<PhantomSubject> subs = make_cohort(3, 23.0, 35.0, 960);
        const std::vector<AtlasInput> in = inputs_of(subs);
        const GlobalAtlas init = init_global_atlas(in);
        const GridSpec& g = init.image.grid;
        std::vector<std::pair<DeformationField, DeformationField>> ids(
            3, {DeformationField(g), DeformationField(g)});
        const GlobalAtlas upd = update_global_atlas(init, in, ids);
        CHECK(upd.epoch == 1);
        for (std::size_t i = 0; i < init.image.data.size(); ++i)
            CHECK(upd.image.data[i] == doctest::Approx(init.image.data[i]).epsilon(1e-12));
        for (std::size_t i = 0; i < init.labels.data.size(); ++i)
            CHECK(upd.labels.data[i] == doctest::Approx(init.labels.data[i]).epsilon(1e-12));
    }

    SUBCASE("single subject under integer translations lands translated") {
        const GridSpec g{16, 16, 16};
        Rng rng(132);
        ScalarVolume img(g);
        for (auto& v : img.data) v = rng.uniform(0.0, 1.0);
        LabelMap lm(g);
        for (auto& v : lm.data) v = static_cast<int>(rng.below(2));
        const ProbLabelVolume lab = one_hot(lm, 2);
        DeformationField phi_inv(g), psi_inv(g);
        for (std::int64_t v = 0; v < g.voxels(); ++v) {
            phi_inv.displacement.data[v * 3 + 0] = 1.0;
            psi_inv.displacement.data[v * 3 + 2] = -1.0;
        }
        const GlobalAtlas base{img, lab, 4};
        const GlobalAtlas upd =
            update_global_atlas(base, {{&img, &lab}}, {{phi_inv, psi_inv}});
        CHECK(upd.epoch == 5);
        for (std::int64_t z = 4; z < g.h - 4; ++z)
            for (std::int64_t y = 4; y < g.w - 4; ++y)
                for (std::int64_t x = 4; x < g.l - 4; ++x)
                    CHECK(upd.image.at(x, y, z) == img.at(x + 1, y, z - 1));
    }

    SUBCASE("recovers the template from subjects warped by known SVFs") {
        PhantomSpec tp;
        tp.age = 28.0;
        tp.seed = 77;
        tp.noise_sd = 0.0;
        PhantomSubject tmpl = gen_phantom(tp);
        tmpl.image = testsupport::box_smooth3(tmpl.image);
        const GridSpec& g = tp.grid;

        std::vector<PhantomSubject> warped;
        std::vector<std::pair<DeformationField, DeformationField>> inv;
        for (std::uint64_t seed : {701, 702, 703, 704}) {
            const VectorField v = testsupport::smooth_field(g, seed, 1.5);
            warped.push_back(warp_phantom(tmpl, v));
            inv.emplace_back(exp_svf(negated(v), {}), DeformationField(g));
        }
        const GlobalAtlas base{tmpl.image, tmpl.labels, 0};
        const GlobalAtlas upd = update_global_atlas(base, inputs_of(warped), inv);
        CHECK(image_mae(upd.image, tmpl.image) < 0.02);
        CHECK(is_valid_prob(upd.labels));
    }

    SUBCASE("field list length must match the dataset") {
        const std::vector<PhantomSubject> subs = make_cohort(2, 24.0, 34.0, 970);
        const std::vector<AtlasInput> in = inputs_of(subs);
        const GlobalAtlas init = init_global_atlas(in);
        std::vector<std::pair<DeformationField, DeformationField>> one(
            1, {DeformationField(init.image.grid), DeformationField(init.image.grid)});
        CHECK_THROWS_AS((void)update_global_atlas(init, in, one), ConfigError);
    }
}

TEST_CASE("accumulate_mean_displacement keeps a running arithmetic mean") {
    const GridSpec g{8, 8, 8};
    Rng rng(133);

    SUBCASE("first accumulation copies the field") {
        VectorField u(g);
        for (auto& v : u.data) v = rng.uniform(-1.0, 1.0);
        const MeanDisplacement m = accumulate_mean_displacement(MeanDisplacement{}, u);
        CHECK(m.count == 1);
        CHECK(std::memcmp(m.u_bar.data.data(), u.data.data(),
                          u.data.size() * sizeof(double)) == 0);
    }

    SUBCASE("U then -U cancels exactly") {
        VectorField u(g);
        for (auto& v : u.data) v = rng.uniform(-1.0, 1.0);
        MeanDisplacement m = accumulate_mean_displacement(MeanDisplacement{}, u);
        m = accumulate_mean_displacement(m, negated(u));
        CHECK(m.count == 2);
        for (double v : m.u_bar.data) CHECK(v == 0.0);
    }

    SUBCASE("k random fields match the naive mean") {
        std::vector<VectorField> fields;
        MeanDisplacement m;
        for (int i = 0; i < 5; ++i) {
            VectorField u(g);
            for (auto& v : u.data) v = rng.uniform(-2.0, 2.0);
            fields.push_back(u);
            m = accumulate_mean_displacement(m, u);
        }
        CHECK(m.count == 5);
        for (std::size_t i = 0; i < m.u_bar.data.size(); ++i) {
            double naive = 0.0;
            for (const auto& f : fields) naive += f.data[i];
            naive /= 5.0;
            CHECK(m.u_bar.data[i] == doctest::Approx(naive).epsilon(1e-12));
        }
    }

    SUBCASE("grid mismatch is rejected") {
        VectorField u(g);
        MeanDisplacement m = accumulate_mean_displacement(MeanDisplacement{}, u);
        CHECK_THROWS_AS((void)accumulate_mean_displacement(m, VectorField(GridSpec{4, 4, 4})),
                        ShapeError);
    }
}
