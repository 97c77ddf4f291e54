#include "casnet/phantom.hpp"

#include <array>
#include <cmath>

#include "casnet/errors.hpp"
#include "casnet/interp.hpp"
#include "casnet/rng.hpp"

namespace casnet {

namespace {

constexpr double kGrowthPerWeek = 0.004; // relative outer-boundary growth
constexpr std::array<double, 10> kIntensity = {0.02, 0.88, 0.55, 0.75, 0.55,
                                               0.88, 0.35, 0.75, 0.45, 0.65};

struct Anatomy {
    double cx, cy, cz;       // ellipsoid center
    double ax, ay, az;       // semi-axis scale factors (jittered)
    double r0;               // reference outer radius, effective voxels
    std::vector<double> radii; // boundary radii before growth/ripple, k=1..c-1
    double growth;           // age-dependent factor on the outer 3 boundaries
    double ripple_amp;       // age-dependent ripple amplitude
    double freq;
    double ph1, ph2;
};

Anatomy make_anatomy(const PhantomSpec& spec, Rng& rng) {
    const GridSpec& g = spec.grid;
    Anatomy a;
    a.cx = (g.l - 1) / 2.0;
    a.cy = (g.w - 1) / 2.0;
    a.cz = (g.h - 1) / 2.0;
    const double jx = 1.0 + rng.uniform(-0.003, 0.003);
    const double jy = 1.0 + rng.uniform(-0.003, 0.003);
    const double jz = 1.0 + rng.uniform(-0.003, 0.003);
    a.ax = 1.00 * jx;
    a.ay = 0.92 * jy;
    a.az = 0.85 * jz;
    const int min_dim = std::min(g.l, std::min(g.w, g.h));
    a.r0 = 0.38 * (min_dim - 1);
    const double r_inner = std::max(1.3, 0.22 * a.r0);
    a.radii.resize(static_cast<std::size_t>(spec.c) - 1);
    if (spec.c == 2) {
        a.radii[0] = a.r0;
    } else {
        const double spacing = (a.r0 - r_inner) / (spec.c - 2);
        if (spacing < 0.8 || a.r0 < 2.0) {
            throw ConfigError("gen_phantom: grid too small for the requested class count");
        }
        for (int k = 1; k < spec.c; ++k) {
            a.radii[static_cast<std::size_t>(k) - 1] = a.r0 - (k - 1) * spacing;
        }
    }
    a.growth = 1.0 + kGrowthPerWeek * (spec.age - kAgeMin);
    a.ripple_amp = spec.fold_amplitude_per_week * (spec.age - kAgeMin);
    a.freq = spec.fold_frequency;
    a.ph1 = 0.9 + rng.uniform(-0.1, 0.1);
    a.ph2 = 1.7 + rng.uniform(-0.1, 0.1);
    return a;
}

int label_at(const Anatomy& a, double x, double y, double z) {
    const double dx = (x - a.cx) / a.ax;
    const double dy = (y - a.cy) / a.ay;
    const double dz = (z - a.cz) / a.az;
    const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
    double ripple = 0.0;
    if (a.ripple_amp != 0.0 && r > 1e-9) {
        const double theta = std::acos(dz / r);
        const double phi = std::atan2(dy, dx);
        const double st = std::sin(theta);
        ripple = a.ripple_amp * st * st * std::sin(a.freq * theta + a.ph1) *
                 std::cos(a.freq * phi + a.ph2);
    }
    int label = 0;
    for (int k = 1; k <= static_cast<int>(a.radii.size()); ++k) {
        double boundary = a.radii[static_cast<std::size_t>(k) - 1];
        if (k <= 3) boundary *= a.growth;
        if (k == 2 || k == 3) boundary += ripple;
        if (r <= boundary) label = k;
    }
    return label;
}

} // namespace

double class_intensity(int k) {
    if (k < 0 || k >= static_cast<int>(kIntensity.size())) {
        throw ConfigError("class_intensity: class out of range");
    }
    return kIntensity[static_cast<std::size_t>(k)];
}

PhantomSubject gen_phantom(const PhantomSpec& spec) {
    if (spec.c < 2 || spec.c > 10) throw ConfigError("gen_phantom: c must be in [2, 10]");
    if (spec.age < kAgeMin || spec.age > kAgeMax) {
        throw ConfigError("gen_phantom: age outside [20.6, 38.2] weeks");
    }
    if (spec.noise_sd < 0) throw ConfigError("gen_phantom: noise_sd must be >= 0");
    const GridSpec& g = spec.grid;
    Rng rng(spec.seed);
    const Anatomy anat = make_anatomy(spec, rng);

    LabelMap labels(g);
#pragma omp parallel for schedule(static)
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                labels.data[g.index(x, y, z)] = label_at(anat, x, y, z);
            }
        }
    }

    PhantomSubject subject;
    subject.age = spec.age;
    subject.labels = one_hot(labels, spec.c);
    subject.image = ScalarVolume(g);
    // Noise drawn in scan order so output is bit-identical for a given spec.
    for (std::int64_t i = 0; i < g.voxels(); ++i) {
        const double base = kIntensity[static_cast<std::size_t>(labels.data[i])];
        subject.image.data[i] = spec.noise_sd > 0 ? rng.normal(base, spec.noise_sd) : base;
    }
    if (spec.artifact) {
        const int zmid = g.h / 2;
        for (int z = zmid - 1; z <= zmid + 1; ++z) {
            if (z < 0 || z >= g.h) continue;
            for (int y = 0; y < g.w; ++y)
                for (int x = 0; x < g.l; ++x) subject.image.data[g.index(x, y, z)] *= 0.5;
        }
    }
    return subject;
}

PhantomSpec subject_spec(int k, int n, double age_lo, double age_hi, std::uint64_t base_seed,
                         const PhantomSpec& proto) {
    if (n < 1) throw ConfigError("subject_spec: n must be >= 1");
    if (k < 0 || k >= n) throw ConfigError("subject_spec: index out of range");
    if (age_lo < kAgeMin || age_hi > kAgeMax || age_lo >= age_hi) {
        throw ConfigError("subject_spec: bad age range");
    }
    // Replays the shared jitter stream so subject k's age matches what a
    // full gen_dataset pass would assign.
    Rng age_rng(Rng::derive(base_seed, 0));
    double jitter = 0.0;
    for (int i = 0; i <= k; ++i) jitter = age_rng.uniform(0.1, 0.9);
    PhantomSpec spec = proto;
    spec.age = age_lo + (k + jitter) * (age_hi - age_lo) / n;
    spec.seed = Rng::derive(base_seed, static_cast<std::uint64_t>(k) + 1);
    return spec;
}

Split subject_split(int k, int test_every, int val_every) {
    if (test_every > 0 && k % test_every == test_every - 1) return Split::test;
    if (val_every > 0 && k % val_every == val_every - 1) return Split::val;
    return Split::train;
}

PhantomDataset gen_dataset(int n, double age_lo, double age_hi, std::uint64_t base_seed,
                           const PhantomSpec& proto, int test_every, int val_every) {
    if (n < 1) throw ConfigError("gen_dataset: n must be >= 1");
    if (age_lo < kAgeMin || age_hi > kAgeMax || age_lo >= age_hi) {
        throw ConfigError("gen_dataset: bad age range");
    }
    PhantomDataset ds;
    ds.subjects.reserve(static_cast<std::size_t>(n));
    ds.splits.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        ds.subjects.push_back(gen_phantom(subject_spec(k, n, age_lo, age_hi, base_seed, proto)));
        ds.splits.push_back(subject_split(k, test_every, val_every));
    }
    return ds;
}

PhantomSubject warp_phantom(const PhantomSubject& subject, const VectorField& v,
                            IntegrationConfig cfg) {
    require_same_grid(subject.image.grid, v.grid, "warp_phantom");
    const DeformationField phi = exp_svf(v, cfg);
    PhantomSubject out;
    out.age = subject.age;
    out.image = warp(subject.image, phi);
    out.labels = one_hot(argmax_labels(warp(subject.labels, phi)), subject.labels.channels);
    out.true_svf = v;
    return out;
}

} // namespace casnet
