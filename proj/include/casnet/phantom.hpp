#pragma once

#include <optional>
#include <vector>

#include "casnet/diffeo.hpp"
#include "casnet/volume.hpp"

namespace casnet {

// Age span of the modeled cohort, weeks of gestation.
inline constexpr double kAgeMin = 20.6;
inline constexpr double kAgeMax = 38.2;

// The rippled shell band whose boundary complexity grows with age.
inline constexpr int kCorticalClass = 2;

struct PhantomSpec {
    GridSpec grid{32, 32, 32};
    int c = 10;
    double age = kAgeMin;
    std::uint64_t seed = 0;
    double noise_sd = 0.05;
    double fold_amplitude_per_week = 0.03;
    double fold_frequency = 4.0;
    bool artifact = false; // halve intensities on the 3 mid z-slices
};

struct PhantomSubject {
    ScalarVolume image;
    ProbLabelVolume labels; // one-hot
    double age = 0.0;
    std::optional<VectorField> true_svf;
};

// Mean intensity of class k (k < 10). Adjacent shells contrast by >= 0.2;
// the pairs {1,5}, {2,4}, {3,7} share intensities so a purely
// intensity-driven segmenter cannot separate them (they are never adjacent).
double class_intensity(int k);

// Concentric ellipsoidal shells; outer three boundaries grow with age and
// the cortical band's two surfaces carry an angular ripple whose amplitude
// scales linearly with (age - 20.6). Bit-deterministic in spec.
PhantomSubject gen_phantom(const PhantomSpec& spec);

enum class Split { train, val, test };

struct PhantomDataset {
    std::vector<PhantomSubject> subjects;
    std::vector<Split> splits;
};

// Stratified ages over [age_lo, age_hi], per-subject seeds derived from
// base_seed, splits assigned by index (every test_every-th subject is test,
// every val_every-th of the rest is val; 0 disables).
PhantomDataset gen_dataset(int n, double age_lo, double age_hi, std::uint64_t base_seed,
                           const PhantomSpec& proto, int test_every = 4, int val_every = 0);

// The spec and split gen_dataset assigns to subject k of n; exposed so
// callers can regenerate single subjects (e.g. with the artifact toggled).
PhantomSpec subject_spec(int k, int n, double age_lo, double age_hi, std::uint64_t base_seed,
                         const PhantomSpec& proto);
Split subject_split(int k, int test_every, int val_every);

// I and S warped by exp_svf(V); labels re-binarized; true_svf recorded.
PhantomSubject warp_phantom(const PhantomSubject& subject, const VectorField& v,
                            IntegrationConfig cfg = {});

} // namespace casnet
