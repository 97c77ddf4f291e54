#pragma once

#include <vector>

#include "casnet/volume.hpp"

namespace casnet {

// Per-voxel features consumed by the segmentation stand-in:
// [0] intensity, [1] 6-neighbor mean, [2] 3x3x3 local variance.
inline constexpr int kFeatureCount = 3;

struct FeatureVolume {
    GridSpec grid;
    std::vector<double> data; // kFeatureCount values per voxel

    FeatureVolume() = default;
    explicit FeatureVolume(const GridSpec& g)
        : grid(g), data(static_cast<std::size_t>(g.voxels()) * kFeatureCount, 0.0) {}
};

FeatureVolume compute_features(const ScalarVolume& image);

// Per-class affine coefficients over the features plus bias: c x 4,
// layout theta[class*4 + {feature0, feature1, feature2, bias}].
struct SegModelParams {
    int c = 0;
    std::vector<double> theta;

    SegModelParams() = default;
    explicit SegModelParams(int classes)
        : c(classes), theta(static_cast<std::size_t>(classes) * (kFeatureCount + 1), 0.0) {}
};

// Per-voxel softmax over affine feature logits.
ProbLabelVolume ss_predict(const ScalarVolume& image, const SegModelParams& p);
ProbLabelVolume ss_predict_features(const FeatureVolume& features, const SegModelParams& p);
// Accumulates dL/dtheta given dL/d(output probabilities).
void ss_backward(const FeatureVolume& features, const ProbLabelVolume& probs,
                 const ProbLabelVolume& grad_out, SegModelParams& grad_params);

// Per-subject free velocity field (the classical direct-optimization mode).
struct DrsModelParams {
    VectorField v;

    DrsModelParams() = default;
    explicit DrsModelParams(const GridSpec& g) : v(g) {}
};

// Interface point for amortized predictors; the free-field default ignores
// the concatenated inputs numerically but the signature carries them.
VectorField drs_velocity(const ScalarVolume& image, const ProbLabelVolume& s_hat,
                         const ScalarVolume& atlas, const ProbLabelVolume& atlas_labels,
                         const DrsModelParams& p);

class VelocityPredictor {
public:
    virtual ~VelocityPredictor() = default;
    virtual VectorField predict(const ScalarVolume& image, const ProbLabelVolume& s_hat,
                                const ScalarVolume& atlas,
                                const ProbLabelVolume& atlas_labels) const = 0;
};

class FreeFieldPredictor final : public VelocityPredictor {
public:
    explicit FreeFieldPredictor(DrsModelParams params) : params_(std::move(params)) {}
    VectorField predict(const ScalarVolume& image, const ProbLabelVolume& s_hat,
                        const ScalarVolume& atlas,
                        const ProbLabelVolume& atlas_labels) const override {
        return drs_velocity(image, s_hat, atlas, atlas_labels, params_);
    }

private:
    DrsModelParams params_;
};

// Per-class 1x1x1 merge: logit_k = w_ss[k]*s_hat_k + w_drs[k]*s_a_k + bias[k],
// softmax over classes. Layout theta[class*3 + {w_ss, w_drs, bias}].
struct MergeParams {
    int c = 0;
    std::vector<double> theta;

    MergeParams() = default;
    explicit MergeParams(int classes)
        : c(classes), theta(static_cast<std::size_t>(classes) * 3, 0.0) {}
};

ProbLabelVolume merge(const ProbLabelVolume& s_hat, const ProbLabelVolume& s_a,
                      const MergeParams& p);
// Accumulates dL/dtheta, dL/ds_hat, dL/ds_a (null outputs skipped).
void merge_backward(const ProbLabelVolume& s_hat, const ProbLabelVolume& s_a,
                    const MergeParams& p, const ProbLabelVolume& probs,
                    const ProbLabelVolume& grad_out, MergeParams* grad_params,
                    ProbLabelVolume* grad_s_hat, ProbLabelVolume* grad_s_a);

} // namespace casnet
