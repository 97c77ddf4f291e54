#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "casnet/diffeo.hpp"
#include "casnet/volume.hpp"

namespace casnet {

// One-hot age group membership.
struct AgeGroup {
    int index = 0;
    int count = 4;

    std::vector<double> one_hot() const {
        std::vector<double> v(static_cast<std::size_t>(count), 0.0);
        v[static_cast<std::size_t>(index)] = 1.0;
        return v;
    }
};

// Equal-width binning of an age into one of `groups` bins over [lo, hi].
AgeGroup age_group_of(double age, double lo, double hi, int groups);

struct GlobalAtlas {
    ScalarVolume image;
    ProbLabelVolume labels;
    int epoch = 0;
};

struct AtlasPair {
    ScalarVolume image;
    ProbLabelVolume labels;
};

// One free learnable velocity field per age group.
struct ConditionalParams {
    std::vector<VectorField> q;

    ConditionalParams() = default;
    ConditionalParams(const GridSpec& g, int groups)
        : q(static_cast<std::size_t>(groups), VectorField(g)) {}
    int groups() const { return static_cast<int>(q.size()); }
};

struct MeanDisplacement {
    VectorField u_bar;
    std::int64_t count = 0;

    MeanDisplacement() = default;
    explicit MeanDisplacement(const GridSpec& g) : u_bar(g) {}
};

struct AtlasInput {
    const ScalarVolume* image = nullptr;
    const ProbLabelVolume* labels = nullptr;
};

GlobalAtlas init_global_atlas(const std::vector<AtlasInput>& dataset);

// (Psi, Psi^-1) for the group's velocity field.
std::pair<DeformationField, DeformationField> conditional_field(const ConditionalParams& params,
                                                                const AgeGroup& a,
                                                                const IntegrationConfig& cfg);

AtlasPair conditional_atlas(const GlobalAtlas& g, const DeformationField& psi);

// Epoch-end refresh: mean over subjects of I_i pulled back through
// compose(phi_inv_i, psi_inv_i); labels analogous with renormalization.
GlobalAtlas update_global_atlas(const GlobalAtlas& g, const std::vector<AtlasInput>& dataset,
                                const std::vector<std::pair<DeformationField, DeformationField>>& inv_fields);

MeanDisplacement accumulate_mean_displacement(const MeanDisplacement& m, const VectorField& u);

} // namespace casnet
