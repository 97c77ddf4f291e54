#include "casnet/atlas.hpp"

#include <algorithm>
#include <cmath>

#include "casnet/errors.hpp"
#include "casnet/interp.hpp"

namespace casnet {

AgeGroup age_group_of(double age, double lo, double hi, int groups) {
    if (groups < 1) throw ConfigError("age_group_of: group count must be >= 1");
    if (!(hi > lo)) throw ConfigError("age_group_of: empty age range");
    int idx = static_cast<int>(std::floor((age - lo) / (hi - lo) * groups));
    idx = std::min(std::max(idx, 0), groups - 1);
    return AgeGroup{idx, groups};
}

GlobalAtlas init_global_atlas(const std::vector<AtlasInput>& dataset) {
    if (dataset.empty()) throw ConfigError("init_global_atlas: empty dataset");
    const GridSpec& g = dataset[0].image->grid;
    const int c = dataset[0].labels->channels;
    for (const auto& s : dataset) {
        if (s.image->grid != g || s.labels->grid != g)
            throw ShapeError("init_global_atlas: grid mismatch");
        if (s.labels->channels != c)
            throw ShapeError("init_global_atlas: channel mismatch");
    }
    GlobalAtlas atlas;
    atlas.image = ScalarVolume(g);
    atlas.labels = ProbLabelVolume(g, c);
    atlas.epoch = 0;
    const double inv_n = 1.0 / double(dataset.size());
    const std::int64_t n = g.voxels();
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        double acc = 0.0;
        for (const auto& s : dataset) acc += s.image->data[v];
        atlas.image.data[v] = acc * inv_n;
        for (int k = 0; k < c; ++k) {
            double la = 0.0;
            for (const auto& s : dataset) la += s.labels->data[v * c + k];
            atlas.labels.data[v * c + k] = la * inv_n;
        }
    }
    return atlas;
}

std::pair<DeformationField, DeformationField> conditional_field(const ConditionalParams& params,
                                                                const AgeGroup& a,
                                                                const IntegrationConfig& cfg) {
    if (a.index < 0 || a.index >= params.groups())
        throw ConfigError("conditional_field: group index out of range");
    const VectorField& q = params.q[static_cast<std::size_t>(a.index)];
    VectorField neg(q.grid);
    const std::size_t n = q.data.size();
    for (std::size_t i = 0; i < n; ++i) neg.data[i] = -q.data[i];
    return {exp_svf(q, cfg), exp_svf(neg, cfg)};
}

AtlasPair conditional_atlas(const GlobalAtlas& g, const DeformationField& psi) {
    if (psi.grid() != g.image.grid) throw ShapeError("conditional_atlas: grid mismatch");
    return {warp(g.image, psi), warp(g.labels, psi)};
}

GlobalAtlas update_global_atlas(const GlobalAtlas& g, const std::vector<AtlasInput>& dataset,
                                const std::vector<std::pair<DeformationField, DeformationField>>& inv_fields) {
    if (dataset.empty()) throw ConfigError("update_global_atlas: empty dataset");
    if (dataset.size() != inv_fields.size())
        throw ConfigError("update_global_atlas: one field pair per subject required");
    const GridSpec& grid = g.image.grid;
    const int c = g.labels.channels;
    GlobalAtlas out;
    out.image = ScalarVolume(grid);
    out.labels = ProbLabelVolume(grid, c);
    out.epoch = g.epoch + 1;
    std::vector<ScalarVolume> wi;
    std::vector<ProbLabelVolume> ws;
    wi.reserve(dataset.size());
    ws.reserve(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (dataset[i].image->grid != grid || dataset[i].labels->grid != grid)
            throw ShapeError("update_global_atlas: grid mismatch");
        if (dataset[i].labels->channels != c)
            throw ShapeError("update_global_atlas: channel mismatch");
        const DeformationField total = compose(inv_fields[i].first, inv_fields[i].second);
        wi.push_back(warp(*dataset[i].image, total));
        ws.push_back(warp(*dataset[i].labels, total));
    }
    const double inv_n = 1.0 / double(dataset.size());
    const std::int64_t n = grid.voxels();
#pragma omp parallel for schedule(static)
    for (std::int64_t v = 0; v < n; ++v) {
        double acc = 0.0;
        for (const auto& w : wi) acc += w.data[v];
        out.image.data[v] = acc * inv_n;
        for (int k = 0; k < c; ++k) {
            double la = 0.0;
            for (const auto& w : ws) la += w.data[v * c + k];
            out.labels.data[v * c + k] = la * inv_n;
        }
    }
    return out;
}

MeanDisplacement accumulate_mean_displacement(const MeanDisplacement& m, const VectorField& u) {
    if (m.count > 0 && m.u_bar.grid != u.grid)
        throw ShapeError("accumulate_mean_displacement: grid mismatch");
    MeanDisplacement out;
    out.count = m.count + 1;
    if (m.count == 0) {
        out.u_bar = u;
        return out;
    }
    out.u_bar = m.u_bar;
    const double inv = 1.0 / double(out.count);
    const std::size_t n = u.data.size();
    for (std::size_t i = 0; i < n; ++i)
        out.u_bar.data[i] += (u.data[i] - out.u_bar.data[i]) * inv;
    return out;
}

} // namespace casnet
