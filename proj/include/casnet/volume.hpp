#pragma once

#include <cassert>
#include <cstdint>
#include <vector>

#include "casnet/grid.hpp"

namespace casnet {

// All containers store doubles, channel-fastest: data[voxel*c + channel],
// voxels ordered x fastest, then y, then z. This matches the VVOL layout
// so serialization is a straight copy.

struct ScalarVolume {
    GridSpec grid;
    std::vector<double> data;

    ScalarVolume() = default;
    explicit ScalarVolume(const GridSpec& g, double fill = 0.0)
        : grid(g), data(static_cast<std::size_t>(g.voxels()), fill) {}

    double& at(int x, int y, int z) { return data[grid.index(x, y, z)]; }
    double at(int x, int y, int z) const { return data[grid.index(x, y, z)]; }
};

// Per-voxel class probabilities. Valid when every value is in [0,1] and
// per-voxel channel sums are 1 within 1e-6.
struct ProbLabelVolume {
    GridSpec grid;
    int channels = 0;
    std::vector<double> data;

    ProbLabelVolume() = default;
    ProbLabelVolume(const GridSpec& g, int c, double fill = 0.0)
        : grid(g), channels(c),
          data(static_cast<std::size_t>(g.voxels()) * c, fill) {
        if (c < 1) throw ShapeError("ProbLabelVolume: channels must be >= 1");
    }

    double& at(int x, int y, int z, int ch) { return data[grid.index(x, y, z) * channels + ch]; }
    double at(int x, int y, int z, int ch) const { return data[grid.index(x, y, z) * channels + ch]; }
};

// Per-voxel 3-vectors in voxel units. Used for velocities and displacements.
struct VectorField {
    GridSpec grid;
    std::vector<double> data;

    VectorField() = default;
    explicit VectorField(const GridSpec& g, double fill = 0.0)
        : grid(g), data(static_cast<std::size_t>(g.voxels()) * 3, fill) {}

    double& at(int x, int y, int z, int comp) { return data[grid.index(x, y, z) * 3 + comp]; }
    double at(int x, int y, int z, int comp) const { return data[grid.index(x, y, z) * 3 + comp]; }
};

// Coordinate map stored as displacement U with phi(x) = x + U(x).
// Identity iff the displacement is all-zero.
struct DeformationField {
    VectorField displacement;

    DeformationField() = default;
    explicit DeformationField(const GridSpec& g) : displacement(g) {}
    explicit DeformationField(VectorField u) : displacement(std::move(u)) {}

    const GridSpec& grid() const { return displacement.grid; }
};

// Per-voxel integer class map (argmax results, phantom ground truth).
struct LabelMap {
    GridSpec grid;
    std::vector<int> data;

    LabelMap() = default;
    explicit LabelMap(const GridSpec& g, int fill = 0)
        : grid(g), data(static_cast<std::size_t>(g.voxels()), fill) {}

    int& at(int x, int y, int z) { return data[grid.index(x, y, z)]; }
    int at(int x, int y, int z) const { return data[grid.index(x, y, z)]; }
};

// Per voxel, the lowest-index class attaining the maximum probability.
LabelMap argmax_labels(const ProbLabelVolume& prob);

// One-hot encoding of a label map.
ProbLabelVolume one_hot(const LabelMap& labels, int channels);

// True when all values are finite, in [0,1], and per-voxel sums are 1 +- tol.
bool is_valid_prob(const ProbLabelVolume& p, double tol = 1e-6);

bool all_finite(const std::vector<double>& v);

// Debug-build validity assertion used at pipeline hand-offs.
#ifdef NDEBUG
inline void debug_check_prob(const ProbLabelVolume&) {}
#else
inline void debug_check_prob(const ProbLabelVolume& p) { assert(is_valid_prob(p)); }
#endif

} // namespace casnet
