#pragma once

#include <cstdint>
#include <string>

#include "casnet/errors.hpp"

namespace casnet {

// Voxel index space: origin at voxel (0,0,0), unit spacing.
// l, w, h are the voxel counts along x, y, z.
struct GridSpec {
    int l = 0;
    int w = 0;
    int h = 0;

    GridSpec() = default;
    GridSpec(int l_, int w_, int h_) : l(l_), w(w_), h(h_) {
        if (l < 2 || w < 2 || h < 2) {
            throw ShapeError("GridSpec: all extents must be >= 2, got " + describe());
        }
    }

    std::int64_t voxels() const { return std::int64_t(l) * w * h; }

    // Flat voxel index, x fastest.
    std::int64_t index(int x, int y, int z) const {
        return (std::int64_t(z) * w + y) * l + x;
    }

    bool operator==(const GridSpec& o) const = default;

    std::string describe() const {
        return std::to_string(l) + "x" + std::to_string(w) + "x" + std::to_string(h);
    }
};

inline void require_same_grid(const GridSpec& a, const GridSpec& b, const char* where) {
    if (!(a == b)) {
        throw ShapeError(std::string(where) + ": grid mismatch " + a.describe() + " vs " + b.describe());
    }
}

} // namespace casnet
