#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "casnet/rng.hpp"
#include "casnet/volume.hpp"

namespace casnet::testsupport {

// Smoothness class used by the diffeo property tests: sums of <= 5 Gaussian
// bumps with sigma in [7, 10] voxels, rescaled so max |V| = vmax. The sigma
// range keeps the scaling-and-squaring resampling error well under the
// 0.01-voxel oracle tolerance (measured worst case 0.0057 over 30 seeds at
// vmax = 1.5 on 32^3).
inline VectorField smooth_field(const GridSpec& g, std::uint64_t seed, double vmax = 1.5) {
    Rng rng(seed);
    struct Bump {
        double cx, cy, cz, ax, ay, az, sigma;
    };
    const int n_bumps = 2 + static_cast<int>(rng.below(4));
    std::vector<Bump> bumps(static_cast<std::size_t>(n_bumps));
    for (auto& b : bumps) {
        b.cx = rng.uniform(6.0, g.l - 7.0);
        b.cy = rng.uniform(6.0, g.w - 7.0);
        b.cz = rng.uniform(6.0, g.h - 7.0);
        b.ax = rng.uniform(-1.0, 1.0);
        b.ay = rng.uniform(-1.0, 1.0);
        b.az = rng.uniform(-1.0, 1.0);
        b.sigma = rng.uniform(7.0, 10.0);
    }
    VectorField v(g);
    double maxmag = 0.0;
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                double vx = 0.0, vy = 0.0, vz = 0.0;
                for (const auto& b : bumps) {
                    const double dx = x - b.cx, dy = y - b.cy, dz = z - b.cz;
                    const double w =
                        std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * b.sigma * b.sigma));
                    vx += b.ax * w;
                    vy += b.ay * w;
                    vz += b.az * w;
                }
                const std::int64_t i = g.index(x, y, z);
                v.data[i * 3 + 0] = vx;
                v.data[i * 3 + 1] = vy;
                v.data[i * 3 + 2] = vz;
                maxmag = std::max(maxmag, std::sqrt(vx * vx + vy * vy + vz * vz));
            }
        }
    }
    if (maxmag > 0.0) {
        const double s = vmax / maxmag;
        for (auto& d : v.data) d *= s;
    }
    return v;
}

inline bool is_interior(const GridSpec& g, int x, int y, int z, int margin = 4) {
    return x >= margin && x < g.l - margin && y >= margin && y < g.w - margin &&
           z >= margin && z < g.h - margin;
}

struct FieldDelta {
    double max_mag = 0.0;
    double mean_mag = 0.0;
};

// Per-voxel displacement difference magnitudes over interior voxels.
inline FieldDelta interior_delta(const VectorField& a, const VectorField& b, int margin = 4) {
    const GridSpec g = a.grid;
    FieldDelta d;
    std::int64_t count = 0;
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                if (!is_interior(g, x, y, z, margin)) continue;
                const std::int64_t i = g.index(x, y, z);
                const double dx = a.data[i * 3] - b.data[i * 3];
                const double dy = a.data[i * 3 + 1] - b.data[i * 3 + 1];
                const double dz = a.data[i * 3 + 2] - b.data[i * 3 + 2];
                const double mag = std::sqrt(dx * dx + dy * dy + dz * dz);
                d.max_mag = std::max(d.max_mag, mag);
                d.mean_mag += mag;
                ++count;
            }
        }
    }
    if (count > 0) d.mean_mag /= static_cast<double>(count);
    return d;
}

// Interior magnitude of a single displacement field (vs. zero).
inline FieldDelta interior_magnitude(const VectorField& a, int margin = 4) {
    const VectorField zero(a.grid);
    return interior_delta(a, zero, margin);
}

} // namespace casnet::testsupport
