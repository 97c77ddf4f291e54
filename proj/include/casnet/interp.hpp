#pragma once

#include <array>
#include <cmath>

#include "casnet/volume.hpp"

namespace casnet {

// Trilinear interpolation with border replication: corner indices are
// clamped to the grid, fractions keep their unclamped values. Outside the
// grid the interpolant is constant, so its positional derivative vanishes
// there without any special casing in the adjoint.
struct TrilinearStencil {
    std::int64_t corner[8]; // flat voxel indices c000,c100,c010,c110,c001,c101,c011,c111
    double wx[2], wy[2], wz[2];

    double weight(int i) const {
        return wx[i & 1] * wy[(i >> 1) & 1] * wz[(i >> 2) & 1];
    }
};

inline TrilinearStencil make_stencil(const GridSpec& g, double x, double y, double z) {
    const auto cell = [](double p, int n, int& i0, int& i1, double& f) {
        const double fl = std::floor(p);
        f = p - fl;
        int i = int(fl);
        i0 = i < 0 ? 0 : (i > n - 1 ? n - 1 : i);
        ++i;
        i1 = i < 0 ? 0 : (i > n - 1 ? n - 1 : i);
    };
    int x0, x1, y0, y1, z0, z1;
    double fx, fy, fz;
    cell(x, g.l, x0, x1, fx);
    cell(y, g.w, y0, y1, fy);
    cell(z, g.h, z0, z1, fz);

    TrilinearStencil s;
    s.wx[0] = 1.0 - fx; s.wx[1] = fx;
    s.wy[0] = 1.0 - fy; s.wy[1] = fy;
    s.wz[0] = 1.0 - fz; s.wz[1] = fz;
    const std::int64_t row = g.l, plane = std::int64_t(g.l) * g.w;
    const std::int64_t bx0 = x0, bx1 = x1;
    const std::int64_t by0 = std::int64_t(y0) * row, by1 = std::int64_t(y1) * row;
    const std::int64_t bz0 = std::int64_t(z0) * plane, bz1 = std::int64_t(z1) * plane;
    s.corner[0] = bx0 + by0 + bz0;
    s.corner[1] = bx1 + by0 + bz0;
    s.corner[2] = bx0 + by1 + bz0;
    s.corner[3] = bx1 + by1 + bz0;
    s.corner[4] = bx0 + by0 + bz1;
    s.corner[5] = bx1 + by0 + bz1;
    s.corner[6] = bx0 + by1 + bz1;
    s.corner[7] = bx1 + by1 + bz1;
    return s;
}

// Interpolated value of one channel of an interleaved buffer.
inline double stencil_value(const TrilinearStencil& s, const double* data, int stride, int ch) {
    double v = 0.0;
    for (int i = 0; i < 8; ++i) v += s.weight(i) * data[s.corner[i] * stride + ch];
    return v;
}

// d(value)/d(position). Zero outside the grid because opposing corners clamp
// to the same voxel.
inline std::array<double, 3> stencil_pos_grad(const TrilinearStencil& s, const double* data,
                                              int stride, int ch) {
    double c[8];
    for (int i = 0; i < 8; ++i) c[i] = data[s.corner[i] * stride + ch];
    const double* wx = s.wx;
    const double* wy = s.wy;
    const double* wz = s.wz;
    std::array<double, 3> g{};
    g[0] = wz[0] * (wy[0] * (c[1] - c[0]) + wy[1] * (c[3] - c[2])) +
           wz[1] * (wy[0] * (c[5] - c[4]) + wy[1] * (c[7] - c[6]));
    g[1] = wz[0] * (wx[0] * (c[2] - c[0]) + wx[1] * (c[3] - c[1])) +
           wz[1] * (wx[0] * (c[6] - c[4]) + wx[1] * (c[7] - c[5]));
    g[2] = wy[0] * (wx[0] * (c[4] - c[0]) + wx[1] * (c[5] - c[1])) +
           wy[1] * (wx[0] * (c[6] - c[2]) + wx[1] * (c[7] - c[3]));
    return g;
}

// Scatter g into the 8 corners of one channel (the adjoint of stencil_value).
inline void stencil_scatter(const TrilinearStencil& s, double g, double* data, int stride, int ch) {
    for (int i = 0; i < 8; ++i) data[s.corner[i] * stride + ch] += s.weight(i) * g;
}

// --- Public sampling / warping operations -------------------------------

// Single-position sample; throws NumericError on non-finite positions.
double trilinear_sample(const ScalarVolume& vol, double x, double y, double z);
double trilinear_sample(const ProbLabelVolume& vol, int channel, double x, double y, double z);
double trilinear_sample(const VectorField& field, int component, double x, double y, double z);

// output(x) = vol(x + U(x)).
ScalarVolume warp(const ScalarVolume& vol, const DeformationField& phi);

// Per-channel warp followed by per-voxel renormalization.
ProbLabelVolume warp(const ProbLabelVolume& vol, const DeformationField& phi);

// Warp without renormalization (exposes the linearity of interpolation).
ProbLabelVolume warp_raw(const ProbLabelVolume& vol, const DeformationField& phi);

// Training-path variant: also emits the pre-renormalization channel sums
// needed by the adjoint.
void warp_prob_fwd(const ProbLabelVolume& vol, const DeformationField& phi,
                   ProbLabelVolume& out, ScalarVolume& sums);

// Adjoints. grad_src / grad_disp accumulate (callers zero them as needed);
// either may be null.
void warp_backward(const ScalarVolume& src, const DeformationField& phi,
                   const ScalarVolume& grad_out,
                   ScalarVolume* grad_src, VectorField* grad_disp);
void warp_prob_backward(const ProbLabelVolume& src, const DeformationField& phi,
                        const ProbLabelVolume& out, const ScalarVolume& sums,
                        const ProbLabelVolume& grad_out,
                        ProbLabelVolume* grad_src, VectorField* grad_disp);

// --- Spatial derivatives -------------------------------------------------

// Central differences at interior voxels, one-sided at faces.
// Layout: 9 doubles per voxel, entry [component*3 + axis].
struct FieldJacobian {
    GridSpec grid;
    std::vector<double> data;

    FieldJacobian() = default;
    explicit FieldJacobian(const GridSpec& g)
        : grid(g), data(static_cast<std::size_t>(g.voxels()) * 9, 0.0) {}
};

FieldJacobian spatial_gradient(const VectorField& field);

// Exact transpose of the spatial_gradient stencil; accumulates into grad_field.
void spatial_gradient_adjoint(const FieldJacobian& grad_jac, VectorField& grad_field);

} // namespace casnet
