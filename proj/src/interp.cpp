#include "casnet/interp.hpp"

#include <cmath>

#include "casnet/errors.hpp"

namespace casnet {

namespace {

void require_finite_pos(double x, double y, double z) {
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
        throw NumericError("trilinear_sample: non-finite position (corrupted field?)");
    }
}

} // namespace

double trilinear_sample(const ScalarVolume& vol, double x, double y, double z) {
    require_finite_pos(x, y, z);
    const auto s = make_stencil(vol.grid, x, y, z);
    return stencil_value(s, vol.data.data(), 1, 0);
}

double trilinear_sample(const ProbLabelVolume& vol, int channel, double x, double y, double z) {
    require_finite_pos(x, y, z);
    const auto s = make_stencil(vol.grid, x, y, z);
    return stencil_value(s, vol.data.data(), vol.channels, channel);
}

double trilinear_sample(const VectorField& field, int component, double x, double y, double z) {
    require_finite_pos(x, y, z);
    const auto s = make_stencil(field.grid, x, y, z);
    return stencil_value(s, field.data.data(), 3, component);
}

ScalarVolume warp(const ScalarVolume& vol, const DeformationField& phi) {
    require_same_grid(vol.grid, phi.grid(), "warp");
    const GridSpec g = vol.grid;
    ScalarVolume out(g);
    const double* u = phi.displacement.data.data();
    const double* src = vol.data.data();
    double* dst = out.data.data();
#pragma omp parallel for schedule(static)
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                const std::int64_t i = g.index(x, y, z);
                const auto s = make_stencil(g, x + u[i * 3], y + u[i * 3 + 1], z + u[i * 3 + 2]);
                dst[i] = stencil_value(s, src, 1, 0);
            }
        }
    }
    return out;
}

ProbLabelVolume warp_raw(const ProbLabelVolume& vol, const DeformationField& phi) {
    require_same_grid(vol.grid, phi.grid(), "warp");
    const GridSpec g = vol.grid;
    const int c = vol.channels;
    ProbLabelVolume out(g, c);
    const double* u = phi.displacement.data.data();
    const double* src = vol.data.data();
    double* dst = out.data.data();
#pragma omp parallel for schedule(static)
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                const std::int64_t i = g.index(x, y, z);
                const auto s = make_stencil(g, x + u[i * 3], y + u[i * 3 + 1], z + u[i * 3 + 2]);
                for (int ch = 0; ch < c; ++ch) {
                    dst[i * c + ch] = stencil_value(s, src, c, ch);
                }
            }
        }
    }
    return out;
}

void warp_prob_fwd(const ProbLabelVolume& vol, const DeformationField& phi,
                   ProbLabelVolume& out, ScalarVolume& sums) {
    require_same_grid(vol.grid, phi.grid(), "warp");
    const GridSpec g = vol.grid;
    const int c = vol.channels;
    out = ProbLabelVolume(g, c);
    sums = ScalarVolume(g);
    const double* u = phi.displacement.data.data();
    const double* src = vol.data.data();
    double* dst = out.data.data();
    double* sm = sums.data.data();
#pragma omp parallel for schedule(static)
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                const std::int64_t i = g.index(x, y, z);
                const auto s = make_stencil(g, x + u[i * 3], y + u[i * 3 + 1], z + u[i * 3 + 2]);
                double total = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    const double v = stencil_value(s, src, c, ch);
                    dst[i * c + ch] = v;
                    total += v;
                }
                sm[i] = total;
                const double inv = 1.0 / total;
                for (int ch = 0; ch < c; ++ch) dst[i * c + ch] *= inv;
            }
        }
    }
}

ProbLabelVolume warp(const ProbLabelVolume& vol, const DeformationField& phi) {
    ProbLabelVolume out;
    ScalarVolume sums;
    warp_prob_fwd(vol, phi, out, sums);
    return out;
}

void warp_backward(const ScalarVolume& src, const DeformationField& phi,
                   const ScalarVolume& grad_out,
                   ScalarVolume* grad_src, VectorField* grad_disp) {
    const GridSpec g = src.grid;
    const double* u = phi.displacement.data.data();
    const double* sp = src.data.data();
    const double* go = grad_out.data.data();
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                const std::int64_t i = g.index(x, y, z);
                const double gv = go[i];
                if (gv == 0.0) continue;
                const auto s = make_stencil(g, x + u[i * 3], y + u[i * 3 + 1], z + u[i * 3 + 2]);
                if (grad_src) stencil_scatter(s, gv, grad_src->data.data(), 1, 0);
                if (grad_disp) {
                    const auto pg = stencil_pos_grad(s, sp, 1, 0);
                    grad_disp->data[i * 3 + 0] += gv * pg[0];
                    grad_disp->data[i * 3 + 1] += gv * pg[1];
                    grad_disp->data[i * 3 + 2] += gv * pg[2];
                }
            }
        }
    }
}

void warp_prob_backward(const ProbLabelVolume& src, const DeformationField& phi,
                        const ProbLabelVolume& out, const ScalarVolume& sums,
                        const ProbLabelVolume& grad_out,
                        ProbLabelVolume* grad_src, VectorField* grad_disp) {
    const GridSpec g = src.grid;
    const int c = src.channels;
    const double* u = phi.displacement.data.data();
    const double* sp = src.data.data();
    const double* y_out = out.data.data();
    const double* go = grad_out.data.data();
    std::vector<double> gz(c);
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                const std::int64_t i = g.index(x, y, z);
                const double inv = 1.0 / sums.data[i];
                // Renormalization adjoint: y_k = z_k / sum(z),
                // dL/dz_k = (g_k - sum_j g_j y_j) / sum(z).
                double dot = 0.0;
                for (int ch = 0; ch < c; ++ch) dot += go[i * c + ch] * y_out[i * c + ch];
                bool any = false;
                for (int ch = 0; ch < c; ++ch) {
                    gz[ch] = (go[i * c + ch] - dot) * inv;
                    any = any || gz[ch] != 0.0;
                }
                if (!any) continue;
                const auto s = make_stencil(g, x + u[i * 3], y + u[i * 3 + 1], z + u[i * 3 + 2]);
                if (grad_src) {
                    for (int ch = 0; ch < c; ++ch) {
                        stencil_scatter(s, gz[ch], grad_src->data.data(), c, ch);
                    }
                }
                if (grad_disp) {
                    double px = 0.0, py = 0.0, pz = 0.0;
                    for (int ch = 0; ch < c; ++ch) {
                        if (gz[ch] == 0.0) continue;
                        const auto pg = stencil_pos_grad(s, sp, c, ch);
                        px += gz[ch] * pg[0];
                        py += gz[ch] * pg[1];
                        pz += gz[ch] * pg[2];
                    }
                    grad_disp->data[i * 3 + 0] += px;
                    grad_disp->data[i * 3 + 1] += py;
                    grad_disp->data[i * 3 + 2] += pz;
                }
            }
        }
    }
}

FieldJacobian spatial_gradient(const VectorField& field) {
    const GridSpec g = field.grid;
    FieldJacobian jac(g);
    const double* f = field.data.data();
    double* out = jac.data.data();
#pragma omp parallel for schedule(static)
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                const std::int64_t i = g.index(x, y, z);
                const int xm = x > 0 ? x - 1 : 0, xp = x < g.l - 1 ? x + 1 : g.l - 1;
                const int ym = y > 0 ? y - 1 : 0, yp = y < g.w - 1 ? y + 1 : g.w - 1;
                const int zm = z > 0 ? z - 1 : 0, zp = z < g.h - 1 ? z + 1 : g.h - 1;
                const double sx = (xp - xm) == 2 ? 0.5 : 1.0;
                const double sy = (yp - ym) == 2 ? 0.5 : 1.0;
                const double sz = (zp - zm) == 2 ? 0.5 : 1.0;
                const std::int64_t ixm = g.index(xm, y, z), ixp = g.index(xp, y, z);
                const std::int64_t iym = g.index(x, ym, z), iyp = g.index(x, yp, z);
                const std::int64_t izm = g.index(x, y, zm), izp = g.index(x, y, zp);
                for (int comp = 0; comp < 3; ++comp) {
                    out[i * 9 + comp * 3 + 0] = sx * (f[ixp * 3 + comp] - f[ixm * 3 + comp]);
                    out[i * 9 + comp * 3 + 1] = sy * (f[iyp * 3 + comp] - f[iym * 3 + comp]);
                    out[i * 9 + comp * 3 + 2] = sz * (f[izp * 3 + comp] - f[izm * 3 + comp]);
                }
            }
        }
    }
    return jac;
}

void spatial_gradient_adjoint(const FieldJacobian& grad_jac, VectorField& grad_field) {
    const GridSpec g = grad_jac.grid;
    require_same_grid(g, grad_field.grid, "spatial_gradient_adjoint");
    const double* gj = grad_jac.data.data();
    double* gf = grad_field.data.data();
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                const std::int64_t i = g.index(x, y, z);
                const int xm = x > 0 ? x - 1 : 0, xp = x < g.l - 1 ? x + 1 : g.l - 1;
                const int ym = y > 0 ? y - 1 : 0, yp = y < g.w - 1 ? y + 1 : g.w - 1;
                const int zm = z > 0 ? z - 1 : 0, zp = z < g.h - 1 ? z + 1 : g.h - 1;
                const double sx = (xp - xm) == 2 ? 0.5 : 1.0;
                const double sy = (yp - ym) == 2 ? 0.5 : 1.0;
                const double sz = (zp - zm) == 2 ? 0.5 : 1.0;
                const std::int64_t ixm = g.index(xm, y, z), ixp = g.index(xp, y, z);
                const std::int64_t iym = g.index(x, ym, z), iyp = g.index(x, yp, z);
                const std::int64_t izm = g.index(x, y, zm), izp = g.index(x, y, zp);
                for (int comp = 0; comp < 3; ++comp) {
                    const double gx = gj[i * 9 + comp * 3 + 0];
                    const double gy = gj[i * 9 + comp * 3 + 1];
                    const double gz = gj[i * 9 + comp * 3 + 2];
                    gf[ixp * 3 + comp] += sx * gx;
                    gf[ixm * 3 + comp] -= sx * gx;
                    gf[iyp * 3 + comp] += sy * gy;
                    gf[iym * 3 + comp] -= sy * gy;
                    gf[izp * 3 + comp] += sz * gz;
                    gf[izm * 3 + comp] -= sz * gz;
                }
            }
        }
    }
}

} // namespace casnet
