#include "casnet/diffeo.hpp"

#include <array>
#include <cmath>

#include "casnet/errors.hpp"
#include "casnet/interp.hpp"

namespace casnet {

namespace {

void check_integration(const VectorField& v, IntegrationConfig cfg) {
    if (cfg.T < 0 || cfg.T > 16) {
        throw ConfigError("exp_svf: T must be in [0, 16]");
    }
    if (!all_finite(v.data)) {
        throw NumericError("exp_svf: non-finite velocity field");
    }
}

// out(x) = U_in(x) + sample(U_out, x + U_in(x)); outer may alias inner.
VectorField compose_disp(const VectorField& outer, const VectorField& inner) {
    require_same_grid(outer.grid, inner.grid, "compose");
    const GridSpec g = inner.grid;
    VectorField out(g);
    const double* uo = outer.data.data();
    const double* ui = inner.data.data();
    double* dst = out.data.data();
#pragma omp parallel for schedule(static)
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                const std::int64_t i = g.index(x, y, z);
                const auto s = make_stencil(g, x + ui[i * 3], y + ui[i * 3 + 1], z + ui[i * 3 + 2]);
                for (int comp = 0; comp < 3; ++comp) {
                    dst[i * 3 + comp] = ui[i * 3 + comp] + stencil_value(s, uo, 3, comp);
                }
            }
        }
    }
    return out;
}

} // namespace

DeformationField exp_svf(const VectorField& v, IntegrationConfig cfg) {
    check_integration(v, cfg);
    const double scale = 1.0 / static_cast<double>(std::int64_t{1} << cfg.T);
    VectorField u(v.grid);
    for (std::size_t i = 0; i < v.data.size(); ++i) u.data[i] = v.data[i] * scale;
    for (int k = 0; k < cfg.T; ++k) u = compose_disp(u, u);
    return DeformationField{std::move(u)};
}

DeformationField exp_svf_fwd(const VectorField& v, IntegrationConfig cfg, SvfExpTrace& trace) {
    check_integration(v, cfg);
    trace.T = cfg.T;
    trace.steps.clear();
    trace.steps.reserve(cfg.T + 1);
    const double scale = 1.0 / static_cast<double>(std::int64_t{1} << cfg.T);
    VectorField u0(v.grid);
    for (std::size_t i = 0; i < v.data.size(); ++i) u0.data[i] = v.data[i] * scale;
    trace.steps.push_back(std::move(u0));
    for (int k = 0; k < cfg.T; ++k) {
        trace.steps.push_back(compose_disp(trace.steps.back(), trace.steps.back()));
    }
    return DeformationField{trace.steps.back()};
}

void exp_svf_backward(const SvfExpTrace& trace, const VectorField& grad_out, VectorField& grad_v) {
    require_same_grid(grad_out.grid, grad_v.grid, "exp_svf_backward");
    VectorField g = grad_out;
    for (int k = trace.T - 1; k >= 0; --k) {
        VectorField gk(g.grid);
        compose_backward(trace.steps[k], trace.steps[k], g, &gk, &gk);
        g = std::move(gk);
    }
    const double scale = 1.0 / static_cast<double>(std::int64_t{1} << trace.T);
    for (std::size_t i = 0; i < g.data.size(); ++i) grad_v.data[i] += g.data[i] * scale;
}

DeformationField compose(const DeformationField& outer, const DeformationField& inner) {
    return DeformationField{compose_disp(outer.displacement, inner.displacement)};
}

void compose_backward(const VectorField& outer_disp, const VectorField& inner_disp,
                      const VectorField& grad_out,
                      VectorField* grad_outer, VectorField* grad_inner) {
    const GridSpec g = inner_disp.grid;
    const double* uo = outer_disp.data.data();
    const double* ui = inner_disp.data.data();
    const double* go = grad_out.data.data();
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                const std::int64_t i = g.index(x, y, z);
                const double gx = go[i * 3], gy = go[i * 3 + 1], gz = go[i * 3 + 2];
                if (grad_inner) {
                    grad_inner->data[i * 3 + 0] += gx;
                    grad_inner->data[i * 3 + 1] += gy;
                    grad_inner->data[i * 3 + 2] += gz;
                }
                if (gx == 0.0 && gy == 0.0 && gz == 0.0) continue;
                const auto s = make_stencil(g, x + ui[i * 3], y + ui[i * 3 + 1], z + ui[i * 3 + 2]);
                if (grad_outer) {
                    stencil_scatter(s, gx, grad_outer->data.data(), 3, 0);
                    stencil_scatter(s, gy, grad_outer->data.data(), 3, 1);
                    stencil_scatter(s, gz, grad_outer->data.data(), 3, 2);
                }
                if (grad_inner) {
                    const std::array<double, 3> comp_g = {gx, gy, gz};
                    double acc[3] = {0.0, 0.0, 0.0};
                    for (int comp = 0; comp < 3; ++comp) {
                        if (comp_g[comp] == 0.0) continue;
                        const auto pg = stencil_pos_grad(s, uo, 3, comp);
                        acc[0] += comp_g[comp] * pg[0];
                        acc[1] += comp_g[comp] * pg[1];
                        acc[2] += comp_g[comp] * pg[2];
                    }
                    grad_inner->data[i * 3 + 0] += acc[0];
                    grad_inner->data[i * 3 + 1] += acc[1];
                    grad_inner->data[i * 3 + 2] += acc[2];
                }
            }
        }
    }
}

DeformationField invert_svf(const VectorField& v, IntegrationConfig cfg) {
    VectorField neg(v.grid);
    for (std::size_t i = 0; i < v.data.size(); ++i) neg.data[i] = -v.data[i];
    return exp_svf(neg, cfg);
}

DeformationField euler_integrate(const VectorField& v, int n_steps) {
    if (n_steps < 1) throw ConfigError("euler_integrate: n_steps must be >= 1");
    if (!all_finite(v.data)) throw NumericError("euler_integrate: non-finite velocity field");
    const GridSpec g = v.grid;
    DeformationField phi(g);
    const double h = 1.0 / static_cast<double>(n_steps);
    const double* vd = v.data.data();
    double* out = phi.displacement.data.data();
#pragma omp parallel for schedule(static)
    for (int z = 0; z < g.h; ++z) {
        for (int y = 0; y < g.w; ++y) {
            for (int x = 0; x < g.l; ++x) {
                double px = x, py = y, pz = z;
                for (int k = 0; k < n_steps; ++k) {
                    const auto s = make_stencil(g, px, py, pz);
                    px += h * stencil_value(s, vd, 3, 0);
                    py += h * stencil_value(s, vd, 3, 1);
                    pz += h * stencil_value(s, vd, 3, 2);
                }
                const std::int64_t i = g.index(x, y, z);
                out[i * 3 + 0] = px - x;
                out[i * 3 + 1] = py - y;
                out[i * 3 + 2] = pz - z;
            }
        }
    }
    return phi;
}

ScalarVolume jacobian_det(const DeformationField& phi) {
    const FieldJacobian jac = spatial_gradient(phi.displacement);
    ScalarVolume det(phi.grid());
    const double* j = jac.data.data();
    double* d = det.data.data();
    const std::int64_t n = phi.grid().voxels();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const double a00 = 1.0 + j[i * 9 + 0], a01 = j[i * 9 + 1], a02 = j[i * 9 + 2];
        const double a10 = j[i * 9 + 3], a11 = 1.0 + j[i * 9 + 4], a12 = j[i * 9 + 5];
        const double a20 = j[i * 9 + 6], a21 = j[i * 9 + 7], a22 = 1.0 + j[i * 9 + 8];
        d[i] = a00 * (a11 * a22 - a12 * a21) - a01 * (a10 * a22 - a12 * a20) +
               a02 * (a10 * a21 - a11 * a20);
    }
    return det;
}

JacobianStats jacobian_stats(const DeformationField& phi) {
    const ScalarVolume det = jacobian_det(phi);
    JacobianStats stats;
    stats.min_det = det.data[0];
    stats.max_det = det.data[0];
    std::int64_t negative = 0;
    for (double v : det.data) {
        if (v < stats.min_det) stats.min_det = v;
        if (v > stats.max_det) stats.max_det = v;
        if (v <= 0.0) ++negative;
    }
    stats.negative_fraction =
        static_cast<double>(negative) / static_cast<double>(det.data.size());
    return stats;
}

} // namespace casnet
