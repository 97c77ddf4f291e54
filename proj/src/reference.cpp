#include "casnet/reference.hpp"

#include <algorithm>
#include <cmath>

#include "casnet/errors.hpp"

namespace casnet::reference {

namespace {

inline std::int64_t clamp_idx(std::int64_t v, std::int64_t hi) {
    return std::min(std::max<std::int64_t>(v, 0), hi);
}

// Softmax with max subtraction; writes c probabilities.
inline void softmax(const double* logits, int c, double* out) {
    double m = logits[0];
    for (int k = 1; k < c; ++k) m = std::max(m, logits[k]);
    double s = 0.0;
    for (int k = 0; k < c; ++k) {
        out[k] = std::exp(logits[k] - m);
        s += out[k];
    }
    const double inv = 1.0 / s;
    for (int k = 0; k < c; ++k) out[k] *= inv;
}

// Same per-slab partial sums as the parallel reduction, combined in the same
// order, so the result is identical rather than merely close.
double slabbed_sq_sum(const double* a, const double* b, const GridSpec& g,
                      std::int64_t per_voxel) {
    const std::int64_t slab = static_cast<std::int64_t>(g.l) * g.w * per_voxel;
    std::vector<double> partial(static_cast<std::size_t>(g.h), 0.0);
    for (int z = 0; z < g.h; ++z) {
        double acc = 0.0;
        const double* pa = a + z * slab;
        const double* pb = b ? b + z * slab : nullptr;
        for (std::int64_t k = 0; k < slab; ++k) {
            const double d = pb ? pa[k] - pb[k] : pa[k];
            acc += d * d;
        }
        partial[static_cast<std::size_t>(z)] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
}

VectorField compose_disp(const VectorField& outer, const VectorField& inner) {
    require_same_grid(outer.grid, inner.grid, "compose");
    const GridSpec g = inner.grid;
    VectorField out(g);
    const double* uo = outer.data.data();
    const double* ui = inner.data.data();
    double* dst = out.data.data();
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

ScalarVolume warp(const ScalarVolume& vol, const DeformationField& phi) {
    require_same_grid(vol.grid, phi.grid(), "warp");
    const GridSpec g = vol.grid;
    ScalarVolume out(g);
    const double* u = phi.displacement.data.data();
    const double* src = vol.data.data();
    double* dst = out.data.data();
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

ProbLabelVolume warp(const ProbLabelVolume& vol, const DeformationField& phi) {
    require_same_grid(vol.grid, phi.grid(), "warp");
    const GridSpec g = vol.grid;
    const int c = vol.channels;
    ProbLabelVolume out(g, c);
    const double* u = phi.displacement.data.data();
    const double* src = vol.data.data();
    double* dst = out.data.data();
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
                const double inv = 1.0 / total;
                for (int ch = 0; ch < c; ++ch) dst[i * c + ch] *= inv;
            }
        }
    }
    return out;
}

DeformationField compose(const DeformationField& outer, const DeformationField& inner) {
    return DeformationField{compose_disp(outer.displacement, inner.displacement)};
}

DeformationField exp_svf(const VectorField& v, IntegrationConfig cfg) {
    if (cfg.T < 0 || cfg.T > 16) throw ConfigError("exp_svf: T must be in [0, 16]");
    if (!all_finite(v.data)) throw NumericError("exp_svf: non-finite velocity field");
    const double scale = 1.0 / static_cast<double>(std::int64_t{1} << cfg.T);
    VectorField u(v.grid);
    for (std::size_t i = 0; i < v.data.size(); ++i) u.data[i] = v.data[i] * scale;
    for (int k = 0; k < cfg.T; ++k) u = compose_disp(u, u);
    return DeformationField{std::move(u)};
}

FieldJacobian spatial_gradient(const VectorField& field) {
    const GridSpec g = field.grid;
    FieldJacobian jac(g);
    const double* f = field.data.data();
    double* out = jac.data.data();
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

ScalarVolume jacobian_det(const DeformationField& phi) {
    const FieldJacobian jac = reference::spatial_gradient(phi.displacement);
    ScalarVolume det(phi.grid());
    const double* j = jac.data.data();
    double* d = det.data.data();
    const std::int64_t n = phi.grid().voxels();
    for (std::int64_t i = 0; i < n; ++i) {
        const double a00 = 1.0 + j[i * 9 + 0], a01 = j[i * 9 + 1], a02 = j[i * 9 + 2];
        const double a10 = j[i * 9 + 3], a11 = 1.0 + j[i * 9 + 4], a12 = j[i * 9 + 5];
        const double a20 = j[i * 9 + 6], a21 = j[i * 9 + 7], a22 = 1.0 + j[i * 9 + 8];
        d[i] = a00 * (a11 * a22 - a12 * a21) - a01 * (a10 * a22 - a12 * a20) +
               a02 * (a10 * a21 - a11 * a20);
    }
    return det;
}

FeatureVolume compute_features(const ScalarVolume& image) {
    const GridSpec& g = image.grid;
    FeatureVolume out(g);
    const double* src = image.data.data();
    for (std::int64_t z = 0; z < g.h; ++z) {
        for (std::int64_t y = 0; y < g.w; ++y) {
            for (std::int64_t x = 0; x < g.l; ++x) {
                const double center = src[g.index(x, y, z)];
                double nsum = 0.0;
                nsum += src[g.index(clamp_idx(x - 1, g.l - 1), y, z)];
                nsum += src[g.index(clamp_idx(x + 1, g.l - 1), y, z)];
                nsum += src[g.index(x, clamp_idx(y - 1, g.w - 1), z)];
                nsum += src[g.index(x, clamp_idx(y + 1, g.w - 1), z)];
                nsum += src[g.index(x, y, clamp_idx(z - 1, g.h - 1))];
                nsum += src[g.index(x, y, clamp_idx(z + 1, g.h - 1))];
                double wsum = 0.0, wsq = 0.0;
                for (std::int64_t dz = -1; dz <= 1; ++dz) {
                    const std::int64_t zz = clamp_idx(z + dz, g.h - 1);
                    for (std::int64_t dy = -1; dy <= 1; ++dy) {
                        const std::int64_t yy = clamp_idx(y + dy, g.w - 1);
                        for (std::int64_t dx = -1; dx <= 1; ++dx) {
                            const double v = src[g.index(clamp_idx(x + dx, g.l - 1), yy, zz)];
                            wsum += v;
                            wsq += v * v;
                        }
                    }
                }
                const double mean27 = wsum / 27.0;
                double* f = out.data.data() + g.index(x, y, z) * kFeatureCount;
                f[0] = center;
                f[1] = nsum / 6.0;
                f[2] = std::max(0.0, wsq / 27.0 - mean27 * mean27);
            }
        }
    }
    return out;
}

ProbLabelVolume ss_predict_features(const FeatureVolume& features, const SegModelParams& p) {
    if (p.c < 1) throw ConfigError("ss_predict: class count must be >= 1");
    if (p.theta.size() != static_cast<std::size_t>(p.c) * (kFeatureCount + 1))
        throw ShapeError("ss_predict: parameter size mismatch");
    const GridSpec& g = features.grid;
    ProbLabelVolume out(g, p.c);
    const std::int64_t n = g.voxels();
    const int c = p.c;
    std::vector<double> logits(static_cast<std::size_t>(c));
    for (std::int64_t v = 0; v < n; ++v) {
        const double* f = features.data.data() + v * kFeatureCount;
        for (int k = 0; k < c; ++k) {
            const double* t = p.theta.data() + static_cast<std::size_t>(k) * (kFeatureCount + 1);
            logits[static_cast<std::size_t>(k)] =
                t[0] * f[0] + t[1] * f[1] + t[2] * f[2] + t[3];
        }
        softmax(logits.data(), c, out.data.data() + v * c);
    }
    return out;
}

ProbLabelVolume merge(const ProbLabelVolume& s_hat, const ProbLabelVolume& s_a,
                      const MergeParams& p) {
    const GridSpec& g = s_hat.grid;
    if (s_a.grid != g) throw ShapeError("merge: grid mismatch");
    if (s_hat.channels != p.c || s_a.channels != p.c)
        throw ShapeError("merge: channel mismatch");
    if (p.theta.size() != static_cast<std::size_t>(p.c) * 3)
        throw ShapeError("merge: parameter size mismatch");
    const int c = p.c;
    ProbLabelVolume out(g, c);
    const std::int64_t n = g.voxels();
    std::vector<double> logits(static_cast<std::size_t>(c));
    for (std::int64_t v = 0; v < n; ++v) {
        const double* a = s_hat.data.data() + v * c;
        const double* b = s_a.data.data() + v * c;
        for (int k = 0; k < c; ++k) {
            const double* t = p.theta.data() + static_cast<std::size_t>(k) * 3;
            logits[static_cast<std::size_t>(k)] = t[0] * a[k] + t[1] * b[k] + t[2];
        }
        softmax(logits.data(), c, out.data.data() + v * c);
    }
    return out;
}

double seg_loss(const ProbLabelVolume& s_hat, const ProbLabelVolume& s) {
    require_same_grid(s_hat.grid, s.grid, "seg_loss");
    if (s_hat.channels != s.channels) throw ShapeError("seg_loss: channel mismatch");
    const double denom = static_cast<double>(s_hat.grid.voxels()) * s_hat.channels;
    return slabbed_sq_sum(s_hat.data.data(), s.data.data(), s_hat.grid, s_hat.channels) / denom;
}

double mean_squared_diff(const ScalarVolume& a, const ScalarVolume& b) {
    require_same_grid(a.grid, b.grid, "mean_squared_diff");
    return slabbed_sq_sum(a.data.data(), b.data.data(), a.grid, 1) /
           static_cast<double>(a.grid.voxels());
}

} // namespace casnet::reference
