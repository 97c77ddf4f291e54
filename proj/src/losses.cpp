#include "casnet/losses.hpp"

#include <cmath>
#include <vector>

#include "casnet/errors.hpp"
#include "casnet/interp.hpp"

namespace casnet {

namespace {

void require_weights(const LossWeights& w) {
    if (w.lambda_i < 0 || w.lambda_l < 0 || w.lambda_g < 0 || w.lambda_d < 0 || w.lambda_m < 0 ||
        w.lambda_i_post < 0 || w.lambda_l_post < 0) {
        throw ConfigError("loss weights must be >= 0");
    }
}

// Sum of squared differences with a fixed reduction order: parallel partial
// sums per z-slab, combined serially, so results are thread-count invariant.
double slabbed_sq_sum(const double* a, const double* b, const GridSpec& g,
                      std::int64_t per_voxel) {
    const std::int64_t slab = static_cast<std::int64_t>(g.l) * g.w * per_voxel;
    std::vector<double> partial(static_cast<std::size_t>(g.h), 0.0);
#pragma omp parallel for schedule(static)
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

} // namespace

LossWeights at_epoch(const LossWeights& base, int epoch) {
    require_weights(base);
    LossWeights w = base;
    if (epoch >= base.switch_epoch) {
        w.lambda_i = base.lambda_i_post;
        w.lambda_l = base.lambda_l_post;
    }
    return w;
}

double seg_loss(const ProbLabelVolume& s_hat, const ProbLabelVolume& s) {
    require_same_grid(s_hat.grid, s.grid, "seg_loss");
    if (s_hat.channels != s.channels) throw ShapeError("seg_loss: channel mismatch");
    const double denom = static_cast<double>(s_hat.grid.voxels()) * s_hat.channels;
    return slabbed_sq_sum(s_hat.data.data(), s.data.data(), s_hat.grid, s_hat.channels) / denom;
}

void seg_loss_backward(const ProbLabelVolume& s_hat, const ProbLabelVolume& s,
                       double coeff, ProbLabelVolume& grad_s_hat) {
    const double scale =
        coeff * 2.0 / (static_cast<double>(s_hat.grid.voxels()) * s_hat.channels);
    double* g = grad_s_hat.data.data();
    const double* a = s_hat.data.data();
    const double* b = s.data.data();
    const std::int64_t n = static_cast<std::int64_t>(s_hat.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) g[i] += scale * (a[i] - b[i]);
}

double mean_squared_diff(const ScalarVolume& a, const ScalarVolume& b) {
    require_same_grid(a.grid, b.grid, "mean_squared_diff");
    return slabbed_sq_sum(a.data.data(), b.data.data(), a.grid, 1) /
           static_cast<double>(a.grid.voxels());
}

void mean_squared_diff_backward(const ScalarVolume& a, const ScalarVolume& b,
                                double coeff, ScalarVolume& grad_a) {
    const double scale = coeff * 2.0 / static_cast<double>(a.grid.voxels());
    double* g = grad_a.data.data();
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    const std::int64_t n = static_cast<std::int64_t>(a.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) g[i] += scale * (pa[i] - pb[i]);
}

double registration_loss(const ScalarVolume& a, const ProbLabelVolume& a_s,
                         const DeformationField& phi, const ScalarVolume& i,
                         const ProbLabelVolume& s, const LossWeights& w) {
    require_weights(w);
    return w.lambda_l * seg_loss(warp(a_s, phi), s) + w.lambda_i * mean_squared_diff(warp(a, phi), i);
}

double regularization_loss(const VectorField& u, const VectorField& u_bar, const LossWeights& w) {
    require_weights(w);
    require_same_grid(u.grid, u_bar.grid, "regularization_loss");
    const double n = static_cast<double>(u.grid.voxels());
    const FieldJacobian jac = spatial_gradient(u);
    const double grad_term = slabbed_sq_sum(jac.data.data(), nullptr, u.grid, 9) / (9.0 * n);
    const double disp_term = slabbed_sq_sum(u.data.data(), nullptr, u.grid, 3) / (3.0 * n);
    const double mean_term = slabbed_sq_sum(u_bar.data.data(), nullptr, u.grid, 3) / (3.0 * n);
    return w.lambda_g * grad_term + w.lambda_d * disp_term + w.lambda_m * mean_term;
}

void regularization_loss_backward(const VectorField& u, const VectorField& u_bar,
                                  const LossWeights& w, double coeff,
                                  VectorField& grad_u, VectorField* grad_u_bar) {
    const double n = static_cast<double>(u.grid.voxels());
    FieldJacobian jac = spatial_gradient(u);
    const double jscale = coeff * w.lambda_g * 2.0 / (9.0 * n);
    for (auto& d : jac.data) d *= jscale;
    spatial_gradient_adjoint(jac, grad_u);
    const double uscale = coeff * w.lambda_d * 2.0 / (3.0 * n);
    const std::int64_t m = static_cast<std::int64_t>(u.data.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < m; ++i) grad_u.data[i] += uscale * u.data[i];
    if (grad_u_bar) {
        const double bscale = coeff * w.lambda_m * 2.0 / (3.0 * n);
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < m; ++i) grad_u_bar->data[i] += bscale * u_bar.data[i];
    }
}

double total_loss(double l_s, double l_r, double l_c, double l_reg) {
    const double sum = l_s + l_r + l_c + l_reg;
    if (!std::isfinite(sum)) throw NumericError("total_loss: non-finite loss part");
    return sum;
}

} // namespace casnet
