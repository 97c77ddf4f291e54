#pragma once

#include <vector>

#include "casnet/volume.hpp"

namespace casnet {

struct IntegrationConfig {
    int T = 6; // squaring steps; 2^T effective Euler steps
};

// Scaling and squaring: U_0 = V / 2^T, then T times
// U_{k+1}(x) = U_k(x) + trilinear_sample(U_k, x + U_k(x)).
DeformationField exp_svf(const VectorField& v, IntegrationConfig cfg = {});

// Same, keeping U_0..U_T for reverse-mode.
struct SvfExpTrace {
    int T = 0;
    std::vector<VectorField> steps;
};
DeformationField exp_svf_fwd(const VectorField& v, IntegrationConfig cfg, SvfExpTrace& trace);

// Accumulates dL/dV given dL/dU_T.
void exp_svf_backward(const SvfExpTrace& trace, const VectorField& grad_out, VectorField& grad_v);

// (outer ∘ inner)(x) = x + U_in(x) + trilinear_sample(U_out, x + U_in(x)).
DeformationField compose(const DeformationField& outer, const DeformationField& inner);

// Adjoint of compose on displacements; accumulates into the non-null outputs.
// grad_outer and grad_inner may alias (the squaring step uses U_k twice).
void compose_backward(const VectorField& outer_disp, const VectorField& inner_disp,
                      const VectorField& grad_out,
                      VectorField* grad_outer, VectorField* grad_inner);

// exp_svf(-V): the group inverse of exp_svf(V).
DeformationField invert_svf(const VectorField& v, IntegrationConfig cfg = {});

// Explicit Euler on dx/dt = V(x) over unit time with h = 1/n_steps;
// reference oracle for exp_svf.
DeformationField euler_integrate(const VectorField& v, int n_steps);

// det(I + ∇U) per voxel, central differences (one-sided at faces).
ScalarVolume jacobian_det(const DeformationField& phi);

struct JacobianStats {
    double min_det = 0.0;
    double max_det = 0.0;
    double negative_fraction = 0.0; // voxels with det <= 0
};
JacobianStats jacobian_stats(const DeformationField& phi);

} // namespace casnet
