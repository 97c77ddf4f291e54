#pragma once

#include "casnet/volume.hpp"

namespace casnet {

// Table-1 weights. lambda_i/lambda_l hold the currently active values;
// at_epoch() applies the epoch-200 switch (inclusive at the boundary).
struct LossWeights {
    double lambda_i = 2.0;
    double lambda_l = 1.0;
    double lambda_g = 200.0;
    double lambda_d = 500.0;
    double lambda_m = 200.0;
    double lambda_i_post = 1.0;
    double lambda_l_post = 2.0;
    int switch_epoch = 200;
};

LossWeights at_epoch(const LossWeights& base, int epoch);

// Mean over voxels and channels of squared differences.
double seg_loss(const ProbLabelVolume& s_hat, const ProbLabelVolume& s);
// Accumulates coeff * dL/ds_hat.
void seg_loss_backward(const ProbLabelVolume& s_hat, const ProbLabelVolume& s,
                       double coeff, ProbLabelVolume& grad_s_hat);

// Mean over voxels of squared differences.
double mean_squared_diff(const ScalarVolume& a, const ScalarVolume& b);
// Accumulates coeff * dL/da.
void mean_squared_diff_backward(const ScalarVolume& a, const ScalarVolume& b,
                                double coeff, ScalarVolume& grad_a);

// lambda_l * seg_loss(warp(a_s, phi), s) + lambda_i * msd(warp(a, phi), i).
double registration_loss(const ScalarVolume& a, const ProbLabelVolume& a_s,
                         const DeformationField& phi, const ScalarVolume& i,
                         const ProbLabelVolume& s, const LossWeights& w);

// lambda_g * mean sq. entries of spatial_gradient(u)
// + lambda_d * mean sq. components of u
// + lambda_m * mean sq. components of u_bar.
double regularization_loss(const VectorField& u, const VectorField& u_bar, const LossWeights& w);
// Accumulates coeff * dL/du (and coeff * dL/du_bar when non-null).
void regularization_loss_backward(const VectorField& u, const VectorField& u_bar,
                                  const LossWeights& w, double coeff,
                                  VectorField& grad_u, VectorField* grad_u_bar);

// L = L_S + L_R + L_C + L_Reg; parts must be finite.
double total_loss(double l_s, double l_r, double l_c, double l_reg);

} // namespace casnet
