#pragma once

#include "casnet/diffeo.hpp"
#include "casnet/interp.hpp"
#include "casnet/models.hpp"
#include "casnet/volume.hpp"

// Serial twins of the OpenMP kernels, kept for testing. Each mirrors its
// parallel counterpart statement for statement (same stencils, same slab
// reduction order), so outputs must match the parallel versions exactly;
// test_reference.cpp asserts that and bench_kernels reports the speedup.
namespace casnet::reference {

ScalarVolume warp(const ScalarVolume& vol, const DeformationField& phi);
ProbLabelVolume warp(const ProbLabelVolume& vol, const DeformationField& phi);

DeformationField compose(const DeformationField& outer, const DeformationField& inner);
DeformationField exp_svf(const VectorField& v, IntegrationConfig cfg = {});

FieldJacobian spatial_gradient(const VectorField& field);
ScalarVolume jacobian_det(const DeformationField& phi);

FeatureVolume compute_features(const ScalarVolume& image);
ProbLabelVolume ss_predict_features(const FeatureVolume& features, const SegModelParams& p);
ProbLabelVolume merge(const ProbLabelVolume& s_hat, const ProbLabelVolume& s_a,
                      const MergeParams& p);

double seg_loss(const ProbLabelVolume& s_hat, const ProbLabelVolume& s);
double mean_squared_diff(const ScalarVolume& a, const ScalarVolume& b);

} // namespace casnet::reference
