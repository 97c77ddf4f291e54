#include "casnet/volume.hpp"

#include <cmath>

#include "casnet/errors.hpp"

namespace casnet {

LabelMap argmax_labels(const ProbLabelVolume& prob) {
    LabelMap out(prob.grid);
    const int c = prob.channels;
    const double* p = prob.data.data();
    const std::int64_t n = prob.grid.voxels();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        int best = 0;
        double bestv = p[i * c];
        for (int ch = 1; ch < c; ++ch) {
            const double v = p[i * c + ch];
            if (v > bestv) { // ties keep the lowest channel index
                bestv = v;
                best = ch;
            }
        }
        out.data[i] = best;
    }
    return out;
}

ProbLabelVolume one_hot(const LabelMap& labels, int channels) {
    ProbLabelVolume out(labels.grid, channels);
    const std::int64_t n = labels.grid.voxels();
    for (std::int64_t i = 0; i < n; ++i) {
        const int lab = labels.data[i];
        if (lab < 0 || lab >= channels) {
            throw ShapeError("one_hot: label out of range");
        }
        out.data[i * channels + lab] = 1.0;
    }
    return out;
}

bool is_valid_prob(const ProbLabelVolume& prob, double tol) {
    const int c = prob.channels;
    const double* p = prob.data.data();
    const std::int64_t n = prob.grid.voxels();
    for (std::int64_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            const double v = p[i * c + ch];
            if (!std::isfinite(v) || v < -tol || v > 1.0 + tol) return false;
            sum += v;
        }
        if (std::fabs(sum - 1.0) > tol) return false;
    }
    return true;
}

bool all_finite(const std::vector<double>& data) {
    for (double v : data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace casnet
