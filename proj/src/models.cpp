#include "casnet/models.hpp"

#include <algorithm>
#include <cmath>

#include "casnet/errors.hpp"

namespace casnet {

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

} // namespace

FeatureVolume compute_features(const ScalarVolume& image) {
    const GridSpec& g = image.grid;
    FeatureVolume out(g);
    const double* src = image.data.data();
#pragma omp parallel for schedule(static)
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
    const double* fd = features.data.data();
    const double* th = p.theta.data();
    double* od = out.data.data();
#pragma omp parallel
    {
        std::vector<double> logits(static_cast<std::size_t>(c));
#pragma omp for schedule(static)
        for (std::int64_t v = 0; v < n; ++v) {
            const double* f = fd + v * kFeatureCount;
            for (int k = 0; k < c; ++k) {
                const double* t = th + static_cast<std::size_t>(k) * (kFeatureCount + 1);
                logits[static_cast<std::size_t>(k)] =
                    t[0] * f[0] + t[1] * f[1] + t[2] * f[2] + t[3];
            }
            softmax(logits.data(), c, od + v * c);
        }
    }
    return out;
}

ProbLabelVolume ss_predict(const ScalarVolume& image, const SegModelParams& p) {
    return ss_predict_features(compute_features(image), p);
}

void ss_backward(const FeatureVolume& features, const ProbLabelVolume& probs,
                 const ProbLabelVolume& grad_out, SegModelParams& grad_params) {
    const GridSpec& g = features.grid;
    if (probs.grid != g || grad_out.grid != g) throw ShapeError("ss_backward: grid mismatch");
    if (probs.channels != grad_params.c || grad_out.channels != grad_params.c)
        throw ShapeError("ss_backward: channel mismatch");
    const int c = grad_params.c;
    const std::size_t np = static_cast<std::size_t>(c) * (kFeatureCount + 1);
    if (grad_params.theta.size() != np) throw ShapeError("ss_backward: parameter size mismatch");
    // Per-slab partial accumulators, combined serially for a fixed reduction order.
    std::vector<double> partial(static_cast<std::size_t>(g.h) * np, 0.0);
#pragma omp parallel for schedule(static)
    for (std::int64_t z = 0; z < g.h; ++z) {
        double* acc = partial.data() + static_cast<std::size_t>(z) * np;
        std::vector<double> dlogit(static_cast<std::size_t>(c));
        for (std::int64_t y = 0; y < g.w; ++y) {
            for (std::int64_t x = 0; x < g.l; ++x) {
                const std::int64_t v = g.index(x, y, z);
                const double* pr = probs.data.data() + v * c;
                const double* go = grad_out.data.data() + v * c;
                double dot = 0.0;
                for (int k = 0; k < c; ++k) dot += go[k] * pr[k];
                const double* f = features.data.data() + v * kFeatureCount;
                for (int k = 0; k < c; ++k) {
                    dlogit[static_cast<std::size_t>(k)] = pr[k] * (go[k] - dot);
                    double* a = acc + static_cast<std::size_t>(k) * (kFeatureCount + 1);
                    const double d = dlogit[static_cast<std::size_t>(k)];
                    a[0] += d * f[0];
                    a[1] += d * f[1];
                    a[2] += d * f[2];
                    a[3] += d;
                }
            }
        }
    }
    for (std::int64_t z = 0; z < g.h; ++z) {
        const double* acc = partial.data() + static_cast<std::size_t>(z) * np;
        for (std::size_t i = 0; i < np; ++i) grad_params.theta[i] += acc[i];
    }
}

VectorField drs_velocity(const ScalarVolume& image, const ProbLabelVolume& s_hat,
                         const ScalarVolume& atlas, const ProbLabelVolume& atlas_labels,
                         const DrsModelParams& p) {
    const GridSpec& g = image.grid;
    if (s_hat.grid != g || atlas.grid != g || atlas_labels.grid != g || p.v.grid != g)
        throw ShapeError("drs_velocity: grid mismatch");
    if (s_hat.channels != atlas_labels.channels)
        throw ShapeError("drs_velocity: channel mismatch");
    return p.v;
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
    const double* ad = s_hat.data.data();
    const double* bd = s_a.data.data();
    const double* th = p.theta.data();
    double* od = out.data.data();
#pragma omp parallel
    {
        std::vector<double> logits(static_cast<std::size_t>(c));
#pragma omp for schedule(static)
        for (std::int64_t v = 0; v < n; ++v) {
            const double* a = ad + v * c;
            const double* b = bd + v * c;
            for (int k = 0; k < c; ++k) {
                const double* t = th + static_cast<std::size_t>(k) * 3;
                logits[static_cast<std::size_t>(k)] = t[0] * a[k] + t[1] * b[k] + t[2];
            }
            softmax(logits.data(), c, od + v * c);
        }
    }
    return out;
}

void merge_backward(const ProbLabelVolume& s_hat, const ProbLabelVolume& s_a,
                    const MergeParams& p, const ProbLabelVolume& probs,
                    const ProbLabelVolume& grad_out, MergeParams* grad_params,
                    ProbLabelVolume* grad_s_hat, ProbLabelVolume* grad_s_a) {
    const GridSpec& g = s_hat.grid;
    if (s_a.grid != g || probs.grid != g || grad_out.grid != g)
        throw ShapeError("merge_backward: grid mismatch");
    const int c = p.c;
    if (s_hat.channels != c || s_a.channels != c || probs.channels != c ||
        grad_out.channels != c)
        throw ShapeError("merge_backward: channel mismatch");
    if (grad_params && grad_params->c != c)
        throw ShapeError("merge_backward: grad parameter size mismatch");
    const std::size_t np = static_cast<std::size_t>(c) * 3;
    std::vector<double> partial;
    if (grad_params) partial.assign(static_cast<std::size_t>(g.h) * np, 0.0);
#pragma omp parallel for schedule(static)
    for (std::int64_t z = 0; z < g.h; ++z) {
        double* acc = grad_params ? partial.data() + static_cast<std::size_t>(z) * np : nullptr;
        for (std::int64_t y = 0; y < g.w; ++y) {
            for (std::int64_t x = 0; x < g.l; ++x) {
                const std::int64_t v = g.index(x, y, z);
                const double* pr = probs.data.data() + v * c;
                const double* go = grad_out.data.data() + v * c;
                double dot = 0.0;
                for (int k = 0; k < c; ++k) dot += go[k] * pr[k];
                const double* a = s_hat.data.data() + v * c;
                const double* b = s_a.data.data() + v * c;
                for (int k = 0; k < c; ++k) {
                    const double d = pr[k] * (go[k] - dot);
                    const double* t = p.theta.data() + static_cast<std::size_t>(k) * 3;
                    if (acc) {
                        double* ak = acc + static_cast<std::size_t>(k) * 3;
                        ak[0] += d * a[k];
                        ak[1] += d * b[k];
                        ak[2] += d;
                    }
                    if (grad_s_hat) grad_s_hat->data[v * c + k] += d * t[0];
                    if (grad_s_a) grad_s_a->data[v * c + k] += d * t[1];
                }
            }
        }
    }
    if (grad_params) {
        for (std::int64_t z = 0; z < g.h; ++z) {
            const double* acc = partial.data() + static_cast<std::size_t>(z) * np;
            for (std::size_t i = 0; i < np; ++i) grad_params->theta[i] += acc[i];
        }
    }
}

} // namespace casnet
