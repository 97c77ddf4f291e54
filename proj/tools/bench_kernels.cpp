#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include "casnet/diffeo.hpp"
#include "casnet/interp.hpp"
#include "casnet/losses.hpp"
#include "casnet/models.hpp"
#include "casnet/reference.hpp"
#include "casnet/rng.hpp"

using namespace casnet;

namespace {

using Clock = std::chrono::steady_clock;

// Best-of-reps wall time; the returned sample value is accumulated into a
// volatile sink so the optimizer cannot drop the kernel call.
template <class F>
double best_ms(F&& f, int reps) {
    volatile double sink = 0.0;
    double best = 1e300;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = Clock::now();
        sink = sink + f();
        const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        best = std::min(best, ms);
    }
    (void)sink;
    return best;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

struct Row {
    std::string name;
    double serial_ms = 0.0;
    double parallel_ms = 0.0;
    double diff = 0.0;
};

void print_table(const std::vector<Row>& rows) {
    std::printf("%-18s %12s %12s %9s %12s\n", "kernel", "serial ms", "parallel ms", "speedup",
                "max |diff|");
    for (const auto& r : rows) {
        std::printf("%-18s %12.3f %12.3f %8.2fx %12.3g\n", r.name.c_str(), r.serial_ms,
                    r.parallel_ms, r.serial_ms / r.parallel_ms, r.diff);
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"serial vs OpenMP kernel benchmark"};
    int n = 48, classes = 10, reps = 5;
    app.add_option("--grid", n, "cubic grid edge length")->check(CLI::PositiveNumber);
    app.add_option("--classes", classes, "label channel count")->check(CLI::PositiveNumber);
    app.add_option("--reps", reps, "repetitions per kernel (best-of)")
        ->check(CLI::PositiveNumber);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    const GridSpec g{n, n, n};
    Rng rng(7);
    ScalarVolume img(g), img2(g);
    for (auto& v : img.data) v = rng.uniform(-1.0, 1.0);
    for (auto& v : img2.data) v = rng.uniform(-1.0, 1.0);
    ProbLabelVolume pa(g, classes), pb(g, classes);
    for (auto& v : pa.data) v = rng.uniform(0.05, 1.0);
    for (auto& v : pb.data) v = rng.uniform(0.05, 1.0);
    VectorField v(g);
    for (auto& d : v.data) d = rng.uniform(-1.5, 1.5);
    const DeformationField phi{v};
    SegModelParams sp(classes);
    for (auto& t : sp.theta) t = rng.uniform(-1.0, 1.0);
    MergeParams mp(classes);
    for (auto& t : mp.theta) t = rng.uniform(-1.0, 1.0);
    const FeatureVolume feats = compute_features(img);

#ifdef _OPENMP
    std::printf("grid %d^3, %d classes, best of %d reps, %d threads\n\n", n, classes, reps,
                omp_get_max_threads());
#else
    std::printf("grid %d^3, %d classes, best of %d reps, OpenMP disabled\n\n", n, classes, reps);
#endif

    std::vector<Row> rows;
    auto bench = [&](const std::string& name, auto fs, auto fp, double diff) {
        rows.push_back({name, best_ms(fs, reps), best_ms(fp, reps), diff});
    };

    bench("warp scalar",
          [&] { return reference::warp(img, phi).data[0]; },
          [&] { return warp(img, phi).data[0]; },
          max_abs_diff(reference::warp(img, phi).data, warp(img, phi).data));
    bench("warp prob",
          [&] { return reference::warp(pa, phi).data[0]; },
          [&] { return warp(pa, phi).data[0]; },
          max_abs_diff(reference::warp(pa, phi).data, warp(pa, phi).data));
    bench("compose",
          [&] { return reference::compose(phi, phi).displacement.data[0]; },
          [&] { return compose(phi, phi).displacement.data[0]; },
          max_abs_diff(reference::compose(phi, phi).displacement.data,
                       compose(phi, phi).displacement.data));
    bench("exp_svf",
          [&] { return reference::exp_svf(v).displacement.data[0]; },
          [&] { return exp_svf(v).displacement.data[0]; },
          max_abs_diff(reference::exp_svf(v).displacement.data, exp_svf(v).displacement.data));
    bench("spatial_gradient",
          [&] { return reference::spatial_gradient(v).data[0]; },
          [&] { return spatial_gradient(v).data[0]; },
          max_abs_diff(reference::spatial_gradient(v).data, spatial_gradient(v).data));
    bench("jacobian_det",
          [&] { return reference::jacobian_det(phi).data[0]; },
          [&] { return jacobian_det(phi).data[0]; },
          max_abs_diff(reference::jacobian_det(phi).data, jacobian_det(phi).data));
    bench("compute_features",
          [&] { return reference::compute_features(img).data[0]; },
          [&] { return compute_features(img).data[0]; },
          max_abs_diff(reference::compute_features(img).data, compute_features(img).data));
    bench("ss_predict",
          [&] { return reference::ss_predict_features(feats, sp).data[0]; },
          [&] { return ss_predict_features(feats, sp).data[0]; },
          max_abs_diff(reference::ss_predict_features(feats, sp).data,
                       ss_predict_features(feats, sp).data));
    bench("merge",
          [&] { return reference::merge(pa, pb, mp).data[0]; },
          [&] { return merge(pa, pb, mp).data[0]; },
          max_abs_diff(reference::merge(pa, pb, mp).data, merge(pa, pb, mp).data));
    bench("seg_loss",
          [&] { return reference::seg_loss(pa, pb); },
          [&] { return seg_loss(pa, pb); },
          std::abs(reference::seg_loss(pa, pb) - seg_loss(pa, pb)));
    bench("mean_squared_diff",
          [&] { return reference::mean_squared_diff(img, img2); },
          [&] { return mean_squared_diff(img, img2); },
          std::abs(reference::mean_squared_diff(img, img2) - mean_squared_diff(img, img2)));

    print_table(rows);
    return 0;
}
