#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "casnet/interp.hpp"
#include "casnet/pipeline.hpp"

namespace casnet {

namespace {

std::string g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

double dice(const LabelMap& pred, const LabelMap& truth, int k) {
    require_same_grid(pred.grid, truth.grid, "dice");
    std::int64_t np = 0, nt = 0, overlap = 0;
    const std::size_t n = pred.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        const bool p = pred.data[i] == k;
        const bool t = truth.data[i] == k;
        np += p;
        nt += t;
        overlap += p && t;
    }
    if (np + nt == 0) return 1.0;
    return 2.0 * static_cast<double>(overlap) / static_cast<double>(np + nt);
}

double largest_component_fraction(const LabelMap& labels, int k) {
    const GridSpec& g = labels.grid;
    const std::int64_t n = g.voxels();
    std::int64_t total = 0;
    for (std::int64_t i = 0; i < n; ++i) total += labels.data[static_cast<std::size_t>(i)] == k;
    if (total == 0) return 0.0;

    std::vector<std::uint8_t> seen(static_cast<std::size_t>(n), 0);
    std::vector<std::int64_t> stack;
    std::int64_t best = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        if (labels.data[static_cast<std::size_t>(i)] != k || seen[static_cast<std::size_t>(i)]) continue;
        seen[static_cast<std::size_t>(i)] = 1;
        stack.assign(1, i);
        std::int64_t size = 0;
        while (!stack.empty()) {
            const std::int64_t cur = stack.back();
            stack.pop_back();
            ++size;
            const int x = static_cast<int>(cur % g.l);
            const int y = static_cast<int>((cur / g.l) % g.w);
            const int z = static_cast<int>(cur / (static_cast<std::int64_t>(g.l) * g.w));
            for (int dz = -1; dz <= 1; ++dz)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dx == 0 && dy == 0 && dz == 0) continue;
                        const int nx = x + dx, ny = y + dy, nz = z + dz;
                        if (nx < 0 || nx >= g.l || ny < 0 || ny >= g.w || nz < 0 || nz >= g.h)
                            continue;
                        const std::int64_t ni = g.index(nx, ny, nz);
                        if (seen[static_cast<std::size_t>(ni)] ||
                            labels.data[static_cast<std::size_t>(ni)] != k)
                            continue;
                        seen[static_cast<std::size_t>(ni)] = 1;
                        stack.push_back(ni);
                    }
        }
        best = std::max(best, size);
    }
    return static_cast<double>(best) / static_cast<double>(total);
}

std::int64_t class_boundary_voxels(const LabelMap& labels, int k) {
    const GridSpec& g = labels.grid;
    std::int64_t count = 0;
    for (int z = 0; z < g.h; ++z)
        for (int y = 0; y < g.w; ++y)
            for (int x = 0; x < g.l; ++x) {
                if (labels.at(x, y, z) != k) continue;
                const bool boundary =
                    (x > 0 && labels.at(x - 1, y, z) != k) ||
                    (x + 1 < g.l && labels.at(x + 1, y, z) != k) ||
                    (y > 0 && labels.at(x, y - 1, z) != k) ||
                    (y + 1 < g.w && labels.at(x, y + 1, z) != k) ||
                    (z > 0 && labels.at(x, y, z - 1) != k) ||
                    (z + 1 < g.h && labels.at(x, y, z + 1) != k);
                count += boundary;
            }
    return count;
}

InferenceOutput infer_subject(const ModelState& s, const TrainConfig& cfg,
                              const ScalarVolume& image, double age) {
    require_same_grid(image.grid, s.grid, "infer_subject");
    const GridSpec& grid = s.grid;
    const int c = s.c;
    const LossWeights w = at_epoch(cfg.weights, s.epoch);

    InferenceOutput out;
    const FeatureVolume fv = compute_features(image);
    out.ss = ss_predict_features(fv, s.ss);

    const AgeGroup group = age_group_of(age, cfg.age_lo, cfg.age_hi, s.cond.groups());
    const DeformationField psi = exp_svf(s.cond.q[static_cast<std::size_t>(group.index)], cfg.integ);
    const AtlasPair cond = conditional_atlas(s.atlas, psi);

    // Fit a fresh free velocity field against the image and the segmenter's
    // own prediction; all learned parameters stay frozen.
    VectorField v(grid);
    AdamState opt(cfg.lr_fields);
    const VectorField u_bar_zero(grid);
    for (int step = 0; step < cfg.infer_steps; ++step) {
        SvfExpTrace trace;
        const DeformationField phi = exp_svf_fwd(v, cfg.integ, trace);
        ProbLabelVolume al_w(grid, c);
        ScalarVolume al_sums(grid);
        warp_prob_fwd(cond.labels, phi, al_w, al_sums);
        const ScalarVolume ai_w = warp(cond.image, phi);
        const double loss = w.lambda_l * seg_loss(al_w, out.ss) +
                            w.lambda_i * mean_squared_diff(ai_w, image) +
                            regularization_loss(phi.displacement, u_bar_zero, w);
        if (!std::isfinite(loss)) {
            throw NumericError("infer_subject: non-finite loss at step " + std::to_string(step));
        }
        VectorField g_phi(grid);
        ProbLabelVolume g_alw(grid, c);
        seg_loss_backward(al_w, out.ss, w.lambda_l, g_alw);
        warp_prob_backward(cond.labels, phi, al_w, al_sums, g_alw, nullptr, &g_phi);
        ScalarVolume g_aiw(grid);
        mean_squared_diff_backward(ai_w, image, w.lambda_i, g_aiw);
        warp_backward(cond.image, phi, g_aiw, nullptr, &g_phi);
        regularization_loss_backward(phi.displacement, u_bar_zero, w, 1.0, g_phi, nullptr);
        VectorField g_v(grid);
        exp_svf_backward(trace, g_phi, g_v);
        adam_step(opt, v.data, g_v.data);
    }

    out.phi = exp_svf(v, cfg.integ);
    ProbLabelVolume drs(grid, c);
    ScalarVolume drs_sums(grid);
    warp_prob_fwd(cond.labels, out.phi, drs, drs_sums);
    out.drs = std::move(drs);
    out.merged = merge(out.ss, out.drs, s.merge_params);
    return out;
}

EvalReport evaluate(const ModelState& s, const TrainConfig& cfg, const Dataset& data,
                    Split split) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<int> rows = data.rows(split);
    if (rows.empty()) throw ConfigError("evaluate: no subjects in the requested split");
    require_same_grid(data.grid, s.grid, "evaluate");
    if (data.c != s.c) throw ShapeError("evaluate: class count mismatch");
    const int c = s.c;
    const int nk = c - 1; // tissue classes 1..c-1
    const int n = static_cast<int>(rows.size());

    // dsc[variant][class][subject]
    std::vector<std::vector<std::vector<double>>> dsc(
        3, std::vector<std::vector<double>>(static_cast<std::size_t>(nk),
                                            std::vector<double>(static_cast<std::size_t>(n), 0.0)));
    std::vector<std::vector<double>> ss_frac(static_cast<std::size_t>(nk),
                                             std::vector<double>(static_cast<std::size_t>(n), 0.0));
    EvalReport rep;
    rep.n_subjects = n;
    rep.c = c;
    double jac_neg = 0.0;
    for (int i = 0; i < n; ++i) {
        const Subject& subj = data.subjects[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
        const InferenceOutput inf = infer_subject(s, cfg, subj.image, subj.age);
        const LabelMap truth = argmax_labels(subj.labels);
        const LabelMap maps[3] = {argmax_labels(inf.ss), argmax_labels(inf.drs),
                                  argmax_labels(inf.merged)};
        for (int k = 1; k < c; ++k) {
            for (int m = 0; m < 3; ++m)
                dsc[static_cast<std::size_t>(m)][static_cast<std::size_t>(k - 1)]
                   [static_cast<std::size_t>(i)] = dice(maps[m], truth, k);
            std::int64_t nk_vox = 0;
            for (int lab : maps[0].data) nk_vox += lab == k;
            ss_frac[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(i)] =
                static_cast<double>(nk_vox) / static_cast<double>(s.grid.voxels());
        }
        jac_neg += jacobian_stats(inf.phi).negative_fraction;
        rep.lcc_ss.push_back(largest_component_fraction(maps[0], kCorticalClass));
        rep.lcc_drs.push_back(largest_component_fraction(maps[1], kCorticalClass));
    }
    rep.jacobian_negative_fraction = jac_neg / n;

    VariantStats* variants[3] = {&rep.ss, &rep.drs, &rep.merged};
    const char* names[3] = {"ss", "drs", "merged"};
    for (int m = 0; m < 3; ++m) {
        VariantStats& vs = *variants[m];
        vs.name = names[m];
        vs.class_mean.assign(static_cast<std::size_t>(nk), 0.0);
        vs.class_sd.assign(static_cast<std::size_t>(nk), 0.0);
        double sum_means = 0.0;
        for (int k = 0; k < nk; ++k) {
            const auto& d = dsc[static_cast<std::size_t>(m)][static_cast<std::size_t>(k)];
            double mean = 0.0;
            for (double x : d) mean += x;
            mean /= n;
            double var = 0.0;
            for (double x : d) var += (x - mean) * (x - mean);
            vs.class_mean[static_cast<std::size_t>(k)] = mean;
            vs.class_sd[static_cast<std::size_t>(k)] = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
            sum_means += mean;
        }
        vs.overall = sum_means / nk;
    }

    // A class is absent for the intensity segmenter when it essentially never
    // predicts it on any subject (intensity-tied shells collapse this way).
    double present_sum = 0.0;
    int present_count = 0;
    for (int k = 0; k < nk; ++k) {
        bool absent = true;
        for (int i = 0; i < n; ++i)
            absent = absent &&
                     ss_frac[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] < 1e-4;
        if (absent) {
            rep.ss_absent.push_back(k + 1);
        } else {
            present_sum += rep.ss.class_mean[static_cast<std::size_t>(k)];
            ++present_count;
        }
    }
    rep.ss_overall_present = present_count > 0 ? present_sum / present_count : 0.0;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

void write_eval_csv(const EvalReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("write_eval_csv: cannot open " + path);
    out << "metric,variant,index,value\n";
    const VariantStats* variants[3] = {&r.ss, &r.drs, &r.merged};
    for (const VariantStats* vs : variants) {
        for (std::size_t k = 0; k < vs->class_mean.size(); ++k) {
            out << "dice_mean," << vs->name << ',' << (k + 1) << ',' << g17(vs->class_mean[k])
                << '\n';
            out << "dice_sd," << vs->name << ',' << (k + 1) << ',' << g17(vs->class_sd[k]) << '\n';
        }
        out << "dice_overall," << vs->name << ",," << g17(vs->overall) << '\n';
    }
    out << "dice_overall_present,ss,," << g17(r.ss_overall_present) << '\n';
    for (int k : r.ss_absent) out << "ss_absent_class,ss," << k << ",1\n";
    out << "jacobian_negative_fraction,,," << g17(r.jacobian_negative_fraction) << '\n';
    for (std::size_t i = 0; i < r.lcc_ss.size(); ++i)
        out << "lcc_cortical,ss," << i << ',' << g17(r.lcc_ss[i]) << '\n';
    for (std::size_t i = 0; i < r.lcc_drs.size(); ++i)
        out << "lcc_cortical,drs," << i << ',' << g17(r.lcc_drs[i]) << '\n';
    out << "subjects,,," << r.n_subjects << '\n';
    out << "wall_seconds,,," << g17(r.wall_seconds) << '\n';
    out.flush();
    if (!out) throw ConfigError("write_eval_csv: write failed: " + path);
}

std::string eval_table(const EvalReport& r) {
    std::ostringstream o;
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %-15s %-15s %-15s\n", "", "ss", "drs", "merged");
    o << line;
    std::snprintf(line, sizeof line, "%-8s %-7s %-7s %-7s %-7s %-7s %-7s\n", "class", "mean",
                  "sd", "mean", "sd", "mean", "sd");
    o << line;
    for (std::size_t k = 0; k < r.ss.class_mean.size(); ++k) {
        std::snprintf(line, sizeof line, "%-8zu %-7.4f %-7.4f %-7.4f %-7.4f %-7.4f %-7.4f\n",
                      k + 1, r.ss.class_mean[k], r.ss.class_sd[k], r.drs.class_mean[k],
                      r.drs.class_sd[k], r.merged.class_mean[k], r.merged.class_sd[k]);
        o << line;
    }
    std::snprintf(line, sizeof line, "%-8s %-7.4f %-7s %-7.4f %-7s %-7.4f\n", "overall",
                  r.ss.overall, "", r.drs.overall, "", r.merged.overall);
    o << line;
    o << "ss overall excluding absent classes {";
    for (std::size_t i = 0; i < r.ss_absent.size(); ++i)
        o << (i ? " " : "") << r.ss_absent[i];
    std::snprintf(line, sizeof line, "}: %.4f\n", r.ss_overall_present);
    o << line;
    std::snprintf(line, sizeof line, "negative-Jacobian fraction: %.3e\n",
                  r.jacobian_negative_fraction);
    o << line;
    double lcc_ss = 0, lcc_drs = 0;
    for (double x : r.lcc_ss) lcc_ss += x;
    for (double x : r.lcc_drs) lcc_drs += x;
    if (!r.lcc_ss.empty()) {
        std::snprintf(line, sizeof line,
                      "cortical largest-component fraction (mean): ss %.4f  drs %.4f\n",
                      lcc_ss / r.lcc_ss.size(), lcc_drs / r.lcc_drs.size());
        o << line;
    }
    std::snprintf(line, sizeof line, "subjects: %d, wall: %.1f s\n", r.n_subjects,
                  r.wall_seconds);
    o << line;
    return o.str();
}

} // namespace casnet
