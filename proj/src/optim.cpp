#include "casnet/optim.hpp"

#include <cmath>

#include "casnet/errors.hpp"
#include "casnet/rng.hpp"

namespace casnet {

std::vector<std::vector<double>> grad(Objective& obj) {
    const double loss = obj.value();
    if (!std::isfinite(loss)) throw NumericError("grad: loss is non-finite");
    std::vector<std::vector<double>> out;
    obj.gradient(out);
    return out;
}

namespace {

// Probes drawn uniformly from the flat index range [lo, lo + span).
GradCheckReport probe_range(Objective& obj, ParamSet& ps, int probes, double step,
                            std::uint64_t seed, std::size_t lo, std::size_t span) {
    GradCheckReport report;
    report.probes = probes;
    report.step = step;
    report.max_rel_err.assign(ps.blocks.size(), 0.0);
    report.block_probes.assign(ps.blocks.size(), 0);
    for (const auto& b : ps.blocks) report.block_names.push_back(b.name);

    const std::vector<std::vector<double>> analytic = grad(obj);
    if (analytic.size() != ps.blocks.size())
        throw ShapeError("grad_check: gradient block count mismatch");
    for (std::size_t b = 0; b < ps.blocks.size(); ++b)
        if (analytic[b].size() != ps.blocks[b].size)
            throw ShapeError("grad_check: gradient block size mismatch");

    Rng rng(seed);
    for (int probe = 0; probe < probes; ++probe) {
        std::size_t flat = lo + static_cast<std::size_t>(rng.below(span));
        std::size_t b = 0;
        while (flat >= ps.blocks[b].size) {
            flat -= ps.blocks[b].size;
            ++b;
        }
        double* slot = ps.blocks[b].data + flat;
        const double saved = *slot;
        *slot = saved + step;
        const double fp = obj.value();
        *slot = saved - step;
        const double fm = obj.value();
        *slot = saved;
        const double g_fd = (fp - fm) / (2.0 * step);
        const double g_a = analytic[b][flat];
        const double denom = std::max({std::fabs(g_a), std::fabs(g_fd), 1e-12});
        const double rel = std::fabs(g_a - g_fd) / denom;
        if (rel > report.max_rel_err[b]) report.max_rel_err[b] = rel;
        ++report.block_probes[b];
    }
    return report;
}

void check_probe_args(int probes, double step) {
    if (probes < 1) throw ConfigError("grad_check: probe count must be >= 1");
    if (!(step >= 1e-7 && step <= 1e-3))
        throw ConfigError("grad_check: step must lie in [1e-7, 1e-3]");
}

} // namespace

GradCheckReport grad_check(Objective& obj, int probes, double step, std::uint64_t seed) {
    check_probe_args(probes, step);
    ParamSet ps = obj.params();
    const std::size_t total = ps.total();
    if (total == 0) throw ConfigError("grad_check: objective has no parameters");
    return probe_range(obj, ps, probes, step, seed, 0, total);
}

GradCheckReport grad_check_block(Objective& obj, int block, int probes, double step,
                                 std::uint64_t seed) {
    check_probe_args(probes, step);
    ParamSet ps = obj.params();
    if (block < 0 || static_cast<std::size_t>(block) >= ps.blocks.size())
        throw ConfigError("grad_check_block: block index out of range");
    std::size_t lo = 0;
    for (int b = 0; b < block; ++b) lo += ps.blocks[static_cast<std::size_t>(b)].size;
    const std::size_t span = ps.blocks[static_cast<std::size_t>(block)].size;
    if (span == 0) throw ConfigError("grad_check_block: block is empty");
    return probe_range(obj, ps, probes, step, seed, lo, span);
}

void adam_step(AdamState& state, double* params, const double* grads, std::size_t n) {
    if (state.m.empty() && state.v.empty()) {
        state.m.assign(n, 0.0);
        state.v.assign(n, 0.0);
    }
    if (state.m.size() != n || state.v.size() != n)
        throw ShapeError("adam_step: moment/parameter size mismatch");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, double(state.t));
    const std::int64_t sn = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < sn; ++i) {
        const double g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

void adam_step(AdamState& state, std::vector<double>& params, const std::vector<double>& grads) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: gradient size mismatch");
    adam_step(state, params.data(), grads.data(), params.size());
}

} // namespace casnet
