#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace casnet {

// One named view into a parameter block owned by an objective. grad_check
// perturbs through `data` in place, so `value()` must recompute from scratch.
struct ParamBlock {
    std::string name;
    double* data = nullptr;
    std::size_t size = 0;
};

struct ParamSet {
    std::vector<ParamBlock> blocks;

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& b : blocks) n += b.size;
        return n;
    }
};

// A differentiable scalar objective over parameter blocks. gradient() returns
// exact derivatives of the implemented loss, one vector per block, in the
// same order as params().
class Objective {
public:
    virtual ~Objective() = default;
    virtual ParamSet params() = 0;
    virtual double value() = 0;
    virtual void gradient(std::vector<std::vector<double>>& out) = 0;
};

// Evaluates the exact gradient; throws NumericError if the loss is non-finite.
std::vector<std::vector<double>> grad(Objective& obj);

struct GradCheckReport {
    std::vector<std::string> block_names;
    std::vector<double> max_rel_err; // per block; 0 when no probe landed there
    std::vector<int> block_probes;
    int probes = 0;
    double step = 0.0;

    double worst() const {
        double w = 0.0;
        for (double e : max_rel_err) w = e > w ? e : w;
        return w;
    }
};

// Central-difference spot check at `probes` coordinates drawn uniformly over
// the concatenated parameter space; deterministic under `seed`.
GradCheckReport grad_check(Objective& obj, int probes, double step, std::uint64_t seed);

// Same, but every probe lands inside the given block.
GradCheckReport grad_check_block(Objective& obj, int block, int probes, double step,
                                 std::uint64_t seed);

// Bias-corrected adaptive-moment optimizer state for one parameter block.
struct AdamState {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::vector<double> m, v;

    AdamState() = default;
    explicit AdamState(double learning_rate) : lr(learning_rate) {}
};

void adam_step(AdamState& state, double* params, const double* grads, std::size_t n);
void adam_step(AdamState& state, std::vector<double>& params, const std::vector<double>& grads);

} // namespace casnet
