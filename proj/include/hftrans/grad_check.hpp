#pragma once

// Central finite-difference check of reverse-mode gradients.
//
// A vector-valued operation is reduced to a scalar through a fixed random
// projection, L = Σ r ⊙ op(inputs), and dL/dinput from backward() is compared
// element-wise against (L(x + h) − L(x − h)) / 2h.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hftrans/ops.hpp"
#include "hftrans/random.hpp"

namespace hft {

struct GradCheckOptions {
    double step = 1e-4;
    double tolerance = 1e-4;   // relative
    double abs_floor = 1e-8;   // absolute differences below this always pass
    std::uint64_t seed = 0x5eed;
    /// Probe at most this many elements per input (0 = all), chosen by seed.
    std::size_t max_probes_per_input = 0;
    /// Returns true for probe points to exclude (e.g. near a kink).
    std::function<bool(std::size_t input, std::size_t element, double value)> skip;
};

struct GradCheckReport {
    std::string name;
    bool passed = true;
    double worst_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    std::size_t failures = 0;
    std::string worst_location;
};

using DoubleOp = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

namespace detail {

inline double projected(const Tensor<double>& y, const Tensor<double>& r) {
    double total = 0.0;
    auto yv = y.values();
    auto rv = r.values();
    for (std::size_t i = 0; i < yv.size(); ++i) total += yv[i] * rv[i];
    return total;
}

}  // namespace detail

/// Skip policy for piecewise-linear ops: probe points within one step of 0.
inline std::function<bool(std::size_t, std::size_t, double)> skip_near_zero(double step) {
    return [step](std::size_t, std::size_t, double v) { return std::abs(v) <= step; };
}

inline GradCheckReport grad_check(std::string name, const DoubleOp& op, std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& options = {}) {
    GradCheckReport report;
    report.name = std::move(name);
    Rng rng(options.seed);

    const Tensor<double> probe_out = op(inputs);
    std::vector<double> weights(probe_out.size());
    for (auto& w : weights) w = rng.uniform(-1.0, 1.0);
    const Tensor<double> projection(probe_out.shape(), std::move(weights));

    Tape<double> tape;
    std::vector<Tensor<double>> watched;
    for (const auto& in : inputs) watched.push_back(tape.watch(in));
    const auto loss = sum(mul(op(watched), projection));
    const auto grads = backward(tape, loss);

    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto analytic = grads.of(watched[i]);
        std::vector<std::size_t> probes(inputs[i].size());
        for (std::size_t e = 0; e < probes.size(); ++e) probes[e] = e;
        if (options.max_probes_per_input && probes.size() > options.max_probes_per_input) {
            for (std::size_t e = 0; e < options.max_probes_per_input; ++e)
                std::swap(probes[e], probes[e + rng.below(probes.size() - e)]);
            probes.resize(options.max_probes_per_input);
            std::sort(probes.begin(), probes.end());
        }
        for (std::size_t e : probes) {
            const double x0 = inputs[i][e];
            if (options.skip && options.skip(i, e, x0)) {
                ++report.skipped;
                continue;
            }
            auto perturbed = inputs;
            auto plus = inputs[i].clone();
            plus.mutable_values()[e] = x0 + options.step;
            perturbed[i] = plus;
            const double f_plus = detail::projected(op(perturbed), projection);
            auto minus = inputs[i].clone();
            minus.mutable_values()[e] = x0 - options.step;
            perturbed[i] = minus;
            const double f_minus = detail::projected(op(perturbed), projection);

            const double numeric = (f_plus - f_minus) / (2.0 * options.step);
            const double a = analytic[e];
            const double diff = std::abs(a - numeric);
            const double denom = std::max(std::abs(a), std::abs(numeric));
            const double rel = denom > 0.0 ? diff / denom : 0.0;
            ++report.checked;
            if (diff > options.abs_floor && rel > options.tolerance) {
                ++report.failures;
                report.passed = false;
            }
            // Near-zero gradients are ruled by abs_floor and would swamp the
            // relative figure, so they are not reported as "worst".
            const bool significant = denom >= 1e-6 || diff > options.abs_floor;
            if (significant && (rel > report.worst_relative_error || report.worst_location.empty())) {
                report.worst_relative_error = std::max(report.worst_relative_error, rel);
                report.worst_location = "input " + std::to_string(i) + " element " + std::to_string(e) +
                                        " analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return report;
}

}  // namespace hft
