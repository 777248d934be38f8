#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "hftrans/config.hpp"
#include "hftrans/tensor.hpp"

namespace hft {

/// First and second moments per parameter tensor, kept in double.
struct AdamState {
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update, in place. Weight decay is L2 added to the
/// gradient.
template <class T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamState& state,
               const AdamSettings& s) {
    if (params.size() != grads.size()) throw std::invalid_argument("adam_step: parameter / gradient count mismatch");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), 0.0);
            state.v.emplace_back(p.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
    ++state.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape())
            throw ShapeError("adam_step: gradient shape " + shape_str(grads[i].shape()) + " for parameter " +
                             shape_str(params[i].shape()));
        auto p = params[i].mutable_values();
        auto g = grads[i].values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = static_cast<double>(g[j]) + s.weight_decay * static_cast<double>(p[j]);
            m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * gj;
            v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * gj * gj;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            p[j] = static_cast<T>(static_cast<double>(p[j]) - s.learning_rate * mhat / (std::sqrt(vhat) + s.eps));
        }
    }
}

}  // namespace hft
