#pragma once

// Finite-difference checks of every differentiable primitive on randomly
// shaped, randomly filled inputs.

#include "hftrans/conv.hpp"
#include "hftrans/grad_check.hpp"
#include "hftrans/losses.hpp"

namespace hft {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kLossGradTolerance = 1e-3;

struct GradSuiteCase {
    std::string name;
    /// Builds the op and its inputs for one random instance.
    std::function<std::pair<DoubleOp, std::vector<Tensor<double>>>(Rng&)> make;
    bool kinked = false;  // piecewise-linear: skip probes next to a kink
    double tolerance = 0.0;  // overrides the suite tolerance when nonzero
};

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>(std::move(shape), std::move(v));
}

inline std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

inline LabelVolume random_labels(Rng& rng, const Extents& e, std::size_t classes) {
    LabelVolume l{e, {1.0f, 1.0f, 1.0f}, std::vector<std::uint8_t>(voxel_count(e))};
    for (auto& v : l.labels) v = static_cast<std::uint8_t>(rng.below(classes));
    return l;
}

}  // namespace detail

inline std::vector<GradSuiteCase> grad_suite_cases() {
    using detail::dim;
    using detail::random_tensor;
    using T = Tensor<double>;
    using In = std::vector<T>;
    std::vector<GradSuiteCase> cases;
    auto unary = [&](std::string name, std::function<T(const T&)> f, bool kinked = false) {
        cases.push_back({std::move(name),
                         [f](Rng& rng) {
                             Shape s{detail::dim(rng, 1, 4), detail::dim(rng, 1, 5)};
                             return std::pair{DoubleOp([f](const In& x) { return f(x[0]); }),
                                              In{detail::random_tensor(rng, s, -2.0, 2.0)}};
                         },
                         kinked});
    };
    unary("relu", [](const T& x) { return relu(x); }, true);
    unary("gelu", [](const T& x) { return gelu(x); });
    unary("scale", [](const T& x) { return scale(x, 0.75); });
    unary("sum", [](const T& x) { return sum(x); });
    unary("mean", [](const T& x) { return mean(x); });
    unary("transpose", [](const T& x) { return transpose(x); });
    unary("softmax_last", [](const T& x) { return softmax(x); });
    unary("softmax_axis0", [](const T& x) { return softmax(x, 0); });
    unary("standardize", [](const T& x) { return standardize(x, 1e-5); });

    cases.push_back({"add", [](Rng& rng) {
                         Shape s{dim(rng, 1, 4), dim(rng, 1, 4)};
                         return std::pair{DoubleOp([](const In& x) { return add(x[0], x[1]); }),
                                          In{random_tensor(rng, s), random_tensor(rng, s)}};
                     }});
    cases.push_back({"mul", [](Rng& rng) {
                         Shape s{dim(rng, 1, 4), dim(rng, 1, 4)};
                         return std::pair{DoubleOp([](const In& x) { return mul(x[0], x[1]); }),
                                          In{random_tensor(rng, s), random_tensor(rng, s)}};
                     }});
    cases.push_back({"reshape", [](Rng& rng) {
                         const std::size_t a = dim(rng, 1, 3), b = dim(rng, 1, 3), c = dim(rng, 1, 3);
                         return std::pair{DoubleOp([=](const In& x) { return reshape(x[0], {a * b, c}); }),
                                          In{random_tensor(rng, {a, b, c})}};
                     }});
    cases.push_back({"permute", [](Rng& rng) {
                         Shape s{dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
                         std::vector<std::size_t> axes{0, 1, 2, 3};
                         for (std::size_t i = 4; i-- > 1;) std::swap(axes[i], axes[rng.below(i + 1)]);
                         return std::pair{DoubleOp([axes](const In& x) { return permute(x[0], axes); }),
                                          In{random_tensor(rng, s)}};
                     }});
    cases.push_back({"concat", [](Rng& rng) {
                         const std::size_t axis = rng.below(3);
                         Shape a{dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
                         Shape b = a;
                         b[axis] = dim(rng, 1, 3);
                         return std::pair{DoubleOp([axis](const In& x) { return concat<double>({x[0], x[1]}, axis); }),
                                          In{random_tensor(rng, a), random_tensor(rng, b)}};
                     }});
    cases.push_back({"slice", [](Rng& rng) {
                         const std::size_t axis = rng.below(3);
                         Shape s{dim(rng, 2, 4), dim(rng, 2, 4), dim(rng, 2, 4)};
                         const std::size_t start = rng.below(s[axis]);
                         const std::size_t len = 1 + rng.below(s[axis] - start);
                         return std::pair{
                             DoubleOp([=](const In& x) { return slice(x[0], axis, start, len); }),
                             In{random_tensor(rng, s)}};
                     }});
    cases.push_back({"matmul", [](Rng& rng) {
                         const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
                         return std::pair{DoubleOp([](const In& x) { return matmul(x[0], x[1]); }),
                                          In{random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}};
                     }});
    cases.push_back({"linear", [](Rng& rng) {
                         const std::size_t n = dim(rng, 1, 4), din = dim(rng, 1, 5), dout = dim(rng, 1, 5);
                         return std::pair{DoubleOp([](const In& x) { return linear(x[0], x[1], x[2]); }),
                                          In{random_tensor(rng, {n, din}), random_tensor(rng, {dout, din}),
                                             random_tensor(rng, {dout})}};
                     }});
    cases.push_back({"affine_last", [](Rng& rng) {
                         const std::size_t n = dim(rng, 1, 4), c = dim(rng, 1, 5);
                         return std::pair{DoubleOp([](const In& x) { return affine_last(x[0], x[1], x[2]); }),
                                          In{random_tensor(rng, {n, c}), random_tensor(rng, {c}), random_tensor(rng, {c})}};
                     }});
    cases.push_back({"layer_norm", [](Rng& rng) {
                         const std::size_t n = dim(rng, 1, 4), c = dim(rng, 2, 6);
                         return std::pair{DoubleOp([](const In& x) { return layer_norm(x[0], x[1], x[2]); }),
                                          In{random_tensor(rng, {n, c}), random_tensor(rng, {c}), random_tensor(rng, {c})}};
                     }});
    cases.push_back({"instance_norm", [](Rng& rng) {
                         Shape s{dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 3)};
                         return std::pair{DoubleOp([](const In& x) { return instance_norm(x[0]); }),
                                          In{random_tensor(rng, s)}};
                     }});
    cases.push_back({"conv3d", [](Rng& rng) {
                         const std::size_t cin = dim(rng, 1, 2), cout = dim(rng, 1, 2);
                         const std::size_t k = 1 + 2 * rng.below(2);  // 1 or 3
                         const std::size_t stride = dim(rng, 1, 2), pad = k / 2 * rng.below(2);
                         Shape s{cin, dim(rng, k, 4), dim(rng, k, 4), dim(rng, k, 4)};
                         return std::pair{
                             DoubleOp([=](const In& x) { return conv3d(x[0], x[1], x[2], stride, pad); }),
                             In{random_tensor(rng, s), random_tensor(rng, {cout, cin, k, k, k}),
                                random_tensor(rng, {cout})}};
                     }});
    cases.push_back({"conv_transpose3d", [](Rng& rng) {
                         const std::size_t cin = dim(rng, 1, 2), cout = dim(rng, 1, 2);
                         const std::size_t stride = dim(rng, 1, 2);
                         const std::size_t k = stride + 2 * rng.below(2);
                         Shape s{cin, dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)};
                         return std::pair{
                             DoubleOp([=](const In& x) { return conv_transpose3d(x[0], x[1], x[2], stride); }),
                             In{random_tensor(rng, s), random_tensor(rng, {cin, cout, k, k, k}),
                                random_tensor(rng, {cout})}};
                     }});
    auto loss_case = [&](std::string name, std::function<T(const T&, const LabelVolume&)> f) {
        cases.push_back({std::move(name), [f](Rng& rng) {
                             const std::size_t nc = detail::dim(rng, 2, 4);
                             const Extents e{detail::dim(rng, 1, 3), detail::dim(rng, 1, 3), detail::dim(rng, 1, 3)};
                             const auto labels = detail::random_labels(rng, e, nc);
                             return std::pair{DoubleOp([f, labels](const In& x) { return f(x[0], labels); }),
                                              In{detail::random_tensor(rng, {nc, e[0], e[1], e[2]}, 0.05, 1.0)}};
                         },
                         false, kLossGradTolerance});
    };
    loss_case("dice_loss", [](const T& p, const LabelVolume& l) { return dice_loss(p, l); });
    loss_case("cross_entropy_loss", [](const T& p, const LabelVolume& l) { return cross_entropy_loss(p, l); });
    loss_case("combined_loss", [](const T& p, const LabelVolume& l) { return combined_loss(p, l); });
    return cases;
}

/// Runs `instances` random instances of every case; one report per case,
/// merged over instances.
inline std::vector<GradCheckReport> run_grad_suite(std::size_t instances, std::uint64_t seed,
                                                   const GradCheckOptions& base = {}) {
    std::vector<GradCheckReport> out;
    for (const auto& c : grad_suite_cases()) {
        GradCheckReport merged;
        merged.name = c.name;
        for (std::size_t i = 0; i < instances; ++i) {
            Rng rng(derive_seed(seed, c.name + "#" + std::to_string(i)));
            auto [op, inputs] = c.make(rng);
            GradCheckOptions opt = base;
            opt.seed = rng.next();
            if (c.kinked) opt.skip = skip_near_zero(2.0 * opt.step);
            if (c.tolerance > 0.0) opt.tolerance = c.tolerance;
            const auto r = grad_check(c.name, op, inputs, opt);
            merged.passed = merged.passed && r.passed;
            merged.checked += r.checked;
            merged.skipped += r.skipped;
            merged.failures += r.failures;
            if (r.worst_relative_error >= merged.worst_relative_error || merged.worst_location.empty()) {
                merged.worst_relative_error = r.worst_relative_error;
                merged.worst_location = "instance " + std::to_string(i) + ", " + r.worst_location;
            }
        }
        out.push_back(merged);
    }
    return out;
}

}  // namespace hft
