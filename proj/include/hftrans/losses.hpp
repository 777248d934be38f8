#pragma once

// Segmentation objective: soft Dice + cross-entropy on class probabilities.

#include <algorithm>
#include <cmath>
#include <string>

#include "hftrans/ops.hpp"
#include "hftrans/volume.hpp"

namespace hft {

inline constexpr double kDiceSmoothing = 1e-5;
inline constexpr double kProbabilityFloor = 1e-12;

namespace detail {

template <class T>
void check_probs(const char* op, const Tensor<T>& probs, const LabelVolume& target) {
    require(probs.rank() == 4, std::string(op) + ": probabilities must be [classes,W,H,D]");
    for (std::size_t a = 0; a < 3; ++a)
        require(probs.extent(a + 1) == target.extents[a],
                std::string(op) + ": probabilities " + shape_str(probs.shape()) + " do not match label extents");
    require(target.labels.size() == target.voxels(), std::string(op) + ": label volume is inconsistent");
    for (auto l : target.labels)
        require(l < probs.extent(0), std::string(op) + ": label " + std::to_string(l) + " exceeds class count");
}

}  // namespace detail

/// 1 − mean_c (2·Σ p·g + ε) / (Σ p + Σ g + ε), g the one-hot target.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& probs, const LabelVolume& target) {
    detail::check_probs("dice_loss", probs, target);
    const std::size_t classes = probs.extent(0);
    const std::size_t V = target.voxels();
    const T eps = static_cast<T>(kDiceSmoothing);
    std::vector<T> inter(classes, T(0)), psum(classes, T(0)), gsum(classes, T(0));
    auto pv = probs.values();
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t v = 0; v < V; ++v) {
            const T p = pv[c * V + v];
            psum[c] += p;
            if (target.labels[v] == c) {
                inter[c] += p;
                gsum[c] += T(1);
            }
        }
    T dice_total = T(0);
    for (std::size_t c = 0; c < classes; ++c) dice_total += (T(2) * inter[c] + eps) / (psum[c] + gsum[c] + eps);
    const T loss = T(1) - dice_total / static_cast<T>(classes);
    return detail::finish("dice_loss", Tensor<T>::scalar(loss), detail::common_tape({&probs}),
                          [probs, labels = target.labels, inter, psum, gsum, classes, V, eps](
                              Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, probs, [&](std::span<T> gp) {
                                  const T w = -g[0] / static_cast<T>(classes);
                                  for (std::size_t c = 0; c < classes; ++c) {
                                      const T denom = psum[c] + gsum[c] + eps;
                                      const T hit = T(2) / denom;
                                      const T all = (T(2) * inter[c] + eps) / (denom * denom);
                                      for (std::size_t v = 0; v < V; ++v)
                                          gp[c * V + v] += w * ((labels[v] == c ? hit : T(0)) - all);
                                  }
                              });
                          });
}

/// −mean over voxels of log p(true class), with p clamped below at 1e-12.
template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& probs, const LabelVolume& target) {
    detail::check_probs("cross_entropy_loss", probs, target);
    const std::size_t V = target.voxels();
    const T floor = static_cast<T>(kProbabilityFloor);
    auto pv = probs.values();
    T total = T(0);
    for (std::size_t v = 0; v < V; ++v) total -= std::log(std::max(pv[target.labels[v] * V + v], floor));
    return detail::finish("cross_entropy_loss", Tensor<T>::scalar(total / static_cast<T>(V)),
                          detail::common_tape({&probs}),
                          [probs, labels = target.labels, V, floor](Tape<T>& tape, std::span<const T> g) {
                              detail::accumulate(tape, probs, [&](std::span<T> gp) {
                                  auto pv = probs.values();
                                  const T w = -g[0] / static_cast<T>(V);
                                  for (std::size_t v = 0; v < V; ++v) {
                                      const std::size_t i = labels[v] * V + v;
                                      if (pv[i] > floor) gp[i] += w / pv[i];
                                  }
                              });
                          });
}

/// Dice and cross-entropy with equal weight.
template <class T>
Tensor<T> combined_loss(const Tensor<T>& probs, const LabelVolume& target) {
    return add(dice_loss(probs, target), cross_entropy_loss(probs, target));
}

}  // namespace hft
