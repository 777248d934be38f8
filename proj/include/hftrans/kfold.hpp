#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "hftrans/random.hpp"

namespace hft {

struct Fold {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

/// Seeded shuffle, then k contiguous validation blocks whose sizes differ by
/// at most one (the first n mod k folds get the extra sample). Index lists
/// are returned sorted.
inline std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("kfold_split: need at least 2 folds");
    if (k > n)
        throw std::invalid_argument("kfold_split: " + std::to_string(k) + " folds for " + std::to_string(n) +
                                    " samples");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "kfold"));
    for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);

    std::vector<Fold> folds(k);
    std::size_t start = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t size = n / k + (f < n % k ? 1 : 0);
        folds[f].validation.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(start + size));
        std::sort(folds[f].validation.begin(), folds[f].validation.end());
        start += size;
    }
    for (auto& fold : folds) {
        std::vector<bool> held(n, false);
        for (auto i : fold.validation) held[i] = true;
        for (std::size_t i = 0; i < n; ++i)
            if (!held[i]) fold.train.push_back(i);
    }
    return folds;
}

}  // namespace hft
