#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dta/network.hpp"
#include "dta/objectives.hpp"

namespace dta::testing {

template <typename T>
Tensor<T> randn(std::vector<int> shape, Rng& rng, T scale = T(1)) {
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal()) * scale;
    return t;
}

/// Random rows on the probability simplex.
template <typename T>
Tensor<T> random_probs(int batch, int k, Rng& rng) {
    Tensor<T> t({batch, k});
    for (int b = 0; b < batch; ++b) {
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            const double v = rng.uniform() + 1e-3;
            t[static_cast<std::int64_t>(b) * k + i] = static_cast<T>(v);
            sum += v;
        }
        for (int i = 0; i < k; ++i)
            t[static_cast<std::int64_t>(b) * k + i] = static_cast<T>(
                static_cast<double>(t[static_cast<std::int64_t>(b) * k + i]) / sum);
    }
    return t;
}

/// 1x4x4 input, element-mask site of width `hidden` on the hidden fc:
/// conv(1->2 3x3 same) relu <- feature site, flatten, fc(hidden) relu
/// <- classifier site, fc(classes), softmax.
template <typename T>
Network<T> tiny_element_net(std::uint64_t seed, int hidden = 8, int classes = 3) {
    std::vector<std::unique_ptr<Layer<T>>> ls;
    ls.push_back(std::make_unique<Conv2d<T>>(1, 2, 3, 1, 1));
    ls.push_back(std::make_unique<ReLU<T>>());
    const int feature_point = 1;
    ls.push_back(std::make_unique<Flatten<T>>());
    ls.push_back(std::make_unique<Linear<T>>(32, hidden));
    ls.push_back(std::make_unique<ReLU<T>>());
    const int classifier_point = 4;
    ls.push_back(std::make_unique<Linear<T>>(hidden, classes));
    ls.push_back(std::make_unique<Softmax<T>>());
    return Network<T>::assemble(ArchitectureId{"custom-element", {1, 4, 4}, classes}, std::move(ls),
                                feature_point, classifier_point, seed);
}

/// 1x5x5 input, channel-mask site with `channels` maps of 3x3:
/// conv(1->C 3x3 valid) relu <- feature site, flatten, fc(classes), softmax.
template <typename T>
Network<T> tiny_channel_net(std::uint64_t seed, int channels = 6, int classes = 3) {
    std::vector<std::unique_ptr<Layer<T>>> ls;
    ls.push_back(std::make_unique<Conv2d<T>>(1, channels, 3, 1, 0));
    ls.push_back(std::make_unique<ReLU<T>>());
    const int feature_point = 1;
    ls.push_back(std::make_unique<Flatten<T>>());
    ls.push_back(std::make_unique<Linear<T>>(channels * 9, classes));
    ls.push_back(std::make_unique<Softmax<T>>());
    return Network<T>::assemble(ArchitectureId{"custom-channel", {1, 5, 5}, classes}, std::move(ls),
                                feature_point, -1, seed);
}

/// Enumerates every bit vector within `max_flips` Hamming distance of
/// `base` and reports the best value of `score`.
template <typename Score>
double brute_force_best(const std::vector<std::uint8_t>& base, std::int64_t max_flips, Score&& score) {
    const std::size_t n = base.size();
    std::vector<std::uint8_t> current = base;
    double best = score(current);
    std::function<void(std::size_t, std::int64_t)> rec = [&](std::size_t start, std::int64_t left) {
        if (left == 0) return;
        for (std::size_t i = start; i < n; ++i) {
            current[i] ^= 1;
            best = std::max(best, score(current));
            rec(i + 1, left - 1);
            current[i] ^= 1;
        }
    };
    rec(0, max_flips);
    return best;
}

/// Linear proxy value sum_{i: bits=1} impact_i.
template <typename T>
double proxy_value(const std::vector<std::uint8_t>& bits, const std::vector<T>& impact) {
    double v = 0.0;
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) v += static_cast<double>(impact[i]);
    return v;
}

}  // namespace dta::testing
