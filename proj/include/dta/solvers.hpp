#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "dta/errors.hpp"
#include "dta/loss_ops.hpp"
#include "dta/masking.hpp"
#include "dta/network.hpp"

namespace dta {

/// First-order sensitivities of the divergence to the mask units, taken at a
/// linearization point. Element kind carries one entry per activation unit;
/// channel kind carries the per-channel sums of those entries.
template <typename T>
struct ImpactVector {
    MaskKind kind = MaskKind::element;
    std::vector<T> values;
    std::variant<ElementMask, ChannelMask> linearization_point;

    std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
};

/// Everything a mask solve needs: the network, the insertion point, the
/// input batch, and a gradient-detached reference prediction whose rows must
/// lie on the probability simplex.
template <typename T>
struct DivergenceProbe {
    const Network<T>* network = nullptr;
    std::string insertion_point;  // "feature" or "classifier"
    Tensor<T> input_batch;
    Tensor<T> reference_output;
    bool train_mode = true;
    Rng* rng = nullptr;  // only needed when the stack has architectural dropout

    DivergenceProbe(const Network<T>& net, std::string point, Tensor<T> input, Tensor<T> reference,
                    bool train = true, Rng* rng_in = nullptr)
        : network(&net),
          insertion_point(std::move(point)),
          input_batch(std::move(input)),
          reference_output(std::move(reference)),
          train_mode(train),
          rng(rng_in) {
        network->insertion_index(insertion_point);  // validates the name
        check_simplex(reference_output, 1e-6, "DivergenceProbe");
    }
};

namespace detail {

template <typename Container>
void check_finite(const Container& v, const char* who) {
    for (const auto& x : v)
        if (!std::isfinite(static_cast<double>(x))) throw numerical_error(std::string(who) + ": non-finite value");
}

/// Relaxed-mask gradient of KL(reference || h_u(m * h_l(x))) at m = m0.
/// `mask_len` entries broadcast over `plane`-sized groups per sample.
template <typename T>
std::vector<T> mask_jacobian(const DivergenceProbe<T>& probe, const Tensor<T>& lower_act,
                             const Tensor<T>& mask_values, int plane) {
    Tape<T> tape;
    ForwardCtx ctx;
    ctx.train_mode = probe.train_mode;
    ctx.track_params = false;
    ctx.rng = probe.rng;
    auto a = tape.constant(lower_act);
    auto m = tape.leaf(mask_values, /*requires_grad=*/true);
    auto masked = ops::mul_mask(tape, a, m, plane);
    const int split = probe.network->insertion_index(probe.insertion_point);
    auto q = probe.network->record_range(tape, masked, split + 1, probe.network->num_layers(), ctx);
    auto d = ops::kl_vs_const(tape, q, probe.reference_output);
    tape.backward(d);
    const auto& g = tape.grad(m).raw();
    std::vector<T> j(g.begin(), g.end());
    check_finite(j, "compute_impact");
    return j;
}

/// Greedy budgeted flip selection on a raw bit vector. Exact for the linear
/// proxy: every admitted flip adds |impact| independently, so taking the
/// largest beneficial ones first is optimal. Flips against the impact sign
/// are skipped even with budget left. Ties break on ascending index.
template <typename T>
std::vector<std::uint8_t> greedy_flips(const std::vector<std::uint8_t>& bits,
                                       const std::vector<T>& impact, std::int64_t max_flips) {
    std::vector<std::int64_t> order(bits.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        return std::abs(static_cast<double>(impact[static_cast<std::size_t>(a)])) >
               std::abs(static_cast<double>(impact[static_cast<std::size_t>(b)]));
    });
    std::vector<std::uint8_t> out = bits;
    std::int64_t flips = 0;
    for (std::int64_t idx : order) {
        if (flips >= max_flips) break;
        const T s = impact[static_cast<std::size_t>(idx)];
        std::uint8_t& bit = out[static_cast<std::size_t>(idx)];
        if (s > T(0) && bit == 0) {
            bit = 1;
            ++flips;
        } else if (s < T(0) && bit == 1) {
            bit = 0;
            ++flips;
        }
    }
    return out;
}

}  // namespace detail

/// Impact values for an element-wise mask at the probe's insertion point:
/// the gradient of the divergence w.r.t. the relaxed mask entries, each
/// entry being (dD/d masked_unit) * unit_value summed over the batch.
template <typename T>
ImpactVector<T> compute_impact(const DivergenceProbe<T>& probe, const ElementMask& stochastic_mask) {
    const auto [lower, upper] = probe.network->split_at(probe.insertion_point);
    (void)upper;
    Tensor<T> act = lower.run(probe.input_batch, probe.train_mode, probe.rng);
    if (stochastic_mask.length() != act.numel() / probe.input_batch.dim(0))
        throw std::invalid_argument("compute_impact: mask length does not match insertion activation");
    ImpactVector<T> iv;
    iv.kind = MaskKind::element;
    iv.values = detail::mask_jacobian(probe, act, stochastic_mask.template as_tensor<T>(), 1);
    iv.linearization_point = stochastic_mask;
    return iv;
}

/// Channel-wise impact values: per-channel sums of the element Jacobian over
/// each activation map.
template <typename T>
ImpactVector<T> compute_impact(const DivergenceProbe<T>& probe, const ChannelMask& stochastic_mask) {
    const auto [lower, upper] = probe.network->split_at(probe.insertion_point);
    (void)upper;
    Tensor<T> act = lower.run(probe.input_batch, probe.train_mode, probe.rng);
    if (act.rank() != 4 || stochastic_mask.channels() != act.dim(1) ||
        stochastic_mask.height != act.dim(2) || stochastic_mask.width != act.dim(3))
        throw std::invalid_argument("compute_impact: channel mask shape does not match insertion site");
    ImpactVector<T> iv;
    iv.kind = MaskKind::channel;
    iv.values = detail::mask_jacobian(probe, act, stochastic_mask.template bits_tensor<T>(),
                                      stochastic_mask.plane());
    iv.linearization_point = stochastic_mask;
    return iv;
}

/// Budgeted flip selection maximizing the linear proxy v^T J.
template <typename T>
ElementMask solve_flips(const ElementMask& stochastic_mask, const ImpactVector<T>& impact,
                        const MaskBudget& budget) {
    if (impact.kind != MaskKind::element || budget.kind != MaskKind::element)
        throw std::invalid_argument("solve_flips: element mask needs element impact and budget");
    if (impact.size() != stochastic_mask.length())
        throw std::invalid_argument("solve_flips: impact length does not match mask");
    ElementMask out;
    out.values = detail::greedy_flips(stochastic_mask.values, impact.values, budget.max_flips());
    return out;
}

template <typename T>
ChannelMask solve_flips(const ChannelMask& stochastic_mask, const ImpactVector<T>& impact,
                        const MaskBudget& budget) {
    if (impact.kind != MaskKind::channel || budget.kind != MaskKind::channel)
        throw std::invalid_argument("solve_flips: channel mask needs channel impact and budget");
    if (impact.size() != stochastic_mask.channels())
        throw std::invalid_argument("solve_flips: impact length does not match channel count");
    ChannelMask out = stochastic_mask;
    out.channel_bits = detail::greedy_flips(stochastic_mask.channel_bits, impact.values, budget.max_flips());
    return out;
}

/// EAdD: impact linearization followed by the budgeted flip solve. The
/// result stays within floor(delta_e * L) Hamming distance of the input.
template <typename T>
ElementMask element_adversarial_mask(const DivergenceProbe<T>& probe, const ElementMask& stochastic_mask,
                                     double delta_e) {
    const MaskBudget budget = MaskBudget::element(delta_e, stochastic_mask.length());
    if (budget.max_flips() == 0) return stochastic_mask;
    auto impact = compute_impact(probe, stochastic_mask);
    return solve_flips(stochastic_mask, impact, budget);
}

/// CAdD: as above on whole activation maps; the uniform-plane constraint
/// holds because only channel bits flip.
template <typename T>
ChannelMask channel_adversarial_mask(const DivergenceProbe<T>& probe, const ChannelMask& stochastic_mask,
                                     double delta_c) {
    const MaskBudget budget = MaskBudget::channel(delta_c, stochastic_mask.channels());
    if (budget.max_flips() == 0) return stochastic_mask;
    auto impact = compute_impact(probe, stochastic_mask);
    return solve_flips(stochastic_mask, impact, budget);
}

/// Virtual adversarial perturbation: power-iteration approximation of the
/// norm-bounded input direction that maximizes KL(h(x) || h(x+r)). Every
/// sample's perturbation has L2 norm epsilon (exactly zero when epsilon=0).
template <typename T>
Tensor<T> vat_perturbation(const Network<T>& net, const Tensor<T>& x, double epsilon, double xi,
                           int power_iters, Rng& rng, const Tensor<T>* reference = nullptr,
                           bool train_mode = true) {
    if (epsilon < 0) throw std::invalid_argument("vat_perturbation: epsilon must be >= 0");
    if (power_iters < 1) throw std::invalid_argument("vat_perturbation: power_iters must be >= 1");
    Tensor<T> r(x.shape());
    if (epsilon == 0.0) return r;

    const int batch = x.dim(0);
    const std::int64_t per = x.numel() / batch;

    Tensor<T> ref;
    if (reference) {
        ref = *reference;
    } else {
        ref = net.forward(x, nullptr, nullptr, train_mode, &rng);
    }

    // Random unit start per sample.
    Tensor<T> d(x.shape());
    for (std::int64_t i = 0; i < d.numel(); ++i) d[i] = static_cast<T>(rng.normal());
    auto normalize = [&](Tensor<T>& v) {
        for (int b = 0; b < batch; ++b) {
            double n2 = 0.0;
            T* p = v.data() + static_cast<std::int64_t>(b) * per;
            for (std::int64_t i = 0; i < per; ++i) n2 += static_cast<double>(p[i]) * static_cast<double>(p[i]);
            if (n2 > 0) {
                const T inv = static_cast<T>(1.0 / std::sqrt(n2));
                for (std::int64_t i = 0; i < per; ++i) p[i] *= inv;
            }
        }
    };
    normalize(d);

    ForwardCtx ctx;
    ctx.train_mode = train_mode;
    ctx.track_params = false;
    ctx.rng = &rng;
    for (int it = 0; it < power_iters; ++it) {
        Tape<T> tape;
        Tensor<T> step(x.shape());
        for (std::int64_t i = 0; i < step.numel(); ++i) step[i] = static_cast<T>(xi) * d[i];
        auto rv = tape.leaf(std::move(step), /*requires_grad=*/true);
        auto xv = tape.constant(x);
        auto pert = ops::add(tape, xv, rv);
        auto q = net.record_forward(tape, pert, ctx);
        auto kl = ops::kl_vs_const(tape, q, ref);
        tape.backward(kl);
        const Tensor<T>& g = tape.grad(rv);
        detail::check_finite(g.raw(), "vat_perturbation");
        // Keep the previous direction for samples with a vanishing gradient.
        for (int b = 0; b < batch; ++b) {
            double n2 = 0.0;
            const T* gp = g.data() + static_cast<std::int64_t>(b) * per;
            for (std::int64_t i = 0; i < per; ++i) n2 += static_cast<double>(gp[i]) * static_cast<double>(gp[i]);
            if (n2 > 0) {
                T* dp = d.data() + static_cast<std::int64_t>(b) * per;
                for (std::int64_t i = 0; i < per; ++i) dp[i] = gp[i];
            }
        }
        normalize(d);
    }

    for (std::int64_t i = 0; i < r.numel(); ++i) r[i] = static_cast<T>(epsilon) * d[i];
    return r;
}

}  // namespace dta
