#pragma once

#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "dta/loss_ops.hpp"
#include "dta/masking.hpp"
#include "dta/network.hpp"
#include "dta/solvers.hpp"

namespace dta {

template <typename T>
struct LossWeights {
    T lambda1 = T(0);  // consistency (feature + classifier masks)
    T lambda2 = T(0);  // entropy minimization
    T lambda3 = T(0);  // input-level perturbation

    void validate() const {
        for (T v : {lambda1, lambda2, lambda3})
            if (!(v >= T(0)) || !std::isfinite(static_cast<double>(v)))
                throw std::invalid_argument("LossWeights: weights must be finite and >= 0");
    }
};

/// Unweighted term values; total = task + l1*(fdta+cdta) + l2*entropy + l3*vat.
template <typename T>
struct LossBreakdown {
    T task = T(0);
    T fdta = T(0);
    T cdta = T(0);
    T entropy = T(0);
    T vat = T(0);
    T total = T(0);

    T recompose(const LossWeights<T>& w) const {
        return task + w.lambda1 * (fdta + cdta) + w.lambda2 * entropy + w.lambda3 * vat;
    }
};

struct VatSettings {
    double xi = 1e-6;
    int power_iters = 1;
};

/// Per-step adaptation knobs: current (ramped) magnitudes plus ablation
/// toggles. A term contributes only when its toggle is on and its weight is
/// positive; disabled terms run no forwards and draw no randomness.
struct AdaptationState {
    double delta_e = 0.0;
    double delta_c = 0.0;
    double epsilon = 0.0;
    double rho_s = 0.1;
    bool use_fdta = true;
    bool use_cdta = true;
    bool use_entropy = true;
    bool use_vat = true;
    VatSettings vat;
};

/// Perturbations and detached references captured from one evaluation and
/// replayable into another. Holding these fixed makes the loss a smooth,
/// deterministic function of the parameters, which is what a finite
/// difference check differentiates: the detached KL references are
/// constants of the optimization, not functions of the parameters.
template <typename T>
struct FrozenPerturbations {
    std::optional<ChannelMask> fdta_stoch, fdta_adv;
    std::optional<ElementMask> cdta_stoch, cdta_adv;
    std::optional<Tensor<T>> vat_r;
    std::optional<Tensor<T>> fdta_ref, cdta_ref, vat_ref;
    // Captured solver telemetry (debug dumps); never replayed.
    std::optional<std::vector<T>> fdta_impact, cdta_impact;
};

// ---------------------------------------------------------------------------
// Pure tensor-level objectives
// ---------------------------------------------------------------------------

/// Batch-mean KL(p || q), rows validated against the simplex within 1e-6,
/// logs taken on probabilities clamped to [1e-8, 1].
template <typename T>
T kl_divergence(const Tensor<T>& p, const Tensor<T>& q) {
    check_simplex(p, 1e-6, "kl_divergence");
    check_simplex(q, 1e-6, "kl_divergence");
    if (!same_shape(p, q)) throw std::invalid_argument("kl_divergence: shape mismatch");
    double acc = 0.0;
    for (std::int64_t i = 0; i < p.numel(); ++i)
        acc += static_cast<double>(p[i]) * (std::log(static_cast<double>(clamp_prob(p[i]))) -
                                            std::log(static_cast<double>(clamp_prob(q[i]))));
    return static_cast<T>(acc / p.dim(0));
}

/// Batch-mean cross entropy of one-hot labels.
template <typename T>
T task_loss(const Tensor<T>& probs, const std::vector<int>& labels) {
    check_simplex(probs, 1e-6, "task_loss");
    const int batch = probs.dim(0), k = probs.dim(1);
    if (static_cast<int>(labels.size()) != batch)
        throw std::invalid_argument("task_loss: label count does not match batch");
    double acc = 0.0;
    for (int b = 0; b < batch; ++b) {
        const int y = labels[static_cast<std::size_t>(b)];
        if (y < 0 || y >= k) throw std::invalid_argument("task_loss: label out of range");
        acc -= std::log(static_cast<double>(clamp_prob(probs[static_cast<std::int64_t>(b) * k + y])));
    }
    return static_cast<T>(acc / batch);
}

/// Batch-mean prediction entropy.
template <typename T>
T entropy_loss(const Tensor<T>& probs) {
    check_simplex(probs, 1e-6, "entropy_loss");
    double acc = 0.0;
    for (std::int64_t i = 0; i < probs.numel(); ++i)
        acc -= static_cast<double>(probs[i]) * std::log(static_cast<double>(clamp_prob(probs[i])));
    return static_cast<T>(acc / probs.dim(0));
}

// ---------------------------------------------------------------------------
// Network-coupled terms
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
ForwardCtx loss_ctx(bool track_params, bool update_stats = false, Rng* rng = nullptr) {
    ForwardCtx ctx;
    ctx.train_mode = true;
    ctx.update_stats = update_stats;
    ctx.track_params = track_params;
    ctx.rng = rng;
    return ctx;
}

template <typename T>
void finish_term(Network<T>& net, Tape<T>& tape, typename Tape<T>::Var loss, T weight, bool want_grads) {
    if (!want_grads || weight == T(0)) return;
    tape.backward(loss, weight);
    net.accumulate_grads(tape);
}

}  // namespace detail

/// Clean train-mode forward on the target batch; the detached reference for
/// the consistency terms. Never records gradients.
template <typename T>
Tensor<T> clean_target_probs(Network<T>& net, const Tensor<T>& x, bool update_stats = false, Rng* rng = nullptr) {
    Tape<T> tape;
    auto ctx = detail::loss_ctx<T>(false, update_stats, rng);
    auto out = net.record_forward(tape, tape.constant(x), ctx);
    return tape.value(out);
}

/// Source cross entropy. When `sink` is true the gradient lands in
/// net.grads() (weight 1).
template <typename T>
T task_term(Network<T>& net, const Tensor<T>& x, const std::vector<int>& labels, bool sink,
            bool update_stats = false, Rng* rng = nullptr) {
    if (x.numel() == 0) throw std::invalid_argument("task_term: empty source batch");
    Tape<T> tape;
    auto ctx = detail::loss_ctx<T>(sink, update_stats, rng);
    auto probs = net.record_forward(tape, tape.constant(x), ctx);
    auto loss = ops::cross_entropy(tape, probs, labels);
    const T value = tape.value(loss)[0];
    detail::finish_term(net, tape, loss, T(1), sink);
    return value;
}

/// Target entropy term; optionally exports the clean probabilities so other
/// terms can reuse them as their reference.
template <typename T>
T entropy_term(Network<T>& net, const Tensor<T>& x, bool sink, T weight, bool update_stats = false,
               Tensor<T>* probs_out = nullptr, Rng* rng = nullptr) {
    Tape<T> tape;
    auto ctx = detail::loss_ctx<T>(sink, update_stats, rng);
    auto probs = net.record_forward(tape, tape.constant(x), ctx);
    if (probs_out) *probs_out = tape.value(probs);
    auto loss = ops::entropy_mean(tape, probs);
    const T value = tape.value(loss)[0];
    detail::finish_term(net, tape, loss, weight, sink);
    return value;
}

/// Consistency term at the feature-extractor insertion point, channel-wise
/// masks: KL( h(x; m_s) detached || h(x; m_adv) ).
template <typename T>
T fdta_term(Network<T>& net, const Tensor<T>& x, double delta_c, double rho_s, Rng& rng, bool sink,
            T weight = T(1), const Tensor<T>* clean_ref = nullptr,
            const FrozenPerturbations<T>* frozen = nullptr, FrozenPerturbations<T>* capture = nullptr) {
    const ChannelSite site = net.feature_site();
    ChannelMask m_s = (frozen && frozen->fdta_stoch)
                          ? *frozen->fdta_stoch
                          : sample_channel_mask(site.channels, site.height, site.width, rho_s, rng);
    ChannelMask m_adv;
    if (frozen && frozen->fdta_adv) {
        m_adv = *frozen->fdta_adv;
    } else if (MaskBudget::channel(delta_c, site.channels).max_flips() > 0) {
        Tensor<T> ref = clean_ref ? *clean_ref : clean_target_probs(net, x, false, &rng);
        DivergenceProbe<T> probe(net, "feature", x, std::move(ref), true, &rng);
        auto impact = compute_impact(probe, m_s);
        m_adv = solve_flips(m_s, impact, MaskBudget::channel(delta_c, site.channels));
        if (capture) capture->fdta_impact = std::move(impact.values);
    } else {
        m_adv = m_s;
    }

    const int split = net.insertion_index("feature");
    Tape<T> tape;
    auto ctx = detail::loss_ctx<T>(sink, false, &rng);
    auto a = net.record_range(tape, tape.constant(x), 0, split + 1, ctx);

    // Both upper branches start from the same rng snapshot so any
    // architectural dropout noise is shared; with equal masks the branches
    // are then identical and the divergence is exactly zero.
    Rng ref_rng = rng;
    Tensor<T> ref_s;
    if (frozen && frozen->fdta_ref) {
        ref_s = *frozen->fdta_ref;
    } else {
        auto [lower, upper] = net.split_at("feature");
        (void)lower;
        ref_s = upper.run(apply_mask(tape.value(a), m_s), /*train_mode=*/true, &ref_rng);
    }

    auto mv = tape.constant(m_adv.template bits_tensor<T>());
    auto masked = ops::mul_mask(tape, a, mv, site.height * site.width);
    auto q = net.record_range(tape, masked, split + 1, net.num_layers(), ctx);
    auto loss = ops::kl_vs_const(tape, q, ref_s);
    const T value = tape.value(loss)[0];
    detail::finish_term(net, tape, loss, weight, sink);

    if (capture) {
        capture->fdta_stoch = m_s;
        capture->fdta_adv = m_adv;
        capture->fdta_ref = std::move(ref_s);
    }
    return value;
}

/// Consistency term at the classifier insertion point, element-wise masks.
template <typename T>
T cdta_term(Network<T>& net, const Tensor<T>& x, double delta_e, double rho_s, Rng& rng, bool sink,
            T weight = T(1), const Tensor<T>* clean_ref = nullptr,
            const FrozenPerturbations<T>* frozen = nullptr, FrozenPerturbations<T>* capture = nullptr) {
    const std::int64_t len = net.classifier_len();
    ElementMask m_s = (frozen && frozen->cdta_stoch) ? *frozen->cdta_stoch
                                                     : sample_element_mask(len, rho_s, rng);
    ElementMask m_adv;
    if (frozen && frozen->cdta_adv) {
        m_adv = *frozen->cdta_adv;
    } else if (MaskBudget::element(delta_e, len).max_flips() > 0) {
        Tensor<T> ref = clean_ref ? *clean_ref : clean_target_probs(net, x, false, &rng);
        DivergenceProbe<T> probe(net, "classifier", x, std::move(ref), true, &rng);
        auto impact = compute_impact(probe, m_s);
        m_adv = solve_flips(m_s, impact, MaskBudget::element(delta_e, len));
        if (capture) capture->cdta_impact = std::move(impact.values);
    } else {
        m_adv = m_s;
    }

    const int split = net.insertion_index("classifier");
    Tape<T> tape;
    auto ctx = detail::loss_ctx<T>(sink, false, &rng);
    auto a = net.record_range(tape, tape.constant(x), 0, split + 1, ctx);

    Rng ref_rng = rng;
    Tensor<T> ref_s;
    if (frozen && frozen->cdta_ref) {
        ref_s = *frozen->cdta_ref;
    } else {
        auto [lower, upper] = net.split_at("classifier");
        (void)lower;
        ref_s = upper.run(apply_mask(tape.value(a), m_s), /*train_mode=*/true, &ref_rng);
    }

    auto mv = tape.constant(m_adv.template as_tensor<T>());
    auto masked = ops::mul_mask(tape, a, mv, 1);
    auto q = net.record_range(tape, masked, split + 1, net.num_layers(), ctx);
    auto loss = ops::kl_vs_const(tape, q, ref_s);
    const T value = tape.value(loss)[0];
    detail::finish_term(net, tape, loss, weight, sink);

    if (capture) {
        capture->cdta_stoch = m_s;
        capture->cdta_adv = m_adv;
        capture->cdta_ref = std::move(ref_s);
    }
    return value;
}

/// Input-perturbation consistency: KL( h(x) detached || h(x + r) ) with r
/// from the power-iteration solver. epsilon = 0 contributes exactly zero.
template <typename T>
T vat_term(Network<T>& net, const Tensor<T>& x, double epsilon, const VatSettings& settings, Rng& rng,
           bool sink, T weight = T(1), const Tensor<T>* clean_ref = nullptr,
           const FrozenPerturbations<T>* frozen = nullptr, FrozenPerturbations<T>* capture = nullptr) {
    if (epsilon < 0) throw std::invalid_argument("vat_term: epsilon must be >= 0");
    if (epsilon == 0.0 && !(frozen && frozen->vat_r)) {
        if (capture) {
            capture->vat_r = Tensor<T>(x.shape());
            capture->vat_ref = clean_ref ? *clean_ref : clean_target_probs(net, x, false, &rng);
        }
        return T(0);
    }

    Tensor<T> ref = (frozen && frozen->vat_ref)
                        ? *frozen->vat_ref
                        : (clean_ref ? *clean_ref : clean_target_probs(net, x, false, &rng));
    Tensor<T> r = (frozen && frozen->vat_r)
                      ? *frozen->vat_r
                      : vat_perturbation(net, x, epsilon, settings.xi, settings.power_iters, rng, &ref);

    Tape<T> tape;
    auto ctx = detail::loss_ctx<T>(sink, false, &rng);
    auto xv = tape.constant(x);
    auto rv = tape.constant(r);
    auto pert = ops::add(tape, xv, rv);
    auto q = net.record_forward(tape, pert, ctx);
    auto loss = ops::kl_vs_const(tape, q, ref);
    const T value = tape.value(loss)[0];
    detail::finish_term(net, tape, loss, weight, sink);

    if (capture) {
        capture->vat_r = std::move(r);
        capture->vat_ref = std::move(ref);
    }
    return value;
}

// Spec-facing wrappers that evaluate a single objective without touching
// gradients.

template <typename T>
T fdta_loss(Network<T>& net, const Tensor<T>& x, double delta_c, double rho_s, Rng& rng) {
    return fdta_term(net, x, delta_c, rho_s, rng, /*sink=*/false);
}

template <typename T>
T cdta_loss(Network<T>& net, const Tensor<T>& x, double delta_e, double rho_s, Rng& rng) {
    return cdta_term(net, x, delta_e, rho_s, rng, /*sink=*/false);
}

template <typename T>
T vat_loss(Network<T>& net, const Tensor<T>& x, double epsilon, Rng& rng, VatSettings settings = {}) {
    return vat_term(net, x, epsilon, settings, rng, /*sink=*/false);
}

/// The full objective. Evaluates the active terms in a fixed order (task,
/// entropy, fdta, cdta, vat), accumulating lambda-weighted gradients into
/// net.grads() when `sink` is true. The target batch may be empty only when
/// every adaptation weight is zero.
template <typename T>
LossBreakdown<T> total_loss(Network<T>& net, const Tensor<T>& source_x,
                            const std::vector<int>& source_labels, const Tensor<T>& target_x,
                            const LossWeights<T>& weights, const AdaptationState& state, Rng& rng,
                            bool sink = false, bool update_stats = false,
                            const std::type_identity_t<FrozenPerturbations<T>>* frozen = nullptr,
                            std::type_identity_t<FrozenPerturbations<T>>* capture = nullptr) {
    weights.validate();
    const bool want_fdta = state.use_fdta && weights.lambda1 > T(0);
    const bool want_cdta = state.use_cdta && weights.lambda1 > T(0);
    const bool want_entropy = state.use_entropy && weights.lambda2 > T(0);
    const bool want_vat = state.use_vat && weights.lambda3 > T(0);
    const bool any_target = want_fdta || want_cdta || want_entropy || want_vat;

    if (source_x.numel() == 0) throw std::invalid_argument("total_loss: empty source batch");
    if (any_target && target_x.numel() == 0)
        throw std::invalid_argument("total_loss: empty target batch with adaptation terms active");

    LossBreakdown<T> out;
    out.task = task_term(net, source_x, source_labels, sink, update_stats, &rng);

    Tensor<T> clean;
    if (any_target) {
        if (want_entropy) {
            out.entropy = entropy_term(net, target_x, sink, weights.lambda2, update_stats, &clean, &rng);
        } else {
            clean = clean_target_probs(net, target_x, update_stats, &rng);
        }
    }
    if (want_fdta)
        out.fdta = fdta_term(net, target_x, state.delta_c, state.rho_s, rng, sink, weights.lambda1,
                             &clean, frozen, capture);
    if (want_cdta)
        out.cdta = cdta_term(net, target_x, state.delta_e, state.rho_s, rng, sink, weights.lambda1,
                             &clean, frozen, capture);
    if (want_vat)
        out.vat = vat_term(net, target_x, state.epsilon, state.vat, rng, sink, weights.lambda3, &clean,
                           frozen, capture);

    out.total = out.recompose(weights);
    if (!std::isfinite(static_cast<double>(out.total)))
        throw numerical_error("total_loss: non-finite objective");
    return out;
}

}  // namespace dta
