#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dta/autograd.hpp"
#include "dta/errors.hpp"
#include "dta/tensor.hpp"

namespace dta {

/// Probabilities are clamped to [kProbClamp, 1] before any log.
inline constexpr double kProbClamp = 1e-8;

template <typename T>
T clamp_prob(T p) {
    return p < static_cast<T>(kProbClamp) ? static_cast<T>(kProbClamp) : (p > T(1) ? T(1) : p);
}

/// Throws unless every row of `p` (B,K) is a probability vector within tol.
template <typename T>
void check_simplex(const Tensor<T>& p, double tol = 1e-6, const char* who = "check_simplex") {
    if (p.rank() != 2) throw std::invalid_argument(std::string(who) + ": expected (B,K) rows");
    const int batch = p.dim(0), k = p.dim(1);
    for (int b = 0; b < batch; ++b) {
        double sum = 0.0;
        for (int i = 0; i < k; ++i) {
            const double v = static_cast<double>(p[static_cast<std::int64_t>(b) * k + i]);
            if (!(v >= -tol)) throw std::invalid_argument(std::string(who) + ": negative probability");
            sum += v;
        }
        if (std::abs(sum - 1.0) > tol)
            throw std::invalid_argument(std::string(who) + ": row does not sum to 1");
    }
}

namespace ops {

/// Batch-mean KL(p_ref || q) against a constant reference. Gradient reaches
/// only q; the clamp zeroes the slope below kProbClamp.
template <typename T>
typename Tape<T>::Var kl_vs_const(Tape<T>& tape, typename Tape<T>::Var q, const Tensor<T>& p_ref) {
    const Tensor<T>& qv = tape.value(q);
    if (!same_shape(qv, p_ref)) throw std::invalid_argument("kl_vs_const: shape mismatch");
    const int batch = qv.dim(0), k = qv.dim(1);
    double acc = 0.0;
    for (std::int64_t i = 0; i < qv.numel(); ++i) {
        const double p = static_cast<double>(clamp_prob(p_ref[i]));
        const double qq = static_cast<double>(clamp_prob(qv[i]));
        acc += static_cast<double>(p_ref[i]) * (std::log(p) - std::log(qq));
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / batch));
    const bool need = tape.requires_grad(q);
    auto y = tape.make(std::move(out), need);
    if (need) {
        Tensor<T> ref = p_ref;
        tape.record([q, y, ref, batch, k](Tape<T>& t) {
            const T seed = t.grad(y)[0];
            const Tensor<T>& qv2 = t.value(q);
            Tensor<T>& gq = t.grad(q);
            const T inv_b = T(1) / static_cast<T>(batch);
            for (std::int64_t i = 0; i < qv2.numel(); ++i)
                if (qv2[i] > static_cast<T>(kProbClamp))
                    gq[i] -= seed * inv_b * ref[i] / qv2[i];
            (void)k;
        });
    }
    return y;
}

/// Batch-mean cross entropy -log q[label].
template <typename T>
typename Tape<T>::Var cross_entropy(Tape<T>& tape, typename Tape<T>::Var probs,
                                    const std::vector<int>& labels) {
    const Tensor<T>& pv = tape.value(probs);
    const int batch = pv.dim(0), k = pv.dim(1);
    if (static_cast<int>(labels.size()) != batch)
        throw std::invalid_argument("cross_entropy: label count does not match batch");
    double acc = 0.0;
    for (int b = 0; b < batch; ++b) {
        const int y = labels[static_cast<std::size_t>(b)];
        if (y < 0 || y >= k) throw std::invalid_argument("cross_entropy: label out of range");
        acc -= std::log(static_cast<double>(clamp_prob(pv[static_cast<std::int64_t>(b) * k + y])));
    }
    const bool need = tape.requires_grad(probs);
    auto out = tape.make(Tensor<T>::scalar(static_cast<T>(acc / batch)), need);
    if (need) {
        std::vector<int> ls = labels;
        tape.record([probs, out, ls, batch, k](Tape<T>& t) {
            const T seed = t.grad(out)[0];
            const Tensor<T>& pv2 = t.value(probs);
            Tensor<T>& gp = t.grad(probs);
            const T inv_b = T(1) / static_cast<T>(batch);
            for (int b = 0; b < batch; ++b) {
                const std::int64_t i = static_cast<std::int64_t>(b) * k + ls[static_cast<std::size_t>(b)];
                if (pv2[i] > static_cast<T>(kProbClamp)) gp[i] -= seed * inv_b / pv2[i];
            }
        });
    }
    return out;
}

/// Batch-mean prediction entropy -sum p log p.
template <typename T>
typename Tape<T>::Var entropy_mean(Tape<T>& tape, typename Tape<T>::Var probs) {
    const Tensor<T>& pv = tape.value(probs);
    const int batch = pv.dim(0);
    double acc = 0.0;
    for (std::int64_t i = 0; i < pv.numel(); ++i)
        acc -= static_cast<double>(pv[i]) * std::log(static_cast<double>(clamp_prob(pv[i])));
    const bool need = tape.requires_grad(probs);
    auto out = tape.make(Tensor<T>::scalar(static_cast<T>(acc / batch)), need);
    if (need) {
        tape.record([probs, out, batch](Tape<T>& t) {
            const T seed = t.grad(out)[0];
            const Tensor<T>& pv2 = t.value(probs);
            Tensor<T>& gp = t.grad(probs);
            const T inv_b = T(1) / static_cast<T>(batch);
            for (std::int64_t i = 0; i < pv2.numel(); ++i) {
                const T c = clamp_prob(pv2[i]);
                T d = -std::log(c);
                if (pv2[i] > static_cast<T>(kProbClamp)) d -= T(1);
                gp[i] += seed * inv_b * d;
            }
        });
    }
    return out;
}

}  // namespace ops
}  // namespace dta
