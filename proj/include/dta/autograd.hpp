#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dta/tensor.hpp"

namespace dta {

/// Reverse-mode autodiff tape over Tensor values.
///
/// Operations append their value as a node and, when any input requires a
/// gradient, record a backward step. backward() seeds a scalar node and runs
/// the steps in reverse. Nodes are addressed by index so recorded closures
/// stay valid while the node vector grows.
template <typename T>
class Tape {
public:
    using Var = std::int32_t;
    static constexpr Var kNone = -1;

    Var leaf(Tensor<T> value, bool requires_grad = false) {
        return make(std::move(value), requires_grad);
    }

    Var constant(Tensor<T> value) { return make(std::move(value), false); }

    /// Parameter leaf, deduplicated by key: two forward passes on the same
    /// tape share one node, so branch gradients accumulate.
    Var param(const void* key, const T* data, std::int64_t n, std::vector<int> shape) {
        auto it = params_.find(key);
        if (it != params_.end()) return it->second;
        Tensor<T> t(std::move(shape), AlignedVec<T>(data, data + n));
        Var v = make(std::move(t), true);
        params_.emplace(key, v);
        return v;
    }

    /// Copies a node's value into a fresh gradient-free leaf.
    Var detach(Var v) { return constant(value(v)); }

    Var make(Tensor<T> value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad});
        return static_cast<Var>(nodes_.size() - 1);
    }

    void record(std::function<void(Tape&)> step) { steps_.push_back(std::move(step)); }

    const Tensor<T>& value(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }
    bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].requires_grad; }

    /// Gradient buffer for a node, allocated as zeros on first touch.
    Tensor<T>& grad(Var v) {
        Node& n = nodes_[static_cast<std::size_t>(v)];
        if (n.grad.numel() != n.value.numel()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    /// Seeds d(loss)/d(loss) = seed on a scalar node and replays the tape.
    /// Seeding with a loss weight folds the weight into every gradient.
    void backward(Var loss, T seed = T(1)) {
        if (value(loss).numel() != 1)
            throw std::invalid_argument("Tape::backward: loss must be scalar");
        grad(loss)[0] += seed;
        for (std::size_t i = steps_.size(); i > 0; --i) steps_[i - 1](*this);
    }

    template <typename F>
    void for_each_param(F&& f) {
        for (auto& [key, var] : params_) f(key, grad(var));
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
    };

    std::deque<Node> nodes_;
    std::vector<std::function<void(Tape&)>> steps_;
    std::unordered_map<const void*, Var> params_;
};

namespace ops {

/// y = x * mask, with the mask entries broadcast per sample. `mask` has
/// either the per-sample flattened length (element kind) or one entry per
/// channel (channel kind, broadcast across the H*W plane). Gradients reach
/// both inputs; the mask gradient accumulates over the batch.
template <typename T>
typename Tape<T>::Var mul_mask(Tape<T>& tape, typename Tape<T>::Var x,
                               typename Tape<T>::Var mask, int plane = 1) {
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& mv = tape.value(mask);
    const std::int64_t per_sample = mv.numel() * plane;
    if (xv.dim(0) <= 0 || xv.numel() % xv.dim(0) != 0 ||
        xv.numel() / xv.dim(0) != per_sample)
        throw std::invalid_argument("mul_mask: mask does not cover the per-sample activation");
    const int batch = xv.dim(0);
    Tensor<T> out(xv.shape());
    const std::int64_t m = mv.numel();
    for (int b = 0; b < batch; ++b) {
        const T* xs = xv.data() + b * per_sample;
        T* os = out.data() + b * per_sample;
        for (std::int64_t i = 0; i < m; ++i) {
            const T mi = mv[i];
            for (int p = 0; p < plane; ++p) os[i * plane + p] = xs[i * plane + p] * mi;
        }
    }
    bool need = tape.requires_grad(x) || tape.requires_grad(mask);
    auto y = tape.make(std::move(out), need);
    if (need) {
        tape.record([x, mask, y, batch, per_sample, m, plane](Tape<T>& t) {
            const Tensor<T>& g = t.grad(y);
            const Tensor<T>& xv2 = t.value(x);
            const Tensor<T>& mv2 = t.value(mask);
            if (t.requires_grad(x)) {
                Tensor<T>& gx = t.grad(x);
                for (int b = 0; b < batch; ++b)
                    for (std::int64_t i = 0; i < m; ++i)
                        for (int p = 0; p < plane; ++p) {
                            const std::int64_t k = b * per_sample + i * plane + p;
                            gx[k] += g[k] * mv2[i];
                        }
            }
            if (t.requires_grad(mask)) {
                Tensor<T>& gm = t.grad(mask);
                for (int b = 0; b < batch; ++b)
                    for (std::int64_t i = 0; i < m; ++i)
                        for (int p = 0; p < plane; ++p) {
                            const std::int64_t k = b * per_sample + i * plane + p;
                            gm[i] += g[k] * xv2[k];
                        }
            }
        });
    }
    return y;
}

/// y = a + b, elementwise over equal shapes.
template <typename T>
typename Tape<T>::Var add(Tape<T>& tape, typename Tape<T>::Var a, typename Tape<T>::Var b) {
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    if (!same_shape(av, bv)) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out(av.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    bool need = tape.requires_grad(a) || tape.requires_grad(b);
    auto y = tape.make(std::move(out), need);
    if (need) {
        tape.record([a, b, y](Tape<T>& t) {
            const Tensor<T>& g = t.grad(y);
            if (t.requires_grad(a)) {
                Tensor<T>& ga = t.grad(a);
                for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            if (t.requires_grad(b)) {
                Tensor<T>& gb = t.grad(b);
                for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
            }
        });
    }
    return y;
}

}  // namespace ops
}  // namespace dta
