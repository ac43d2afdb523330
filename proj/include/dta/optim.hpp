#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dta {

enum class OptimizerKind { adam, sgd_momentum };

inline OptimizerKind optimizer_kind_from(const std::string& s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd" || s == "sgd+momentum") return OptimizerKind::sgd_momentum;
    throw std::invalid_argument("unknown optimizer '" + s + "'");
}

inline const char* optimizer_kind_name(OptimizerKind k) {
    return k == OptimizerKind::adam ? "adam" : "sgd";
}

/// Adam / SGD+momentum over a flat parameter vector.
template <typename T>
class Optimizer {
public:
    Optimizer() = default;
    Optimizer(OptimizerKind kind, double lr, std::int64_t n) : kind_(kind), lr_(lr) {
        m_.assign(static_cast<std::size_t>(n), T(0));
        if (kind_ == OptimizerKind::adam) v_.assign(static_cast<std::size_t>(n), T(0));
    }

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }
    OptimizerKind kind() const { return kind_; }
    std::int64_t step_count() const { return t_; }

    void step(std::vector<T>& params, const std::vector<T>& grads) {
        if (params.size() != m_.size() || grads.size() != m_.size())
            throw std::invalid_argument("Optimizer: parameter size mismatch");
        ++t_;
        if (kind_ == OptimizerKind::adam) {
            const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
            for (std::size_t i = 0; i < params.size(); ++i) {
                const double g = static_cast<double>(grads[i]);
                m_[i] = static_cast<T>(b1 * static_cast<double>(m_[i]) + (1.0 - b1) * g);
                v_[i] = static_cast<T>(b2 * static_cast<double>(v_[i]) + (1.0 - b2) * g * g);
                const double mhat = static_cast<double>(m_[i]) / bc1;
                const double vhat = static_cast<double>(v_[i]) / bc2;
                params[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps));
            }
        } else {
            const double mu = 0.9;
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i] = static_cast<T>(mu * static_cast<double>(m_[i]) + static_cast<double>(grads[i]));
                params[i] -= static_cast<T>(lr_ * static_cast<double>(m_[i]));
            }
        }
    }

    void save(std::ostream& os) const {
        os << optimizer_kind_name(kind_) << ' ' << lr_ << ' ' << t_ << ' ' << m_.size() << ' '
           << v_.size() << '\n';
        save_vec(os, m_);
        save_vec(os, v_);
    }

    void load(std::istream& is) {
        std::string kind;
        std::size_t nm = 0, nv = 0;
        is >> kind >> lr_ >> t_ >> nm >> nv;
        is.ignore(1);  // newline after the text header
        kind_ = optimizer_kind_from(kind);
        load_vec(is, m_, nm);
        load_vec(is, v_, nv);
    }

private:
    static void save_vec(std::ostream& os, const std::vector<T>& v) {
        if (!v.empty())
            os.write(reinterpret_cast<const char*>(v.data()),
                     static_cast<std::streamsize>(v.size() * sizeof(T)));
    }
    static void load_vec(std::istream& is, std::vector<T>& v, std::size_t n) {
        v.assign(n, T(0));
        if (n) is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
    }

    OptimizerKind kind_ = OptimizerKind::adam;
    double lr_ = 1e-3;
    std::int64_t t_ = 0;
    std::vector<T> m_, v_;
};

}  // namespace dta
