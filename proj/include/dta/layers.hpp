#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dta/autograd.hpp"
#include "dta/rng.hpp"
#include "dta/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dta {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace detail {

inline int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace detail

/// Per-forward context. `train_mode` selects batch statistics and live
/// dropout; `update_stats` lets BatchNorm fold the pass into its running
/// averages (off for pure evaluations so forward never mutates the network);
/// `track_params` decides whether parameters enter the tape as gradient
/// leaves.
struct ForwardCtx {
    bool train_mode = false;
    bool update_stats = false;
    bool track_params = true;
    Rng* rng = nullptr;
};

template <typename T>
class Layer {
public:
    using Var = typename Tape<T>::Var;

    virtual ~Layer() = default;
    virtual const char* kind() const = 0;
    virtual std::vector<int> output_shape(const std::vector<int>& in) const = 0;

    virtual std::int64_t param_count() const { return 0; }
    virtual std::int64_t buffer_count() const { return 0; }
    /// Binds parameter/buffer storage; pointers stay owned by the network.
    virtual void bind(T* /*params*/, T* /*buffers*/) {}
    virtual void init_params(Rng& /*rng*/) {}
    /// Resets non-parameter state (BN running stats) to initial values.
    virtual void init_buffers() {}

    virtual Var forward(Tape<T>& tape, Var x, const ForwardCtx& ctx) = 0;

protected:
    typename Tape<T>::Var param_var(Tape<T>& tape, const ForwardCtx& ctx, T* data,
                                    std::int64_t n, std::vector<int> shape) const {
        if (ctx.track_params) return tape.param(data, data, n, std::move(shape));
        return tape.constant(Tensor<T>(std::move(shape), AlignedVec<T>(data, data + n)));
    }
};

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d final : public Layer<T> {
public:
    using Var = typename Tape<T>::Var;

    Conv2d(int in_c, int out_c, int k, int stride, int pad)
        : in_c_(in_c), out_c_(out_c), k_(k), stride_(stride), pad_(pad) {}

    const char* kind() const override { return "conv2d"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        const int oh = (in[2] + 2 * pad_ - k_) / stride_ + 1;
        const int ow = (in[3] + 2 * pad_ - k_) / stride_ + 1;
        return {in[0], out_c_, oh, ow};
    }

    std::int64_t param_count() const override {
        return static_cast<std::int64_t>(out_c_) * in_c_ * k_ * k_ + out_c_;
    }

    void bind(T* params, T* /*buffers*/) override {
        w_ = params;
        b_ = params + static_cast<std::int64_t>(out_c_) * in_c_ * k_ * k_;
    }

    void init_params(Rng& rng) override {
        const std::int64_t fan_in = static_cast<std::int64_t>(in_c_) * k_ * k_;
        const T std = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (std::int64_t i = 0; i < fan_in * out_c_; ++i) w_[i] = static_cast<T>(rng.normal()) * std;
        for (int i = 0; i < out_c_; ++i) b_[i] = T(0);
    }

    Var forward(Tape<T>& tape, Var x, const ForwardCtx& ctx) override {
        const Tensor<T>& xv = tape.value(x);
        const auto out_shape = output_shape(xv.shape());
        const int batch = out_shape[0], oh = out_shape[2], ow = out_shape[3];
        const int h = xv.dim(2), w = xv.dim(3);
        const std::int64_t kdim = static_cast<std::int64_t>(in_c_) * k_ * k_;
        const std::int64_t pos = static_cast<std::int64_t>(oh) * ow;

        Var wv = this->param_var(tape, ctx, w_, kdim * out_c_, {out_c_, static_cast<int>(kdim)});
        Var bv = this->param_var(tape, ctx, b_, out_c_, {out_c_});

        const bool need_w = tape.requires_grad(wv);
        const bool need_x = tape.requires_grad(x);

        Tensor<T> out(out_shape);
        // One im2col buffer per image keeps the GEMMs contiguous and the
        // batch loop embarrassingly parallel.
        auto cols = std::make_shared<AlignedVec<T>>(
            static_cast<std::size_t>(batch) * kdim * pos);
        {
            const T* wp = tape.value(wv).data();
            const T* bp = tape.value(bv).data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (int bi = 0; bi < batch; ++bi) {
                T* col = cols->data() + static_cast<std::int64_t>(bi) * kdim * pos;
                im2col(xv.data() + static_cast<std::int64_t>(bi) * in_c_ * h * w, h, w, col, oh, ow);
                CMatMap<T> wm(wp, out_c_, kdim);
                CMatMap<T> cm(col, kdim, pos);
                MatMap<T> om(out.data() + static_cast<std::int64_t>(bi) * out_c_ * pos, out_c_, pos);
                om.noalias() = wm * cm;
                for (int c = 0; c < out_c_; ++c) om.row(c).array() += bp[c];
            }
        }

        const bool need = need_w || need_x;
        Var y = tape.make(std::move(out), need);
        if (!need) return y;
        if (!need_w) cols.reset();  // dX needs only W and dY

        const int hh = h, ww = w;
        tape.record([this, x, wv, bv, y, cols, batch, oh, ow, hh, ww, kdim, pos](Tape<T>& t) {
            const Tensor<T>& g = t.grad(y);
            if (t.requires_grad(wv)) {
                Tensor<T>& gw = t.grad(wv);
                Tensor<T>& gb = t.grad(bv);
                const int nt = detail::thread_count();
                std::vector<AlignedVec<T>> gw_loc(static_cast<std::size_t>(nt)),
                    gb_loc(static_cast<std::size_t>(nt));
                for (int ti = 0; ti < nt; ++ti) {
                    gw_loc[static_cast<std::size_t>(ti)].assign(static_cast<std::size_t>(out_c_ * kdim), T(0));
                    gb_loc[static_cast<std::size_t>(ti)].assign(static_cast<std::size_t>(out_c_), T(0));
                }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int bi = 0; bi < batch; ++bi) {
#ifdef _OPENMP
                    const int ti = omp_get_thread_num();
#else
                    const int ti = 0;
#endif
                    const T* col = cols->data() + static_cast<std::int64_t>(bi) * kdim * pos;
                    CMatMap<T> gm(g.data() + static_cast<std::int64_t>(bi) * out_c_ * pos, out_c_, pos);
                    CMatMap<T> cm(col, kdim, pos);
                    MatMap<T> gwm(gw_loc[static_cast<std::size_t>(ti)].data(), out_c_, kdim);
                    gwm.noalias() += gm * cm.transpose();
                    for (int c = 0; c < out_c_; ++c)
                        gb_loc[static_cast<std::size_t>(ti)][static_cast<std::size_t>(c)] += gm.row(c).sum();
                }
                // Reduce in fixed thread order so results are reproducible.
                for (int ti = 0; ti < nt; ++ti) {
                    for (std::int64_t i = 0; i < out_c_ * kdim; ++i)
                        gw[i] += gw_loc[static_cast<std::size_t>(ti)][static_cast<std::size_t>(i)];
                    for (int c = 0; c < out_c_; ++c) gb[c] += gb_loc[static_cast<std::size_t>(ti)][static_cast<std::size_t>(c)];
                }
            }
            if (t.requires_grad(x)) {
                Tensor<T>& gx = t.grad(x);
                const T* wp = t.value(wv).data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int bi = 0; bi < batch; ++bi) {
                    AlignedVec<T> dcol(static_cast<std::size_t>(kdim * pos));
                    CMatMap<T> wm(wp, out_c_, kdim);
                    CMatMap<T> gm(g.data() + static_cast<std::int64_t>(bi) * out_c_ * pos, out_c_, pos);
                    MatMap<T> dm(dcol.data(), kdim, pos);
                    dm.noalias() = wm.transpose() * gm;
                    col2im(dcol.data(), hh, ww, gx.data() + static_cast<std::int64_t>(bi) * in_c_ * hh * ww, oh, ow);
                }
            }
        });
        return y;
    }

private:
    void im2col(const T* img, int h, int w, T* col, int oh, int ow) const {
        std::int64_t r = 0;
        for (int ci = 0; ci < in_c_; ++ci)
            for (int kh = 0; kh < k_; ++kh)
                for (int kw = 0; kw < k_; ++kw, ++r) {
                    T* dst = col + r * oh * ow;
                    for (int y = 0; y < oh; ++y) {
                        const int iy = y * stride_ - pad_ + kh;
                        for (int xo = 0; xo < ow; ++xo) {
                            const int ix = xo * stride_ - pad_ + kw;
                            dst[y * ow + xo] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                   ? img[(static_cast<std::int64_t>(ci) * h + iy) * w + ix]
                                                   : T(0);
                        }
                    }
                }
    }

    void col2im(const T* col, int h, int w, T* img, int oh, int ow) const {
        std::int64_t r = 0;
        for (int ci = 0; ci < in_c_; ++ci)
            for (int kh = 0; kh < k_; ++kh)
                for (int kw = 0; kw < k_; ++kw, ++r) {
                    const T* src = col + r * oh * ow;
                    for (int y = 0; y < oh; ++y) {
                        const int iy = y * stride_ - pad_ + kh;
                        if (iy < 0 || iy >= h) continue;
                        for (int xo = 0; xo < ow; ++xo) {
                            const int ix = xo * stride_ - pad_ + kw;
                            if (ix < 0 || ix >= w) continue;
                            img[(static_cast<std::int64_t>(ci) * h + iy) * w + ix] += src[y * ow + xo];
                        }
                    }
                }
    }

    int in_c_, out_c_, k_, stride_, pad_;
    T* w_ = nullptr;
    T* b_ = nullptr;
};

// ---------------------------------------------------------------------------
// Batch normalization (2d over (B,C,H,W) planes, 1d over (B,F) columns)
// ---------------------------------------------------------------------------

template <typename T>
class BatchNorm final : public Layer<T> {
public:
    using Var = typename Tape<T>::Var;

    explicit BatchNorm(int features, T momentum = T(0.1), T eps = T(1e-5))
        : features_(features), momentum_(momentum), eps_(eps) {}

    const char* kind() const override { return "batchnorm"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override { return in; }

    std::int64_t param_count() const override { return 2 * features_; }
    std::int64_t buffer_count() const override { return 2 * features_; }

    void bind(T* params, T* buffers) override {
        gamma_ = params;
        beta_ = params + features_;
        run_mean_ = buffers;
        run_var_ = buffers + features_;
    }

    void init_params(Rng&) override {
        for (int i = 0; i < features_; ++i) gamma_[i] = T(1);
        for (int i = 0; i < features_; ++i) beta_[i] = T(0);
    }

    void init_buffers() override {
        for (int i = 0; i < features_; ++i) run_mean_[i] = T(0);
        for (int i = 0; i < features_; ++i) run_var_[i] = T(1);
    }

    Var forward(Tape<T>& tape, Var x, const ForwardCtx& ctx) override {
        const Tensor<T>& xv = tape.value(x);
        if (xv.dim(1) != features_)
            throw std::invalid_argument("BatchNorm: feature dimension mismatch");
        const int batch = xv.dim(0);
        const std::int64_t plane = xv.numel() / (static_cast<std::int64_t>(batch) * features_);
        const std::int64_t n = batch * plane;
        const std::int64_t stride = static_cast<std::int64_t>(features_) * plane;

        Var gv = this->param_var(tape, ctx, gamma_, features_, {features_});
        Var bv = this->param_var(tape, ctx, beta_, features_, {features_});

        std::vector<T> mean(static_cast<std::size_t>(features_), T(0));
        std::vector<T> invstd(static_cast<std::size_t>(features_), T(0));
        if (ctx.train_mode) {
            for (int c = 0; c < features_; ++c) {
                double m = 0.0;
                for (int bi = 0; bi < batch; ++bi) {
                    const T* p = xv.data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) m += static_cast<double>(p[i]);
                }
                m /= static_cast<double>(n);
                double v = 0.0;
                for (int bi = 0; bi < batch; ++bi) {
                    const T* p = xv.data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        const double d = static_cast<double>(p[i]) - m;
                        v += d * d;
                    }
                }
                v /= static_cast<double>(n);
                mean[static_cast<std::size_t>(c)] = static_cast<T>(m);
                invstd[static_cast<std::size_t>(c)] =
                    static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps_)));
                if (ctx.update_stats) {
                    const double unbiased = n > 1 ? v * static_cast<double>(n) / static_cast<double>(n - 1) : v;
                    run_mean_[c] = static_cast<T>((1.0 - static_cast<double>(momentum_)) * run_mean_[c] +
                                                  static_cast<double>(momentum_) * m);
                    run_var_[c] = static_cast<T>((1.0 - static_cast<double>(momentum_)) * run_var_[c] +
                                                 static_cast<double>(momentum_) * unbiased);
                }
            }
        } else {
            for (int c = 0; c < features_; ++c) {
                mean[static_cast<std::size_t>(c)] = run_mean_[c];
                invstd[static_cast<std::size_t>(c)] =
                    static_cast<T>(1.0 / std::sqrt(static_cast<double>(run_var_[c]) + static_cast<double>(eps_)));
            }
        }

        Tensor<T> out(xv.shape());
        auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(xv.numel()));
        {
            const T* gp = tape.value(gv).data();
            const T* bp = tape.value(bv).data();
            for (int bi = 0; bi < batch; ++bi)
                for (int c = 0; c < features_; ++c) {
                    const T* p = xv.data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                    T* xh = xhat->data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                    T* o = out.data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                    const T mu = mean[static_cast<std::size_t>(c)];
                    const T is = invstd[static_cast<std::size_t>(c)];
                    const T ga = gp[c], be = bp[c];
                    for (std::int64_t i = 0; i < plane; ++i) {
                        xh[i] = (p[i] - mu) * is;
                        o[i] = ga * xh[i] + be;
                    }
                }
        }

        const bool need = tape.requires_grad(x) || tape.requires_grad(gv);
        Var y = tape.make(std::move(out), need);
        if (!need) return y;

        const bool batch_stats = ctx.train_mode;
        auto inv = std::make_shared<std::vector<T>>(std::move(invstd));
        tape.record([this, x, gv, bv, y, xhat, inv, batch, plane, stride, n, batch_stats](Tape<T>& t) {
            const Tensor<T>& g = t.grad(y);
            const T* gp = t.value(gv).data();
            const bool want_x = t.requires_grad(x);
            Tensor<T>* gx = want_x ? &t.grad(x) : nullptr;
            Tensor<T>* gg = t.requires_grad(gv) ? &t.grad(gv) : nullptr;
            Tensor<T>* gb = t.requires_grad(bv) ? &t.grad(bv) : nullptr;
            for (int c = 0; c < features_; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int bi = 0; bi < batch; ++bi) {
                    const T* dy = g.data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                    const T* xh = xhat->data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_dy += static_cast<double>(dy[i]);
                        sum_dy_xhat += static_cast<double>(dy[i]) * static_cast<double>(xh[i]);
                    }
                }
                if (gg) (*gg)[c] += static_cast<T>(sum_dy_xhat);
                if (gb) (*gb)[c] += static_cast<T>(sum_dy);
                if (!want_x) continue;
                const T is = (*inv)[static_cast<std::size_t>(c)];
                const T ga = gp[c];
                if (batch_stats) {
                    const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(n));
                    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(n));
                    for (int bi = 0; bi < batch; ++bi) {
                        const T* dy = g.data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                        const T* xh = xhat->data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                        T* dx = gx->data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i)
                            dx[i] += ga * is * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
                    }
                } else {
                    for (int bi = 0; bi < batch; ++bi) {
                        const T* dy = g.data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                        T* dx = gx->data() + bi * stride + static_cast<std::int64_t>(c) * plane;
                        for (std::int64_t i = 0; i < plane; ++i) dx[i] += ga * is * dy[i];
                    }
                }
            }
        });
        return y;
    }

private:
    int features_;
    T momentum_, eps_;
    T* gamma_ = nullptr;
    T* beta_ = nullptr;
    T* run_mean_ = nullptr;
    T* run_var_ = nullptr;
};

// ---------------------------------------------------------------------------
// Activations / pooling / reshape
// ---------------------------------------------------------------------------

template <typename T>
class ReLU final : public Layer<T> {
public:
    using Var = typename Tape<T>::Var;

    const char* kind() const override { return "relu"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override { return in; }

    Var forward(Tape<T>& tape, Var x, const ForwardCtx&) override {
        const Tensor<T>& xv = tape.value(x);
        Tensor<T> out(xv.shape());
        for (std::int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
        const bool need = tape.requires_grad(x);
        Var y = tape.make(std::move(out), need);
        if (need) {
            tape.record([x, y](Tape<T>& t) {
                const Tensor<T>& g = t.grad(y);
                const Tensor<T>& yv = t.value(y);
                Tensor<T>& gx = t.grad(x);
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    if (yv[i] > T(0)) gx[i] += g[i];
            });
        }
        return y;
    }
};

template <typename T>
class MaxPool2d final : public Layer<T> {
public:
    using Var = typename Tape<T>::Var;

    explicit MaxPool2d(int k = 2, int stride = 2) : k_(k), stride_(stride) {}

    const char* kind() const override { return "maxpool2d"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        return {in[0], in[1], (in[2] - k_) / stride_ + 1, (in[3] - k_) / stride_ + 1};
    }

    Var forward(Tape<T>& tape, Var x, const ForwardCtx&) override {
        const Tensor<T>& xv = tape.value(x);
        const auto os = output_shape(xv.shape());
        const int batch = os[0], ch = os[1], oh = os[2], ow = os[3];
        const int h = xv.dim(2), w = xv.dim(3);
        Tensor<T> out(os);
        auto argmax = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(out.numel()));
        std::int64_t o = 0;
        for (int bi = 0; bi < batch; ++bi)
            for (int c = 0; c < ch; ++c) {
                const T* img = xv.data() + (static_cast<std::int64_t>(bi) * ch + c) * h * w;
                for (int y = 0; y < oh; ++y)
                    for (int xo = 0; xo < ow; ++xo, ++o) {
                        int best = (y * stride_) * w + xo * stride_;
                        T bv = img[best];
                        for (int ky = 0; ky < k_; ++ky)
                            for (int kx = 0; kx < k_; ++kx) {
                                const int idx = (y * stride_ + ky) * w + (xo * stride_ + kx);
                                if (img[idx] > bv) {
                                    bv = img[idx];
                                    best = idx;
                                }
                            }
                        out[o] = bv;
                        (*argmax)[static_cast<std::size_t>(o)] = best;
                    }
            }
        const bool need = tape.requires_grad(x);
        Var yv = tape.make(std::move(out), need);
        if (need) {
            const std::int64_t in_plane = static_cast<std::int64_t>(h) * w;
            const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;
            tape.record([x, yv, argmax, batch, ch, in_plane, out_plane](Tape<T>& t) {
                const Tensor<T>& g = t.grad(yv);
                Tensor<T>& gx = t.grad(x);
                std::int64_t o = 0;
                for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(batch) * ch; ++bc) {
                    T* dst = gx.data() + bc * in_plane;
                    for (std::int64_t i = 0; i < out_plane; ++i, ++o)
                        dst[(*argmax)[static_cast<std::size_t>(o)]] += g[o];
                }
            });
        }
        return yv;
    }

private:
    int k_, stride_;
};

template <typename T>
class GlobalAvgPool final : public Layer<T> {
public:
    using Var = typename Tape<T>::Var;

    const char* kind() const override { return "gap"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        return {in[0], in[1]};
    }

    Var forward(Tape<T>& tape, Var x, const ForwardCtx&) override {
        const Tensor<T>& xv = tape.value(x);
        const int batch = xv.dim(0), ch = xv.dim(1);
        const std::int64_t plane = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
        Tensor<T> out({batch, ch});
        for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(batch) * ch; ++bc) {
            double s = 0.0;
            const T* p = xv.data() + bc * plane;
            for (std::int64_t i = 0; i < plane; ++i) s += static_cast<double>(p[i]);
            out[bc] = static_cast<T>(s / static_cast<double>(plane));
        }
        const bool need = tape.requires_grad(x);
        Var y = tape.make(std::move(out), need);
        if (need) {
            tape.record([x, y, plane](Tape<T>& t) {
                const Tensor<T>& g = t.grad(y);
                Tensor<T>& gx = t.grad(x);
                for (std::int64_t bc = 0; bc < g.numel(); ++bc) {
                    const T v = g[bc] / static_cast<T>(plane);
                    T* dst = gx.data() + bc * plane;
                    for (std::int64_t i = 0; i < plane; ++i) dst[i] += v;
                }
            });
        }
        return y;
    }
};

template <typename T>
class Flatten final : public Layer<T> {
public:
    using Var = typename Tape<T>::Var;

    const char* kind() const override { return "flatten"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        int n = 1;
        for (std::size_t i = 1; i < in.size(); ++i) n *= in[i];
        return {in[0], n};
    }

    Var forward(Tape<T>& tape, Var x, const ForwardCtx&) override {
        const Tensor<T>& xv = tape.value(x);
        Tensor<T> out = xv.reshaped(output_shape(xv.shape()));
        const bool need = tape.requires_grad(x);
        Var y = tape.make(std::move(out), need);
        if (need) {
            tape.record([x, y](Tape<T>& t) {
                const Tensor<T>& g = t.grad(y);
                Tensor<T>& gx = t.grad(x);
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
            });
        }
        return y;
    }
};

template <typename T>
class Linear final : public Layer<T> {
public:
    using Var = typename Tape<T>::Var;

    Linear(int in, int out) : in_(in), out_(out) {}

    const char* kind() const override { return "linear"; }

    std::vector<int> output_shape(const std::vector<int>& in) const override {
        return {in[0], out_};
    }

    std::int64_t param_count() const override { return static_cast<std::int64_t>(in_) * out_ + out_; }

    void bind(T* params, T* /*buffers*/) override {
        w_ = params;
        b_ = params + static_cast<std::int64_t>(in_) * out_;
    }

    void init_params(Rng& rng) override {
        const T std = static_cast<T>(std::sqrt(2.0 / static_cast<double>(in_)));
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(in_) * out_; ++i)
            w_[i] = static_cast<T>(rng.normal()) * std;
        for (int i = 0; i < out_; ++i) b_[i] = T(0);
    }

    Var forward(Tape<T>& tape, Var x, const ForwardCtx& ctx) override {
        const Tensor<T>& xv = tape.value(x);
        if (xv.rank() != 2 || xv.dim(1) != in_)
            throw std::invalid_argument("Linear: expected (B," + std::to_string(in_) + ") input, got " +
                                        shape_str(xv.shape()));
        const int batch = xv.dim(0);
        Var wv = this->param_var(tape, ctx, w_, static_cast<std::int64_t>(in_) * out_, {out_, in_});
        Var bv = this->param_var(tape, ctx, b_, out_, {out_});

        Tensor<T> out({batch, out_});
        {
            CMatMap<T> xm(xv.data(), batch, in_);
            CMatMap<T> wm(tape.value(wv).data(), out_, in_);
            MatMap<T> om(out.data(), batch, out_);
            om.noalias() = xm * wm.transpose();
            const T* bp = tape.value(bv).data();
            for (int bi = 0; bi < batch; ++bi)
                for (int c = 0; c < out_; ++c) out[static_cast<std::int64_t>(bi) * out_ + c] += bp[c];
        }

        const bool need = tape.requires_grad(x) || tape.requires_grad(wv);
        Var y = tape.make(std::move(out), need);
        if (!need) return y;

        tape.record([this, x, wv, bv, y, batch](Tape<T>& t) {
            const Tensor<T>& g = t.grad(y);
            CMatMap<T> gm(g.data(), batch, out_);
            if (t.requires_grad(wv)) {
                Tensor<T>& gw = t.grad(wv);
                Tensor<T>& gb = t.grad(bv);
                CMatMap<T> xm(t.value(x).data(), batch, in_);
                MatMap<T> gwm(gw.data(), out_, in_);
                gwm.noalias() += gm.transpose() * xm;
                for (int c = 0; c < out_; ++c) gb[c] += gm.col(c).sum();
            }
            if (t.requires_grad(x)) {
                Tensor<T>& gx = t.grad(x);
                CMatMap<T> wm(t.value(wv).data(), out_, in_);
                MatMap<T> gxm(gx.data(), batch, in_);
                gxm.noalias() += gm * wm;
            }
        });
        return y;
    }

private:
    int in_, out_;
    T* w_ = nullptr;
    T* b_ = nullptr;
};

/// Architectural inverted dropout; identity at evaluation. Distinct from the
/// DTA masks, which are applied without rescaling at the insertion points.
template <typename T>
class Dropout final : public Layer<T> {
public:
    using Var = typename Tape<T>::Var;

    explicit Dropout(double p) : p_(p) {}

    const char* kind() const override { return "dropout"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override { return in; }

    Var forward(Tape<T>& tape, Var x, const ForwardCtx& ctx) override {
        if (!ctx.train_mode || p_ <= 0.0) return x;
        if (!ctx.rng) throw std::invalid_argument("Dropout: training forward needs an rng");
        const Tensor<T>& xv = tape.value(x);
        const T scale = static_cast<T>(1.0 / (1.0 - p_));
        auto keep = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(xv.numel()));
        Tensor<T> out(xv.shape());
        for (std::int64_t i = 0; i < xv.numel(); ++i) {
            const bool k = !ctx.rng->bernoulli(p_);
            (*keep)[static_cast<std::size_t>(i)] = k;
            out[i] = k ? xv[i] * scale : T(0);
        }
        const bool need = tape.requires_grad(x);
        Var y = tape.make(std::move(out), need);
        if (need) {
            tape.record([x, y, keep, scale](Tape<T>& t) {
                const Tensor<T>& g = t.grad(y);
                Tensor<T>& gx = t.grad(x);
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    if ((*keep)[static_cast<std::size_t>(i)]) gx[i] += g[i] * scale;
            });
        }
        return y;
    }

private:
    double p_;
};

template <typename T>
class Softmax final : public Layer<T> {
public:
    using Var = typename Tape<T>::Var;

    const char* kind() const override { return "softmax"; }
    std::vector<int> output_shape(const std::vector<int>& in) const override { return in; }

    Var forward(Tape<T>& tape, Var x, const ForwardCtx&) override {
        const Tensor<T>& xv = tape.value(x);
        const int batch = xv.dim(0), k = xv.dim(1);
        Tensor<T> out(xv.shape());
        for (int bi = 0; bi < batch; ++bi) {
            const T* z = xv.data() + static_cast<std::int64_t>(bi) * k;
            T* p = out.data() + static_cast<std::int64_t>(bi) * k;
            T zmax = z[0];
            for (int i = 1; i < k; ++i) zmax = std::max(zmax, z[i]);
            double sum = 0.0;
            for (int i = 0; i < k; ++i) {
                p[i] = std::exp(z[i] - zmax);
                sum += static_cast<double>(p[i]);
            }
            for (int i = 0; i < k; ++i) p[i] = static_cast<T>(static_cast<double>(p[i]) / sum);
        }
        const bool need = tape.requires_grad(x);
        Var y = tape.make(std::move(out), need);
        if (need) {
            tape.record([x, y, batch, k](Tape<T>& t) {
                const Tensor<T>& g = t.grad(y);
                const Tensor<T>& p = t.value(y);
                Tensor<T>& gx = t.grad(x);
                for (int bi = 0; bi < batch; ++bi) {
                    const std::int64_t base = static_cast<std::int64_t>(bi) * k;
                    double dot = 0.0;
                    for (int i = 0; i < k; ++i) dot += static_cast<double>(g[base + i]) * static_cast<double>(p[base + i]);
                    for (int i = 0; i < k; ++i)
                        gx[base + i] += p[base + i] * (g[base + i] - static_cast<T>(dot));
                }
            });
        }
        return y;
    }
};

}  // namespace dta
