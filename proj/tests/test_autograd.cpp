#include <doctest.h>

#include <functional>

#include "dta/layers.hpp"
#include "dta/loss_ops.hpp"
#include "helpers.hpp"

using namespace dta;

namespace {

// Test-only reduction: dot(values, fixed weights) -> scalar, so any tensor
// output can be gradient-checked through one scalar.
Tape<double>::Var weighted_sum(Tape<double>& tape, Tape<double>::Var x, const Tensor<double>& w) {
    const Tensor<double>& xv = tape.value(x);
    REQUIRE(xv.numel() == w.numel());
    double acc = 0.0;
    for (std::int64_t i = 0; i < xv.numel(); ++i) acc += xv[i] * w[i];
    auto y = tape.make(Tensor<double>::scalar(acc), tape.requires_grad(x));
    if (tape.requires_grad(x)) {
        Tensor<double> wc = w;
        tape.record([x, y, wc](Tape<double>& t) {
            const double seed = t.grad(y)[0];
            Tensor<double>& gx = t.grad(x);
            for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += seed * wc[i];
        });
    }
    return y;
}

// Central finite differences on one flat buffer against the analytic grad.
template <typename Vec>
void check_grad_against_fd(Vec& storage, const Tensor<double>& analytic,
                           const std::function<double()>& eval, double tol = 2e-6, double h = 1e-6) {
    REQUIRE(analytic.numel() == static_cast<std::int64_t>(storage.size()));
    for (std::size_t i = 0; i < storage.size(); ++i) {
        const double keep = storage[i];
        storage[i] = keep + h;
        const double up = eval();
        storage[i] = keep - h;
        const double down = eval();
        storage[i] = keep;
        const double fd = (up - down) / (2 * h);
        const double a = analytic[static_cast<std::int64_t>(i)];
        const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 0.01});
        CHECK(err < tol);
    }
}

// Runs a layer standalone: gradient w.r.t. input and parameters versus FD.
void check_layer(Layer<double>& layer, Tensor<double> x0, bool train_mode = true) {
    std::vector<double> params(static_cast<std::size_t>(layer.param_count()));
    std::vector<double> buffers(static_cast<std::size_t>(layer.buffer_count()));
    layer.bind(params.data(), buffers.data());
    Rng init(99);
    layer.init_params(init);
    layer.init_buffers();
    for (auto& b : buffers) b += 0.1;  // move running stats off their init

    Rng wrng(5);
    Tensor<double> w;

    ForwardCtx ctx;
    ctx.train_mode = train_mode;
    ctx.track_params = true;

    auto eval = [&](Tensor<double>* gx, Tensor<double>* gp) {
        Tape<double> tape;
        auto xv = tape.leaf(x0, true);
        auto y = layer.forward(tape, xv, ctx);
        if (w.numel() != tape.value(y).numel()) w = testing::randn<double>(tape.value(y).shape(), wrng);
        auto loss = weighted_sum(tape, y, w);
        const double value = tape.value(loss)[0];
        if (gx) {
            tape.backward(loss);
            *gx = tape.grad(xv);
            if (gp) {
                *gp = Tensor<double>({static_cast<int>(params.size())});
                tape.for_each_param([&](const void* key, const Tensor<double>& g) {
                    const double* p = static_cast<const double*>(key);
                    const std::int64_t off = p - params.data();
                    for (std::int64_t i = 0; i < g.numel(); ++i) (*gp)[off + i] += g[i];
                });
            }
        }
        return value;
    };

    Tensor<double> gx, gp;
    eval(&gx, &gp);

    check_grad_against_fd(x0.raw(), gx, [&] { return eval(nullptr, nullptr); });
    if (!params.empty())
        check_grad_against_fd(params, gp, [&] { return eval(nullptr, nullptr); });
}

}  // namespace

TEST_SUITE_BEGIN("autograd");

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(1);
    Conv2d<double> same(2, 3, 3, 1, 1);
    check_layer(same, testing::randn<double>({2, 2, 5, 5}, rng));
    Conv2d<double> valid(2, 2, 3, 1, 0);
    check_layer(valid, testing::randn<double>({2, 2, 5, 5}, rng));
    Conv2d<double> strided(1, 2, 3, 2, 1);
    check_layer(strided, testing::randn<double>({2, 1, 7, 7}, rng));
}

TEST_CASE("batchnorm gradients match finite differences") {
    Rng rng(2);
    BatchNorm<double> bn2d(3);
    check_layer(bn2d, testing::randn<double>({4, 3, 2, 2}, rng));
    BatchNorm<double> bn1d(5);
    check_layer(bn1d, testing::randn<double>({6, 5}, rng));
    BatchNorm<double> bn_eval(3);
    check_layer(bn_eval, testing::randn<double>({4, 3, 2, 2}, rng), /*train_mode=*/false);
}

TEST_CASE("pooling and reshape gradients match finite differences") {
    Rng rng(3);
    MaxPool2d<double> pool;
    check_layer(pool, testing::randn<double>({2, 2, 6, 6}, rng));
    GlobalAvgPool<double> gap;
    check_layer(gap, testing::randn<double>({3, 4, 3, 3}, rng));
    Flatten<double> flat;
    check_layer(flat, testing::randn<double>({2, 3, 2, 2}, rng));
}

TEST_CASE("linear, relu and softmax gradients match finite differences") {
    Rng rng(4);
    Linear<double> fc(6, 4);
    check_layer(fc, testing::randn<double>({3, 6}, rng));
    ReLU<double> relu;
    check_layer(relu, testing::randn<double>({3, 7}, rng));
    Softmax<double> sm;
    check_layer(sm, testing::randn<double>({3, 5}, rng));
}

TEST_CASE("mask multiplication propagates to activation and mask") {
    Rng rng(6);
    Tensor<double> x0 = testing::randn<double>({2, 3, 2, 2}, rng);
    Tensor<double> m0({3}, {1.0, 0.0, 1.0});
    Tensor<double> w = testing::randn<double>({2, 3, 2, 2}, rng);

    auto eval = [&](Tensor<double>* gx, Tensor<double>* gm) {
        Tape<double> tape;
        auto xv = tape.leaf(x0, true);
        auto mv = tape.leaf(m0, true);
        auto y = ops::mul_mask(tape, xv, mv, 4);
        auto loss = weighted_sum(tape, y, w);
        const double value = tape.value(loss)[0];
        if (gx) {
            tape.backward(loss);
            *gx = tape.grad(xv);
            *gm = tape.grad(mv);
        }
        return value;
    };
    Tensor<double> gx, gm;
    eval(&gx, &gm);
    check_grad_against_fd(x0.raw(), gx, [&] { return eval(nullptr, nullptr); });
    check_grad_against_fd(m0.raw(), gm, [&] { return eval(nullptr, nullptr); });
}

TEST_CASE("loss reductions match finite differences through softmax") {
    Rng rng(8);
    Tensor<double> z0 = testing::randn<double>({3, 4}, rng);
    Tensor<double> ref = testing::random_probs<double>(3, 4, rng);
    std::vector<int> labels = {1, 3, 0};

    enum class Which { kl, ce, ent };
    for (Which which : {Which::kl, Which::ce, Which::ent}) {
        auto eval = [&](Tensor<double>* gz) {
            Tape<double> tape;
            auto zv = tape.leaf(z0, true);
            Softmax<double> sm;
            ForwardCtx ctx;
            auto probs = sm.forward(tape, zv, ctx);
            Tape<double>::Var loss{};
            switch (which) {
                case Which::kl: loss = ops::kl_vs_const(tape, probs, ref); break;
                case Which::ce: loss = ops::cross_entropy(tape, probs, labels); break;
                case Which::ent: loss = ops::entropy_mean(tape, probs); break;
            }
            const double value = tape.value(loss)[0];
            if (gz) {
                tape.backward(loss);
                *gz = tape.grad(zv);
            }
            return value;
        };
        Tensor<double> gz;
        eval(&gz);
        check_grad_against_fd(z0.raw(), gz, [&] { return eval(nullptr); });
    }
}

TEST_CASE("branch gradients accumulate through shared parameter leaves") {
    // One tape, two forward passes through the same linear layer: the
    // parameter gradient must be the sum of both branches.
    Linear<double> fc(3, 2);
    std::vector<double> params(static_cast<std::size_t>(fc.param_count()));
    fc.bind(params.data(), nullptr);
    Rng init(1);
    fc.init_params(init);

    Rng rng(2);
    Tensor<double> xa = testing::randn<double>({2, 3}, rng);
    Tensor<double> xb = testing::randn<double>({2, 3}, rng);
    Tensor<double> w = testing::randn<double>({2, 2}, rng);

    ForwardCtx ctx;
    auto run = [&](const Tensor<double>& a, const Tensor<double>& b) {
        Tape<double> tape;
        auto ya = fc.forward(tape, tape.constant(a), ctx);
        auto yb = fc.forward(tape, tape.constant(b), ctx);
        auto la = weighted_sum(tape, ya, w);
        auto lb = weighted_sum(tape, yb, w);
        auto loss = ops::add(tape, la, lb);
        tape.backward(loss);
        Tensor<double> gp({static_cast<int>(params.size())});
        tape.for_each_param([&](const void* key, const Tensor<double>& g) {
            const double* p = static_cast<const double*>(key);
            const std::int64_t off = p - params.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) gp[off + i] += g[i];
        });
        return gp;
    };
    auto run_single = [&](const Tensor<double>& x) {
        Tape<double> tape;
        auto y = fc.forward(tape, tape.constant(x), ctx);
        auto loss = weighted_sum(tape, y, w);
        tape.backward(loss);
        Tensor<double> gp({static_cast<int>(params.size())});
        tape.for_each_param([&](const void* key, const Tensor<double>& g) {
            const double* p = static_cast<const double*>(key);
            const std::int64_t off = p - params.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) gp[off + i] += g[i];
        });
        return gp;
    };

    auto joint = run(xa, xb);
    auto ga = run_single(xa);
    auto gb = run_single(xb);
    for (std::int64_t i = 0; i < joint.numel(); ++i)
        CHECK(joint[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-12));
}

TEST_CASE("convolution branches accumulate like separate passes") {
    Conv2d<double> conv(1, 2, 3, 1, 1);
    std::vector<double> params(static_cast<std::size_t>(conv.param_count()));
    conv.bind(params.data(), nullptr);
    Rng init(3);
    conv.init_params(init);

    Rng rng(4);
    Tensor<double> xa = testing::randn<double>({2, 1, 5, 5}, rng);
    Tensor<double> xb = testing::randn<double>({2, 1, 5, 5}, rng);
    Tensor<double> w = testing::randn<double>({2, 2, 5, 5}, rng);
    ForwardCtx ctx;

    auto grads_of = [&](bool joint, const Tensor<double>& x) {
        Tape<double> tape;
        Tape<double>::Var loss;
        if (joint) {
            auto la = weighted_sum(tape, conv.forward(tape, tape.constant(xa), ctx), w);
            auto lb = weighted_sum(tape, conv.forward(tape, tape.constant(xb), ctx), w);
            loss = ops::add(tape, la, lb);
        } else {
            loss = weighted_sum(tape, conv.forward(tape, tape.constant(x), ctx), w);
        }
        tape.backward(loss);
        Tensor<double> gp({static_cast<int>(params.size())});
        tape.for_each_param([&](const void* key, const Tensor<double>& g) {
            const std::int64_t off = static_cast<const double*>(key) - params.data();
            for (std::int64_t i = 0; i < g.numel(); ++i) gp[off + i] += g[i];
        });
        return gp;
    };

    auto joint = grads_of(true, xa);
    auto ga = grads_of(false, xa);
    auto gb = grads_of(false, xb);
    for (std::int64_t i = 0; i < joint.numel(); ++i)
        CHECK(joint[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-10));
}

TEST_SUITE_END();
