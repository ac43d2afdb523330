#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dta/layers.hpp"
#include "dta/masking.hpp"

namespace dta {

/// Names a reference architecture together with its input geometry.
/// Known names: "small-9conv-1fc", "small-3conv-2fc", "tiny-test".
struct ArchitectureId {
    std::string name;
    std::vector<int> input_shape;  // (C, H, W)
    int num_classes = 0;
};

/// Shape of the channel-mask insertion site.
struct ChannelSite {
    int channels = 0, height = 0, width = 0;
};

/// A feed-forward network with two registered mask insertion points: a
/// channel-wise site inside the feature extractor and an element-wise site
/// inside the classifier. Splitting at a site yields lower/upper halves
/// h_l/h_u with forward(x, m) == h_u(m * h_l(x)) bitwise.
template <typename T>
class Network {
public:
    using Var = typename Tape<T>::Var;

    Network() = default;
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    /// Wires an explicit layer stack. feature_point / classifier_point are
    /// layer indices; the mask multiplies that layer's output.
    static Network assemble(ArchitectureId arch, std::vector<std::unique_ptr<Layer<T>>> layers,
                            int feature_point, int classifier_point, std::uint64_t seed) {
        Network net;
        net.arch_ = std::move(arch);
        net.layers_ = std::move(layers);
        net.feature_point_ = feature_point;
        net.classifier_point_ = classifier_point;

        std::int64_t n_params = 0, n_buffers = 0;
        for (const auto& l : net.layers_) {
            n_params += l->param_count();
            n_buffers += l->buffer_count();
        }
        net.params_.assign(static_cast<std::size_t>(n_params), T(0));
        net.grads_.assign(static_cast<std::size_t>(n_params), T(0));
        net.buffers_.assign(static_cast<std::size_t>(n_buffers), T(0));

        std::int64_t po = 0, bo = 0;
        Rng init_rng = Rng::stream(seed, 0xD7A);
        for (auto& l : net.layers_) {
            l->bind(net.params_.data() + po, net.buffers_.data() + bo);
            l->init_params(init_rng);
            l->init_buffers();
            po += l->param_count();
            bo += l->buffer_count();
        }

        // Propagate per-sample shapes once to locate the insertion sites.
        std::vector<int> shape = {1, net.arch_.input_shape[0], net.arch_.input_shape[1],
                                  net.arch_.input_shape[2]};
        for (std::size_t i = 0; i < net.layers_.size(); ++i) {
            shape = net.layers_[i]->output_shape(shape);
            if (static_cast<int>(i) == feature_point) {
                if (shape.size() != 4)
                    throw std::invalid_argument("Network: feature insertion point is not spatial");
                net.feature_site_ = {shape[1], shape[2], shape[3]};
            }
            if (static_cast<int>(i) == classifier_point) {
                std::int64_t n = 1;
                for (std::size_t d = 1; d < shape.size(); ++d) n *= shape[d];
                net.classifier_len_ = n;
            }
        }
        net.output_classes_ = shape.back();
        return net;
    }

    const ArchitectureId& arch() const { return arch_; }
    std::int64_t param_count() const { return static_cast<std::int64_t>(params_.size()); }
    std::vector<T>& params() { return params_; }
    const std::vector<T>& params() const { return params_; }
    std::vector<T>& grads() { return grads_; }
    std::vector<T>& buffers() { return buffers_; }
    const std::vector<T>& buffers() const { return buffers_; }
    int num_layers() const { return static_cast<int>(layers_.size()); }
    int num_classes() const { return output_classes_; }

    ChannelSite feature_site() const { return feature_site_; }
    std::int64_t classifier_len() const { return classifier_len_; }
    int feature_point() const { return feature_point_; }
    int classifier_point() const { return classifier_point_; }

    int insertion_index(const std::string& name) const {
        if (name == "feature") return feature_point_;
        if (name == "classifier") return classifier_point_;
        throw std::invalid_argument("Network: unknown insertion point '" + name + "'");
    }

    void zero_grads() { std::fill(grads_.begin(), grads_.end(), T(0)); }

    /// Adds a tape's parameter gradients (times `scale`) into grads().
    void accumulate_grads(Tape<T>& tape, T scale = T(1)) {
        const T* base = params_.data();
        tape.for_each_param([&](const void* key, const Tensor<T>& g) {
            const T* p = static_cast<const T*>(key);
            if (p < base || p >= base + params_.size())
                throw std::invalid_argument("Network: foreign parameter leaf on tape");
            const std::int64_t off = p - base;
            for (std::int64_t i = 0; i < g.numel(); ++i) grads_[static_cast<std::size_t>(off + i)] += scale * g[i];
        });
    }

    /// Records a forward pass over layers [begin, end). Masks, when present,
    /// multiply the outputs of the registered insertion layers.
    Var record_range(Tape<T>& tape, Var x, int begin, int end, const ForwardCtx& ctx,
                     std::optional<Var> feature_mask = std::nullopt,
                     std::optional<Var> classifier_mask = std::nullopt) const {
        Var v = x;
        for (int i = begin; i < end; ++i) {
            v = layers_[static_cast<std::size_t>(i)]->forward(tape, v, ctx);
            if (i == feature_point_ && feature_mask)
                v = ops::mul_mask(tape, v, *feature_mask, feature_site_.height * feature_site_.width);
            if (i == classifier_point_ && classifier_mask)
                v = ops::mul_mask(tape, v, *classifier_mask, 1);
        }
        return v;
    }

    Var record_forward(Tape<T>& tape, Var x, const ForwardCtx& ctx,
                       std::optional<Var> feature_mask = std::nullopt,
                       std::optional<Var> classifier_mask = std::nullopt) const {
        return record_range(tape, x, 0, num_layers(), ctx, feature_mask, classifier_mask);
    }

    /// Plain forward pass to class probabilities. Pure: never updates
    /// BatchNorm running statistics. Absent masks mean all-ones.
    Tensor<T> forward(const Tensor<T>& x, const ChannelMask* feature_mask = nullptr,
                      const ElementMask* classifier_mask = nullptr, bool train_mode = false,
                      Rng* rng = nullptr) const {
        check_input(x);
        Tape<T> tape;
        ForwardCtx ctx;
        ctx.train_mode = train_mode;
        ctx.update_stats = false;
        ctx.track_params = false;
        ctx.rng = rng;
        Var xv = tape.constant(x);
        std::optional<Var> fm, cm;
        if (feature_mask) {
            if (feature_mask->channels() != feature_site_.channels ||
                feature_mask->height != feature_site_.height || feature_mask->width != feature_site_.width)
                throw std::invalid_argument("forward: feature mask shape mismatch");
            fm = tape.constant(feature_mask->template bits_tensor<T>());
        }
        if (classifier_mask) {
            if (classifier_mask->length() != classifier_len_)
                throw std::invalid_argument("forward: classifier mask length mismatch");
            cm = tape.constant(classifier_mask->template as_tensor<T>());
        }
        Var out = record_forward(tape, xv, ctx, fm, cm);
        return tape.value(out);
    }

    void check_input(const Tensor<T>& x) const {
        if (x.rank() != 4 || x.dim(1) != arch_.input_shape[0] || x.dim(2) != arch_.input_shape[1] ||
            x.dim(3) != arch_.input_shape[2])
            throw std::invalid_argument("Network: input shape " + shape_str(x.shape()) +
                                        " does not match architecture input " +
                                        shape_str(arch_.input_shape));
    }

    /// Lower/upper halves around an insertion point.
    struct SubNet {
        const Network* net = nullptr;
        int begin = 0, end = 0;

        Tensor<T> run(const Tensor<T>& x, bool train_mode = false, Rng* rng = nullptr) const {
            Tape<T> tape;
            ForwardCtx ctx;
            ctx.train_mode = train_mode;
            ctx.track_params = false;
            ctx.rng = rng;
            Var v = tape.constant(x);
            return tape.value(net->record_range(tape, v, begin, end, ctx));
        }

        Var record(Tape<T>& tape, Var x, const ForwardCtx& ctx) const {
            return net->record_range(tape, x, begin, end, ctx);
        }
    };

    std::pair<SubNet, SubNet> split_at(const std::string& insertion_point) const {
        const int idx = insertion_index(insertion_point);
        return {SubNet{this, 0, idx + 1}, SubNet{this, idx + 1, num_layers()}};
    }

private:
    ArchitectureId arch_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    int feature_point_ = -1;
    int classifier_point_ = -1;
    ChannelSite feature_site_;
    std::int64_t classifier_len_ = 0;
    int output_classes_ = 0;
    std::vector<T> params_, grads_, buffers_;
};

/// Builds one of the documented reference architectures.
///
/// small-3conv-2fc (for 1x28x28 class of inputs):
///   [conv3x3(16) BN relu pool2] [conv3x3(32) BN relu pool2]
///   [conv3x3(64) BN relu  <- channel-mask site] pool2
///   flatten fc(96) BN relu  <- element-mask site
///   fc(K) softmax
///
/// small-9conv-1fc (for Cx32x32 inputs):
///   3x[conv3x3(64) BN relu] pool2 drop(0.5)
///   3x[conv3x3(128) BN relu] pool2 drop(0.5)
///   conv3x3v(256) BN relu, conv1x1(128) BN relu,
///   conv1x1(64) BN relu  <- channel-mask site
///   gap  <- element-mask site
///   fc(K) softmax
///
/// tiny-test (1x12x12, 3 classes, 447 parameters):
///   [conv3x3(4) BN relu pool2] [conv3x3(4) BN relu pool2  <- channel site]
///   flatten fc(6) relu  <- element site
///   fc(3) softmax
template <typename T>
Network<T> build_network(const ArchitectureId& arch, std::uint64_t seed) {
    std::vector<std::unique_ptr<Layer<T>>> ls;
    std::vector<int> shape = {1, arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]};
    auto push = [&](std::unique_ptr<Layer<T>> l) {
        shape = l->output_shape(shape);
        ls.push_back(std::move(l));
    };
    auto conv_bn_relu = [&](int out_c, int k, int pad) {
        push(std::make_unique<Conv2d<T>>(shape[1], out_c, k, 1, pad));
        push(std::make_unique<BatchNorm<T>>(out_c));
        push(std::make_unique<ReLU<T>>());
    };

    int feature_point = -1, classifier_point = -1;

    if (arch.name == "small-3conv-2fc") {
        conv_bn_relu(16, 3, 1);
        push(std::make_unique<MaxPool2d<T>>());
        conv_bn_relu(32, 3, 1);
        push(std::make_unique<MaxPool2d<T>>());
        conv_bn_relu(64, 3, 1);
        feature_point = static_cast<int>(ls.size()) - 1;
        push(std::make_unique<MaxPool2d<T>>());
        push(std::make_unique<Flatten<T>>());
        push(std::make_unique<Linear<T>>(shape[1], 96));
        push(std::make_unique<BatchNorm<T>>(96));
        push(std::make_unique<ReLU<T>>());
        classifier_point = static_cast<int>(ls.size()) - 1;
        push(std::make_unique<Linear<T>>(96, arch.num_classes));
        push(std::make_unique<Softmax<T>>());
    } else if (arch.name == "small-9conv-1fc") {
        for (int i = 0; i < 3; ++i) conv_bn_relu(64, 3, 1);
        push(std::make_unique<MaxPool2d<T>>());
        push(std::make_unique<Dropout<T>>(0.5));
        for (int i = 0; i < 3; ++i) conv_bn_relu(128, 3, 1);
        push(std::make_unique<MaxPool2d<T>>());
        push(std::make_unique<Dropout<T>>(0.5));
        conv_bn_relu(256, 3, 0);
        conv_bn_relu(128, 1, 0);
        conv_bn_relu(64, 1, 0);
        feature_point = static_cast<int>(ls.size()) - 1;
        push(std::make_unique<GlobalAvgPool<T>>());
        classifier_point = static_cast<int>(ls.size()) - 1;
        push(std::make_unique<Linear<T>>(64, arch.num_classes));
        push(std::make_unique<Softmax<T>>());
    } else if (arch.name == "tiny-test") {
        conv_bn_relu(4, 3, 1);
        push(std::make_unique<MaxPool2d<T>>());
        conv_bn_relu(4, 3, 1);
        push(std::make_unique<MaxPool2d<T>>());
        feature_point = static_cast<int>(ls.size()) - 1;
        push(std::make_unique<Flatten<T>>());
        push(std::make_unique<Linear<T>>(shape[1], 6));
        push(std::make_unique<ReLU<T>>());
        classifier_point = static_cast<int>(ls.size()) - 1;
        push(std::make_unique<Linear<T>>(6, arch.num_classes));
        push(std::make_unique<Softmax<T>>());
    } else {
        throw std::invalid_argument("build_network: unknown architecture '" + arch.name + "'");
    }

    return Network<T>::assemble(arch, std::move(ls), feature_point, classifier_point, seed);
}

inline ArchitectureId default_arch(const std::string& name, int num_classes = 10) {
    if (name == "small-3conv-2fc") return {name, {1, 28, 28}, num_classes};
    if (name == "small-9conv-1fc") return {name, {3, 32, 32}, num_classes};
    if (name == "tiny-test") return {name, {1, 12, 12}, 3};
    throw std::invalid_argument("default_arch: unknown architecture '" + name + "'");
}

}  // namespace dta
