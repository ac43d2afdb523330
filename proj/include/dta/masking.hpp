#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "dta/rng.hpp"
#include "dta/tensor.hpp"

namespace dta {

enum class MaskKind { element, channel };

/// Binary dropout mask over a flattened activation, one bit per unit.
struct ElementMask {
    std::vector<std::uint8_t> values;  // each entry 0 or 1

    std::int64_t length() const { return static_cast<std::int64_t>(values.size()); }

    /// Fraction of kept (1) units.
    double keep_fraction() const {
        if (values.empty()) return 1.0;
        std::int64_t kept = 0;
        for (auto v : values) kept += v;
        return static_cast<double>(kept) / static_cast<double>(values.size());
    }

    template <typename T>
    Tensor<T> as_tensor() const {
        Tensor<T> t({static_cast<int>(values.size())});
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(values[static_cast<std::size_t>(i)]);
        return t;
    }
};

/// Channel-wise dropout mask: one bit per channel, each expanding to a
/// uniform all-zero or all-one (H, W) plane.
struct ChannelMask {
    std::vector<std::uint8_t> channel_bits;
    int height = 1;
    int width = 1;

    int channels() const { return static_cast<int>(channel_bits.size()); }
    int plane() const { return height * width; }

    /// Expands to an element mask of length C*H*W.
    ElementMask expand() const {
        ElementMask m;
        m.values.resize(channel_bits.size() * static_cast<std::size_t>(plane()));
        std::size_t k = 0;
        for (auto bit : channel_bits)
            for (int p = 0; p < plane(); ++p) m.values[k++] = bit;
        return m;
    }

    template <typename T>
    Tensor<T> bits_tensor() const {
        Tensor<T> t({channels()});
        for (int i = 0; i < channels(); ++i) t[i] = static_cast<T>(channel_bits[static_cast<std::size_t>(i)]);
        return t;
    }
};

/// Flip budget for an adversarial mask solve. Fractional budgets floor to
/// whole flips: the bound is "at most", never "at least".
struct MaskBudget {
    MaskKind kind = MaskKind::element;
    double magnitude = 0.0;  // delta in [0, 1]
    std::int64_t units = 0;  // L for element kind, C for channel kind

    static MaskBudget element(double delta, std::int64_t length) {
        check_magnitude(delta);
        return {MaskKind::element, delta, length};
    }
    static MaskBudget channel(double delta, std::int64_t channels) {
        check_magnitude(delta);
        return {MaskKind::channel, delta, channels};
    }

    std::int64_t max_flips() const {
        return static_cast<std::int64_t>(std::floor(magnitude * static_cast<double>(units) + 1e-12));
    }

private:
    static void check_magnitude(double delta) {
        if (!(delta >= 0.0 && delta <= 1.0))
            throw std::invalid_argument("MaskBudget: magnitude must lie in [0,1]");
    }
};

/// Independent Bernoulli drop per unit: entry is 0 with probability
/// drop_rate. Deterministic given the rng state.
inline ElementMask sample_element_mask(std::int64_t length, double drop_rate, Rng& rng) {
    if (length < 1) throw std::invalid_argument("sample_element_mask: length must be >= 1");
    if (!(drop_rate >= 0.0 && drop_rate <= 1.0))
        throw std::invalid_argument("sample_element_mask: drop_rate must lie in [0,1]");
    ElementMask m;
    m.values.resize(static_cast<std::size_t>(length));
    for (auto& v : m.values) v = rng.bernoulli(drop_rate) ? 0 : 1;
    return m;
}

/// Spatial dropout sampling: whole channels drop together, so the uniform
/// plane constraint holds by construction.
inline ChannelMask sample_channel_mask(int channels, int height, int width, double drop_rate, Rng& rng) {
    if (channels < 1) throw std::invalid_argument("sample_channel_mask: channels must be >= 1");
    if (height < 1 || width < 1) throw std::invalid_argument("sample_channel_mask: empty spatial dims");
    if (!(drop_rate >= 0.0 && drop_rate <= 1.0))
        throw std::invalid_argument("sample_channel_mask: drop_rate must lie in [0,1]");
    ChannelMask m;
    m.height = height;
    m.width = width;
    m.channel_bits.resize(static_cast<std::size_t>(channels));
    for (auto& v : m.channel_bits) v = rng.bernoulli(drop_rate) ? 0 : 1;
    return m;
}

inline ElementMask ones_element_mask(std::int64_t length) {
    ElementMask m;
    m.values.assign(static_cast<std::size_t>(length), 1);
    return m;
}

inline ChannelMask ones_channel_mask(int channels, int height, int width) {
    ChannelMask m;
    m.height = height;
    m.width = width;
    m.channel_bits.assign(static_cast<std::size_t>(channels), 1);
    return m;
}

/// activation * mask with no rescaling. The activation's trailing dimensions
/// must flatten to the mask length; a leading batch dimension broadcasts.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& activation, const ElementMask& mask) {
    const std::int64_t len = mask.length();
    if (len == 0 || activation.numel() % len != 0)
        throw std::invalid_argument("apply_mask: mask length does not divide activation size");
    const std::int64_t batch = activation.numel() / len;
    // Batch-major layout only: (B, ...) with per-sample size == mask length.
    if (activation.rank() >= 1 && activation.numel() != 0) {
        std::int64_t per_sample = activation.numel() / activation.dim(0);
        if (per_sample != len && activation.numel() != len)
            throw std::invalid_argument("apply_mask: activation per-sample size does not match mask");
    }
    Tensor<T> out(activation.shape());
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t i = 0; i < len; ++i)
            out[b * len + i] = activation[b * len + i] * static_cast<T>(mask.values[static_cast<std::size_t>(i)]);
    return out;
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& activation, const ChannelMask& mask) {
    const std::int64_t per_sample = static_cast<std::int64_t>(mask.channels()) * mask.plane();
    if (per_sample == 0 || activation.numel() % per_sample != 0)
        throw std::invalid_argument("apply_mask: channel mask shape does not divide activation size");
    const std::int64_t batch = activation.numel() / per_sample;
    Tensor<T> out(activation.shape());
    for (std::int64_t b = 0; b < batch; ++b)
        for (int c = 0; c < mask.channels(); ++c) {
            const T bit = static_cast<T>(mask.channel_bits[static_cast<std::size_t>(c)]);
            const std::int64_t base = b * per_sample + static_cast<std::int64_t>(c) * mask.plane();
            for (int p = 0; p < mask.plane(); ++p) out[base + p] = activation[base + p] * bit;
        }
    return out;
}

/// Hamming distance between two masks of equal kind and shape. On binary
/// vectors this equals both the L1 and squared L2 norm of the difference.
inline std::int64_t mask_distance(const ElementMask& a, const ElementMask& b) {
    if (a.length() != b.length())
        throw std::invalid_argument("mask_distance: element masks differ in length");
    std::int64_t d = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) d += a.values[i] != b.values[i];
    return d;
}

inline std::int64_t mask_distance(const ChannelMask& a, const ChannelMask& b) {
    if (a.channels() != b.channels() || a.height != b.height || a.width != b.width)
        throw std::invalid_argument("mask_distance: channel masks differ in shape");
    std::int64_t d = 0;
    for (std::size_t i = 0; i < a.channel_bits.size(); ++i) d += a.channel_bits[i] != b.channel_bits[i];
    return d;
}

}  // namespace dta
