#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dta/compress.hpp"
#include "dta/errors.hpp"
#include "dta/matfile.hpp"
#include "dta/rng.hpp"
#include "dta/tensor.hpp"

namespace dta {

/// Labeled images, uint8 pixels in (N, C, H, W) order.
struct ImageSet {
    int channels = 0, height = 0, width = 0;
    std::vector<std::uint8_t> pixels;
    std::vector<int> labels;

    std::int64_t count() const {
        const std::int64_t per = static_cast<std::int64_t>(channels) * height * width;
        return per == 0 ? 0 : static_cast<std::int64_t>(pixels.size()) / per;
    }
    std::int64_t image_size() const { return static_cast<std::int64_t>(channels) * height * width; }
};

/// Target-domain training images. Deliberately label-free: nothing reachable
/// from training can read target-train labels.
struct UnlabeledImages {
    int channels = 0, height = 0, width = 0;
    std::vector<std::uint8_t> pixels;

    std::int64_t count() const {
        const std::int64_t per = static_cast<std::int64_t>(channels) * height * width;
        return per == 0 ? 0 : static_cast<std::int64_t>(pixels.size()) / per;
    }
    std::int64_t image_size() const { return static_cast<std::int64_t>(channels) * height * width; }

    static UnlabeledImages from(ImageSet set) {
        return {set.channels, set.height, set.width, std::move(set.pixels)};
    }
};

// ---------------------------------------------------------------------------
// Format loaders
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t rd_be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

inline std::filesystem::path existing(const std::filesystem::path& base) {
    if (std::filesystem::exists(base)) return base;
    std::filesystem::path gz = base;
    gz += ".gz";
    if (std::filesystem::exists(gz)) return gz;
    throw io_error("missing dataset file: " + base.string() +
                   " (run `dta fetch` or point --data-root at the cache)");
}

}  // namespace detail

/// IDX image/label pair (the MNIST container format), gzip-aware.
inline ImageSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto img = read_maybe_gzipped(detail::existing(images));
    if (img.size() < 16 || detail::rd_be32(img.data()) != 0x803)
        throw io_error("not an IDX image file: " + images.string());
    ImageSet set;
    const std::int64_t n = detail::rd_be32(img.data() + 4);
    set.channels = 1;
    set.height = static_cast<int>(detail::rd_be32(img.data() + 8));
    set.width = static_cast<int>(detail::rd_be32(img.data() + 12));
    const std::int64_t bytes = n * set.height * set.width;
    if (static_cast<std::int64_t>(img.size()) < 16 + bytes)
        throw io_error("truncated IDX image file: " + images.string());
    set.pixels.assign(img.begin() + 16, img.begin() + 16 + bytes);

    const auto lab = read_maybe_gzipped(detail::existing(labels));
    if (lab.size() < 8 || detail::rd_be32(lab.data()) != 0x801)
        throw io_error("not an IDX label file: " + labels.string());
    const std::int64_t ln = detail::rd_be32(lab.data() + 4);
    if (ln != n) throw io_error("IDX image/label count mismatch: " + labels.string());
    set.labels.assign(lab.begin() + 8, lab.begin() + 8 + ln);
    return set;
}

/// USPS in LIBSVM text form: `<label> <index>:<value> ...` with labels 1..10
/// (digit = label - 1) and 256 values in [-1, 1] per 16x16 image.
inline ImageSet load_usps_libsvm(const std::filesystem::path& path) {
    std::ifstream in(detail::existing(path));
    if (!in) throw io_error("cannot open " + path.string());
    ImageSet set;
    set.channels = 1;
    set.height = set.width = 16;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        double label;
        ls >> label;
        std::vector<double> vals(256, -1.0);
        std::string tok;
        while (ls >> tok) {
            const auto colon = tok.find(':');
            if (colon == std::string::npos) throw io_error("malformed feature in " + path.string());
            const int idx = std::stoi(tok.substr(0, colon));
            if (idx < 1 || idx > 256) throw io_error("feature index out of range in " + path.string());
            vals[static_cast<std::size_t>(idx - 1)] = std::stod(tok.substr(colon + 1));
        }
        for (double v : vals) {
            const double px = (v + 1.0) / 2.0 * 255.0;
            set.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(px, 0.0, 255.0))));
        }
        set.labels.push_back(static_cast<int>(label) - 1);
    }
    if (set.labels.empty()) throw io_error("no samples in " + path.string());
    return set;
}

/// CIFAR-10 binary batches: rows of [label][1024 R][1024 G][1024 B].
inline ImageSet load_cifar10(const std::filesystem::path& dir, bool train) {
    ImageSet set;
    set.channels = 3;
    set.height = set.width = 32;
    std::vector<std::filesystem::path> files;
    if (train)
        for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
        files.push_back(dir / "test_batch.bin");
    for (const auto& f : files) {
        const auto bytes = read_file_bytes(detail::existing(f));
        const std::size_t row = 1 + 3072;
        if (bytes.size() % row != 0) throw io_error("unexpected CIFAR batch size: " + f.string());
        for (std::size_t off = 0; off < bytes.size(); off += row) {
            set.labels.push_back(bytes[off]);
            set.pixels.insert(set.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                              bytes.begin() + static_cast<std::ptrdiff_t>(off + row));
        }
    }
    return set;
}

/// STL-10 binary: per image 3 channel planes of 96x96 stored column-major;
/// labels 1..10 in a separate file.
inline ImageSet load_stl10(const std::filesystem::path& dir, bool train) {
    const std::string stem = train ? "train" : "test";
    const auto xb = read_file_bytes(detail::existing(dir / (stem + "_X.bin")));
    const auto yb = read_file_bytes(detail::existing(dir / (stem + "_y.bin")));
    const std::int64_t per = 3 * 96 * 96;
    if (xb.size() % static_cast<std::size_t>(per) != 0)
        throw io_error("unexpected STL image file size in " + dir.string());
    const std::int64_t n = static_cast<std::int64_t>(xb.size()) / per;
    if (static_cast<std::int64_t>(yb.size()) != n)
        throw io_error("STL image/label count mismatch in " + dir.string());
    ImageSet set;
    set.channels = 3;
    set.height = set.width = 96;
    set.pixels.resize(static_cast<std::size_t>(n * per));
    for (std::int64_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 96; ++y)
                for (int x = 0; x < 96; ++x)
                    set.pixels[static_cast<std::size_t>(((i * 3 + c) * 96 + y) * 96 + x)] =
                        xb[static_cast<std::size_t>(i * per + c * 96 * 96 + x * 96 + y)];
    for (std::int64_t i = 0; i < n; ++i) set.labels.push_back(yb[static_cast<std::size_t>(i)] - 1);
    return set;
}

/// SVHN cropped digits (.mat): X is uint8 (32,32,3,N) column-major, y has
/// labels 1..10 with 10 meaning digit zero.
inline ImageSet load_svhn(const std::filesystem::path& path) {
    auto arrays = read_mat5(detail::existing(path));
    auto xi = arrays.find("X");
    auto yi = arrays.find("y");
    if (xi == arrays.end() || yi == arrays.end())
        throw io_error("SVHN file lacks X/y arrays: " + path.string());
    const MatArray& X = xi->second;
    const MatArray& y = yi->second;
    if (X.dims.size() != 4 || X.dims[0] != 32 || X.dims[1] != 32 || X.dims[2] != 3)
        throw io_error("unexpected SVHN image layout in " + path.string());
    const std::int64_t n = X.dims[3];
    ImageSet set;
    set.channels = 3;
    set.height = set.width = 32;
    set.pixels.resize(static_cast<std::size_t>(n * 3 * 32 * 32));
    for (std::int64_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            for (int r = 0; r < 32; ++r)
                for (int col = 0; col < 32; ++col) {
                    const double v = X.at(r + 32 * col + 1024 * c + 3072 * i);
                    set.pixels[static_cast<std::size_t>(((i * 3 + c) * 32 + r) * 32 + col)] =
                        static_cast<std::uint8_t>(v);
                }
    for (std::int64_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(y.at(i));
        set.labels.push_back(label == 10 ? 0 : label);
    }
    return set;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Bilinear resize on uint8 planes.
inline ImageSet resize_images(const ImageSet& in, int oh, int ow) {
    if (in.height == oh && in.width == ow) return in;
    ImageSet out;
    out.channels = in.channels;
    out.height = oh;
    out.width = ow;
    out.labels = in.labels;
    const std::int64_t n = in.count();
    out.pixels.resize(static_cast<std::size_t>(n * in.channels * oh * ow));
    const double sy = static_cast<double>(in.height) / oh;
    const double sx = static_cast<double>(in.width) / ow;
    std::size_t o = 0;
    for (std::int64_t i = 0; i < n; ++i)
        for (int c = 0; c < in.channels; ++c) {
            const std::uint8_t* plane =
                in.pixels.data() + (i * in.channels + c) * in.height * in.width;
            for (int y = 0; y < oh; ++y) {
                const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, in.height - 1.0);
                const int y0 = static_cast<int>(fy);
                const int y1 = std::min(y0 + 1, in.height - 1);
                const double wy = fy - y0;
                for (int x = 0; x < ow; ++x, ++o) {
                    const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, in.width - 1.0);
                    const int x0 = static_cast<int>(fx);
                    const int x1 = std::min(x0 + 1, in.width - 1);
                    const double wx = fx - x0;
                    const double v = (1 - wy) * ((1 - wx) * plane[y0 * in.width + x0] +
                                                 wx * plane[y0 * in.width + x1]) +
                                     wy * ((1 - wx) * plane[y1 * in.width + x0] +
                                           wx * plane[y1 * in.width + x1]);
                    out.pixels[o] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
                }
            }
        }
    return out;
}

/// Grayscale to RGB by channel replication.
inline ImageSet replicate_channels(const ImageSet& in, int channels) {
    if (in.channels == channels) return in;
    if (in.channels != 1) throw std::invalid_argument("replicate_channels: input must be single-channel");
    ImageSet out;
    out.channels = channels;
    out.height = in.height;
    out.width = in.width;
    out.labels = in.labels;
    const std::int64_t plane = static_cast<std::int64_t>(in.height) * in.width;
    out.pixels.reserve(in.pixels.size() * static_cast<std::size_t>(channels));
    for (std::int64_t i = 0; i < in.count(); ++i)
        for (int c = 0; c < channels; ++c)
            out.pixels.insert(out.pixels.end(), in.pixels.begin() + static_cast<std::ptrdiff_t>(i * plane),
                              in.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * plane));
    return out;
}

/// Keeps only the listed classes, remapping label k to its list position.
/// `class_map[old_label]` = new label or -1 to drop.
inline ImageSet remap_classes(const ImageSet& in, const std::vector<int>& class_map) {
    ImageSet out;
    out.channels = in.channels;
    out.height = in.height;
    out.width = in.width;
    const std::int64_t per = in.image_size();
    for (std::int64_t i = 0; i < in.count(); ++i) {
        const int old_label = in.labels[static_cast<std::size_t>(i)];
        const int remapped = class_map.at(static_cast<std::size_t>(old_label));
        if (remapped < 0) continue;
        out.labels.push_back(remapped);
        out.pixels.insert(out.pixels.end(), in.pixels.begin() + static_cast<std::ptrdiff_t>(i * per),
                          in.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    }
    return out;
}

inline ImageSet subsample_images(const ImageSet& in, std::int64_t keep, Rng& rng) {
    if (keep >= in.count()) return in;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(in.count()));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(keep));
    ImageSet out;
    out.channels = in.channels;
    out.height = in.height;
    out.width = in.width;
    const std::int64_t per = in.image_size();
    for (std::int64_t i : idx) {
        out.labels.push_back(in.labels[static_cast<std::size_t>(i)]);
        out.pixels.insert(out.pixels.end(), in.pixels.begin() + static_cast<std::ptrdiff_t>(i * per),
                          in.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Domain pairs
// ---------------------------------------------------------------------------

/// A source/target adaptation pair after preprocessing. Source and target
/// share one input shape; target-train labels are stripped at load time.
struct DomainPair {
    std::string config;
    int num_classes = 0;
    int channels = 0, height = 0, width = 0;
    ImageSet source_train;
    UnlabeledImages target_train;
    ImageSet target_test;
    bool default_hflip = false;
};

struct SubsampleSpec {
    std::int64_t source = 0;  // 0 = keep all
    std::int64_t target = 0;
};

inline const std::vector<std::string>& known_pair_configs() {
    static const std::vector<std::string> names = {"svhn2mnist", "mnist2usps", "usps2mnist",
                                                   "cifar2stl", "stl2cifar"};
    return names;
}

/// Loads one of the five small-image configurations from data_root.
/// Preprocessing per configuration:
///   svhn2mnist: MNIST upscaled to 32x32 and replicated to 3 channels.
///   mnist2usps / usps2mnist: USPS upscaled 16x16 -> 28x28, 1 channel.
///   cifar2stl / stl2cifar: 9 shared classes (CIFAR drops frog, STL drops
///   monkey), STL downscaled 96x96 -> 32x32, horizontal-flip augmentation on
///   by default.
inline DomainPair load_pair(const std::string& config_name, const std::filesystem::path& data_root,
                            SubsampleSpec subsample = {}, std::uint64_t seed = 0) {
    auto mnist = [&](bool train) {
        const char* imgs = train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte";
        const char* labs = train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte";
        return load_idx(data_root / "mnist" / imgs, data_root / "mnist" / labs);
    };
    auto usps = [&](bool train) {
        return load_usps_libsvm(data_root / "usps" / (train ? "usps" : "usps.t"));
    };
    // Shared 9-class order: airplane, bird, car, cat, deer, dog, horse,
    // ship, truck. CIFAR drops frog (6); STL drops monkey (7).
    static const std::vector<int> cifar_map = {0, 2, 1, 3, 4, 5, -1, 6, 7, 8};
    static const std::vector<int> stl_map = {0, 1, 2, 3, 4, 5, 6, -1, 7, 8};

    DomainPair pair;
    pair.config = config_name;
    ImageSet src, tgt_train, tgt_test;

    if (config_name == "svhn2mnist") {
        src = load_svhn(data_root / "svhn" / "train_32x32.mat");
        tgt_train = replicate_channels(resize_images(mnist(true), 32, 32), 3);
        tgt_test = replicate_channels(resize_images(mnist(false), 32, 32), 3);
        pair.num_classes = 10;
    } else if (config_name == "mnist2usps") {
        src = mnist(true);
        tgt_train = resize_images(usps(true), 28, 28);
        tgt_test = resize_images(usps(false), 28, 28);
        pair.num_classes = 10;
    } else if (config_name == "usps2mnist") {
        src = resize_images(usps(true), 28, 28);
        tgt_train = mnist(true);
        tgt_test = mnist(false);
        pair.num_classes = 10;
    } else if (config_name == "cifar2stl") {
        src = remap_classes(load_cifar10(data_root / "cifar10" / "cifar-10-batches-bin", true), cifar_map);
        tgt_train = resize_images(remap_classes(load_stl10(data_root / "stl10" / "stl10_binary", true), stl_map), 32, 32);
        tgt_test = resize_images(remap_classes(load_stl10(data_root / "stl10" / "stl10_binary", false), stl_map), 32, 32);
        pair.num_classes = 9;
        pair.default_hflip = true;
    } else if (config_name == "stl2cifar") {
        src = resize_images(remap_classes(load_stl10(data_root / "stl10" / "stl10_binary", true), stl_map), 32, 32);
        tgt_train = remap_classes(load_cifar10(data_root / "cifar10" / "cifar-10-batches-bin", true), cifar_map);
        tgt_test = remap_classes(load_cifar10(data_root / "cifar10" / "cifar-10-batches-bin", false), cifar_map);
        pair.num_classes = 9;
        pair.default_hflip = true;
    } else {
        throw std::invalid_argument("load_pair: unknown configuration '" + config_name + "'");
    }

    if (subsample.source > 0) {
        Rng r = Rng::stream(seed, 0x5u);
        src = subsample_images(src, subsample.source, r);
    }
    if (subsample.target > 0) {
        Rng r = Rng::stream(seed, 0x6u);
        tgt_train = subsample_images(tgt_train, subsample.target, r);
    }

    pair.channels = src.channels;
    pair.height = src.height;
    pair.width = src.width;
    if (tgt_train.channels != pair.channels || tgt_train.height != pair.height ||
        tgt_train.width != pair.width)
        throw io_error("load_pair: domains disagree on the input shape after preprocessing");
    pair.source_train = std::move(src);
    pair.target_train = UnlabeledImages::from(std::move(tgt_train));
    pair.target_test = std::move(tgt_test);
    return pair;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Deterministic epoch-shuffled batches over a domain pair. Each epoch draws
/// every domain from freshly seeded permutations; the longer domain defines
/// the step count and the shorter one recycles through additional
/// permutations within the epoch. Pixels normalize to (x/255 - 0.5) / 0.5.
template <typename T>
class DomainBatcher {
public:
    struct Batch {
        Tensor<T> source_x;
        std::vector<int> source_y;
        Tensor<T> target_x;
    };

    DomainBatcher(const DomainPair& pair, int batch_size, std::uint64_t seed, bool hflip,
                  bool with_target = true)
        : pair_(&pair), batch_(batch_size), seed_(seed), hflip_(hflip), with_target_(with_target) {
        if (batch_size < 1) throw std::invalid_argument("DomainBatcher: batch size must be >= 1");
        if (pair.source_train.count() == 0) throw std::invalid_argument("DomainBatcher: empty source");
        if (with_target_ && pair.target_train.count() == 0)
            throw std::invalid_argument("DomainBatcher: empty target");
    }

    int steps_per_epoch() const {
        const std::int64_t n = std::max<std::int64_t>(
            pair_->source_train.count(), with_target_ ? pair_->target_train.count() : 0);
        return static_cast<int>((n + batch_ - 1) / batch_);
    }

    Batch batch(int epoch, int step) const {
        Batch out;
        const auto src_idx = domain_indices(0, pair_->source_train.count(), epoch, step);
        out.source_x = gather(pair_->source_train.pixels.data(), pair_->source_train.image_size(),
                              src_idx, 2, epoch, step);
        out.source_y.reserve(src_idx.size());
        for (auto i : src_idx) out.source_y.push_back(pair_->source_train.labels[static_cast<std::size_t>(i)]);
        if (with_target_) {
            const auto tgt_idx = domain_indices(1, pair_->target_train.count(), epoch, step);
            out.target_x = gather(pair_->target_train.pixels.data(), pair_->target_train.image_size(),
                                  tgt_idx, 3, epoch, step);
        }
        return out;
    }

    /// Normalized slice of target_test for evaluation.
    Tensor<T> eval_batch(std::int64_t begin, std::int64_t end) const {
        const auto& set = pair_->target_test;
        std::vector<std::int64_t> idx;
        for (std::int64_t i = begin; i < end; ++i) idx.push_back(i);
        Tensor<T> x({static_cast<int>(idx.size()), set.channels, set.height, set.width});
        const std::int64_t per = set.image_size();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const std::uint8_t* p = set.pixels.data() + idx[b] * per;
            T* o = x.data() + static_cast<std::int64_t>(b) * per;
            for (std::int64_t i = 0; i < per; ++i)
                o[i] = static_cast<T>(p[i] / 127.5 - 1.0);
        }
        return x;
    }

    /// The source indices one epoch visits, in order (index accounting).
    std::vector<std::int64_t> epoch_source_indices(int epoch) const {
        std::vector<std::int64_t> all;
        for (int s = 0; s < steps_per_epoch(); ++s) {
            auto idx = domain_indices(0, pair_->source_train.count(), epoch, s);
            all.insert(all.end(), idx.begin(), idx.end());
        }
        return all;
    }

private:
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t purpose, std::uint64_t a, std::uint64_t b) {
        return Rng::splitmix64(Rng::splitmix64(seed ^ (purpose * 0x9e3779b97f4a7c15ULL)) ^
                               (a * 0xbf58476d1ce4e5b9ULL) ^ b);
    }

    /// Index of sample `pos` in the epoch's concatenated permutation stream.
    std::vector<std::int64_t> domain_indices(int domain, std::int64_t n, int epoch, int step) const {
        std::vector<std::int64_t> out;
        out.reserve(static_cast<std::size_t>(batch_));
        std::int64_t pos = static_cast<std::int64_t>(step) * batch_;
        std::vector<std::int64_t> perm;
        std::int64_t perm_id = -1;
        for (int k = 0; k < batch_; ++k, ++pos) {
            const std::int64_t want = pos / n;
            if (want != perm_id) {
                perm.resize(static_cast<std::size_t>(n));
                std::iota(perm.begin(), perm.end(), 0);
                Rng r(mix(seed_, static_cast<std::uint64_t>(domain) + 1,
                          static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(want)));
                r.shuffle(perm);
                perm_id = want;
            }
            out.push_back(perm[static_cast<std::size_t>(pos % n)]);
        }
        return out;
    }

    Tensor<T> gather(const std::uint8_t* base, std::int64_t per, const std::vector<std::int64_t>& idx,
                     std::uint64_t aug_purpose, int epoch, int step) const {
        Tensor<T> x({static_cast<int>(idx.size()), pair_->channels, pair_->height, pair_->width});
        Rng aug(mix(seed_, aug_purpose + 16, static_cast<std::uint64_t>(epoch),
                    static_cast<std::uint64_t>(step)));
        const int h = pair_->height, w = pair_->width, c = pair_->channels;
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const std::uint8_t* p = base + idx[b] * per;
            T* o = x.data() + static_cast<std::int64_t>(b) * per;
            const bool flip = hflip_ && aug.bernoulli(0.5);
            for (int ci = 0; ci < c; ++ci)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = flip ? w - 1 - xx : xx;
                        o[(static_cast<std::int64_t>(ci) * h + y) * w + xx] =
                            static_cast<T>(p[(static_cast<std::int64_t>(ci) * h + y) * w + sx] / 127.5 - 1.0);
                    }
        }
        return x;
    }

    const DomainPair* pair_;
    int batch_;
    std::uint64_t seed_;
    bool hflip_;
    bool with_target_;
};

}  // namespace dta
