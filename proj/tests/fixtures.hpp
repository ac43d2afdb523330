#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "dta/compress.hpp"
#include "dta/datasets.hpp"

namespace dta::testing {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

/// Writes an IDX image/label pair for the given set (raw or gzipped).
inline void write_idx_fixture(const std::filesystem::path& images, const std::filesystem::path& labels,
                              const ImageSet& set, bool gz) {
    std::vector<std::uint8_t> img;
    put_be32(img, 0x803);
    put_be32(img, static_cast<std::uint32_t>(set.count()));
    put_be32(img, static_cast<std::uint32_t>(set.height));
    put_be32(img, static_cast<std::uint32_t>(set.width));
    img.insert(img.end(), set.pixels.begin(), set.pixels.end());
    std::vector<std::uint8_t> lab;
    put_be32(lab, 0x801);
    put_be32(lab, static_cast<std::uint32_t>(set.labels.size()));
    for (int l : set.labels) lab.push_back(static_cast<std::uint8_t>(l));
    if (gz) {
        auto gzi = gzip_bytes(img.data(), img.size());
        auto gzl = gzip_bytes(lab.data(), lab.size());
        write_file_bytes(images.string() + ".gz", gzi.data(), gzi.size());
        write_file_bytes(labels.string() + ".gz", gzl.data(), gzl.size());
    } else {
        write_file_bytes(images, img.data(), img.size());
        write_file_bytes(labels, lab.data(), lab.size());
    }
}

/// Procedural grayscale digits-like set: class k gets a bright kxk-ish
/// block whose position encodes the class; `bias` shifts the intensities to
/// mimic a domain gap.
inline ImageSet synthetic_images(int n, int classes, int h, int w, std::uint64_t seed, int bias = 0) {
    ImageSet set;
    set.channels = 1;
    set.height = h;
    set.width = w;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        const int label = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes)));
        set.labels.push_back(label);
        std::vector<std::uint8_t> img(static_cast<std::size_t>(h) * w, 0);
        for (auto& p : img) p = static_cast<std::uint8_t>(rng.uniform_index(40));
        const int cy = 1 + (label % 3) * (h - 4) / 2;
        const int cx = 1 + (label / 3) * (w - 4) / 2;
        for (int dy = 0; dy < 3; ++dy)
            for (int dx = 0; dx < 3; ++dx) {
                const int y = std::min(h - 1, cy + dy), x = std::min(w - 1, cx + dx);
                int v = 200 + static_cast<int>(rng.uniform_index(56)) + bias;
                img[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
            }
        set.pixels.insert(set.pixels.end(), img.begin(), img.end());
    }
    return set;
}

/// Synthetic source/target pair with an intensity shift between domains.
inline DomainPair synthetic_pair(int n_source, int n_target, int n_test, int classes = 3, int h = 12,
                                 int w = 12, std::uint64_t seed = 7) {
    DomainPair pair;
    pair.config = "synthetic";
    pair.num_classes = classes;
    pair.channels = 1;
    pair.height = h;
    pair.width = w;
    pair.source_train = synthetic_images(n_source, classes, h, w, seed, 0);
    pair.target_train = UnlabeledImages::from(synthetic_images(n_target, classes, h, w, seed + 1, -60));
    pair.target_test = synthetic_images(n_test, classes, h, w, seed + 2, -60);
    return pair;
}

// --- MAT 5 fixture writing (SVHN layout) ---

inline void mat_put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 24));
}

inline void mat_pad8(std::vector<std::uint8_t>& out) {
    while (out.size() % 8) out.push_back(0);
}

inline std::vector<std::uint8_t> mat_matrix_element(const std::string& name, std::vector<int> dims,
                                                    const std::vector<std::uint8_t>& data) {
    std::vector<std::uint8_t> body;
    // array flags (miUINT32 x2): class mxUINT8 (9)
    mat_put_u32(body, 6);
    mat_put_u32(body, 8);
    mat_put_u32(body, 9);
    mat_put_u32(body, 0);
    // dimensions (miINT32)
    mat_put_u32(body, 5);
    mat_put_u32(body, static_cast<std::uint32_t>(4 * dims.size()));
    for (int d : dims) mat_put_u32(body, static_cast<std::uint32_t>(d));
    mat_pad8(body);
    // name (miINT8)
    mat_put_u32(body, 1);
    mat_put_u32(body, static_cast<std::uint32_t>(name.size()));
    body.insert(body.end(), name.begin(), name.end());
    mat_pad8(body);
    // data (miUINT8)
    mat_put_u32(body, 2);
    mat_put_u32(body, static_cast<std::uint32_t>(data.size()));
    body.insert(body.end(), data.begin(), data.end());
    mat_pad8(body);

    std::vector<std::uint8_t> elem;
    mat_put_u32(elem, 14);  // miMATRIX
    mat_put_u32(elem, static_cast<std::uint32_t>(body.size()));
    elem.insert(elem.end(), body.begin(), body.end());
    return elem;
}

/// Minimal SVHN-style .mat: X uint8 (32,32,3,N) column-major + y uint8 (N,1).
inline void write_svhn_fixture(const std::filesystem::path& path,
                               const std::vector<std::uint8_t>& x_colmajor,
                               const std::vector<std::uint8_t>& y, int n, bool compressed) {
    std::vector<std::uint8_t> out(116, ' ');
    const char* banner = "MATLAB 5.0 MAT-file, test fixture";
    std::memcpy(out.data(), banner, std::strlen(banner));
    out.resize(124, ' ');
    out.push_back(0x00);  // version 0x0100 little-endian
    out.push_back(0x01);
    out.push_back('I');
    out.push_back('M');

    auto xe = mat_matrix_element("X", {32, 32, 3, n}, x_colmajor);
    auto ye = mat_matrix_element("y", {n, 1}, y);
    std::vector<std::uint8_t> payload = xe;
    payload.insert(payload.end(), ye.begin(), ye.end());

    if (compressed) {
        // zlib-wrapped payload inside a miCOMPRESSED element
        uLong bound = compressBound(static_cast<uLong>(payload.size()));
        std::vector<std::uint8_t> z(bound);
        uLongf zn = bound;
        if (compress2(z.data(), &zn, payload.data(), static_cast<uLong>(payload.size()), 6) != Z_OK)
            throw std::runtime_error("fixture compression failed");
        z.resize(zn);
        mat_put_u32(out, 15);  // miCOMPRESSED
        mat_put_u32(out, static_cast<std::uint32_t>(z.size()));
        out.insert(out.end(), z.begin(), z.end());
        mat_pad8(out);
    } else {
        out.insert(out.end(), payload.begin(), payload.end());
    }
    write_file_bytes(path, out.data(), out.size());
}

/// Builds a complete miniature data_root covering all five loaders.
/// Returns the root. Classes are tiny but structurally faithful.
inline std::filesystem::path make_fixture_data_root(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "mnist");
    fs::create_directories(root / "usps");
    fs::create_directories(root / "svhn");
    fs::create_directories(root / "cifar10" / "cifar-10-batches-bin");
    fs::create_directories(root / "stl10" / "stl10_binary");

    // MNIST: 20 train (gz), 10 test (raw) 28x28 images.
    write_idx_fixture(root / "mnist" / "train-images-idx3-ubyte",
                      root / "mnist" / "train-labels-idx1-ubyte",
                      synthetic_images(20, 10, 28, 28, 1), /*gz=*/true);
    write_idx_fixture(root / "mnist" / "t10k-images-idx3-ubyte",
                      root / "mnist" / "t10k-labels-idx1-ubyte",
                      synthetic_images(10, 10, 28, 28, 2), /*gz=*/false);

    // USPS: LIBSVM text, 16x16 in [-1, 1], labels 1..10.
    for (const char* name : {"usps", "usps.t"}) {
        std::ofstream out(root / "usps" / name);
        Rng rng(name[4] == '.' ? 11u : 10u);
        const int n = name[4] == '.' ? 8 : 15;
        for (int i = 0; i < n; ++i) {
            out << (1 + rng.uniform_index(10));
            for (int f = 1; f <= 256; ++f) out << ' ' << f << ':' << (rng.uniform() * 2 - 1);
            out << '\n';
        }
    }

    // SVHN: 6 train images, compressed element; labels include a 10 (zero).
    {
        const int n = 6;
        std::vector<std::uint8_t> x(static_cast<std::size_t>(32 * 32 * 3 * n));
        Rng rng(21);
        for (auto& p : x) p = static_cast<std::uint8_t>(rng.uniform_index(256));
        std::vector<std::uint8_t> y = {10, 1, 2, 3, 4, 5};
        write_svhn_fixture(root / "svhn" / "train_32x32.mat", x, y, n, /*compressed=*/true);
        write_svhn_fixture(root / "svhn" / "test_32x32.mat", x, y, n, /*compressed=*/false);
    }

    // CIFAR: one batch per file, 4 rows each, all ten labels across files.
    {
        Rng rng(31);
        for (int b = 1; b <= 5; ++b) {
            std::vector<std::uint8_t> rows;
            for (int i = 0; i < 4; ++i) {
                rows.push_back(static_cast<std::uint8_t>((b + i) % 10));
                for (int p = 0; p < 3072; ++p)
                    rows.push_back(static_cast<std::uint8_t>(rng.uniform_index(256)));
            }
            write_file_bytes(root / "cifar10" / "cifar-10-batches-bin" /
                                 ("data_batch_" + std::to_string(b) + ".bin"),
                             rows.data(), rows.size());
        }
        std::vector<std::uint8_t> rows;
        for (int i = 0; i < 4; ++i) {
            rows.push_back(static_cast<std::uint8_t>(i));
            for (int p = 0; p < 3072; ++p) rows.push_back(static_cast<std::uint8_t>(rng.uniform_index(256)));
        }
        write_file_bytes(root / "cifar10" / "cifar-10-batches-bin" / "test_batch.bin", rows.data(),
                         rows.size());
    }

    // STL: 6 train + 4 test images, column-major planes, labels 1..10.
    {
        Rng rng(41);
        for (const char* stem : {"train", "test"}) {
            const int n = stem[1] == 'r' ? 6 : 4;
            std::vector<std::uint8_t> x(static_cast<std::size_t>(n) * 3 * 96 * 96);
            for (auto& p : x) p = static_cast<std::uint8_t>(rng.uniform_index(256));
            std::vector<std::uint8_t> y;
            for (int i = 0; i < n; ++i) y.push_back(static_cast<std::uint8_t>(1 + (i % 10)));
            write_file_bytes(root / "stl10" / "stl10_binary" / (std::string(stem) + "_X.bin"), x.data(),
                             x.size());
            write_file_bytes(root / "stl10" / "stl10_binary" / (std::string(stem) + "_y.bin"), y.data(),
                             y.size());
        }
    }
    return root;
}

}  // namespace dta::testing
