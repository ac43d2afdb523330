#pragma once

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "dta/compress.hpp"
#include "dta/errors.hpp"
#include "dta/hash.hpp"

namespace dta {

/// One downloadable artifact: where it comes from, its published md5, where
/// it lands under data_root, and how to unpack it.
struct RemoteFile {
    std::string url;
    std::string md5;
    std::string dest;  // relative to data_root
    enum class Post { none, bunzip2, untar_gz } post = Post::none;
    std::vector<std::string> outputs;  // final artifacts (relative), for cache hits
};

struct DatasetSpec {
    std::string name;
    std::vector<RemoteFile> files;
};

/// The five small-image datasets with their canonical mirrors and md5s.
inline const std::vector<DatasetSpec>& dataset_registry() {
    using P = RemoteFile::Post;
    static const std::vector<DatasetSpec> specs = {
        {"mnist",
         {{"https://ossci-datasets.s3.amazonaws.com/mnist/train-images-idx3-ubyte.gz",
           "f68b3c2dcbeaaa9fbdd348bbdeb94873", "mnist/train-images-idx3-ubyte.gz", P::none,
           {"mnist/train-images-idx3-ubyte.gz"}},
          {"https://ossci-datasets.s3.amazonaws.com/mnist/train-labels-idx1-ubyte.gz",
           "d53e105ee54ea40749a09fcbcd1e9432", "mnist/train-labels-idx1-ubyte.gz", P::none,
           {"mnist/train-labels-idx1-ubyte.gz"}},
          {"https://ossci-datasets.s3.amazonaws.com/mnist/t10k-images-idx3-ubyte.gz",
           "9fb629c4189551a2d022fa330f9573f3", "mnist/t10k-images-idx3-ubyte.gz", P::none,
           {"mnist/t10k-images-idx3-ubyte.gz"}},
          {"https://ossci-datasets.s3.amazonaws.com/mnist/t10k-labels-idx1-ubyte.gz",
           "ec29112dd5afa0611ce80d1b7f02629c", "mnist/t10k-labels-idx1-ubyte.gz", P::none,
           {"mnist/t10k-labels-idx1-ubyte.gz"}}}},
        {"usps",
         {{"https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/multiclass/usps.bz2",
           "ec16c51db3855ca6c91edd34d0e9b197", "usps/usps.bz2", P::bunzip2, {"usps/usps"}},
          {"https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/multiclass/usps.t.bz2",
           "8ea070ee2aca1ac39742fdd1ef5ed118", "usps/usps.t.bz2", P::bunzip2, {"usps/usps.t"}}}},
        {"svhn",
         {{"http://ufldl.stanford.edu/housenumbers/train_32x32.mat",
           "e26dedcc434d2e4c54c9b2d4a06d8373", "svhn/train_32x32.mat", P::none,
           {"svhn/train_32x32.mat"}},
          {"http://ufldl.stanford.edu/housenumbers/test_32x32.mat",
           "eb5a983be6a315427106f1b164d9cef3", "svhn/test_32x32.mat", P::none,
           {"svhn/test_32x32.mat"}}}},
        {"cifar10",
         {{"https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
           "c32a1d4ab5d03f1284b67883e8d87530", "cifar10/cifar-10-binary.tar.gz", P::untar_gz,
           {"cifar10/cifar-10-batches-bin/data_batch_1.bin",
            "cifar10/cifar-10-batches-bin/test_batch.bin"}}}},
        {"stl10",
         {{"http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz",
           "91f7769df0f17e558f3565bffb0c7dfb", "stl10/stl10_binary.tar.gz", P::untar_gz,
           {"stl10/stl10_binary/train_X.bin", "stl10/stl10_binary/test_X.bin"}}}}};
    return specs;
}

inline const DatasetSpec& dataset_spec(const std::string& name) {
    for (const auto& s : dataset_registry())
        if (s.name == name) return s;
    throw std::invalid_argument("fetch: unknown dataset '" + name + "'");
}

inline bool file_cached(const RemoteFile& f, const std::filesystem::path& data_root) {
    for (const auto& out : f.outputs)
        if (!std::filesystem::exists(data_root / out)) return false;
    return true;
}

/// Verifies a downloaded archive and unpacks it. Throws io_error on a
/// checksum mismatch after removing the corrupt file.
inline void verify_and_unpack(const RemoteFile& f, const std::filesystem::path& data_root,
                              std::ostream& log) {
    const std::filesystem::path archive = data_root / f.dest;
    const auto bytes = read_file_bytes(archive);
    const std::string digest = Md5::of(bytes);
    if (digest != f.md5) {
        std::filesystem::remove(archive);
        throw io_error("checksum mismatch for " + archive.string() + " (got " + digest +
                       ", expected " + f.md5 + "); partial file removed");
    }
    switch (f.post) {
        case RemoteFile::Post::none: break;
        case RemoteFile::Post::bunzip2: {
            // No in-tree bzip2 decoder; defer to the system tool.
            const std::string cmd = "bzip2 -dkf '" + archive.string() + "'";
            log << "  unpack: " << cmd << "\n";
            if (std::system(cmd.c_str()) != 0)
                throw io_error("bzip2 failed on " + archive.string() +
                               " (is the bzip2 tool installed?)");
            break;
        }
        case RemoteFile::Post::untar_gz: {
            log << "  unpack: " << archive.string() << "\n";
            extract_tar(gunzip_bytes(bytes), archive.parent_path());
            break;
        }
    }
    for (const auto& out : f.outputs)
        if (!std::filesystem::exists(data_root / out))
            throw io_error("unpacking " + archive.string() + " did not produce " +
                           (data_root / out).string());
}

/// Downloader callback: (url, destination path) -> success. The CLI passes
/// an HTTP client; tests can inject fakes.
using Downloader = std::function<bool(const std::string&, const std::filesystem::path&)>;

/// Fetches one dataset into data_root. Existing verified outputs are a
/// no-op cache hit. Returns the number of files downloaded.
inline int fetch_dataset(const DatasetSpec& spec, const std::filesystem::path& data_root,
                         const Downloader& download, std::ostream& log) {
    int downloaded = 0;
    for (const RemoteFile& f : spec.files) {
        if (file_cached(f, data_root)) {
            log << "  " << f.dest << ": cached\n";
            continue;
        }
        const std::filesystem::path archive = data_root / f.dest;
        std::filesystem::create_directories(archive.parent_path());
        if (!std::filesystem::exists(archive)) {
            log << "  " << f.url << " -> " << archive.string() << "\n";
            if (!download(f.url, archive)) {
                std::error_code ec;
                std::filesystem::remove(archive, ec);
                throw io_error("download failed: " + f.url);
            }
            ++downloaded;
        }
        verify_and_unpack(f, data_root, log);
    }
    return downloaded;
}

inline int fetch_dataset(const std::string& name, const std::filesystem::path& data_root,
                         const Downloader& download, std::ostream& log) {
    return fetch_dataset(dataset_spec(name), data_root, download, log);
}

}  // namespace dta
