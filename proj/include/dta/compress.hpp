#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "dta/errors.hpp"

namespace dta {

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw io_error("short read on " + path.string());
    return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::uint8_t* data,
                             std::size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw io_error("short write on " + path.string());
}

/// Inflates a zlib (window_bits=15), gzip (15+16) or raw deflate (-15)
/// stream.
inline std::vector<std::uint8_t> inflate_bytes(const std::uint8_t* data, std::size_t n,
                                               int window_bits = 15) {
    z_stream zs{};
    if (inflateInit2(&zs, window_bits) != Z_OK) throw io_error("inflateInit failed");
    std::vector<std::uint8_t> out;
    out.reserve(n * 4);
    std::uint8_t buf[1 << 15];
    zs.next_in = const_cast<Bytef*>(data);
    zs.avail_in = static_cast<uInt>(n);
    int rc = Z_OK;
    do {
        zs.next_out = buf;
        zs.avail_out = sizeof(buf);
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw io_error("corrupt compressed stream (zlib rc " + std::to_string(rc) + ")");
        }
        out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
    } while (rc != Z_STREAM_END && (zs.avail_in > 0 || zs.avail_out == 0));
    inflateEnd(&zs);
    if (rc != Z_STREAM_END) throw io_error("truncated compressed stream");
    return out;
}

inline std::vector<std::uint8_t> gunzip_bytes(const std::vector<std::uint8_t>& data) {
    return inflate_bytes(data.data(), data.size(), 15 + 16);
}

/// Deflates to gzip format (test fixtures and cache writing).
inline std::vector<std::uint8_t> gzip_bytes(const std::uint8_t* data, std::size_t n) {
    z_stream zs{};
    if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw io_error("deflateInit failed");
    std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(n)));
    zs.next_in = const_cast<Bytef*>(data);
    zs.avail_in = static_cast<uInt>(n);
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    if (deflate(&zs, Z_FINISH) != Z_STREAM_END) {
        deflateEnd(&zs);
        throw io_error("deflate failed");
    }
    out.resize(out.size() - zs.avail_out);
    deflateEnd(&zs);
    return out;
}

/// Reads a file that may be gzip-compressed (by magic, not extension).
inline std::vector<std::uint8_t> read_maybe_gzipped(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip_bytes(bytes);
    return bytes;
}

/// Minimal ustar extraction: writes every regular file in the archive under
/// dest, creating directories as needed.
inline void extract_tar(const std::vector<std::uint8_t>& tar, const std::filesystem::path& dest) {
    std::size_t off = 0;
    while (off + 512 <= tar.size()) {
        const std::uint8_t* hdr = tar.data() + off;
        if (hdr[0] == 0) break;  // end-of-archive zero block
        char name[101] = {};
        std::memcpy(name, hdr, 100);
        char size_oct[13] = {};
        std::memcpy(size_oct, hdr + 124, 12);
        const std::size_t size = static_cast<std::size_t>(std::strtoull(size_oct, nullptr, 8));
        const char type = static_cast<char>(hdr[156]);
        off += 512;
        if (type == '0' || type == 0) {
            if (off + size > tar.size()) throw io_error("truncated tar archive");
            const std::filesystem::path out = dest / name;
            std::filesystem::create_directories(out.parent_path());
            write_file_bytes(out, tar.data() + off, size);
        }
        off += (size + 511) / 512 * 512;
    }
}

}  // namespace dta
