#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "dta/compress.hpp"
#include "dta/errors.hpp"

namespace dta {

/// A numeric MATLAB array: dimensions in column-major order. uint8 data
/// stays as raw bytes (image tensors are large); anything else widens to
/// double.
struct MatArray {
    std::vector<int> dims;
    std::vector<std::uint8_t> bytes;  // set iff the stored type is uint8
    std::vector<double> values;       // otherwise

    bool is_bytes() const { return !bytes.empty(); }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int d : dims) n *= d;
        return n;
    }

    double at(std::int64_t i) const {
        return is_bytes() ? static_cast<double>(bytes[static_cast<std::size_t>(i)])
                          : values[static_cast<std::size_t>(i)];
    }
};

namespace detail {

inline std::uint32_t rd_u32(const std::uint8_t* p) {
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    return v;
}

// MAT 5 data types.
inline constexpr std::uint32_t kMiInt8 = 1, kMiUInt8 = 2, kMiInt16 = 3, kMiUInt16 = 4,
                               kMiInt32 = 5, kMiUInt32 = 6, kMiSingle = 7, kMiDouble = 9,
                               kMiMatrix = 14, kMiCompressed = 15;

inline std::size_t mi_size(std::uint32_t type) {
    switch (type) {
        case kMiInt8:
        case kMiUInt8: return 1;
        case kMiInt16:
        case kMiUInt16: return 2;
        case kMiInt32:
        case kMiUInt32: return 4;
        case kMiSingle: return 4;
        case kMiDouble: return 8;
        default: throw io_error("mat: unsupported element type " + std::to_string(type));
    }
}

inline double mi_value(std::uint32_t type, const std::uint8_t* p) {
    switch (type) {
        case kMiInt8: return static_cast<double>(*reinterpret_cast<const std::int8_t*>(p));
        case kMiUInt8: return static_cast<double>(*p);
        case kMiInt16: {
            std::int16_t v;
            std::memcpy(&v, p, 2);
            return v;
        }
        case kMiUInt16: {
            std::uint16_t v;
            std::memcpy(&v, p, 2);
            return v;
        }
        case kMiInt32: {
            std::int32_t v;
            std::memcpy(&v, p, 4);
            return v;
        }
        case kMiUInt32: {
            std::uint32_t v;
            std::memcpy(&v, p, 4);
            return v;
        }
        case kMiSingle: {
            float v;
            std::memcpy(&v, p, 4);
            return v;
        }
        case kMiDouble: {
            double v;
            std::memcpy(&v, p, 8);
            return v;
        }
        default: throw io_error("mat: unsupported element type");
    }
}

struct MatElement {
    std::uint32_t type = 0;
    const std::uint8_t* data = nullptr;
    std::size_t size = 0;
    std::size_t total = 0;  // bytes consumed including tag and padding
};

/// Parses one tagged element at p, handling the small-data (packed) format.
inline MatElement parse_element(const std::uint8_t* p, std::size_t avail) {
    if (avail < 8) throw io_error("mat: truncated element tag");
    MatElement e;
    const std::uint32_t raw_type = rd_u32(p);
    if (raw_type >> 16) {  // small data element: size lives in the high half
        e.type = raw_type & 0xffff;
        e.size = raw_type >> 16;
        e.data = p + 4;
        e.total = 8;
    } else {
        e.type = raw_type;
        e.size = rd_u32(p + 4);
        e.data = p + 8;
        e.total = 8 + (e.size + 7) / 8 * 8;
    }
    if (e.total > avail) throw io_error("mat: element overruns file");
    return e;
}

inline void parse_matrix(const std::uint8_t* p, std::size_t n, std::map<std::string, MatArray>& out) {
    std::size_t off = 0;
    auto next = [&]() {
        MatElement e = parse_element(p + off, n - off);
        off += e.total;
        return e;
    };
    MatElement flags = next();  // array flags (class, complexity)
    (void)flags;
    MatElement dims = next();
    MatElement name = next();
    MatElement data = next();

    MatArray arr;
    const int ndim = static_cast<int>(dims.size / 4);
    for (int i = 0; i < ndim; ++i) {
        std::int32_t d;
        std::memcpy(&d, dims.data + 4 * i, 4);
        arr.dims.push_back(d);
    }
    const std::size_t width = mi_size(data.type);
    const std::size_t count = data.size / width;
    if (data.type == kMiUInt8) {
        arr.bytes.assign(data.data, data.data + count);
    } else {
        arr.values.resize(count);
        for (std::size_t i = 0; i < count; ++i)
            arr.values[i] = mi_value(data.type, data.data + i * width);
    }

    out.emplace(std::string(reinterpret_cast<const char*>(name.data), name.size), std::move(arr));
}

inline void parse_elements(const std::uint8_t* p, std::size_t n, std::map<std::string, MatArray>& out) {
    std::size_t off = 0;
    while (off + 8 <= n) {
        MatElement e = parse_element(p + off, n - off);
        if (e.type == kMiCompressed) {
            auto inflated = inflate_bytes(e.data, e.size, 15);
            parse_elements(inflated.data(), inflated.size(), out);
        } else if (e.type == kMiMatrix) {
            parse_matrix(e.data, e.size, out);
        }
        off += e.total;
    }
}

}  // namespace detail

/// Reads the numeric arrays of a MAT 5 file (the SVHN cropped-digit format:
/// a uint8 image tensor "X" and a label vector "y"). Compressed elements
/// are inflated transparently.
inline std::map<std::string, MatArray> read_mat5(const std::filesystem::path& path) {
    auto bytes = read_file_bytes(path);
    if (bytes.size() < 128) throw io_error("mat: header too short in " + path.string());
    const std::uint16_t endian = static_cast<std::uint16_t>(bytes[126] | (bytes[127] << 8));
    if (endian != 0x4d49)  // "IM" read little-endian
        throw io_error("mat: big-endian files are not supported: " + path.string());
    std::map<std::string, MatArray> out;
    detail::parse_elements(bytes.data() + 128, bytes.size() - 128, out);
    return out;
}

}  // namespace dta
