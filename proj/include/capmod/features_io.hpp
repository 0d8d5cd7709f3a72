#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "capmod/errors.hpp"
#include "capmod/tensor.hpp"

namespace capmod {

// Binary feature matrix files:
//   magic "LAMF" | version u32 LE | ndims u32 LE | dims u64 LE each |
//   payload f32 LE row-major.
inline constexpr std::uint32_t kFeatureFileVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

// Cursor over a loaded buffer, reporting the byte offset on any failure.
struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;
    const std::string& path;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw IoError(path + ": truncated " + what + " at byte offset " +
                          std::to_string(pos) + " (file size " + std::to_string(buf.size()) + ")");
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return buf;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path);
}

}  // namespace detail

struct FeatureMatrix {
    Shape shape;
    std::vector<float> data;
};

inline std::string encode_features(const Shape& shape, const std::vector<float>& data) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("feature encode: shape " + shape_str(shape) + " vs " +
                         std::to_string(data.size()) + " values");
    std::string out;
    out.reserve(16 + 8 * shape.size() + 4 * data.size());
    out += "LAMF";
    detail::put_u32(out, kFeatureFileVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) detail::put_u64(out, d);
    for (float v : data) detail::put_f32(out, v);
    return out;
}

inline void write_features(const std::string& path, const Shape& shape,
                           const std::vector<float>& data) {
    detail::write_file_bytes(path, encode_features(shape, data));
}

inline FeatureMatrix read_features(const std::string& path) {
    std::string buf = detail::read_file_bytes(path);
    detail::ByteReader r{buf, 0, path};
    r.need(4, "magic");
    if (buf.compare(0, 4, "LAMF") != 0)
        throw IoError(path + ": bad magic at byte offset 0 (expected LAMF)");
    r.pos = 4;
    std::uint32_t version = r.u32("version");
    if (version != kFeatureFileVersion)
        throw IoError(path + ": unsupported version " + std::to_string(version) +
                      " at byte offset 4");
    std::uint32_t ndims = r.u32("ndims");
    if (ndims > 8) throw IoError(path + ": implausible ndims " + std::to_string(ndims) +
                                 " at byte offset 8");
    Shape shape;
    std::uint64_t total = 1;
    for (std::uint32_t i = 0; i < ndims; ++i) {
        std::uint64_t d = r.u64("dims");
        if (d > (1ull << 32) || (d != 0 && total > (1ull << 32) / std::max<std::uint64_t>(d, 1)))
            throw IoError(path + ": dim overflow at byte offset " + std::to_string(r.pos - 8));
        total *= d;
        shape.push_back(static_cast<std::size_t>(d));
    }
    std::size_t payload_bytes = static_cast<std::size_t>(total) * 4;
    if (buf.size() - r.pos != payload_bytes)
        throw IoError(path + ": payload size mismatch at byte offset " + std::to_string(r.pos) +
                      " (expected " + std::to_string(payload_bytes) + " bytes, have " +
                      std::to_string(buf.size() - r.pos) + ")");
    FeatureMatrix m;
    m.shape = std::move(shape);
    m.data.resize(static_cast<std::size_t>(total));
    for (auto& v : m.data) v = r.f32("payload");
    return m;
}

template <typename Real>
Tensor<Real> features_to_tensor(const FeatureMatrix& m) {
    std::vector<Real> vals(m.data.size());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<Real>(m.data[i]);
    return Tensor<Real>(m.shape, std::move(vals));
}

}  // namespace capmod
