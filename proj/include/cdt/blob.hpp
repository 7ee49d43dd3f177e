#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cdt/tensor.hpp"
#include "cdt/util.hpp"

namespace cdt {

static_assert(std::endian::native == std::endian::little,
              "CDTT serialization assumes a little-endian host");

// CDTT tensor blob: magic "CDTT", u8 version=1, u8 dtype (1=f32, 2=f64),
// u8 rank, u8 reserved=0, rank x u64 little-endian dims, row-major payload.
namespace blob_detail {

template <typename T>
constexpr std::uint8_t dtype_code() {
    if constexpr (std::is_same_v<T, float>) return 1;
    else {
        static_assert(std::is_same_v<T, double>, "CDTT supports float and double");
        return 2;
    }
}

inline void append_raw(std::string& s, const void* p, std::size_t n) {
    s.append(static_cast<const char*>(p), n);
}

template <typename U>
U read_raw(const std::string& s, std::size_t& off) {
    if (off + sizeof(U) > s.size()) throw IoError("CDTT blob truncated");
    U u;
    std::memcpy(&u, s.data() + off, sizeof(U));
    off += sizeof(U);
    return u;
}

}  // namespace blob_detail

template <typename T>
std::string encode_blob(const TensorPtr<T>& t) {
    std::string s;
    s.reserve(8 + 8 * t->rank() + t->numel() * sizeof(T));
    s.append("CDTT", 4);
    const std::uint8_t version = 1, dtype = blob_detail::dtype_code<T>(),
                       rank = static_cast<std::uint8_t>(t->rank()), reserved = 0;
    s.push_back(static_cast<char>(version));
    s.push_back(static_cast<char>(dtype));
    s.push_back(static_cast<char>(rank));
    s.push_back(static_cast<char>(reserved));
    for (const std::size_t d : t->shape) {
        const std::uint64_t d64 = d;
        blob_detail::append_raw(s, &d64, 8);
    }
    blob_detail::append_raw(s, t->v.data(), t->v.size() * sizeof(T));
    return s;
}

struct BlobHeader {
    std::uint8_t dtype;
    std::vector<std::size_t> shape;
    std::size_t payload_offset;
};

inline BlobHeader decode_blob_header(const std::string& s) {
    std::size_t off = 0;
    if (s.size() < 8 || s.compare(0, 4, "CDTT") != 0)
        throw IoError("not a CDTT blob (bad magic)");
    off = 4;
    const auto version = blob_detail::read_raw<std::uint8_t>(s, off);
    if (version != 1) throw IoError("unsupported CDTT version " + std::to_string(version));
    const auto dtype = blob_detail::read_raw<std::uint8_t>(s, off);
    if (dtype != 1 && dtype != 2) throw IoError("unsupported CDTT dtype " + std::to_string(dtype));
    const auto rank = blob_detail::read_raw<std::uint8_t>(s, off);
    blob_detail::read_raw<std::uint8_t>(s, off);  // reserved
    BlobHeader h;
    h.dtype = dtype;
    for (std::uint8_t i = 0; i < rank; ++i)
        h.shape.push_back(static_cast<std::size_t>(blob_detail::read_raw<std::uint64_t>(s, off)));
    h.payload_offset = off;
    return h;
}

// Exact-dtype decode; use decode_blob_as to convert.
template <typename T>
TensorPtr<T> decode_blob(const std::string& s) {
    const BlobHeader h = decode_blob_header(s);
    if (h.dtype != blob_detail::dtype_code<T>())
        throw IoError("CDTT dtype mismatch: blob has " + std::to_string(h.dtype) +
                      ", requested " + std::to_string(int(blob_detail::dtype_code<T>())));
    const std::size_t n = detail::shape_numel(h.shape);
    if (s.size() != h.payload_offset + n * sizeof(T)) throw IoError("CDTT payload size mismatch");
    AlignedVec<T> v(n);
    std::memcpy(v.data(), s.data() + h.payload_offset, n * sizeof(T));
    return make_tensor<T>(h.shape, std::move(v));
}

// Decode with dtype conversion (f32 checkpoints promoted to f64 analysis).
template <typename T>
TensorPtr<T> decode_blob_as(const std::string& s) {
    const BlobHeader h = decode_blob_header(s);
    if (h.dtype == blob_detail::dtype_code<T>()) return decode_blob<T>(s);
    const std::size_t n = detail::shape_numel(h.shape);
    AlignedVec<T> v(n);
    if (h.dtype == 1) {
        if (s.size() != h.payload_offset + n * 4) throw IoError("CDTT payload size mismatch");
        const float* p = reinterpret_cast<const float*>(s.data() + h.payload_offset);
        for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<T>(p[i]);
    } else {
        if (s.size() != h.payload_offset + n * 8) throw IoError("CDTT payload size mismatch");
        const double* p = reinterpret_cast<const double*>(s.data() + h.payload_offset);
        for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<T>(p[i]);
    }
    return make_tensor<T>(h.shape, std::move(v));
}

template <typename T>
void write_blob_file(const std::filesystem::path& p, const TensorPtr<T>& t) {
    write_binary_file(p, encode_blob(t));
}

template <typename T>
TensorPtr<T> read_blob_file(const std::filesystem::path& p) {
    return decode_blob<T>(read_binary_file(p));
}

template <typename T>
TensorPtr<T> read_blob_file_as(const std::filesystem::path& p) {
    return decode_blob_as<T>(read_binary_file(p));
}

// Checkpoint container: magic "CDTC", u32 version=1, u64 header length, JSON
// header bytes, u32 blob count, then (u16 name length, name, u64 blob length,
// CDTT blob) per tensor. Header carries config, seed, epoch.
struct CheckpointFile {
    std::string header_json;
    std::vector<std::pair<std::string, std::string>> blobs;  // name -> CDTT bytes
};

inline void write_checkpoint_file(const std::filesystem::path& p, const CheckpointFile& c) {
    std::string s;
    s.append("CDTC", 4);
    const std::uint32_t version = 1;
    blob_detail::append_raw(s, &version, 4);
    const std::uint64_t hlen = c.header_json.size();
    blob_detail::append_raw(s, &hlen, 8);
    s += c.header_json;
    const std::uint32_t count = static_cast<std::uint32_t>(c.blobs.size());
    blob_detail::append_raw(s, &count, 4);
    for (const auto& [name, bytes] : c.blobs) {
        const std::uint16_t nlen = static_cast<std::uint16_t>(name.size());
        blob_detail::append_raw(s, &nlen, 2);
        s += name;
        const std::uint64_t blen = bytes.size();
        blob_detail::append_raw(s, &blen, 8);
        s += bytes;
    }
    write_binary_file(p, s);
}

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& p) {
    const std::string s = read_binary_file(p);
    std::size_t off = 0;
    if (s.size() < 16 || s.compare(0, 4, "CDTC") != 0)
        throw IoError("not a checkpoint file (bad magic): " + p.string());
    off = 4;
    const auto version = blob_detail::read_raw<std::uint32_t>(s, off);
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const auto hlen = blob_detail::read_raw<std::uint64_t>(s, off);
    if (off + hlen > s.size()) throw IoError("checkpoint header truncated");
    CheckpointFile c;
    c.header_json = s.substr(off, hlen);
    off += hlen;
    const auto count = blob_detail::read_raw<std::uint32_t>(s, off);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = blob_detail::read_raw<std::uint16_t>(s, off);
        if (off + nlen > s.size()) throw IoError("checkpoint name truncated");
        std::string name = s.substr(off, nlen);
        off += nlen;
        const auto blen = blob_detail::read_raw<std::uint64_t>(s, off);
        if (off + blen > s.size()) throw IoError("checkpoint blob truncated");
        c.blobs.emplace_back(std::move(name), s.substr(off, blen));
        off += blen;
    }
    return c;
}

}  // namespace cdt
