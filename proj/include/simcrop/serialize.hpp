#pragma once

// Little-endian binary encoding shared by SVOL, checkpoint and feature files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "simcrop/error.hpp"
#include "simcrop/tensor.hpp"

namespace simcrop::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Writer {
public:
    template <class V>
        requires std::is_arithmetic_v<V>
    void put(V v) {
        char buf[sizeof(V)];
        std::memcpy(buf, &v, sizeof(V));
        bytes_.append(buf, sizeof(V));
    }
    void put_bytes(std::string_view s) { bytes_.append(s); }
    void put_string(std::string_view s) {
        put(static_cast<std::uint32_t>(s.size()));
        bytes_.append(s);
    }
    template <class V>
    void put_array(const V* p, std::size_t n) {
        bytes_.append(reinterpret_cast<const char*>(p), n * sizeof(V));
    }

    const std::string& bytes() const { return bytes_; }

    void write_file(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError(FormatErrc::io, "cannot open " + path + " for writing");
        f.write(bytes_.data(), static_cast<std::streamsize>(bytes_.size()));
        if (!f) throw FormatError(FormatErrc::io, "write failed for " + path);
    }

private:
    std::string bytes_;
};

class Reader {
public:
    explicit Reader(std::string bytes, std::string origin = "<memory>")
        : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

    static Reader from_file(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw FormatError(FormatErrc::io, "cannot open " + path);
        std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return Reader(std::move(s), path);
    }

    template <class V>
        requires std::is_arithmetic_v<V>
    V get() {
        need(sizeof(V));
        V v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
        pos_ += sizeof(V);
        return v;
    }
    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::string get_string() { return get_bytes(get<std::uint32_t>()); }
    template <class V>
    void get_array(V* p, std::size_t n) {
        need(n * sizeof(V));
        std::memcpy(p, bytes_.data() + pos_, n * sizeof(V));
        pos_ += n * sizeof(V);
    }

    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& origin() const { return origin_; }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n)
            throw FormatError(FormatErrc::truncated,
                              origin_ + ": needed " + std::to_string(n) + " bytes at offset " +
                                  std::to_string(pos_));
    }

    std::string bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

template <class T>
constexpr std::uint8_t dtype_code() {
    return std::is_same_v<T, float> ? 0 : 1;
}

/// u8 dtype, u32 rank, u32 extents..., raw little-endian scalars.
template <class T>
void write_tensor(Writer& w, const Tensor<T>& t) {
    w.put(dtype_code<T>());
    w.put(static_cast<std::uint32_t>(t.dim()));
    for (auto e : t.shape()) w.put(static_cast<std::uint32_t>(e));
    w.put_array(t.data().data(), t.size());
}

template <class T>
Tensor<T> read_tensor(Reader& r) {
    auto code = r.get<std::uint8_t>();
    if (code != dtype_code<T>())
        throw FormatError(FormatErrc::corrupt, r.origin() + ": tensor dtype " +
                                                   std::to_string(code) + " does not match build");
    auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8)
        throw FormatError(FormatErrc::corrupt, r.origin() + ": bad tensor rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
        e = r.get<std::uint32_t>();
        if (e == 0) throw FormatError(FormatErrc::corrupt, r.origin() + ": zero tensor extent");
        n *= e;
    }
    if (n * sizeof(T) > r.remaining())
        throw FormatError(FormatErrc::truncated, r.origin() + ": tensor payload");
    std::vector<T> data(n);
    r.get_array(data.data(), n);
    return Tensor<T>(std::move(shape), std::move(data));
}

/// FNV-1a 64-bit.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

} // namespace simcrop::io
