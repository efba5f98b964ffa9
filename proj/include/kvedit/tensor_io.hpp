// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "kvedit/errors.hpp"
#include "kvedit/tensor.hpp"

namespace kvedit {

// TNSR layout: "TNSR", u32 rank, rank x u32 dims, float32 payload; all
// little-endian.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& source) {
    const auto offset = static_cast<long long>(is.tellg());
    std::array<unsigned char, 4> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), 4))
        throw IoError(source + ": truncated TNSR data at byte offset " + std::to_string(offset));
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

} // namespace detail

template <class T>
void write_tnsr(std::ostream& os, const Tensor<T>& t) {
    os.write("TNSR", 4);
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (T v : t.values()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

template <class T = float>
Tensor<T> read_tnsr(std::istream& is, const std::string& source = "<stream>") {
    const auto start = static_cast<long long>(is.tellg());
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), 4)) throw IoError(source + ": truncated TNSR header at byte offset " + std::to_string(start));
    if (std::string(magic.data(), 4) != "TNSR")
        throw IoError(source + ": bad TNSR magic at byte offset " + std::to_string(start));
    const std::uint32_t rank = detail::get_u32(is, source);
    if (rank > 16) throw IoError(source + ": implausible TNSR rank " + std::to_string(rank) + " at byte offset " +
                                 std::to_string(start + 4));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
        d = detail::get_u32(is, source);
        count *= d;
        if (count > (std::uint64_t{1} << 32))
            throw IoError(source + ": TNSR payload too large near byte offset " + std::to_string(start));
    }
    std::vector<T> data(static_cast<std::size_t>(count));
    for (auto& v : data) v = static_cast<T>(std::bit_cast<float>(detail::get_u32(is, source)));
    return Tensor<T>(std::move(shape), std::move(data));
}

template <class T>
void save_tnsr(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    write_tnsr(os, t);
    if (!os) throw IoError("write failed: " + path.string());
}

template <class T = float>
Tensor<T> load_tnsr(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    auto t = read_tnsr<T>(is, path.string());
    if (is.peek() != std::char_traits<char>::eof())
        throw IoError(path.string() + ": trailing bytes after TNSR payload at byte offset " +
                      std::to_string(static_cast<long long>(is.tellg())));
    return t;
}

} // namespace kvedit
