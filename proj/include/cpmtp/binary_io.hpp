// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/errors.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

namespace cpmtp::io {

// Little-endian fixed-width helpers, independent of host byte order.

inline void write_u32(std::ostream& out, std::uint32_t v)
{
    std::array<char, 4> b{};
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<char>((v >> (8 * i)) & 0xFFU);
    }
    out.write(b.data(), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v)
{
    std::array<char, 8> b{};
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<char>((v >> (8 * i)) & 0xFFU);
    }
    out.write(b.data(), 8);
}

inline void write_f64(std::ostream& out, double v)
{
    write_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline std::uint32_t read_u32(std::istream& in)
{
    std::array<unsigned char, 4> b{};
    in.read(reinterpret_cast<char*>(b.data()), 4);
    if (!in) {
        throw FormatError("unexpected end of file");
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    }
    return v;
}

inline std::uint64_t read_u64(std::istream& in)
{
    std::array<unsigned char, 8> b{};
    in.read(reinterpret_cast<char*>(b.data()), 8);
    if (!in) {
        throw FormatError("unexpected end of file");
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    }
    return v;
}

inline double read_f64(std::istream& in)
{
    return std::bit_cast<double>(read_u64(in));
}

} // namespace cpmtp::io
