// SPDX-License-Identifier: Apache-2.0
// Little-endian helpers shared by the binary file formats.
#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "bspde/errors.hpp"

namespace bspde::detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    out.write(bytes, 8);
}

inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t get_u64(std::istream& in, const char* context) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw InvalidArgument(std::string(context) + ": truncated stream");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& in, const char* context) {
    return std::bit_cast<double>(get_u64(in, context));
}

}  // namespace bspde::detail
