#pragma once

// Little-endian field encoding shared by the volume and checkpoint formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace hft {

/// Raised for malformed, truncated or mismatched files.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace io {

template <class U>
void put_le(std::ostream& os, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) os.put(static_cast<char>((value >> (8 * i)) & 0xff));
}

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }
inline void put_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
inline void put_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
inline void put_f32(std::ostream& os, float v) { put_le(os, std::bit_cast<std::uint32_t>(v)); }

template <class U>
U get_le(std::istream& is, const char* what) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof()) throw FormatError(std::string("truncated file while reading ") + what);
        value |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(c)) << (8 * i));
    }
    return value;
}

inline std::uint8_t get_u8(std::istream& is, const char* what) { return get_le<std::uint8_t>(is, what); }
inline std::uint32_t get_u32(std::istream& is, const char* what) { return get_le<std::uint32_t>(is, what); }
inline std::uint64_t get_u64(std::istream& is, const char* what) { return get_le<std::uint64_t>(is, what); }
inline float get_f32(std::istream& is, const char* what) {
    return std::bit_cast<float>(get_le<std::uint32_t>(is, what));
}

inline void expect_magic(std::istream& is, const std::string& magic, const std::string& path) {
    std::string got(magic.size(), '\0');
    is.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (is.gcount() != static_cast<std::streamsize>(magic.size()) || got != magic)
        throw FormatError(path + ": bad magic, expected \"" + magic + "\"");
}

}  // namespace io
}  // namespace hft
