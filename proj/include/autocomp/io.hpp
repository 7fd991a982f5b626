#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "autocomp/error.hpp"

namespace autocomp {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian and this code assumes a little-endian host");

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    require(os.good(), "io.write", "write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n, const std::string& what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    require(is.gcount() == static_cast<std::streamsize>(n), "io.truncated",
            "unexpected end of file while reading " + what);
}

template <typename U>
void write_scalar(std::ostream& os, U v) {
    write_bytes(os, &v, sizeof(U));
}

template <typename U>
U read_scalar(std::istream& is, const std::string& what) {
    U v;
    read_bytes(is, &v, sizeof(U), what);
    return v;
}

inline std::ofstream open_out(const std::string& path, bool binary = true) {
    std::ofstream os(path, binary ? std::ios::binary : std::ios::out);
    require(os.is_open(), "io.open", "cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_in(const std::string& path, bool binary = true) {
    std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
    require(is.is_open(), "io.open", "cannot open for reading: " + path);
    return is;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream is = open_in(path, false);
    std::string out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os = open_out(path, false);
    os << text;
    require(os.good(), "io.write", "write failed: " + path);
}

}  // namespace autocomp
