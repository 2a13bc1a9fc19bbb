#ifndef EMBDISTILL_IO_UTIL_HPP
#define EMBDISTILL_IO_UTIL_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "embdistill/errors.hpp"

namespace embd::io {

// All on-disk integers and floats are little-endian. These helpers write the
// byte stream explicitly so the format does not depend on host layout.

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }

    void require(std::size_t bytes, const std::string& what) const {
        if (pos_ + bytes > size_) {
            throw FormatError("truncated payload while reading " + what, pos_);
        }
    }

    std::uint32_t u32(const std::string& what) {
        require(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64(const std::string& what) {
        require(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    float f32(const std::string& what) {
        const std::uint32_t v = u32(what);
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }

    void bytes(void* dst, std::size_t count, const std::string& what) {
        require(count, what);
        std::memcpy(dst, data_ + pos_, count);
        pos_ += count;
    }

    void skip(std::size_t count) { pos_ += count; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open file: " + path);
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> buf(size);
    if (size > 0) in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
    if (!in) throw FormatError("failed reading file: " + path);
    return buf;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open file for writing: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing file: " + path);
}

}  // namespace embd::io

#endif
