#pragma once

// Binary and text file plumbing.
//
// Binary artifacts share one frame: an 8-byte magic, a little-endian payload,
// and a trailing CRC-32 of the payload.  A wrong magic or unknown version
// raises version_error; a bad CRC or short file raises checksum_error; plain
// filesystem trouble raises io_error.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

namespace mcam {

class io_error : public std::runtime_error {
 public:
  explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

class version_error : public io_error {
 public:
  explicit version_error(const std::string& what) : io_error(what) {}
};

class checksum_error : public io_error {
 public:
  explicit checksum_error(const std::string& what) : io_error(what) {}
};

namespace detail {

inline uint32_t crc32_of(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt chunks; feed large buffers piecewise.
  size_t off = 0;
  while (off < bytes.size()) {
    const size_t chunk = std::min<size_t>(bytes.size() - off, 1u << 30);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(chunk));
    off += chunk;
  }
  return static_cast<uint32_t>(crc);
}

// Append-only little-endian encoder.
class ByteWriter {
 public:
  void u8(uint8_t v) { bytes_.push_back(v); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

// Bounds-checked little-endian decoder; overruns mean the file was cut short.
class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  void raw(void* p, size_t n) {
    need(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(size_t n) {
    if (bytes_.size() - pos_ < n)
      throw checksum_error("file truncated: wanted " + std::to_string(n) + " more bytes, have " +
                           std::to_string(bytes_.size() - pos_));
  }
  std::span<const unsigned char> bytes_;
  size_t pos_ = 0;
};

}  // namespace detail

// magic(8) + payload + crc32(payload).
inline void write_framed_file(const std::filesystem::path& path, const char (&magic)[9],
                              std::span<const unsigned char> payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out.write(magic, 8);
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  const uint32_t crc = detail::crc32_of(payload);
  unsigned char tail[4];
  for (int i = 0; i < 4; ++i) tail[i] = static_cast<unsigned char>(crc >> (8 * i));
  out.write(reinterpret_cast<const char*>(tail), 4);
  if (!out) throw io_error("short write to " + path.string());
}

// Verifies magic and CRC, returns the payload bytes.
inline std::vector<unsigned char> read_framed_file(const std::filesystem::path& path,
                                                   const char (&magic)[9]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::vector<unsigned char> all((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (all.size() < 12)
    throw checksum_error(path.string() + ": file shorter than frame (" +
                         std::to_string(all.size()) + " bytes)");
  if (std::memcmp(all.data(), magic, 8) != 0)
    throw version_error(path.string() + ": magic mismatch, not a " +
                        std::string(magic, magic + 7) + " file");
  const std::span<const unsigned char> payload(all.data() + 8, all.size() - 12);
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<uint32_t>(all[all.size() - 4 + static_cast<size_t>(i)]) << (8 * i);
  const uint32_t computed = detail::crc32_of(payload);
  if (stored != computed)
    throw checksum_error(path.string() + ": CRC mismatch (stored " + std::to_string(stored) +
                         ", computed " + std::to_string(computed) + ")");
  return {payload.begin(), payload.end()};
}

// Binary 8-bit PGM (P5).
inline void write_pgm(const std::filesystem::path& path, int64_t width, int64_t height,
                      std::span<const uint8_t> pixels) {
  if (static_cast<int64_t>(pixels.size()) != width * height)
    throw std::invalid_argument("write_pgm: " + std::to_string(pixels.size()) +
                                " pixels for " + std::to_string(width) + "x" +
                                std::to_string(height));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw io_error("short write to " + path.string());
}

// Shortest decimal form that round-trips the exact double (%.17g is always
// exact; shorter precisions are used when they parse back bit-identically).
inline std::string format_double(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out << contents;
  if (!out) throw io_error("short write to " + path.string());
}

}  // namespace mcam
