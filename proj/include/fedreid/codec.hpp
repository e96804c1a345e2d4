#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedreid/errors.hpp"
#include "fedreid/param_block.hpp"

namespace fedreid {

static_assert(std::endian::native == std::endian::little, "codec assumes a little-endian host");

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for large buffers.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const std::size_t n = std::min(kChunk, bytes.size() - off);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(v); }
  void f64s(std::span<const double> vs) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(vs.data());
    buf_.insert(buf_.end(), p, p + vs.size_bytes());
  }
  void bytes(std::span<const std::uint8_t> bs) { buf_.insert(buf_.end(), bs.begin(), bs.end()); }
  void text(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  // Appends the CRC32 of everything written from `from` onwards.
  void crc_from(std::size_t from) { u32(crc32_of(std::span(buf_).subspan(from))); }

  std::size_t size() const noexcept { return buf_.size(); }
  std::vector<std::uint8_t>& buffer() noexcept { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  template <typename T>
  void put(T v) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf_.insert(buf_.end(), raw, raw + sizeof(T));
  }

  std::vector<std::uint8_t> buf_;
};

// Bounds-checked little-endian reader. Running past the end throws
// FormatError(TruncatedPayload).
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }
  void f64s(std::span<double> out) {
    need(out.size_bytes());
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t n) const {
    if (n > remaining()) {
      throw FormatError(FormatError::Kind::TruncatedPayload,
                        concat_message("truncated payload: need ", n, " bytes, have ", remaining()));
    }
  }

 private:
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

// Shape header (layer count, then rows/cols/bias triples) followed by the values.
inline void write_param_block(ByteWriter& w, const ParamBlock& p) {
  w.u32(static_cast<std::uint32_t>(p.layer_count()));
  for (const auto& s : p.shapes()) {
    w.u32(static_cast<std::uint32_t>(s.rows));
    w.u32(static_cast<std::uint32_t>(s.cols));
    w.u32(static_cast<std::uint32_t>(s.bias));
  }
  w.f64s(p.values());
}

inline ParamBlock read_param_block(ByteReader& r) {
  const std::uint32_t layers = r.u32();
  r.need(static_cast<std::size_t>(layers) * 12);
  std::vector<LayerShape> shapes(layers);
  std::size_t total = 0;
  for (auto& s : shapes) {
    s.rows = r.u32();
    s.cols = r.u32();
    s.bias = r.u32();
    total += s.size();
  }
  r.need(total * sizeof(double));
  std::vector<double> values(total);
  r.f64s(values);
  return ParamBlock(std::move(shapes), std::move(values));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing " + path);
}

// Checks the 4-byte magic and the trailing CRC32 of a whole-file container.
// Returns a reader positioned after the magic, limited to the body.
inline ByteReader open_container(std::span<const std::uint8_t> bytes, std::string_view magic) {
  if (bytes.size() < magic.size()) {
    throw FormatError(FormatError::Kind::TruncatedPayload, "file too short for header");
  }
  if (std::memcmp(bytes.data(), magic.data(), magic.size()) != 0) {
    throw FormatError(FormatError::Kind::MalformedHeader, "bad magic bytes, expected " + std::string(magic));
  }
  if (bytes.size() < magic.size() + 4) {
    throw FormatError(FormatError::Kind::TruncatedPayload, "file too short for checksum");
  }
  return ByteReader(bytes.subspan(magic.size(), bytes.size() - magic.size() - 4));
}

inline void verify_container_crc(std::span<const std::uint8_t> bytes) {
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4));
  if (crc32_of(body) != tail.u32()) {
    throw FormatError(FormatError::Kind::ChecksumMismatch, "checksum mismatch");
  }
}

}  // namespace fedreid
