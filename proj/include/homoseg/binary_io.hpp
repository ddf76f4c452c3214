#pragma once

// Little-endian binary records with a magic tag, a format version and a
// CRC-32 over the payload. Used by dataset files and checkpoints.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace homoseg::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CorruptError : public FormatError {
 public:
  using FormatError::FormatError;
};

class Writer {
 public:
  template <class T>
    requires std::is_trivially_copyable_v<T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }

  template <class T>
    requires std::is_trivially_copyable_v<T>
  void array(const T* data, std::size_t n) {
    pod<std::uint64_t>(n);
    const auto* p = reinterpret_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n * sizeof(T));
  }

  template <class T, class A>
  void vec(const std::vector<T, A>& v) {
    array(v.data(), v.size());
  }

  const std::vector<char>& bytes() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}

  template <class T>
    requires std::is_trivially_copyable_v<T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  template <class T>
  std::vector<T> vec() {
    const auto n = pod<std::uint64_t>();
    if (n > (buf_.size() - pos_) / sizeof(T)) throw CorruptError("array length exceeds remaining bytes");
    std::vector<T> v(n);
    std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return v;
  }

  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > buf_.size() - pos_) throw CorruptError("unexpected end of data");
  }

  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::vector<char>& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

// File layout: magic[4] | u32 version | u64 payload size | u32 crc | payload
inline void write_file(const std::filesystem::path& path, const char (&magic)[5], std::uint32_t version,
                       const Writer& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  const auto& b = payload.bytes();
  const std::uint64_t size = b.size();
  const std::uint32_t crc = crc32_of(b);
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&size), sizeof size);
  out.write(reinterpret_cast<const char*>(&crc), sizeof crc);
  out.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline Reader read_file(const std::filesystem::path& path, const char (&magic)[5], std::uint32_t version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<char> all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = 4 + 4 + 8 + 4;
  if (all.size() < header) throw CorruptError("'" + path.string() + "': truncated header");
  if (std::memcmp(all.data(), magic, 4) != 0) throw CorruptError("'" + path.string() + "': bad magic");
  std::uint32_t ver;
  std::uint64_t size;
  std::uint32_t crc;
  std::memcpy(&ver, all.data() + 4, 4);
  std::memcpy(&size, all.data() + 8, 8);
  std::memcpy(&crc, all.data() + 16, 4);
  if (ver != version) {
    throw VersionError("'" + path.string() + "': format version " + std::to_string(ver) + ", expected " +
                       std::to_string(version));
  }
  if (all.size() - header != size) throw CorruptError("'" + path.string() + "': truncated payload");
  std::vector<char> payload(all.begin() + header, all.end());
  if (crc32_of(payload) != crc) throw CorruptError("'" + path.string() + "': checksum mismatch");
  return Reader(std::move(payload));
}

}  // namespace homoseg::io
