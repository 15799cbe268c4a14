#pragma once

// DBT1 named-tensor container.
//
// Layout (all integers little-endian):
//   "DBT1"                      magic, 4 bytes
//   u32 entry count
//   per entry, in ascending name order:
//     u32 name length, name bytes (ASCII)
//     u8  dtype (0 = f32, 1 = f64, 2 = u8)
//     u32 ndim, u32 dims[ndim]
//     raw values, row-major, little-endian IEEE-754 for floats

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "dualburst/errors.hpp"
#include "dualburst/tensor.hpp"

namespace dualburst {

using AnyTensor = std::variant<TensorF, TensorD, TensorU8>;
using Container = std::map<std::string, AnyTensor>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

inline DType dtype_of(const AnyTensor& t) { return static_cast<DType>(t.index()); }

inline const Shape& shape_of(const AnyTensor& t) {
  return std::visit([](const auto& x) -> const Shape& { return x.shape(); }, t);
}

/// Reads an entry as f32 or f64 regardless of its stored float type.
template <typename T>
Tensor<T> as_real(const AnyTensor& t) {
  return std::visit([](const auto& x) { return cast<T>(x); }, t);
}

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& buf) : buf_(buf) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw CorruptionError("DBT1 payload truncated");
  }

  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::vector<unsigned char>& buf_;
  std::size_t pos_ = 0;
};

inline void validate_name(const std::string& name) {
  if (name.empty()) throw DomainError("container entry names must be non-empty");
  for (unsigned char c : name) {
    if (c >= 0x80 || c < 0x20) throw DomainError("container entry name is not printable ASCII: " + name);
  }
}

}  // namespace detail

inline std::vector<unsigned char> encode_container(const Container& entries) {
  std::vector<unsigned char> out{'D', 'B', 'T', '1'};
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, tensor] : entries) {
    detail::validate_name(name);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<unsigned char>(dtype_of(tensor)));
    std::visit(
        [&out](const auto& t) {
          detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
          for (auto d : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
          for (auto v : t.values()) detail::put_le(out, v);
        },
        tensor);
  }
  return out;
}

inline Container decode_container(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DBT1", 4) != 0) {
    throw FormatError("not a DBT1 container (bad magic or version)");
  }
  std::vector<unsigned char> body(bytes.begin() + 4, bytes.end());
  detail::ByteReader in(body);
  const auto count = in.get<std::uint32_t>();
  Container out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = in.get<std::uint32_t>();
    std::string name = in.get_string(name_len);
    const auto code = in.get<std::uint8_t>();
    if (code > 2) throw FormatError("unknown dtype code " + std::to_string(code) + " for entry " + name);
    const auto ndim = in.get<std::uint32_t>();
    in.need(std::size_t{ndim} * 4);
    Shape shape(ndim);
    for (auto& d : shape) {
      d = in.get<std::uint32_t>();
      if (d == 0) throw CorruptionError("zero dimension in entry " + name);
    }
    const std::size_t n = shape_size(shape);
    auto read_values = [&]<typename T>(T) {
      in.need(n * sizeof(T));
      std::vector<T> v(n);
      for (auto& x : v) x = in.get<T>();
      return Tensor<T>(shape, std::move(v));
    };
    switch (static_cast<DType>(code)) {
      case DType::f32: out.emplace(name, read_values(float{})); break;
      case DType::f64: out.emplace(name, read_values(double{})); break;
      case DType::u8: out.emplace(name, read_values(static_cast<unsigned char>(0))); break;
    }
  }
  if (!in.at_end()) throw CorruptionError("trailing bytes after last DBT1 entry");
  return out;
}

inline void save_container(const std::filesystem::path& path, const Container& entries) {
  const auto bytes = encode_container(entries);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline Container load_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
}

template <typename T>
const Tensor<T>& get_entry(const Container& c, const std::string& name) {
  auto it = c.find(name);
  if (it == c.end()) throw FormatError("missing container entry: " + name);
  const auto* t = std::get_if<Tensor<T>>(&it->second);
  if (!t) throw FormatError("container entry has unexpected dtype: " + name);
  return *t;
}

}  // namespace dualburst
