#pragma once

// Binary checkpoint records. Layout (all integers little-endian):
//
//   "TIDE"                 4 bytes magic
//   version                u32 (currently 1)
//   record count           u32
//   per record:
//     name length          u32, followed by that many UTF-8 bytes
//     dtype code           u8 (1 = float64)
//     rank                 u32
//     dims                 rank x u64
//     payload              product(dims) x float64, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tide/nn.hpp"

namespace tide {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeFloat64 = 1;

struct Record {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char b[sizeof(T)];
    std::memcpy(b, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > buf_.size() - pos_) throw FormatError("checkpoint truncated");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_records(const std::vector<Record>& records) {
  std::string out = "TIDE";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (numel(r.shape) != r.values.size()) throw DimError("record '" + r.name + "' shape/payload mismatch");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    detail::put_le<std::uint8_t>(out, kDtypeFloat64);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) detail::put_le<std::uint64_t>(out, d);
    for (double v : r.values) detail::put_le<double>(out, v);
  }
  return out;
}

inline std::vector<Record> decode_records(const std::string& buf) {
  detail::Reader rd(buf);
  if (rd.bytes(4) != "TIDE") throw FormatError("bad checkpoint magic");
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = rd.get<std::uint32_t>();
  std::vector<Record> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    r.name = rd.bytes(rd.get<std::uint32_t>());
    if (rd.get<std::uint8_t>() != kDtypeFloat64) throw FormatError("unsupported dtype in record '" + r.name + "'");
    const auto rank = rd.get<std::uint32_t>();
    if (rank > 16) throw FormatError("implausible rank in record '" + r.name + "'");
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = rd.get<std::uint64_t>();
      r.shape.push_back(static_cast<std::size_t>(d));
      n *= d;
    }
    if (n > buf.size() / sizeof(double)) throw FormatError("record '" + r.name + "' payload exceeds file size");
    r.values.resize(n);
    for (auto& v : r.values) v = rd.get<double>();
    out.push_back(std::move(r));
  }
  if (!rd.done()) throw FormatError("trailing bytes after checkpoint records");
  return out;
}

inline void write_records(const std::string& path, const std::vector<Record>& records) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open '" + path + "' for writing");
  const std::string buf = encode_records(records);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IOError("write failed for '" + path + "'");
}

inline std::vector<Record> read_records(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_records(buf);
}

inline std::vector<Record> records_from(const ParameterStore& ps) {
  std::vector<Record> out;
  for (const auto& p : ps.all())
    out.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  return out;
}

// Overwrites every parameter of `ps` from records; names and shapes must
// match exactly.
inline void load_into(ParameterStore& ps, const std::vector<Record>& records) {
  std::map<std::string, const Record*> by_name;
  for (const auto& r : records) {
    if (!ps.contains(r.name)) throw FormatError("checkpoint has unknown parameter '" + r.name + "'");
    by_name[r.name] = &r;
  }
  for (const auto& p : ps.all()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (it->second->shape != p.tensor.shape())
      throw FormatError("checkpoint shape mismatch for '" + p.name + "': " + shape_str(it->second->shape) + " vs " +
                        shape_str(p.tensor.shape()));
    Tensor t = p.tensor;
    std::copy(it->second->values.begin(), it->second->values.end(), t.mutable_data().begin());
  }
}

}  // namespace tide
