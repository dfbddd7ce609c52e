#ifndef STNALIGN_IO_HPP_
#define STNALIGN_IO_HPP_

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stnalign/config.hpp"
#include "stnalign/networks.hpp"
#include "stnalign/tensor.hpp"

namespace stnalign {

/// File missing, unreadable, or not in the expected format.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Binary PGM (P5, maxval 255)
// ---------------------------------------------------------------------------

/// Writes channel 0 of a (1, C, H, W) tensor, values in [0, 1] scaled to 0..255.
inline void write_pgm(const std::string& path, const Tensor& image) {
  if (image.rank() != 4) throw DimensionError("write_pgm expects (1, C, H, W)");
  const std::size_t h = image.dim(2), w = image.dim(3);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double v = std::clamp(image[y * w + x], 0.0, 1.0);
      row[x] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(w));
  }
  if (!f) throw IoError("short write to " + path);
}

/// Reads a P5 image as a (1, 1, H, W) tensor with values in [0, 1].
inline Tensor read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  auto token = [&]() {
    std::string t;
    char c;
    while (f.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(f, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t += c;
    }
    return t;
  };
  if (token() != "P5") throw IoError(path + " is not a binary PGM (P5)");
  std::size_t w = 0, h = 0;
  long maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw IoError(path + ": malformed PGM header");
  }
  if (w == 0 || h == 0 || maxval <= 0 || maxval > 65535) throw IoError(path + ": bad PGM extents");
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(w * h * bytes);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(f.gcount()) != raw.size()) throw IoError(path + ": truncated PGM data");
  Tensor img({1, 1, h, w});
  for (std::size_t i = 0; i < w * h; ++i) {
    const unsigned v = bytes == 1 ? raw[i] : (unsigned(raw[2 * i]) << 8) | raw[2 * i + 1];
    img[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Checkpoint archive
// ---------------------------------------------------------------------------
//
// All integers little-endian.
//   magic      8 bytes  "STNCKPT1"
//   meta_len   u32      length of the metadata text
//   meta       bytes    key=value lines (pipeline spec, training state)
//   count      u32      number of tensors
//   per tensor:
//     name_len u32, name bytes (UTF-8)
//     dtype    u8       1 = float64, 2 = float32
//     rank     u32
//     extents  u64 x rank
//     values   product(extents) x (8 | 4) bytes, IEEE-754 little-endian

enum class TensorDtype : std::uint8_t { f64 = 1, f32 = 2 };

struct Checkpoint {
  KeyValues meta;
  ParamSet tensors;
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}
  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError(path_ + ": truncated checkpoint");
  }
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt, TensorDtype dtype = TensorDtype::f64) {
  std::string out = "STNCKPT1";
  const std::string meta = ckpt.meta.to_text();
  detail::put_le(out, meta.size(), 4);
  out += meta;
  detail::put_le(out, ckpt.tensors.size(), 4);
  for (const auto& [name, t] : ckpt.tensors) {
    detail::put_le(out, name.size(), 4);
    out += name;
    out.push_back(static_cast<char>(dtype));
    detail::put_le(out, t.rank(), 4);
    for (std::size_t e : t.shape()) detail::put_le(out, e, 8);
    for (double v : t.storage()) {
      if (dtype == TensorDtype::f64) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        detail::put_le(out, bits, 8);
      } else {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail::put_le(out, bits, 4);
      }
    }
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& data, const std::string& path = "<memory>") {
  detail::ByteReader r(data, path);
  if (r.bytes(8) != "STNCKPT1") throw IoError(path + ": not a checkpoint (bad magic)");
  Checkpoint ckpt;
  const auto meta_len = r.le(4);
  ckpt.meta = KeyValues::parse(r.bytes(meta_len));
  const auto count = r.le(4);
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = r.bytes(r.le(4));
    const auto dtype = static_cast<TensorDtype>(r.le(1));
    if (dtype != TensorDtype::f64 && dtype != TensorDtype::f32) throw IoError(path + ": unknown dtype for " + name);
    Shape shape(r.le(4));
    for (auto& e : shape) e = r.le(8);
    Tensor t(shape);
    for (auto& v : t.storage()) {
      if (dtype == TensorDtype::f64) {
        const std::uint64_t bits = r.le(8);
        std::memcpy(&v, &bits, 8);
      } else {
        const auto bits = static_cast<std::uint32_t>(r.le(4));
        float f;
        std::memcpy(&f, &bits, 4);
        v = f;
      }
    }
    if (!ckpt.tensors.emplace(name, std::move(t)).second) throw IoError(path + ": duplicate tensor " + name);
  }
  if (!r.done()) throw IoError(path + ": trailing bytes after checkpoint");
  return ckpt;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << content;
  if (!f) throw IoError("short write to " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt, TensorDtype dtype = TensorDtype::f64) {
  write_text_file(path, encode_checkpoint(ckpt, dtype));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_text_file(path), path); }

}  // namespace stnalign

#endif  // STNALIGN_IO_HPP_
