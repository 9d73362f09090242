#pragma once

// Little-endian binary containers for the prototype bank and the trained
// model, plus atomic text/binary file writes (tmp file + rename) so partially
// written outputs can never be mistaken for results.
//
// Bank file ("CSFB"):  magic, version u32, dim u32, count u32, tau f64,
//   alpha f64, then per entry: class id i32, origin u8, dim f64 values.
// Model file ("CSFM"): magic, version u32, extractor (layer count u32, per
//   layer in/out u32 + activation u8, theta length u64, theta f64s), head
//   (classes u32, dim u32, weights, biases), then the bank block verbatim.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "csfa/errors.hpp"
#include "csfa/net.hpp"
#include "csfa/prototypes.hpp"
#include "csfa/training.hpp"

namespace csfa {

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) {
  out.push_back(static_cast<char>(v));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_i32(std::string& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

inline void put_f64(std::string& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

// Bounds-checked sequential reader over a byte buffer.
struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw IoError("truncated binary file");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    }
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf[pos++])) << (8 * i);
    }
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  void expect_magic(const char* magic) {
    need(4);
    for (int i = 0; i < 4; ++i) {
      if (buf[pos + static_cast<std::size_t>(i)] != magic[i]) {
        throw IoError(std::string("bad magic, expected ") + magic);
      }
    }
    pos += 4;
  }
};

}  // namespace detail

inline constexpr std::uint32_t kBankFormatVersion = 1;
inline constexpr std::uint32_t kModelFormatVersion = 1;

inline std::string encode_bank(const PrototypeBank& bank) {
  std::string out;
  out.append("CSFB");
  detail::put_u32(out, kBankFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(bank.dim()));
  detail::put_u32(out, static_cast<std::uint32_t>(bank.size()));
  detail::put_f64(out, bank.tau());
  detail::put_f64(out, bank.alpha());
  for (const auto& e : bank.entries()) {
    detail::put_i32(out, e.class_id);
    detail::put_u8(out, static_cast<std::uint8_t>(e.origin));
    for (double v : e.vector) detail::put_f64(out, v);
  }
  return out;
}

inline PrototypeBank decode_bank(detail::ByteReader& r) {
  r.expect_magic("CSFB");
  const std::uint32_t version = r.u32();
  if (version != kBankFormatVersion) {
    throw IoError("unsupported bank format version " + std::to_string(version));
  }
  const std::uint32_t dim = r.u32();
  const std::uint32_t count = r.u32();
  const double tau = r.f64();
  const double alpha = r.f64();
  PrototypeBank bank(tau, alpha);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::int32_t id = r.i32();
    const std::uint8_t origin = r.u8();
    if (origin > 1) throw IoError("bad prototype origin byte");
    Vector v(dim);
    for (std::uint32_t j = 0; j < dim; ++j) v[j] = r.f64();
    bank.add(id, std::move(v), static_cast<PrototypeOrigin>(origin));
  }
  return bank;
}

inline PrototypeBank decode_bank(const std::string& bytes) {
  detail::ByteReader r{bytes};
  PrototypeBank bank = decode_bank(r);
  if (r.pos != bytes.size()) throw IoError("trailing bytes after bank");
  return bank;
}

// Extractor + head + bank in one container, so a base-training invocation
// hands a complete classifier to later runs.
struct ModelFile {
  ModelParams params;
  LinearHead head;
  PrototypeBank bank;
};

inline std::string encode_model(const ModelParams& params, const LinearHead& head,
                                const PrototypeBank& bank) {
  std::string out;
  out.append("CSFM");
  detail::put_u32(out, kModelFormatVersion);
  const auto& layers = params.net.layers();
  detail::put_u32(out, static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    detail::put_u32(out, static_cast<std::uint32_t>(l.in));
    detail::put_u32(out, static_cast<std::uint32_t>(l.out));
    detail::put_u8(out, static_cast<std::uint8_t>(l.act));
  }
  detail::put_u64(out, params.theta.size());
  for (double v : params.theta) detail::put_f64(out, v);
  detail::put_u32(out, static_cast<std::uint32_t>(head.w.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(head.w.cols()));
  for (std::size_t i = 0; i < head.w.size(); ++i) {
    detail::put_f64(out, head.w.data()[i]);
  }
  for (double v : head.b) detail::put_f64(out, v);
  out.append(encode_bank(bank));
  return out;
}

inline ModelFile decode_model(const std::string& bytes) {
  detail::ByteReader r{bytes};
  r.expect_magic("CSFM");
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion) {
    throw IoError("unsupported model format version " + std::to_string(version));
  }
  const std::uint32_t n_layers = r.u32();
  std::vector<LayerSpec> specs;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    LayerSpec s;
    s.in = r.u32();
    s.out = r.u32();
    const std::uint8_t act = r.u8();
    if (act > 2) throw IoError("bad activation byte");
    s.act = static_cast<Activation>(act);
    specs.push_back(s);
  }
  Mlp net(std::move(specs));
  const std::uint64_t theta_len = r.u64();
  if (theta_len != net.param_count()) {
    throw IoError("theta length does not match layer shapes");
  }
  Vector theta(theta_len);
  for (auto& v : theta) v = r.f64();

  LinearHead head;
  const std::uint32_t classes = r.u32();
  const std::uint32_t dim = r.u32();
  head.w = Matrix(classes, dim);
  for (std::size_t i = 0; i < head.w.size(); ++i) head.w.data()[i] = r.f64();
  head.b.resize(classes);
  for (auto& v : head.b) v = r.f64();

  PrototypeBank bank = decode_bank(r);
  if (r.pos != bytes.size()) throw IoError("trailing bytes after model");
  return ModelFile{ModelParams(std::move(net), std::move(theta)),
                   std::move(head), std::move(bank)};
}

// Writes content to path via a sibling tmp file and an atomic rename.
inline void atomic_write(const std::filesystem::path& path,
                         const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string content((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read error on " + path.string());
  return content;
}

inline void save_bank(const std::filesystem::path& path, const PrototypeBank& bank) {
  atomic_write(path, encode_bank(bank));
}

inline PrototypeBank load_bank(const std::filesystem::path& path) {
  return decode_bank(read_file(path));
}

inline void save_model(const std::filesystem::path& path, const ModelParams& params,
                       const LinearHead& head, const PrototypeBank& bank) {
  atomic_write(path, encode_model(params, head, bank));
}

inline ModelFile load_model(const std::filesystem::path& path) {
  return decode_model(read_file(path));
}

}  // namespace csfa
