#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "itx/tensor.hpp"

namespace itx {

class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// ITX tensor file: one UTF-8 JSON header line
//   {"dims":[B,C,F,H,W],"dtype":"f32"}\n
// followed by little-endian 32-bit floats in row-major order.

inline void write_itx(const std::string& path, const Tensor5D& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  nlohmann::json hdr;
  hdr["dims"] = {t.dims().b, t.dims().c, t.dims().f, t.dims().h, t.dims().w};
  hdr["dtype"] = "f32";
  os << hdr.dump() << "\n";
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size()) * 4);
  if (!os) throw IoError("short write: " + path);
}

inline Tensor5D read_itx(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(is, line)) throw IoError("missing header line: " + path);
  nlohmann::json hdr = nlohmann::json::parse(line, nullptr, false);
  if (hdr.is_discarded() || !hdr.contains("dims") || !hdr.contains("dtype"))
    throw IoError("bad itx header: " + path);
  if (hdr["dtype"] != "f32") throw IoError("unsupported dtype in: " + path);
  auto dv = hdr["dims"];
  if (!dv.is_array() || dv.size() != 5) throw IoError("bad dims in: " + path);
  Dims5 d{dv[0].get<int64_t>(), dv[1].get<int64_t>(), dv[2].get<int64_t>(),
          dv[3].get<int64_t>(), dv[4].get<int64_t>()};
  Tensor5D t(d);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size()) * 4);
  if (is.gcount() != t.size() * 4) throw IoError("truncated payload: " + path);
  return t;
}

/// FNV-1a over a file's bytes; used for output manifests.
inline uint64_t hash_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot hash missing file: " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    std::streamsize n = is.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!is) break;
  }
  return h;
}

}  // namespace itx
