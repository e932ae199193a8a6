#pragma once

// SHA-256 helpers backed by OpenSSL's EVP interface.

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <string_view>

#include "impervia/errors.hpp"

namespace impervia {

using Sha256 = std::array<std::uint8_t, 32>;

class Sha256Builder {
 public:
  Sha256Builder() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw Error("crypto", "SHA-256 init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("crypto", "SHA-256 update failed");
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  Sha256 finish() {
    Sha256 out{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), out.data(), &len) != 1 || len != out.size())
      throw Error("crypto", "SHA-256 final failed");
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline Sha256 sha256(std::string_view s) {
  Sha256Builder b;
  b.update(s);
  return b.finish();
}

inline std::string to_hex(const Sha256& d) {
  static constexpr char hex[] = "0123456789abcdef";
  std::string s;
  for (auto b : d) {
    s += hex[b >> 4];
    s += hex[b & 15];
  }
  return s;
}

inline std::string sha256_file_hex(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  Sha256Builder b;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof buf);
    if (f.gcount() > 0) b.update(buf, static_cast<std::size_t>(f.gcount()));
  }
  return to_hex(b.finish());
}

}  // namespace impervia
