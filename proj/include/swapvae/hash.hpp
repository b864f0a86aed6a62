#pragma once

#include <cstdint>
#include <cstring>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace swapvae {

// FNV-1a, 64 bit. Used for checkpoint checksums and operator fingerprints.
class Fnv1a {
 public:
  Fnv1a() = default;
  explicit Fnv1a(std::uint64_t state) : h_(state) {}

  void update(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  template <typename T>
  void update(std::span<const T> values) {
    update(values.data(), values.size_bytes());
  }
  template <typename T>
  void update(const std::vector<T>& values) {
    update(std::span<const T>(values));
  }
  void update(std::string_view s) { update(s.data(), s.size()); }

  std::uint64_t digest() const { return h_; }
  std::string hex() const { return to_hex(h_); }

  static std::string to_hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
  }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

}  // namespace swapvae
