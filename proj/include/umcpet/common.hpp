#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace umcpet {

inline constexpr const char* kVersion = "0.1.0";

// Error taxonomy shared by the library and the CLI. The CLI maps Kind::Config
// to exit code 2 and everything else to exit code 3.
class Error : public std::runtime_error {
 public:
  enum class Kind {
    Config,        // bad or inconsistent configuration / arguments
    Format,        // file has wrong magic or is not a recognized format
    Version,       // recognized format, unsupported version
    Truncated,     // file shorter than its header promises
    GeometryHash,  // event stream belongs to a different scanner geometry
    Invalid,       // precondition violated at runtime
    Stage,         // a pipeline stage failed
  };

  Error(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  Vec3& operator-=(const Vec3& o) {
    x -= o.x;
    y -= o.y;
    z -= o.z;
    return *this;
  }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm2() const { return dot(*this); }
  double norm() const { return std::sqrt(norm2()); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

// FNV-1a, used for geometry and config fingerprints embedded in file headers.
struct Fnv1a64 {
  std::uint64_t state = 0xcbf29ce484222325ULL;

  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state ^= p[i];
      state *= 0x100000001b3ULL;
    }
  }
  template <typename T>
  void update_value(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    update(&v, sizeof(T));
  }
  std::uint64_t digest() const { return state; }
};

inline std::uint64_t fnv1a64(const std::string& s) {
  Fnv1a64 h;
  h.update(s.data(), s.size());
  return h.digest();
}

// Standard normal CDF and pdf.
inline double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double norm_pdf(double z) {
  static const double inv_sqrt_2pi = 0.3989422804014327;
  return inv_sqrt_2pi * std::exp(-0.5 * z * z);
}

}  // namespace umcpet
