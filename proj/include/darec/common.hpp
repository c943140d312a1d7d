#ifndef DAREC_COMMON_HPP_
#define DAREC_COMMON_HPP_

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace darec {

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Error hierarchy. Every throwing path in the library uses one of these so
// callers (CLI, tests) can map failures to exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad argument values: mismatched resolutions, wrong representation kind,
/// non-finite inputs, malformed expressions.
struct InvalidInputError : Error {
  using Error::Error;
};

/// A shape with no occupied cells where at least one is required.
struct EmptyShapeError : InvalidInputError {
  using InvalidInputError::InvalidInputError;
};

/// Unreadable/unwritable files, malformed binary containers.
struct IoError : Error {
  using Error::Error;
};

/// Bad configuration documents: unknown keys, unparsable values, invalid
/// combinations. CLI exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

/// Non-finite loss during training. CLI exit code 3.
struct DivergenceError : Error {
  using Error::Error;
};

/// Checkpoint container problems, including checksum mismatches.
struct CheckpointError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Hashing. FNV-1a 64-bit, used for parameter checksums and stream derivation.
// Stable across platforms; not cryptographic.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Little-endian scalar encoding for binary file formats. The formats are
// specified little-endian regardless of host order; these helpers keep the
// byte layout explicit.
// ---------------------------------------------------------------------------

template <class T>
inline void append_le(std::vector<unsigned char>& buf, T v) {
  static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
  unsigned char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  // Assumes little-endian host; asserted once at startup in read_le.
  buf.insert(buf.end(), tmp, tmp + sizeof(T));
}

template <class T>
inline T read_le(const unsigned char* p) {
  static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

namespace detail {
inline bool host_is_little_endian() {
  const std::uint32_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  return b == 1;
}
}  // namespace detail

}  // namespace darec

#endif  // DAREC_COMMON_HPP_
