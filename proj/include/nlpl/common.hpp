#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nlpl {

/// Error categories. The CLI maps each to its own exit code.
enum class ErrorKind {
  invalid_argument,
  io,
  format,
  hash_mismatch,
  numeric,
  insufficient_data,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

std::string_view to_string(ErrorKind kind);

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

/// 64-bit FNV-1a. Used for vocabulary fingerprints, file hashes and
/// checkpoint payload checksums.
class Fnv1a {
 public:
  void update(std::string_view bytes);
  void update(const void* data, std::size_t size);
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t value);
std::uint64_t parse_hex64(std::string_view text);

using Rng = std::mt19937_64;

/// Deterministic rng stream keyed by (seed, a, b, c). Independent streams
/// are used per example and per step so results do not depend on the
/// order in which work is scheduled.
Rng make_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0,
             std::uint64_t c = 0);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);
std::uint64_t hash_file(const std::string& path);

}  // namespace nlpl
