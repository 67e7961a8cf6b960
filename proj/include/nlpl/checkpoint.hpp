#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlpl/common.hpp"
#include "nlpl/layers.hpp"

namespace nlpl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host order, which must be little-endian");

struct TensorRecord {
  std::string name;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::string dtype;  ///< "f32" or "f64"
  std::vector<unsigned char> data;
};

/// Self-describing container:
///
///   "NLPLCKPT" | u32 version | u64 header length | header JSON |
///   raw little-endian tensor payload | u64 FNV-1a of header and payload
///
/// The header records kind, model config, vocabulary fingerprint, step
/// counter, free-form metadata and a (name, shape, dtype, offset) table.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  nlohmann::json config;
  std::uint64_t vocab_fingerprint = 0;
  std::int64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  template <typename Params>
  void put(const std::string& group, const Params& params);

  /// Fills params (already shaped) from the group; every tensor must be
  /// present with a matching shape.
  template <typename Params>
  void get(const std::string& group, Params& params) const;

  bool has_group(const std::string& group) const;
  const TensorRecord* find(const std::string& name) const;

  std::string serialize() const;
  /// All-or-nothing: throws Error(format) on any structural problem or
  /// checksum mismatch.
  static Checkpoint deserialize(const std::string& bytes);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
  /// As load(), and throws Error(hash_mismatch) when the stored vocabulary
  /// fingerprint differs from the expected one.
  static Checkpoint load(const std::string& path, std::uint64_t expected_vocab);
};

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <typename Params>
void Checkpoint::put(const std::string& group, const Params& params) {
  using T = typename Params::Scalar;
  for (const auto& [name, m] : nlpl::tensors(params)) {
    TensorRecord r;
    r.name = group + "/" + name;
    r.rows = m->rows();
    r.cols = m->cols();
    r.dtype = dtype_name<T>();
    r.data.resize(static_cast<std::size_t>(m->size()) * sizeof(T));
    std::memcpy(r.data.data(), m->data(), r.data.size());
    this->tensors.push_back(std::move(r));
  }
}

template <typename Params>
void Checkpoint::get(const std::string& group, Params& params) const {
  using T = typename Params::Scalar;
  for (auto& [name, m] : nlpl::tensors(params)) {
    const std::string full = group + "/" + name;
    const TensorRecord* r = find(full);
    if (!r) throw Error(ErrorKind::format, "checkpoint lacks tensor " + full);
    if (r->rows != m->rows() || r->cols != m->cols())
      throw Error(ErrorKind::format, "checkpoint tensor " + full + " has the wrong shape");
    if (r->dtype == "f32") {
      Eigen::Map<const Matrix<float>> src(reinterpret_cast<const float*>(r->data.data()), r->rows,
                                          r->cols);
      *m = src.template cast<T>();
    } else {
      Eigen::Map<const Matrix<double>> src(reinterpret_cast<const double*>(r->data.data()),
                                           r->rows, r->cols);
      *m = src.template cast<T>();
    }
  }
}

}  // namespace nlpl
