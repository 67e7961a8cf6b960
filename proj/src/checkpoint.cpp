#include "nlpl/checkpoint.hpp"

namespace nlpl {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'N', 'L', 'P', 'L', 'C', 'K', 'P', 'T'};

template <typename U>
void append_raw(std::string& out, U value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U read_raw(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw Error(ErrorKind::format, "truncated checkpoint");
  U value;
  std::memcpy(&value, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return value;
}

std::size_t element_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw Error(ErrorKind::format, "unknown tensor dtype " + dtype);
}
}  // namespace

bool Checkpoint::has_group(const std::string& group) const {
  const std::string prefix = group + "/";
  for (const auto& t : tensors)
    if (t.name.starts_with(prefix)) return true;
  return false;
}

const TensorRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string Checkpoint::serialize() const {
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    table.push_back({{"name", t.name},
                     {"shape", {t.rows, t.cols}},
                     {"dtype", t.dtype},
                     {"offset", offset},
                     {"bytes", t.data.size()}});
    offset += t.data.size();
  }
  json header{{"kind", kind},
              {"config", config},
              {"vocab_fingerprint", hex64(vocab_fingerprint)},
              {"step", step},
              {"meta", meta},
              {"tensors", table}};
  const std::string h = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  append_raw(out, kVersion);
  append_raw(out, static_cast<std::uint64_t>(h.size()));
  const std::size_t body_start = out.size();
  out += h;
  for (const auto& t : tensors)
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size());
  append_raw(out, fnv1a(std::string_view(out).substr(body_start)));
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 4 + 8 + 8 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw Error(ErrorKind::format, "not a checkpoint file");
  std::size_t pos = sizeof(kMagic);
  if (read_raw<std::uint32_t>(bytes, pos) != kVersion)
    throw Error(ErrorKind::format, "unsupported checkpoint version");
  const auto header_len = read_raw<std::uint64_t>(bytes, pos);
  const std::size_t body_start = pos;
  if (header_len > bytes.size() - pos - 8) throw Error(ErrorKind::format, "truncated checkpoint");

  const std::size_t body_end = bytes.size() - 8;
  std::size_t tail = body_end;
  const auto stored = read_raw<std::uint64_t>(bytes, tail);
  if (stored != fnv1a(std::string_view(bytes).substr(body_start, body_end - body_start)))
    throw Error(ErrorKind::format, "checkpoint checksum mismatch");

  Checkpoint c;
  try {
    auto header = json::parse(bytes.substr(pos, header_len));
    pos += header_len;
    c.kind = header.at("kind").get<std::string>();
    c.config = header.at("config");
    c.vocab_fingerprint = parse_hex64(header.at("vocab_fingerprint").get<std::string>());
    c.step = header.at("step").get<std::int64_t>();
    c.meta = header.at("meta");
    const std::size_t payload_start = pos;
    for (const auto& e : header.at("tensors")) {
      TensorRecord t;
      t.name = e.at("name").get<std::string>();
      t.rows = e.at("shape").at(0).get<std::int64_t>();
      t.cols = e.at("shape").at(1).get<std::int64_t>();
      t.dtype = e.at("dtype").get<std::string>();
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto len = e.at("bytes").get<std::uint64_t>();
      if (t.rows < 0 || t.cols < 0 ||
          len != static_cast<std::uint64_t>(t.rows * t.cols) * element_size(t.dtype))
        throw Error(ErrorKind::format, "inconsistent tensor record " + t.name);
      if (payload_start + off + len > body_end)
        throw Error(ErrorKind::format, "tensor " + t.name + " runs past the payload");
      t.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload_start + off),
                    bytes.begin() + static_cast<std::ptrdiff_t>(payload_start + off + len));
      c.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("bad checkpoint header: ") + e.what());
  }
  return c;
}

void Checkpoint::save(const std::string& path) const { write_file(path, serialize()); }

Checkpoint Checkpoint::load(const std::string& path) { return deserialize(read_file(path)); }

Checkpoint Checkpoint::load(const std::string& path, std::uint64_t expected_vocab) {
  auto c = load(path);
  if (c.vocab_fingerprint != expected_vocab)
    throw Error(ErrorKind::hash_mismatch, "checkpoint " + path + " was trained with vocabulary " +
                                              hex64(c.vocab_fingerprint) + ", expected " +
                                              hex64(expected_vocab));
  return c;
}

}  // namespace nlpl
