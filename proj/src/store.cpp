#include "refprior/store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <system_error>
#include <unistd.h>

#include <zlib.h>

#include "refprior/config.hpp"
#include "refprior/hash.hpp"

namespace refprior {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::string_view b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b[at + i])) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::string_view b, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(b[at + i])) << (8 * i);
  return v;
}

void put_floats(std::string& out, std::span<const float> values) {
  out.reserve(out.size() + values.size() * 4);
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

void get_floats(std::string_view b, std::size_t at, std::span<float> dst) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::bit_cast<float>(get_u32(b, at + 4 * i));
}

std::span<const std::uint8_t> as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

constexpr std::size_t kFeatureHeader = 20;

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed on '" + path.string() + "'");
  return std::move(ss).str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed on '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename onto '" + path.string() + "'");
  }
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t at = 0;
  while (at < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - at, 1u << 30));
    crc = ::crc32(crc, bytes.data() + at, chunk);
    at += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// ---- FeatureFile --------------------------------------------------------

std::string encode_features(const FeatureMap& features) {
  require(features.rows() <= 0xffffffffu && features.cols() <= 0xffffffffu, "write_features: shape exceeds u32");
  std::string out = "MIRF";
  put_u32(out, kFeatureFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(features.rows()));
  put_u32(out, static_cast<std::uint32_t>(features.cols()));
  put_u32(out, kDtypeF32);
  put_floats(out, features.flat());
  put_u32(out, crc32(as_bytes(std::string_view(out).substr(kFeatureHeader))));
  return out;
}

FeatureMap decode_features(std::string_view b) {
  if (b.size() < 4) throw TruncatedError("feature file truncated: " + std::to_string(b.size()) + " bytes");
  if (b.substr(0, 4) != "MIRF") throw BadMagicError("feature file: bad magic (expected MIRF)");
  if (b.size() < kFeatureHeader) throw TruncatedError("feature file truncated inside header");
  const std::uint32_t version = get_u32(b, 4);
  if (version != kFeatureFormatVersion)
    throw UnsupportedFormatError("feature file: unsupported format version " + std::to_string(version));
  const std::uint64_t n = get_u32(b, 8);
  const std::uint64_t d = get_u32(b, 12);
  const std::uint32_t dtype = get_u32(b, 16);
  if (dtype != kDtypeF32) throw UnsupportedFormatError("feature file: unsupported dtype code " + std::to_string(dtype));
  const std::uint64_t payload = n * d * 4;
  const std::uint64_t expected = kFeatureHeader + payload + 4;
  if (b.size() < expected)
    throw TruncatedError("feature file truncated: " + std::to_string(b.size()) + " of " + std::to_string(expected) +
                         " bytes");
  if (b.size() > expected) throw FormatError("feature file: " + std::to_string(b.size() - expected) + " trailing bytes");
  const std::uint32_t stored = get_u32(b, kFeatureHeader + payload);
  const std::uint32_t actual = crc32(as_bytes(b.substr(kFeatureHeader, payload)));
  if (stored != actual) throw ChecksumError("feature file: payload CRC mismatch");
  FeatureMap out(n, d);
  get_floats(b, kFeatureHeader, out.flat());
  return out;
}

void write_features(const fs::path& path, const FeatureMap& features) {
  write_file_atomic(path, encode_features(features));
}

FeatureMap read_features(const fs::path& path) {
  try {
    return decode_features(read_file(path));
  } catch (const FormatError& e) {
    // Keep the concrete type, add the path.
    const std::string msg = path.string() + ": " + e.what();
    if (dynamic_cast<const BadMagicError*>(&e)) throw BadMagicError(msg);
    if (dynamic_cast<const ChecksumError*>(&e)) throw ChecksumError(msg);
    if (dynamic_cast<const TruncatedError*>(&e)) throw TruncatedError(msg);
    if (dynamic_cast<const UnsupportedFormatError*>(&e)) throw UnsupportedFormatError(msg);
    throw FormatError(msg);
  }
}

// ---- Manifest -----------------------------------------------------------

bool valid_corruption_tag(std::string_view tag) {
  if (tag == "clean" || tag == "blur" || tag == "noise") return true;
  for (std::string_view prefix : {"jpeg", "resize", "blur", "noise"}) {
    if (tag.size() <= prefix.size() || tag.substr(0, prefix.size()) != prefix) continue;
    const std::string_view rest = tag.substr(prefix.size());
    bool dot = false;
    bool ok = true;
    for (char c : rest) {
      if (c == '.' && !dot) {
        dot = true;
      } else if (c < '0' || c > '9') {
        ok = false;
        break;
      }
    }
    if (ok && rest.front() != '.' && rest.back() != '.') return true;
  }
  return false;
}

nlohmann::ordered_json to_json(const ManifestRecord& r) {
  return {{"image_id", r.image_id},
          {"path", r.path},
          {"label", std::string(to_string(r.label))},
          {"generator", r.generator},
          {"corruption", r.corruption}};
}

ManifestRecord manifest_record_from_json(const nlohmann::json& j) {
  require(j.is_object(), "manifest: record must be a JSON object");
  static const std::set<std::string> known{"image_id", "path", "label", "generator", "corruption"};
  for (const auto& [k, _] : j.items()) require(known.count(k) > 0, "manifest: unknown field '" + k + "'");
  auto str = [&](const char* key, bool required, const std::string& fallback) -> std::string {
    if (!j.contains(key)) {
      require(!required, std::string("manifest: missing field '") + key + "'");
      return fallback;
    }
    require(j[key].is_string(), std::string("manifest: field '") + key + "' must be a string");
    return j[key].get<std::string>();
  };
  ManifestRecord r;
  r.image_id = str("image_id", true, "");
  r.path = str("path", true, "");
  r.label = parse_label(str("label", true, ""));
  r.generator = str("generator", false, "none");
  r.corruption = str("corruption", false, "clean");
  require(!r.image_id.empty(), "manifest: empty image_id");
  require(!r.path.empty(), "manifest: empty path for '" + r.image_id + "'");
  require(valid_corruption_tag(r.corruption), "manifest: unknown corruption tag '" + r.corruption + "'");
  return r;
}

fs::path resolve_feature_path(const fs::path& manifest_path, const ManifestRecord& r) {
  const fs::path p(r.path);
  return p.is_absolute() ? p : manifest_path.parent_path() / p;
}

std::vector<ManifestRecord> read_manifest(const fs::path& path, bool check_files) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  std::vector<ManifestRecord> out;
  std::set<std::pair<std::string, std::string>> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
    }
    ManifestRecord r;
    try {
      r = manifest_record_from_json(j);
    } catch (const ContractViolation& e) {
      throw ContractViolation(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    require(seen.emplace(r.image_id, r.corruption).second,
            path.string() + ":" + std::to_string(lineno) + ": duplicate image_id '" + r.image_id +
                "' for corruption '" + r.corruption + "'");
    if (check_files && !fs::exists(resolve_feature_path(path, r)))
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": missing feature file '" + r.path + "'");
    out.push_back(std::move(r));
  }
  return out;
}

void write_manifest(const fs::path& path, std::span<const ManifestRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::vector<Sample> load_samples(const fs::path& manifest_path) {
  std::vector<Sample> out;
  for (const auto& r : read_manifest(manifest_path, true)) {
    Sample s;
    s.image_id = r.image_id;
    s.features = read_features(resolve_feature_path(manifest_path, r));
    s.label = r.label;
    s.generator = r.generator;
    s.corruption = r.corruption;
    out.push_back(std::move(s));
  }
  return out;
}

fs::path export_samples(const fs::path& dir, std::span<const Sample> samples, const std::string& manifest_name) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "'");
  std::vector<ManifestRecord> records;
  records.reserve(samples.size());
  for (const auto& s : samples) {
    std::string file = s.image_id;
    if (s.corruption != "clean") file += "." + s.corruption;
    file += ".mirf";
    write_features(dir / file, s.features);
    records.push_back({s.image_id, file, s.label, s.generator, s.corruption});
  }
  const fs::path manifest = dir / manifest_name;
  write_manifest(manifest, records);
  return manifest;
}

// ---- Checkpoint ---------------------------------------------------------

std::string Checkpoint::fingerprint() const {
  nlohmann::ordered_json j;
  j["config"] = config;
  j["detector"] = to_json(detector);
  j["K"] = bank.size();
  j["top_k"] = bank.top_k;
  j["D"] = bank.dim();
  return config_fingerprint(j);
}

namespace {

struct NamedTensor {
  std::string name;
  const num::Tensor2* tensor;
};

std::vector<NamedTensor> checkpoint_tensors(const Checkpoint& c) {
  std::vector<NamedTensor> out{{"prior.M", &c.bank.prototypes},
                               {"prior.Wq", &c.bank.w_query},
                               {"prior.Wk", &c.bank.w_key},
                               {"prior.Wv", &c.bank.w_value}};
  if (c.heads) {
    const auto ts = c.heads->tensors();
    for (std::size_t i = 0; i < ts.size(); ++i)
      out.push_back({std::string("heads.") + EvidenceHeads::names[i], ts[i]});
    out.push_back({"heads.norm.stat_shift", &c.heads->norm.stat_shift});
    out.push_back({"heads.norm.stat_scale", &c.heads->norm.stat_scale});
    out.push_back({"heads.norm.vec_scale", &c.heads->norm.vec_scale});
  }
  return out;
}

constexpr std::size_t kCkptPrefix = 16;  // magic + version + header length

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  ckpt.bank.validate();
  if (ckpt.heads) {
    ckpt.heads->validate();
    require(ckpt.heads->feature_dim() == ckpt.bank.dim(), "save_checkpoint: heads/bank dim mismatch");
  }
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["kind"] = ckpt.heads ? "detector" : "prior";
  header["K"] = ckpt.bank.size();
  header["top_k"] = ckpt.bank.top_k;
  header["D"] = ckpt.bank.dim();
  header["prior_checksum"] = ckpt.prior_checksum();
  header["detector"] = to_json(ckpt.detector);
  header["config"] = ckpt.config;
  auto dir = nlohmann::ordered_json::array();
  std::string payload;
  for (const auto& [name, t] : checkpoint_tensors(ckpt)) {
    dir.push_back({{"name", name}, {"rows", t->rows()}, {"cols", t->cols()}, {"offset", payload.size()}});
    put_floats(payload, t->flat());
  }
  header["tensors"] = std::move(dir);
  header["payload_bytes"] = payload.size();

  const std::string hjson = header.dump();
  std::string out = "MIRC";
  put_u32(out, kCheckpointFormatVersion);
  put_u64(out, hjson.size());
  out += hjson;
  out += payload;
  Fnv1a64 h;
  h.update(out);
  put_u64(out, h.digest());
  return out;
}

nlohmann::ordered_json checkpoint_header(std::string_view b) {
  if (b.size() < 4) throw TruncatedError("checkpoint truncated");
  if (b.substr(0, 4) != "MIRC") throw BadMagicError("checkpoint: bad magic (expected MIRC)");
  if (b.size() < kCkptPrefix + 8) throw TruncatedError("checkpoint truncated inside header");
  const std::uint32_t version = get_u32(b, 4);
  if (version != kCheckpointFormatVersion)
    throw UnsupportedFormatError("checkpoint: unsupported format version " + std::to_string(version));
  const std::uint64_t hlen = get_u64(b, 8);
  if (hlen > b.size() - kCkptPrefix - 8) throw TruncatedError("checkpoint truncated inside header JSON");
  try {
    return nlohmann::ordered_json::parse(b.substr(kCkptPrefix, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
}

Checkpoint decode_checkpoint(std::string_view b) {
  const nlohmann::ordered_json header = checkpoint_header(b);
  const std::uint64_t hlen = get_u64(b, 8);
  try {
    const std::size_t payload_at = kCkptPrefix + hlen;
    const std::uint64_t payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    const std::uint64_t expected = payload_at + payload_bytes + 8;
    if (b.size() < expected) throw TruncatedError("checkpoint truncated inside tensor payload");
    if (b.size() > expected) throw FormatError("checkpoint: trailing bytes");
    Fnv1a64 h;
    h.update(b.substr(0, expected - 8));
    if (h.digest() != get_u64(b, expected - 8)) throw ChecksumError("checkpoint: content hash mismatch");

    Checkpoint c;
    c.config = header.at("config");
    c.detector = detector_config_from_json(nlohmann::json(header.at("detector")));
    const std::string kind = header.at("kind").get<std::string>();
    if (kind != "prior" && kind != "detector") throw FormatError("checkpoint: unknown kind '" + kind + "'");
    if (kind == "detector") c.heads = EvidenceHeads{};

    std::map<std::string, num::Tensor2*> slots{{"prior.M", &c.bank.prototypes},
                                               {"prior.Wq", &c.bank.w_query},
                                               {"prior.Wk", &c.bank.w_key},
                                               {"prior.Wv", &c.bank.w_value}};
    if (c.heads) {
      auto ts = c.heads->tensors();
      for (std::size_t i = 0; i < ts.size(); ++i) slots[std::string("heads.") + EvidenceHeads::names[i]] = ts[i];
      slots["heads.norm.stat_shift"] = &c.heads->norm.stat_shift;
      slots["heads.norm.stat_scale"] = &c.heads->norm.stat_scale;
      slots["heads.norm.vec_scale"] = &c.heads->norm.vec_scale;
    }
    std::set<std::string> filled;
    for (const auto& t : header.at("tensors")) {
      const std::string name = t.at("name").get<std::string>();
      const auto it = slots.find(name);
      if (it == slots.end()) throw FormatError("checkpoint: unknown tensor '" + name + "'");
      if (!filled.insert(name).second) throw FormatError("checkpoint: duplicate tensor '" + name + "'");
      const std::uint64_t rows = t.at("rows").get<std::uint64_t>();
      const std::uint64_t cols = t.at("cols").get<std::uint64_t>();
      const std::uint64_t offset = t.at("offset").get<std::uint64_t>();
      if (rows != 0 && cols > (payload_bytes / 4) / rows)
        throw FormatError("checkpoint: tensor '" + name + "' shape overflows payload");
      if (offset > payload_bytes || rows * cols * 4 > payload_bytes - offset)
        throw FormatError("checkpoint: tensor '" + name + "' lies outside the payload");
      num::Tensor2 m(rows, cols);
      get_floats(b, payload_at + offset, m.flat());
      *it->second = std::move(m);
    }
    if (filled.size() != slots.size()) throw FormatError("checkpoint: missing tensors");
    c.bank.top_k = header.at("top_k").get<std::size_t>();
    c.bank.validate();
    if (c.heads) c.heads->validate();
    if (header.at("prior_checksum").get<std::string>() != c.prior_checksum())
      throw ChecksumError("checkpoint: prior checksum mismatch");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("checkpoint: invalid contents: ") + e.what());
  }
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) { write_file_atomic(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

void check_checkpoint(const Checkpoint& ckpt, const CheckpointExpectation& expect, bool force) {
  if (force) return;
  auto check = [](const char* what, std::optional<std::size_t> want, std::size_t have) {
    if (want && *want != have)
      throw ConfigMismatchError(std::string("checkpoint config mismatch: ") + what + "=" + std::to_string(have) +
                                " in checkpoint, runtime expects " + std::to_string(*want));
  };
  check("K", expect.K, ckpt.bank.size());
  check("top_k", expect.top_k, ckpt.bank.top_k);
  check("D", expect.D, ckpt.bank.dim());
}

Checkpoint load_checkpoint(const fs::path& path, const CheckpointExpectation& expect, bool force) {
  Checkpoint c = load_checkpoint(path);
  check_checkpoint(c, expect, force);
  return c;
}

}  // namespace refprior
