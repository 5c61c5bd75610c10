#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "refprior/dataset.hpp"
#include "refprior/detector.hpp"

namespace refprior {

namespace fs = std::filesystem;

/// Base of every parse failure on an on-disk format.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};
class UnsupportedFormatError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Raised when a checkpoint's config echo disagrees with what the caller runs.
class ConfigMismatchError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

std::string read_file(const fs::path& path);
/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const fs::path& path, std::string_view bytes);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

// ---- FeatureFile --------------------------------------------------------
//
// offset size
//      0    4  "MIRF"
//      4    4  u32 format version (1)
//      8    4  u32 N
//     12    4  u32 D
//     16    4  u32 dtype (1 = f32)
//     20 4N*D  payload, row-major
//      .    4  u32 CRC32 of the payload
// All integers and floats little-endian.

inline constexpr std::uint32_t kFeatureFormatVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;

std::string encode_features(const FeatureMap& features);
FeatureMap decode_features(std::string_view bytes);
void write_features(const fs::path& path, const FeatureMap& features);
FeatureMap read_features(const fs::path& path);

// ---- Manifest -----------------------------------------------------------

struct ManifestRecord {
  std::string image_id;
  std::string path;  // as written; relative paths resolve against the manifest directory
  Label label = Label::real;
  std::string generator = "none";
  std::string corruption = "clean";
};

/// clean, jpeg<QF>, resize<scale>, blur[<sigma>] or the feature-space
/// noise[<sigma>].
bool valid_corruption_tag(std::string_view tag);

nlohmann::ordered_json to_json(const ManifestRecord& r);
ManifestRecord manifest_record_from_json(const nlohmann::json& j);

/// File order is preserved. With `check_files`, every referenced feature
/// file must exist.
std::vector<ManifestRecord> read_manifest(const fs::path& path, bool check_files = true);
void write_manifest(const fs::path& path, std::span<const ManifestRecord> records);

fs::path resolve_feature_path(const fs::path& manifest_path, const ManifestRecord& r);

/// Reads every feature file referenced by the manifest.
std::vector<Sample> load_samples(const fs::path& manifest_path);

/// Writes one FeatureFile per sample under `dir` plus `dir/manifest.jsonl`;
/// returns the manifest path.
fs::path export_samples(const fs::path& dir, std::span<const Sample> samples,
                        const std::string& manifest_name = "manifest.jsonl");

// ---- Checkpoint ---------------------------------------------------------
//
// "MIRC", u32 version (1), u64 header length, header JSON, tensor payload,
// u64 FNV-1a of everything before it. The header lists every tensor with its
// payload offset and shape, echoes the training config and carries the
// prior checksum.

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct Checkpoint {
  MemoryBank bank;
  std::optional<EvidenceHeads> heads;  // absent for a prior-only checkpoint
  DetectorConfig detector;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();  // training echo

  std::string prior_checksum() const { return bank_checksum(bank); }
  /// Hash of the config echo plus detector wiring.
  std::string fingerprint() const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const fs::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& path);

/// What the runtime expects; unset fields are not checked.
struct CheckpointExpectation {
  std::optional<std::size_t> K;
  std::optional<std::size_t> top_k;
  std::optional<std::size_t> D;
};

/// Throws ConfigMismatchError unless `force`.
void check_checkpoint(const Checkpoint& ckpt, const CheckpointExpectation& expect, bool force = false);
Checkpoint load_checkpoint(const fs::path& path, const CheckpointExpectation& expect, bool force = false);

/// Directory view of a checkpoint file, for inspection tools.
nlohmann::ordered_json checkpoint_header(std::string_view bytes);

}  // namespace refprior
