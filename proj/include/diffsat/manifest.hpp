#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "diffsat/captions.hpp"
#include "diffsat/metadata.hpp"

namespace diffsat {

namespace fs = std::filesystem;

inline constexpr int kManifestSchemaVersion = 1;

/// One line of a manifest. Paths are relative to the manifest's directory.
struct ManifestRecord {
  std::string id;
  std::string image_path;
  DatasetKind dataset_kind = DatasetKind::kSynthetic;
  CaptionLabels labels;
  MetadataRecord metadata;
  std::optional<std::string> sequence_id;
  std::optional<double> frame_key;
  std::optional<std::string> lowres_path;
  std::optional<std::string> mask_path;
  std::optional<std::string> corrupted_path;
  std::optional<std::string> scene;
  std::optional<std::uint64_t> seed;

  bool operator==(const ManifestRecord&) const = default;
};

nlohmann::json to_json(const ManifestRecord& r);
/// Throws DataError naming the offending key.
ManifestRecord record_from_json(const nlohmann::json& j);

struct Manifest {
  fs::path path;
  std::vector<ManifestRecord> records;

  fs::path base_dir() const { return path.parent_path(); }
  fs::path resolve(const std::string& rel) const { return base_dir() / rel; }
};

/// Parses every line; the first malformed line raises DataError("<path>:<line>: ...").
Manifest read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records);

struct ManifestIssue {
  int line;
  std::string message;
};

struct ValidationReport {
  std::vector<ManifestIssue> errors;
  /// Metadata values outside their ranges (clamped at load, not fatal).
  std::vector<ManifestIssue> warnings;
  int records = 0;
  bool ok() const { return errors.empty(); }
};

/// Collects every problem: parse errors, duplicate ids, missing files,
/// out-of-range metadata (warning).
ValidationReport validate_manifest(const fs::path& path, bool check_files = true,
                                   const FieldRanges& ranges = default_field_ranges());

}  // namespace diffsat
