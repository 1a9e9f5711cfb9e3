#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "diffsat/metadata.hpp"
#include "diffsat/rng.hpp"

namespace diffsat {

enum class DatasetKind { kFmow, kSatlas, kSpacenet, kTexas, kXbd, kSynthetic };

DatasetKind parse_dataset_kind(std::string_view s);
std::string to_string(DatasetKind k);

/// Optional label fields used to fill caption placeholders.
struct CaptionLabels {
  std::optional<std::string> object;
  std::optional<std::string> country;
  std::optional<std::string> city;
  std::optional<std::string> year_built;
  std::optional<std::string> num_acres;
  std::optional<std::string> disaster_type;
  std::optional<std::string> phase;  // "before" | "after"

  const std::optional<std::string>* find(std::string_view name) const;
  bool operator==(const CaptionLabels&) const = default;
};

struct CaptionSegment {
  std::string text;  // may contain one <placeholder>
  bool droppable;
};

/// Ordered segments of the template for a dataset kind.
const std::vector<CaptionSegment>& caption_template(DatasetKind kind);

struct CaptionOptions {
  double dropout_rate = 0.0;
  /// Appends "located at <lat>, <lon>, gsd <gsd>, on <y>-<m>-<d>".
  bool metadata_in_caption = false;
};

/// Renders the template. Every droppable segment consumes exactly one draw from
/// `rng` (when given), whether or not its label is present, so the draw count
/// per caption is fixed. A droppable segment whose label is missing is dropped;
/// a missing label in a fixed segment is a DataError.
std::string build_caption(DatasetKind kind, const CaptionLabels& labels, Rng* rng,
                          const CaptionOptions& opts = {},
                          const MetadataRecord* metadata = nullptr);

/// Suffix used by the metadata-in-caption baseline.
std::string metadata_caption_suffix(const MetadataRecord& md);

}  // namespace diffsat
