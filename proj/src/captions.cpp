#include "diffsat/captions.hpp"

#include <cmath>

#include "diffsat/errors.hpp"
#include "diffsat/strings.hpp"

namespace diffsat {

DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "fmow") return DatasetKind::kFmow;
  if (s == "satlas") return DatasetKind::kSatlas;
  if (s == "spacenet") return DatasetKind::kSpacenet;
  if (s == "texas") return DatasetKind::kTexas;
  if (s == "xbd") return DatasetKind::kXbd;
  if (s == "synthetic") return DatasetKind::kSynthetic;
  throw ConfigError("unknown dataset kind '" + std::string(s) +
                    "' (expected fmow|satlas|spacenet|texas|xbd|synthetic)");
}

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::kFmow: return "fmow";
    case DatasetKind::kSatlas: return "satlas";
    case DatasetKind::kSpacenet: return "spacenet";
    case DatasetKind::kTexas: return "texas";
    case DatasetKind::kXbd: return "xbd";
    case DatasetKind::kSynthetic: return "synthetic";
  }
  return "?";
}

const std::optional<std::string>* CaptionLabels::find(std::string_view name) const {
  if (name == "object") return &object;
  if (name == "country") return &country;
  if (name == "city") return &city;
  if (name == "year_built") return &year_built;
  if (name == "num_acres") return &num_acres;
  if (name == "disaster_type") return &disaster_type;
  if (name == "phase") return &phase;
  return nullptr;
}

const std::vector<CaptionSegment>& caption_template(DatasetKind kind) {
  static const std::vector<CaptionSegment> fmow = {
      {"a", false}, {"fmow", true}, {"satellite image", false},
      {"of a <object>", true}, {"in <country>", true}};
  static const std::vector<CaptionSegment> spacenet = {
      {"a", false}, {"spacenet", true}, {"satellite image", false},
      {"of <object>", true}, {"in <city>", true}};
  static const std::vector<CaptionSegment> satlas = {
      {"a", false}, {"satlas", true}, {"satellite image", false}, {"of <object>", true}};
  static const std::vector<CaptionSegment> texas = {
      {"a", false},           {"satlas", true},
      {"satellite image", false}, {"of houses", true},
      {"built in <year_built>", true}, {"covering <num_acres> acres", true}};
  static const std::vector<CaptionSegment> xbd = {
      {"a", false},     {"fmow", true}, {"satellite image", false},
      {"<phase>", true}, {"being affected by a <disaster_type> natural disaster", false}};
  static const std::vector<CaptionSegment> synthetic = {
      {"a", false}, {"synthetic", true}, {"satellite image", false},
      {"of a <object>", true}, {"in <country>", true}};
  switch (kind) {
    case DatasetKind::kFmow: return fmow;
    case DatasetKind::kSpacenet: return spacenet;
    case DatasetKind::kSatlas: return satlas;
    case DatasetKind::kTexas: return texas;
    case DatasetKind::kXbd: return xbd;
    case DatasetKind::kSynthetic: return synthetic;
  }
  return fmow;
}

std::string metadata_caption_suffix(const MetadataRecord& md) {
  return strformat("located at %.4f, %.4f, gsd %.2f, on %d-%02d-%02d", md.lat, md.lon, md.gsd, static_cast<int>(std::lround(md.year)), static_cast<int>(std::lround(md.month)),
                   static_cast<int>(std::lround(md.day)));
}

std::string build_caption(DatasetKind kind, const CaptionLabels& labels, Rng* rng,
                          const CaptionOptions& opts, const MetadataRecord* metadata) {
  DIFFSAT_EXPECT(opts.dropout_rate >= 0.0 && opts.dropout_rate <= 1.0,
                 "caption dropout rate must lie in [0, 1]");
  std::string out;
  auto append = [&](const std::string& s) {
    if (s.empty()) return;
    if (!out.empty()) out += ' ';
    out += s;
  };
  for (const auto& seg : caption_template(kind)) {
    const bool dropped = seg.droppable && rng && rng->bernoulli(opts.dropout_rate);
    std::string text = seg.text;
    const auto open = text.find('<');
    if (open != std::string::npos) {
      const auto close = text.find('>', open);
      const auto name = text.substr(open + 1, close - open - 1);
      const auto* label = labels.find(name);
      if (!label || !label->has_value() || (*label)->empty()) {
        if (seg.droppable) continue;
        throw DataError("caption for " + to_string(kind) + " needs label '" + name + "'");
      }
      text.replace(open, close - open + 1, **label);
    }
    if (!dropped) append(text);
  }
  if (opts.metadata_in_caption) {
    DIFFSAT_EXPECT(metadata != nullptr, "metadata_in_caption needs a metadata record");
    append(metadata_caption_suffix(*metadata));
  }
  return out;
}

}  // namespace diffsat
