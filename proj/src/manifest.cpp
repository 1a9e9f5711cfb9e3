#include "diffsat/manifest.hpp"

#include <fstream>
#include <set>

#include "diffsat/errors.hpp"

namespace diffsat {

using nlohmann::json;

namespace {

const char* kLabelKeys[] = {"object", "country", "city", "year_built",
                            "num_acres", "disaster_type", "phase"};

template <typename T>
void put_opt(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

template <typename T>
std::optional<T> get_opt(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

}  // namespace

json to_json(const ManifestRecord& r) {
  json j;
  j["schema"] = kManifestSchemaVersion;
  j["id"] = r.id;
  j["image_path"] = r.image_path;
  j["dataset_kind"] = to_string(r.dataset_kind);
  json labels = json::object();
  for (const char* k : kLabelKeys) {
    const auto* v = r.labels.find(k);
    if (v && v->has_value()) labels[k] = **v;
  }
  j["labels"] = labels;
  json md = json::object();
  const auto vals = r.metadata.values();
  for (int i = 0; i < kNumMetadataFields; ++i) md[std::string(kMetadataFieldNames[i])] = vals[i];
  j["metadata"] = md;
  put_opt(j, "sequence_id", r.sequence_id);
  put_opt(j, "frame_key", r.frame_key);
  put_opt(j, "lowres_path", r.lowres_path);
  put_opt(j, "mask_path", r.mask_path);
  put_opt(j, "corrupted_path", r.corrupted_path);
  put_opt(j, "scene", r.scene);
  put_opt(j, "seed", r.seed);
  return j;
}

ManifestRecord record_from_json(const json& j) {
  if (!j.is_object()) throw DataError("record is not an object");
  const int schema = j.value("schema", kManifestSchemaVersion);
  if (schema != kManifestSchemaVersion)
    throw DataError("unsupported schema version " + std::to_string(schema));
  ManifestRecord r;
  try {
    for (const char* k : {"id", "image_path", "dataset_kind", "metadata"})
      if (!j.contains(k)) throw DataError(std::string("missing required key '") + k + "'");
    r.id = j.at("id").get<std::string>();
    if (r.id.empty()) throw DataError("empty id");
    r.image_path = j.at("image_path").get<std::string>();
    try {
      r.dataset_kind = parse_dataset_kind(j.at("dataset_kind").get<std::string>());
    } catch (const ConfigError& e) {
      throw DataError(e.what());
    }
    if (j.contains("labels")) {
      const auto& lj = j.at("labels");
      if (!lj.is_object()) throw DataError("'labels' must be an object");
      for (auto it = lj.begin(); it != lj.end(); ++it) {
        auto* slot = const_cast<std::optional<std::string>*>(r.labels.find(it.key()));
        if (!slot) throw DataError("unknown label '" + it.key() + "'");
        if (it.value().is_string())
          *slot = it.value().get<std::string>();
        else if (it.value().is_number())
          *slot = it.value().dump();
        else if (!it.value().is_null())
          throw DataError("label '" + it.key() + "' must be a string or number");
      }
    }
    const auto& mj = j.at("metadata");
    if (!mj.is_object()) throw DataError("'metadata' must be an object");
    for (auto it = mj.begin(); it != mj.end(); ++it)
      if (!metadata_field_index(it.key()))
        throw DataError("unknown metadata field '" + it.key() + "'");
    for (int i = 0; i < kNumMetadataFields; ++i) {
      const std::string name(kMetadataFieldNames[i]);
      if (!mj.contains(name)) throw DataError("missing metadata field '" + name + "'");
      if (!mj.at(name).is_number()) throw DataError("metadata field '" + name + "' is not a number");
      r.metadata.at(i) = mj.at(name).get<double>();
    }
    r.sequence_id = get_opt<std::string>(j, "sequence_id");
    r.frame_key = get_opt<double>(j, "frame_key");
    r.lowres_path = get_opt<std::string>(j, "lowres_path");
    r.mask_path = get_opt<std::string>(j, "mask_path");
    r.corrupted_path = get_opt<std::string>(j, "corrupted_path");
    r.scene = get_opt<std::string>(j, "scene");
    r.seed = get_opt<std::uint64_t>(j, "seed");
  } catch (const json::exception& e) {
    throw DataError(e.what());
  }
  return r;
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot open manifest " + path.string());
  Manifest m;
  m.path = path;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.records.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return m;
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << "\n";
}

ValidationReport validate_manifest(const fs::path& path, bool check_files,
                                   const FieldRanges& ranges) {
  ValidationReport rep;
  std::ifstream in(path);
  if (!in) {
    rep.errors.push_back({0, "cannot open manifest " + path.string()});
    return rep;
  }
  const auto base = path.parent_path();
  std::set<std::string> ids;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestRecord r;
    try {
      r = record_from_json(json::parse(line));
    } catch (const json::exception& e) {
      rep.errors.push_back({n, e.what()});
      continue;
    } catch (const DataError& e) {
      rep.errors.push_back({n, e.what()});
      continue;
    }
    ++rep.records;
    if (!ids.insert(r.id).second) rep.errors.push_back({n, "duplicate id '" + r.id + "'"});
    if (check_files) {
      for (const auto* p : {&r.image_path}) {
        if (!fs::exists(base / *p)) rep.errors.push_back({n, "missing file " + *p});
      }
      for (const auto* p : {&r.lowres_path, &r.mask_path, &r.corrupted_path})
        if (*p && !fs::exists(base / **p)) rep.errors.push_back({n, "missing file " + **p});
    }
    const auto vals = r.metadata.values();
    for (int i = 0; i < kNumMetadataFields; ++i) {
      if (!(vals[i] >= ranges[i].low && vals[i] <= ranges[i].high))
        rep.warnings.push_back({n, std::string(kMetadataFieldNames[i]) + "=" +
                                       std::to_string(vals[i]) + " outside range, will be clamped"});
    }
  }
  return rep;
}

}  // namespace diffsat
