#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "diffsat/manifest.hpp"
#include "diffsat/metadata.hpp"
#include "diffsat/rng.hpp"

namespace diffsat {

enum class SceneClass { kField, kHousingGrid, kRiver, kRoadGrid, kForest, kStadium, kPort, kBare };
inline constexpr int kNumSceneClasses = 8;

SceneClass parse_scene_class(std::string_view s);
std::string to_string(SceneClass c);
/// Caption object phrase, e.g. "housing grid".
std::string scene_object_name(SceneClass c);

struct SyntheticSceneSpec {
  std::uint64_t seed = 0;        // layout; shared by the frames of a sequence
  std::uint64_t frame_seed = 0;  // grain and clouds
  MetadataRecord metadata;
  SceneClass scene = SceneClass::kField;
};

/// Seasonal palette: month m in 1..12 -> hue 30 * (m - 1) degrees.
double palette_hue(int month);
/// Nearest palette month (1..12) for a hue in degrees.
int month_from_hue(double hue_deg);

/// gsd < 1 -> 0 (sharp), [1, 3) -> 1, >= 3 -> 2.
int gsd_bucket(double gsd);
inline constexpr int kNumGsdBuckets = 3;
double gsd_blur_sigma(int bucket);
/// Texture cycles per image; grows with |lat|.
double texture_frequency(double lat);

struct Structure {
  int x0, y0, w, h;
};

/// Every development structure the layout can hold, in build order.
std::vector<Structure> scene_structures(const SyntheticSceneSpec& spec, int size = 64);
/// How many leading entries of scene_structures are built by the spec's date.
int visible_structure_count(const SyntheticSceneSpec& spec, int size = 64);

struct RenderedScene {
  torch::Tensor rgb;             // [3, S, S] float32 in [0, 1]
  torch::Tensor structure_mask;  // [S, S] bool, built structures
  torch::Tensor cloud_mask;      // [S, S] bool
};

RenderedScene render_scene_detail(const SyntheticSceneSpec& spec, int size = 64);
inline torch::Tensor render_scene(const SyntheticSceneSpec& spec, int size = 64) {
  return render_scene_detail(spec, size).rgb;
}

/// 13 Sentinel-2-like bands from an RGB rendering, area-averaged by `factor`.
torch::Tensor render_multispectral(const torch::Tensor& rgb, int factor);

/// Per-pixel hue (degrees), saturation and value of a [3, H, W] image in [0, 1].
struct HsvImage {
  std::vector<double> h, s, v;
  int height = 0, width = 0;
};
HsvImage to_hsv(const torch::Tensor& rgb);

struct ProbeResult {
  int month = 0;  // 0 when no saturated pixel exists
  double month_confidence = 0.0;
  int gsd_bucket = 0;
  double gsd_confidence = 0.0;
  double sharpness = 0.0;  // mean of the lower half of |Laplacian| on the value channel
  double cloud_fraction = 0.0;
  double cloud_confidence = 0.0;
};

/// Inverts the renderer's metadata bindings on a [3, H, W] image in [0, 1].
ProbeResult probe_metadata(const torch::Tensor& rgb);

/// Thresholds on ProbeResult::sharpness separating the gsd buckets.
inline constexpr double kSharpnessThresholdSharp = 0.02;
inline constexpr double kSharpnessThresholdSoft = 0.004;

/// Fictional place names keyed by coarse location.
std::string gazetteer_country(double lon, double lat);
std::string gazetteer_city(double lon, double lat);

/// Random metadata for single-image scenes.
MetadataRecord sample_scene_metadata(Rng& rng);

enum class GenMode { kSingle, kTemporal, kSuperres, kInpaint };
GenMode parse_gen_mode(std::string_view s);
std::string to_string(GenMode m);

struct GenOptions {
  GenMode mode = GenMode::kSingle;
  /// Records for single/superres/inpaint; sequences for temporal.
  int n = 64;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  int image_size = 64;
  int lowres_factor = 4;
};

/// Renders and writes the dataset; returns the records of `<out>/manifest.jsonl`.
std::vector<ManifestRecord> generate_synthetic_dataset(const GenOptions& opts);

/// Rebuilds the scene spec stored in a synthetic manifest record.
SyntheticSceneSpec spec_from_record(const ManifestRecord& r);

}  // namespace diffsat
