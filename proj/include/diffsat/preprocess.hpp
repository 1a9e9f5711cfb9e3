#pragma once

#include <torch/torch.h>

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "diffsat/metadata.hpp"
#include "diffsat/rng.hpp"

namespace diffsat {

struct Frame {
  torch::Tensor image;  // [C, H, W]
  MetadataRecord metadata;
};

/// Days since a fixed origin; months counted as 30.44 days.
double date_ordinal(const MetadataRecord& md);

struct PadOptions {
  int target_length = 4;
  /// Sequences shorter than this are skipped (nullopt) and counted.
  int min_frames = 2;
  /// Date used to pick frames when there are too many; defaults to the latest.
  std::optional<MetadataRecord> target_date;
};

/// Sorts frames chronologically. Too few frames: pad with copies of the latest.
/// Too many: keep the target_length frames closest to the target date.
std::optional<std::vector<Frame>> pad_sequence(std::vector<Frame> frames, const PadOptions& opts,
                                               int* skipped = nullptr);

/// Sentinel-2 band order: B1 B2 B3 B4 B5 B6 B7 B8 B8A B9 B10 B11 B12.
const std::array<std::string_view, 13>& sentinel2_bands();
/// The 10 bands kept after dropping B1, B9 and B10, in original order.
std::vector<std::string> kept_sentinel2_bands();

/// [13, H, W] -> [10, H, W].
torch::Tensor select_bands(const torch::Tensor& ms);
/// Named variant; checks the names follow Sentinel-2 order.
torch::Tensor select_bands(const torch::Tensor& ms, const std::vector<std::string>& names);

/// Bilinear resize of [C, H, W] or [N, C, H, W] to target x target.
torch::Tensor resize_control(const torch::Tensor& img, int target, int multiple_of = 1);

enum class CorruptionKind { kCloudWhite, kNoise, kZero };
CorruptionKind parse_corruption_kind(std::string_view s);
std::string to_string(CorruptionKind k);

struct InpaintResult {
  torch::Tensor frame;  // [C, H, W] in [-1, 1]
  bool empty_mask = false;
};

/// Replaces masked pixels (mask [H, W], nonzero = damaged) of a [-1, 1] image.
InpaintResult inpaint_prepare(const torch::Tensor& image, const torch::Tensor& mask,
                              CorruptionKind kind, Rng& rng);

}  // namespace diffsat
