#include "diffsat/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "diffsat/errors.hpp"

namespace diffsat {

namespace F = torch::nn::functional;

double date_ordinal(const MetadataRecord& md) {
  return md.year * 365.25 + (md.month - 1.0) * 30.44 + md.day;
}

std::optional<std::vector<Frame>> pad_sequence(std::vector<Frame> frames, const PadOptions& opts,
                                               int* skipped) {
  DIFFSAT_EXPECT(opts.target_length >= 1, "target length must be >= 1");
  if (static_cast<int>(frames.size()) < std::max(opts.min_frames, 1)) {
    if (skipped) ++*skipped;
    return std::nullopt;
  }
  std::stable_sort(frames.begin(), frames.end(), [](const Frame& a, const Frame& b) {
    return date_ordinal(a.metadata) < date_ordinal(b.metadata);
  });
  const auto T = static_cast<std::size_t>(opts.target_length);
  if (frames.size() > T) {
    const double ref = opts.target_date ? date_ordinal(*opts.target_date)
                                        : date_ordinal(frames.back().metadata);
    std::vector<std::size_t> idx(frames.size());
    std::iota(idx.begin(), idx.end(), 0);
    // Ties go to the earlier frame.
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return std::abs(date_ordinal(frames[a].metadata) - ref) <
             std::abs(date_ordinal(frames[b].metadata) - ref);
    });
    idx.resize(T);
    std::sort(idx.begin(), idx.end());
    std::vector<Frame> kept;
    for (auto i : idx) kept.push_back(frames[i]);
    return kept;
  }
  const Frame latest = frames.back();
  while (frames.size() < T) frames.push_back(latest);
  return frames;
}

const std::array<std::string_view, 13>& sentinel2_bands() {
  static const std::array<std::string_view, 13> b = {"B1", "B2", "B3",  "B4",  "B5",  "B6", "B7",
                                                     "B8", "B8A", "B9", "B10", "B11", "B12"};
  return b;
}

namespace {
bool is_dropped_band(std::string_view b) { return b == "B1" || b == "B9" || b == "B10"; }
}  // namespace

std::vector<std::string> kept_sentinel2_bands() {
  std::vector<std::string> out;
  for (auto b : sentinel2_bands())
    if (!is_dropped_band(b)) out.emplace_back(b);
  return out;
}

torch::Tensor select_bands(const torch::Tensor& ms) {
  DIFFSAT_EXPECT(ms.dim() == 3 && ms.size(0) == 13,
                 "select_bands expects a 13-band [13, H, W] image, got " +
                     std::to_string(ms.dim() == 3 ? ms.size(0) : -1) + " bands");
  std::vector<std::int64_t> keep;
  for (std::size_t i = 0; i < sentinel2_bands().size(); ++i)
    if (!is_dropped_band(sentinel2_bands()[i])) keep.push_back(static_cast<std::int64_t>(i));
  return ms.index_select(0, torch::tensor(keep, torch::kLong));
}

torch::Tensor select_bands(const torch::Tensor& ms, const std::vector<std::string>& names) {
  DIFFSAT_EXPECT(names.size() == 13, "select_bands expects 13 band names");
  for (std::size_t i = 0; i < 13; ++i)
    DIFFSAT_EXPECT(names[i] == sentinel2_bands()[i],
                   "band " + std::to_string(i) + " is " + names[i] + ", expected " +
                       std::string(sentinel2_bands()[i]));
  return select_bands(ms);
}

torch::Tensor resize_control(const torch::Tensor& img, int target, int multiple_of) {
  DIFFSAT_EXPECT(target > 0 && multiple_of > 0 && target % multiple_of == 0,
                 "resize target must be a positive multiple of the VAE factor");
  DIFFSAT_EXPECT(img.dim() == 3 || img.dim() == 4, "resize_control expects [C,H,W] or [N,C,H,W]");
  const bool single = img.dim() == 3;
  auto x = single ? img.unsqueeze(0) : img;
  if (x.size(2) == target && x.size(3) == target) return img;
  auto y = F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<std::int64_t>{target, target})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  return single ? y.squeeze(0) : y;
}

CorruptionKind parse_corruption_kind(std::string_view s) {
  if (s == "cloud_white" || s == "cloud-white") return CorruptionKind::kCloudWhite;
  if (s == "noise") return CorruptionKind::kNoise;
  if (s == "zero") return CorruptionKind::kZero;
  throw ConfigError("unknown corruption kind '" + std::string(s) +
                    "' (expected cloud_white|noise|zero)");
}

std::string to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kCloudWhite: return "cloud_white";
    case CorruptionKind::kNoise: return "noise";
    case CorruptionKind::kZero: return "zero";
  }
  return "?";
}

InpaintResult inpaint_prepare(const torch::Tensor& image, const torch::Tensor& mask,
                              CorruptionKind kind, Rng& rng) {
  DIFFSAT_EXPECT(image.dim() == 3, "inpaint_prepare expects a [C, H, W] image");
  DIFFSAT_EXPECT(mask.dim() == 2 && mask.size(0) == image.size(1) && mask.size(1) == image.size(2),
                 "mask shape must match the image's H x W");
  auto m = (mask != 0).unsqueeze(0).expand_as(image);
  InpaintResult out;
  if (!m.any().item<bool>()) {
    out.empty_mask = true;
    out.frame = image.clone();
    return out;
  }
  torch::Tensor fill;
  switch (kind) {
    case CorruptionKind::kCloudWhite: fill = torch::ones_like(image); break;
    case CorruptionKind::kZero: fill = torch::zeros_like(image); break;
    case CorruptionKind::kNoise:
      fill = rng.normal(image.sizes(), image.scalar_type()).mul(0.5).clamp(-1.0, 1.0);
      break;
  }
  out.frame = torch::where(m, fill, image);
  return out;
}

}  // namespace diffsat
