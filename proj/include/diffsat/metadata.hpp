#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "diffsat/rng.hpp"

namespace diffsat {

inline constexpr int kNumMetadataFields = 7;
inline constexpr double kNormalizedScale = 1000.0;
inline constexpr double kProjectionBase = 10000.0;

/// Field names in canonical order.
inline constexpr std::array<std::string_view, kNumMetadataFields> kMetadataFieldNames = {
    "lon", "lat", "gsd", "cloud_cover", "year", "month", "day"};

/// Index of a field name in canonical order, or nullopt.
std::optional<int> metadata_field_index(std::string_view name);

/// The seven raw numerical covariates attached to an image.
struct MetadataRecord {
  double lon = 0.0;          // degrees
  double lat = 0.0;          // degrees
  double gsd = 0.0;          // meters / pixel
  double cloud_cover = 0.0;  // fraction
  double year = 2000.0;
  double month = 1.0;
  double day = 1.0;

  std::array<double, kNumMetadataFields> values() const {
    return {lon, lat, gsd, cloud_cover, year, month, day};
  }
  static MetadataRecord from_values(const std::array<double, kNumMetadataFields>& v);
  double& at(int field);
  double at(int field) const;

  /// Chronological sort key (year, month, day).
  double date_key() const { return year * 10000.0 + month * 100.0 + day; }

  bool operator==(const MetadataRecord&) const = default;
};

struct FieldRange {
  double low = 0.0;
  double high = 1.0;
};

using FieldRanges = std::array<FieldRange, kNumMetadataFields>;

/// lon [-180,180], lat [-90,90], gsd [0,10], cloud [0,1], year [1980,2100],
/// month [0,12], day [0,31].
FieldRanges default_field_ranges();

struct NormalizedMetadata {
  std::array<double, kNumMetadataFields> values{};
  /// Number of fields clamped into range.
  int clamped = 0;
};

/// (raw - low) / (high - low) * 1000, after clamping raw into [low, high].
NormalizedMetadata normalize_metadata(const MetadataRecord& rec,
                                      const FieldRanges& ranges = default_field_ranges());
MetadataRecord denormalize_metadata(const std::array<double, kNumMetadataFields>& values,
                                    const FieldRanges& ranges = default_field_ranges());

/// out[2i] = sin(k * base^(-2i/d)), out[2i+1] = cos(k * base^(-2i/d)).
std::vector<double> sinusoidal_project(double k, int d);
/// Row-wise projection of a [B] tensor into [B, d].
torch::Tensor sinusoidal_embedding(const torch::Tensor& k, int d);

/// Two-layer perceptron d -> D -> D with SiLU, applied to a sinusoidal projection.
class EmbeddingMlpImpl : public torch::nn::Module {
 public:
  EmbeddingMlpImpl(int proj_dim, int embed_dim, bool zero_init_output);
  /// `k` is [B] (normalized scalar values); returns [B, D].
  torch::Tensor forward(const torch::Tensor& k);

  int proj_dim() const { return proj_dim_; }

 private:
  int proj_dim_;
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(EmbeddingMlp);

/// One independent EmbeddingMlp per metadata field; m = sum_j f_j(k_j).
class MetadataEmbedderImpl : public torch::nn::Module {
 public:
  MetadataEmbedderImpl(int proj_dim, int embed_dim, bool zero_init_output = true);

  /// Embedding of one field. `field` in [0, 7).
  torch::Tensor embed(int field, const torch::Tensor& k);
  /// `normalized` is [B, 7]. `field_mask` ([B, 7] of 0/1), when defined, drops
  /// individual field terms from the sum.
  torch::Tensor forward(const torch::Tensor& normalized, const torch::Tensor& field_mask = {});

  int embed_dim() const { return embed_dim_; }
  int proj_dim() const { return proj_dim_; }

 private:
  int proj_dim_;
  int embed_dim_;
  std::vector<EmbeddingMlp> mlps_;
};
TORCH_MODULE(MetadataEmbedder);

/// Builds c = m + t from normalized metadata and the diffusion timestep.
class ConditionerImpl : public torch::nn::Module {
 public:
  ConditionerImpl(int proj_dim, int embed_dim);

  /// `normalized` [B, 7], `t` [B] raw timesteps in {0..1000}; `keep` [B] of 0/1
  /// zeroes the whole metadata vector of dropped rows. Both masks optional.
  torch::Tensor forward(const torch::Tensor& normalized, const torch::Tensor& t,
                        const torch::Tensor& keep = {}, const torch::Tensor& field_mask = {});

  MetadataEmbedder metadata{nullptr};
  EmbeddingMlp timestep{nullptr};
};
TORCH_MODULE(Conditioner);

/// [B, 7] tensor of normalized metadata.
torch::Tensor normalized_batch(const std::vector<MetadataRecord>& recs,
                               const FieldRanges& ranges = default_field_ranges(),
                               torch::Dtype dtype = torch::kFloat32);

/// Per-row keep decisions: false with probability p.
std::vector<bool> metadata_keep_mask(std::size_t batch, double p, Rng& rng);

/// Whole-vector dropout: with probability p returns zeros_like(m), else m.
torch::Tensor metadata_dropout(const torch::Tensor& m, double p, Rng& rng);

}  // namespace diffsat
