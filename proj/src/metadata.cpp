#include "diffsat/metadata.hpp"

#include <algorithm>
#include <cmath>

#include "diffsat/errors.hpp"

namespace diffsat {

std::optional<int> metadata_field_index(std::string_view name) {
  for (int i = 0; i < kNumMetadataFields; ++i)
    if (kMetadataFieldNames[i] == name) return i;
  return std::nullopt;
}

MetadataRecord MetadataRecord::from_values(const std::array<double, kNumMetadataFields>& v) {
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
}

double& MetadataRecord::at(int field) {
  switch (field) {
    case 0: return lon;
    case 1: return lat;
    case 2: return gsd;
    case 3: return cloud_cover;
    case 4: return year;
    case 5: return month;
    case 6: return day;
    default: throw ContractViolation("metadata field index out of range");
  }
}

double MetadataRecord::at(int field) const { return const_cast<MetadataRecord*>(this)->at(field); }

FieldRanges default_field_ranges() {
  return {{{-180.0, 180.0},
           {-90.0, 90.0},
           {0.0, 10.0},
           {0.0, 1.0},
           {1980.0, 2100.0},
           {0.0, 12.0},
           {0.0, 31.0}}};
}

NormalizedMetadata normalize_metadata(const MetadataRecord& rec, const FieldRanges& ranges) {
  NormalizedMetadata out;
  const auto raw = rec.values();
  for (int j = 0; j < kNumMetadataFields; ++j) {
    const auto [lo, hi] = ranges[j];
    DIFFSAT_EXPECT(hi > lo, "field range must satisfy high > low");
    double v = raw[j];
    if (!(v >= lo && v <= hi)) {
      ++out.clamped;
      v = std::isnan(v) ? lo : std::clamp(v, lo, hi);
    }
    out.values[j] = (v - lo) / (hi - lo) * kNormalizedScale;
  }
  return out;
}

MetadataRecord denormalize_metadata(const std::array<double, kNumMetadataFields>& values,
                                    const FieldRanges& ranges) {
  std::array<double, kNumMetadataFields> raw{};
  for (int j = 0; j < kNumMetadataFields; ++j)
    raw[j] = ranges[j].low + values[j] / kNormalizedScale * (ranges[j].high - ranges[j].low);
  return MetadataRecord::from_values(raw);
}

std::vector<double> sinusoidal_project(double k, int d) {
  if (d <= 0 || d % 2 != 0) throw ConfigError("projection dimension must be positive and even");
  std::vector<double> out(static_cast<std::size_t>(d));
  for (int i = 0; i < d / 2; ++i) {
    const double freq = std::pow(kProjectionBase, -2.0 * i / d);
    out[2 * i] = std::sin(k * freq);
    out[2 * i + 1] = std::cos(k * freq);
  }
  return out;
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& k, int d) {
  if (d <= 0 || d % 2 != 0) throw ConfigError("projection dimension must be positive and even");
  DIFFSAT_EXPECT(k.dim() == 1, "sinusoidal_embedding expects a [B] tensor");
  auto i = torch::arange(d / 2, torch::kFloat64);
  auto freqs = torch::pow(kProjectionBase, -2.0 * i / d);
  auto args = k.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);  // [B, d/2]
  // Interleave: [sin0, cos0, sin1, cos1, ...]
  auto out = torch::stack({torch::sin(args), torch::cos(args)}, 2).reshape({k.size(0), d});
  auto dtype = k.is_floating_point() ? k.scalar_type() : torch::kFloat32;
  return out.to(dtype);
}

EmbeddingMlpImpl::EmbeddingMlpImpl(int proj_dim, int embed_dim, bool zero_init_output)
    : proj_dim_(proj_dim) {
  if (proj_dim <= 0 || proj_dim % 2 != 0)
    throw ConfigError("projection dimension must be positive and even");
  fc1_ = register_module("fc1", torch::nn::Linear(proj_dim, embed_dim));
  fc2_ = register_module("fc2", torch::nn::Linear(embed_dim, embed_dim));
  if (zero_init_output) {
    torch::NoGradGuard ng;
    fc2_->weight.zero_();
    fc2_->bias.zero_();
  }
}

torch::Tensor EmbeddingMlpImpl::forward(const torch::Tensor& k) {
  auto proj = sinusoidal_embedding(k, proj_dim_).to(fc1_->weight.scalar_type());
  return fc2_->forward(torch::silu(fc1_->forward(proj)));
}

MetadataEmbedderImpl::MetadataEmbedderImpl(int proj_dim, int embed_dim, bool zero_init_output)
    : proj_dim_(proj_dim), embed_dim_(embed_dim) {
  for (int j = 0; j < kNumMetadataFields; ++j) {
    mlps_.push_back(register_module(std::string(kMetadataFieldNames[j]),
                                    EmbeddingMlp(proj_dim, embed_dim, zero_init_output)));
  }
}

torch::Tensor MetadataEmbedderImpl::embed(int field, const torch::Tensor& k) {
  DIFFSAT_EXPECT(field >= 0 && field < kNumMetadataFields, "metadata field index out of range");
  return mlps_[static_cast<std::size_t>(field)]->forward(k);
}

torch::Tensor MetadataEmbedderImpl::forward(const torch::Tensor& normalized,
                                            const torch::Tensor& field_mask) {
  DIFFSAT_EXPECT(normalized.dim() == 2 && normalized.size(1) == kNumMetadataFields,
                 "normalized metadata must be [B, 7]");
  torch::Tensor m;
  for (int j = 0; j < kNumMetadataFields; ++j) {
    auto e = embed(j, normalized.select(1, j));
    if (field_mask.defined()) e = e * field_mask.select(1, j).unsqueeze(1).to(e.scalar_type());
    m = m.defined() ? m + e : e;
  }
  return m;
}

ConditionerImpl::ConditionerImpl(int proj_dim, int embed_dim) {
  metadata = register_module("metadata", MetadataEmbedder(proj_dim, embed_dim, true));
  timestep = register_module("timestep", EmbeddingMlp(proj_dim, embed_dim, false));
}

torch::Tensor ConditionerImpl::forward(const torch::Tensor& normalized, const torch::Tensor& t,
                                       const torch::Tensor& keep,
                                       const torch::Tensor& field_mask) {
  auto m = metadata->forward(normalized, field_mask);
  if (keep.defined()) m = m * keep.unsqueeze(1).to(m.scalar_type());
  auto temb = timestep->forward(t.to(normalized.scalar_type()));
  return m + temb;
}

torch::Tensor normalized_batch(const std::vector<MetadataRecord>& recs, const FieldRanges& ranges,
                               torch::Dtype dtype) {
  std::vector<double> flat;
  flat.reserve(recs.size() * kNumMetadataFields);
  for (const auto& r : recs) {
    const auto n = normalize_metadata(r, ranges);
    flat.insert(flat.end(), n.values.begin(), n.values.end());
  }
  return torch::tensor(flat, torch::kFloat64)
      .reshape({static_cast<std::int64_t>(recs.size()), kNumMetadataFields})
      .to(dtype);
}

std::vector<bool> metadata_keep_mask(std::size_t batch, double p, Rng& rng) {
  DIFFSAT_EXPECT(p >= 0.0 && p <= 1.0, "dropout probability must lie in [0, 1]");
  std::vector<bool> keep(batch);
  for (std::size_t i = 0; i < batch; ++i) keep[i] = !rng.bernoulli(p);
  return keep;
}

torch::Tensor metadata_dropout(const torch::Tensor& m, double p, Rng& rng) {
  DIFFSAT_EXPECT(p >= 0.0 && p <= 1.0, "dropout probability must lie in [0, 1]");
  if (rng.bernoulli(p)) return torch::zeros_like(m);
  return m;
}

}  // namespace diffsat
