#pragma once

#include <torch/torch.h>

#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "diffsat/metadata.hpp"

namespace diffsat {

inline constexpr double kPsnrCap = 100.0;

/// Mean squared error over all elements.
double mse(const torch::Tensor& a, const torch::Tensor& b);
/// 10 log10(max_val^2 / MSE), capped at 100 dB when MSE < 1e-10.
double psnr(const torch::Tensor& a, const torch::Tensor& b, double max_val = 1.0);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double max_val = 1.0;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean local SSIM over all valid Gaussian windows, averaged over channels.
/// Images are [C, H, W] or [H, W].
double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& opts = {});

/// A metric over two batches [N, C, H, W] returning one value per pair.
using MetricFn = std::function<std::vector<double>(const torch::Tensor&, const torch::Tensor&)>;

/// Named metrics. psnr, ssim and mse are registered on first use; perceptual
/// metrics backed by external networks can be added at run time.
class MetricRegistry {
 public:
  static MetricRegistry& instance();
  void add(const std::string& name, MetricFn fn);
  bool contains(const std::string& name) const;
  const MetricFn& get(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  MetricRegistry();
  std::map<std::string, MetricFn> fns_;
};

struct MetricSample {
  std::string id;
  std::string metric;
  double value;
  MetadataRecord metadata;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population
  int count = 0;
};

Aggregate aggregate(const std::vector<double>& values);

struct MetricReport {
  std::vector<MetricSample> samples;

  void add(const std::string& id, const std::string& metric, double value,
           const MetadataRecord& md);
  std::vector<std::string> metric_names() const;
  std::map<std::string, Aggregate> summary() const;

  /// One JSON object per sample line.
  void write_jsonl(std::ostream& out) const;
  /// metric,mean,std,count
  void write_summary_csv(std::ostream& out) const;
};

struct GridCell {
  int lat_index = 0;  // floor((lat + 90) / cell_deg)
  int lon_index = 0;  // floor((lon + 180) / cell_deg)
  double lat_min = 0.0, lon_min = 0.0;
  std::map<std::string, Aggregate> metrics;
  int count = 0;
  bool low_confidence = false;
};

/// Buckets samples into lat/lon cells; cells with fewer than `min_count`
/// distinct samples are flagged low-confidence.
std::vector<GridCell> binned_aggregate(const MetricReport& report, double cell_deg,
                                       int min_count = 5);

/// lat_min,lon_min,count,low_confidence,<metric>_mean,...
void write_grid_csv(std::ostream& out, const std::vector<GridCell>& cells,
                    const std::vector<std::string>& metrics);
/// Count per cell as an ASCII map (rows from north to south).
std::string ascii_grid(const std::vector<GridCell>& cells, double cell_deg);

}  // namespace diffsat
