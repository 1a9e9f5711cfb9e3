#include "diffsat/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "diffsat/errors.hpp"
#include "diffsat/strings.hpp"

namespace diffsat {

namespace F = torch::nn::functional;

double mse(const torch::Tensor& a, const torch::Tensor& b) {
  DIFFSAT_EXPECT(a.sizes() == b.sizes(), "metric inputs must have identical shapes");
  return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
}

double psnr(const torch::Tensor& a, const torch::Tensor& b, double max_val) {
  DIFFSAT_EXPECT(max_val > 0.0, "max_val must be positive");
  const double m = mse(a, b);
  if (m < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(max_val * max_val / m));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& o) {
  DIFFSAT_EXPECT(a.sizes() == b.sizes(), "metric inputs must have identical shapes");
  DIFFSAT_EXPECT(a.dim() == 2 || a.dim() == 3, "ssim expects [C, H, W] or [H, W]");
  DIFFSAT_EXPECT(o.window >= 1 && o.window % 2 == 1, "ssim window must be odd");
  auto x = (a.dim() == 2 ? a.unsqueeze(0) : a).to(torch::kFloat64).unsqueeze(1);  // [C,1,H,W]
  auto y = (b.dim() == 2 ? b.unsqueeze(0) : b).to(torch::kFloat64).unsqueeze(1);
  DIFFSAT_EXPECT(x.size(2) >= o.window && x.size(3) >= o.window,
                 "image smaller than the SSIM window");
  auto r = torch::arange(o.window, torch::kFloat64) - (o.window - 1) / 2.0;
  auto g = torch::exp(-r.pow(2) / (2.0 * o.sigma * o.sigma));
  g = g / g.sum();
  auto gx = g.reshape({1, 1, 1, o.window});
  auto gy = g.reshape({1, 1, o.window, 1});
  auto filt = [&](const torch::Tensor& t) { return F::conv2d(F::conv2d(t, gx), gy); };

  const double c1 = std::pow(o.k1 * o.max_val, 2), c2 = std::pow(o.k2 * o.max_val, 2);
  auto mx = filt(x), my = filt(y);
  auto sxx = filt(x * x) - mx * mx;
  auto syy = filt(y * y) - my * my;
  auto sxy = filt(x * y) - mx * my;
  auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean({1, 2, 3}).mean().item<double>();
}

MetricRegistry& MetricRegistry::instance() {
  static MetricRegistry r;
  return r;
}

MetricRegistry::MetricRegistry() {
  auto per_pair = [](auto f) {
    return [f](const torch::Tensor& a, const torch::Tensor& b) {
      DIFFSAT_EXPECT(a.sizes() == b.sizes() && a.dim() == 4, "metric batches must be [N,C,H,W]");
      std::vector<double> out;
      for (std::int64_t i = 0; i < a.size(0); ++i) out.push_back(f(a[i], b[i]));
      return out;
    };
  };
  fns_["psnr"] = per_pair([](const torch::Tensor& a, const torch::Tensor& b) { return psnr(a, b); });
  fns_["ssim"] = per_pair([](const torch::Tensor& a, const torch::Tensor& b) { return ssim(a, b); });
  fns_["mse"] = per_pair([](const torch::Tensor& a, const torch::Tensor& b) { return mse(a, b); });
}

void MetricRegistry::add(const std::string& name, MetricFn fn) {
  DIFFSAT_EXPECT(!name.empty() && fn, "metric needs a name and a function");
  fns_[name] = std::move(fn);
}

bool MetricRegistry::contains(const std::string& name) const { return fns_.count(name) > 0; }

const MetricFn& MetricRegistry::get(const std::string& name) const {
  auto it = fns_.find(name);
  if (it == fns_.end()) {
    std::string known;
    for (const auto& [k, v] : fns_) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown metric '" + name + "' (available: " + known + ")");
  }
  return it->second;
}

std::vector<std::string> MetricRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : fns_) out.push_back(k);
  return out;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.count = static_cast<int>(values.size());
  if (values.empty()) return a;
  double sum = 0.0;
  for (double v : values) sum += v;
  a.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(values.size()));
  return a;
}

void MetricReport::add(const std::string& id, const std::string& metric, double value,
                       const MetadataRecord& md) {
  samples.push_back({id, metric, value, md});
}

std::vector<std::string> MetricReport::metric_names() const {
  std::vector<std::string> out;
  for (const auto& s : samples)
    if (std::find(out.begin(), out.end(), s.metric) == out.end()) out.push_back(s.metric);
  return out;
}

std::map<std::string, Aggregate> MetricReport::summary() const {
  std::map<std::string, std::vector<double>> by;
  for (const auto& s : samples) by[s.metric].push_back(s.value);
  std::map<std::string, Aggregate> out;
  for (const auto& [k, v] : by) out[k] = aggregate(v);
  return out;
}

void MetricReport::write_jsonl(std::ostream& out) const {
  for (const auto& s : samples) {
    nlohmann::json j{{"id", s.id}, {"metric", s.metric}, {"value", s.value}};
    nlohmann::json md;
    const auto v = s.metadata.values();
    for (int i = 0; i < kNumMetadataFields; ++i) md[std::string(kMetadataFieldNames[i])] = v[i];
    j["metadata"] = md;
    out << j.dump() << "\n";
  }
}

void MetricReport::write_summary_csv(std::ostream& out) const {
  out << "metric,mean,std,count\n";
  for (const auto& [k, a] : summary())
    out << k << strformat(",%.10g,%.10g,%d\n", a.mean, a.std, a.count);
}

std::vector<GridCell> binned_aggregate(const MetricReport& report, double cell_deg,
                                       int min_count) {
  DIFFSAT_EXPECT(cell_deg > 0.0, "cell size must be positive");
  const int rows = static_cast<int>(std::ceil(180.0 / cell_deg));
  const int cols = static_cast<int>(std::ceil(360.0 / cell_deg));
  std::map<std::pair<int, int>, std::map<std::string, std::vector<double>>> values;
  std::map<std::pair<int, int>, std::set<std::string>> ids;
  for (const auto& s : report.samples) {
    const double lat = std::clamp(s.metadata.lat, -90.0, 90.0);
    const double lon = std::clamp(s.metadata.lon, -180.0, 180.0);
    const int r = std::min(static_cast<int>(std::floor((lat + 90.0) / cell_deg)), rows - 1);
    const int c = std::min(static_cast<int>(std::floor((lon + 180.0) / cell_deg)), cols - 1);
    values[{r, c}][s.metric].push_back(s.value);
    ids[{r, c}].insert(s.id);
  }
  std::vector<GridCell> out;
  for (const auto& [key, per_metric] : values) {
    GridCell cell;
    cell.lat_index = key.first;
    cell.lon_index = key.second;
    cell.lat_min = -90.0 + key.first * cell_deg;
    cell.lon_min = -180.0 + key.second * cell_deg;
    cell.count = static_cast<int>(ids[key].size());
    cell.low_confidence = cell.count < min_count;
    for (const auto& [m, v] : per_metric) cell.metrics[m] = aggregate(v);
    out.push_back(cell);
  }
  return out;
}

void write_grid_csv(std::ostream& out, const std::vector<GridCell>& cells,
                    const std::vector<std::string>& metrics) {
  out << "lat_min,lon_min,count,low_confidence";
  for (const auto& m : metrics) out << "," << m << "_mean," << m << "_std";
  out << "\n";
  for (const auto& c : cells) {
    out << strformat("%g,%g,%d,%d", c.lat_min, c.lon_min, c.count, c.low_confidence ? 1 : 0);
    for (const auto& m : metrics) {
      auto it = c.metrics.find(m);
      if (it == c.metrics.end())
        out << ",,";
      else
        out << strformat(",%.10g,%.10g", it->second.mean, it->second.std);
    }
    out << "\n";
  }
}

std::string ascii_grid(const std::vector<GridCell>& cells, double cell_deg) {
  const int rows = static_cast<int>(std::ceil(180.0 / cell_deg));
  const int cols = static_cast<int>(std::ceil(360.0 / cell_deg));
  std::map<std::pair<int, int>, int> counts;
  for (const auto& c : cells) counts[{c.lat_index, c.lon_index}] = c.count;
  std::ostringstream ss;
  for (int r = rows - 1; r >= 0; --r) {
    for (int c = 0; c < cols; ++c) {
      auto it = counts.find({r, c});
      if (it == counts.end()) ss << '.';
      else if (it->second < 10) ss << it->second;
      else ss << '#';
    }
    ss << "\n";
  }
  return ss.str();
}

}  // namespace diffsat
