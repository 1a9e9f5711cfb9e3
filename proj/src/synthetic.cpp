#include "diffsat/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "diffsat/captions.hpp"
#include "diffsat/errors.hpp"
#include "diffsat/image_io.hpp"
#include "diffsat/preprocess.hpp"
#include "diffsat/strings.hpp"

namespace diffsat {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kGrainStd = 0.03;
constexpr double kCloudAlpha = 0.92;
constexpr double kStructureS = 0.12, kStructureV = 0.68;

constexpr std::array<std::string_view, kNumSceneClasses> kSceneNames = {
    "field", "housing-grid", "river", "road-grid", "forest", "stadium", "port", "bare"};

struct Grid {
  int n;
  std::vector<double> v;
  explicit Grid(int size, double fill = 0.0) : n(size), v(static_cast<std::size_t>(size) * size, fill) {}
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * n + x]; }
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * n + x]; }
};

// Sum of random Gaussian bumps scaled to [0, 1].
Grid smooth_field(Rng& rng, int n, int bumps, double rmin, double rmax) {
  Grid g(n);
  for (int b = 0; b < bumps; ++b) {
    const double cx = rng.uniform() * n, cy = rng.uniform() * n;
    const double r = (rmin + (rmax - rmin) * rng.uniform()) * n;
    const double amp = 0.5 + rng.uniform();
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        g.at(x, y) += amp * std::exp(-d2 / (2.0 * r * r));
      }
  }
  const auto [lo, hi] = std::minmax_element(g.v.begin(), g.v.end());
  const double a = *lo, span = std::max(*hi - *lo, 1e-12);
  for (auto& x : g.v) x = (x - a) / span;
  return g;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double c = v * s;
  const double hp = std::fmod(h, 360.0) / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r1 = 0, g1 = 0, b1 = 0;
  switch (static_cast<int>(hp)) {
    case 0: r1 = c, g1 = x; break;
    case 1: r1 = x, g1 = c; break;
    case 2: g1 = c, b1 = x; break;
    case 3: g1 = x, b1 = c; break;
    case 4: r1 = x, b1 = c; break;
    default: r1 = c, b1 = x; break;
  }
  const double m = v - c;
  r = r1 + m, g = g1 + m, b = b1 + m;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& x : k) x /= sum;
  return k;
}

int reflect(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

void blur(Grid& g, double sigma) {
  if (sigma <= 0.0) return;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2), n = g.n;
  Grid tmp(n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * g.at(reflect(x + i, n), y);
      tmp.at(x, y) = acc;
    }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(x, reflect(y + i, n));
      g.at(x, y) = acc;
    }
}

std::uint64_t layout_stream(std::uint64_t seed) { return mix_seed(seed, 0x4c41594fULL); }
std::uint64_t frame_stream(std::uint64_t seed) { return mix_seed(seed, 0x4652414dULL); }

}  // namespace

SceneClass parse_scene_class(std::string_view s) {
  for (int i = 0; i < kNumSceneClasses; ++i)
    if (kSceneNames[i] == s) return static_cast<SceneClass>(i);
  throw ConfigError("unknown scene class '" + std::string(s) + "'");
}

std::string to_string(SceneClass c) { return std::string(kSceneNames[static_cast<int>(c)]); }

std::string scene_object_name(SceneClass c) {
  switch (c) {
    case SceneClass::kField: return "crop field";
    case SceneClass::kHousingGrid: return "housing grid";
    case SceneClass::kRiver: return "river";
    case SceneClass::kRoadGrid: return "road grid";
    case SceneClass::kForest: return "forest";
    case SceneClass::kStadium: return "stadium";
    case SceneClass::kPort: return "port";
    case SceneClass::kBare: return "bare ground";
  }
  return "scene";
}

double palette_hue(int month) {
  const int m = ((month - 1) % 12 + 12) % 12;
  return 30.0 * m;
}

int month_from_hue(double hue_deg) {
  double h = std::fmod(hue_deg, 360.0);
  if (h < 0) h += 360.0;
  return static_cast<int>(std::lround(h / 30.0)) % 12 + 1;
}

int gsd_bucket(double gsd) { return gsd < 1.0 ? 0 : (gsd < 3.0 ? 1 : 2); }

double gsd_blur_sigma(int bucket) {
  static const double s[kNumGsdBuckets] = {0.0, 0.8, 1.8};
  DIFFSAT_EXPECT(bucket >= 0 && bucket < kNumGsdBuckets, "gsd bucket out of range");
  return s[bucket];
}

double texture_frequency(double lat) { return 2.0 + 6.0 * std::min(std::abs(lat), 90.0) / 90.0; }

std::vector<Structure> scene_structures(const SyntheticSceneSpec& spec, int size) {
  Rng rng(mix_seed(layout_stream(spec.seed), 0x5354ULL));
  std::vector<Structure> out;
  const int n = size;
  if (spec.scene == SceneClass::kHousingGrid) {
    const int step = std::max(n / 6, 6);
    for (int gy = step / 2; gy + 5 < n; gy += step)
      for (int gx = step / 2; gx + 5 < n; gx += step) {
        const int w = 3 + static_cast<int>(rng.uniform_int(0, 2));
        const int h = 3 + static_cast<int>(rng.uniform_int(0, 2));
        out.push_back({gx, gy, w, h});
      }
    // Build order: random but fixed per layout.
    for (std::size_t i = out.size(); i > 1; --i)
      std::swap(out[i - 1], out[static_cast<std::size_t>(rng.uniform_int(0, i - 1))]);
  } else {
    const int count = 6;
    for (int i = 0; i < count; ++i) {
      const int w = 3 + static_cast<int>(rng.uniform_int(0, 4));
      const int h = 3 + static_cast<int>(rng.uniform_int(0, 4));
      const int x0 = static_cast<int>(rng.uniform_int(1, n - w - 1));
      const int y0 = static_cast<int>(rng.uniform_int(1, n - h - 1));
      out.push_back({x0, y0, w, h});
    }
  }
  return out;
}

int visible_structure_count(const SyntheticSceneSpec& spec, int size) {
  const auto all = scene_structures(spec, size);
  const auto& md = spec.metadata;
  const double t = md.year + (std::clamp(md.month, 1.0, 12.0) - 1.0) / 12.0;
  const double frac = std::clamp((t - 2000.0) / 20.0, 0.15, 1.0);
  return static_cast<int>(std::ceil(frac * static_cast<double>(all.size()) - 1e-9));
}

RenderedScene render_scene_detail(const SyntheticSceneSpec& spec, int size) {
  DIFFSAT_EXPECT(size >= 16, "render size must be >= 16");
  const int n = size;
  Rng lay(layout_stream(spec.seed));
  Rng fr(frame_stream(spec.frame_seed));
  const auto& md = spec.metadata;

  const double hue = palette_hue(static_cast<int>(std::lround(md.month)));
  const double freq = texture_frequency(md.lat);
  const double theta = lay.uniform() * kPi;
  const double phase = lay.uniform() * 2.0 * kPi;
  const Grid low = smooth_field(lay, n, 3, 0.2, 0.45);

  Grid S(n), V(n);
  auto tex = [&](int x, int y) {
    const double u = x * std::cos(theta) + y * std::sin(theta);
    return 0.5 + 0.5 * std::sin(2.0 * kPi * freq * u / n + phase);
  };
  auto ground = [&](int x, int y, double s0, double s1, double v0) {
    S.at(x, y) = s0 + s1 * tex(x, y);
    V.at(x, y) = v0 + 0.08 * low.at(x, y);
  };

  // Class-specific extra geometry.
  const double river_amp = (0.1 + 0.15 * lay.uniform()) * n;
  const double river_phase = lay.uniform() * 2.0 * kPi;
  const double river_w = (0.08 + 0.05 * lay.uniform()) * n;
  const int road_step = std::max(n / 4, 8) + static_cast<int>(lay.uniform_int(0, 4));
  const double st_cx = n * (0.4 + 0.2 * lay.uniform()), st_cy = n * (0.4 + 0.2 * lay.uniform());
  const double st_rx = n * (0.22 + 0.08 * lay.uniform()), st_ry = n * (0.14 + 0.06 * lay.uniform());
  const double water_frac = 0.3 + 0.2 * lay.uniform();

  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      switch (spec.scene) {
        case SceneClass::kField: ground(x, y, 0.42, 0.4, 0.52); break;
        case SceneClass::kForest: ground(x, y, 0.68, 0.2, 0.34); break;
        case SceneClass::kBare: ground(x, y, 0.4, 0.15, 0.6); break;
        case SceneClass::kHousingGrid: ground(x, y, 0.45, 0.2, 0.5); break;
        case SceneClass::kRiver: {
          ground(x, y, 0.45, 0.3, 0.5);
          const double yc = n / 2.0 + river_amp * std::sin(2.0 * kPi * x / n + river_phase);
          if (std::abs(y - yc) < river_w / 2) S.at(x, y) = 0.85, V.at(x, y) = 0.3;
          break;
        }
        case SceneClass::kRoadGrid: {
          ground(x, y, 0.45, 0.3, 0.5);
          if (x % road_step < 2 || y % road_step < 2) S.at(x, y) = 0.1, V.at(x, y) = 0.5;
          break;
        }
        case SceneClass::kStadium: {
          ground(x, y, 0.45, 0.25, 0.5);
          const double dx = (x - st_cx) / st_rx, dy = (y - st_cy) / st_ry;
          const double r = std::sqrt(dx * dx + dy * dy);
          if (r < 0.75) S.at(x, y) = 0.8, V.at(x, y) = 0.48;
          else if (r < 1.0) S.at(x, y) = 0.1, V.at(x, y) = 0.66;
          break;
        }
        case SceneClass::kPort: {
          ground(x, y, 0.42, 0.3, 0.52);
          if (x < water_frac * n) S.at(x, y) = 0.85, V.at(x, y) = 0.32;
          break;
        }
      }
    }
  if (spec.scene == SceneClass::kPort) {
    const int piers = 3;
    for (int p = 0; p < piers; ++p) {
      const int py = (p + 1) * n / (piers + 1);
      for (int y = py - 1; y <= py + 1; ++y)
        for (int x = static_cast<int>(water_frac * n * 0.4); x < water_frac * n; ++x)
          S.at(x, y) = 0.1, V.at(x, y) = 0.64;
    }
  }

  RenderedScene out;
  out.structure_mask = torch::zeros({n, n}, torch::kBool);
  auto smask = out.structure_mask.accessor<bool, 2>();
  const auto structures = scene_structures(spec, size);
  const int visible = visible_structure_count(spec, size);
  for (int i = 0; i < visible; ++i) {
    const auto& s = structures[static_cast<std::size_t>(i)];
    for (int y = s.y0; y < std::min(n, s.y0 + s.h); ++y)
      for (int x = s.x0; x < std::min(n, s.x0 + s.w); ++x) {
        S.at(x, y) = kStructureS, V.at(x, y) = kStructureV;
        smask[y][x] = true;
      }
  }

  // Sensor grain on the value channel only, so hue is untouched.
  for (auto& v : V.v) v = std::clamp(v + kGrainStd * fr.normal(), 0.02, 0.98);

  Grid R(n), G(n), B(n);
  for (std::size_t i = 0; i < R.v.size(); ++i)
    hsv_to_rgb(hue, std::clamp(S.v[i], 0.0, 1.0), V.v[i], R.v[i], G.v[i], B.v[i]);
  const double sigma = gsd_blur_sigma(gsd_bucket(md.gsd));
  blur(R, sigma);
  blur(G, sigma);
  blur(B, sigma);

  // Clouds: a smooth field thresholded so exactly round(cover * n^2) pixels are occluded.
  out.cloud_mask = torch::zeros({n, n}, torch::kBool);
  auto cmask = out.cloud_mask.accessor<bool, 2>();
  const double cover = std::clamp(md.cloud_cover, 0.0, 1.0);
  const auto k = static_cast<std::size_t>(std::llround(cover * n * n));
  const Grid field = smooth_field(fr, n, 5, 0.08, 0.3);
  if (k > 0) {
    std::vector<std::size_t> order(field.v.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return field.v[a] > field.v[b]; });
    for (std::size_t i = 0; i < k; ++i) {
      const auto p = order[i];
      R.v[p] = kCloudAlpha + (1 - kCloudAlpha) * R.v[p];
      G.v[p] = kCloudAlpha + (1 - kCloudAlpha) * G.v[p];
      B.v[p] = kCloudAlpha + (1 - kCloudAlpha) * B.v[p];
      cmask[static_cast<long>(p) / n][static_cast<long>(p) % n] = true;
    }
  }

  out.rgb = torch::empty({3, n, n}, torch::kFloat32);
  auto a = out.rgb.accessor<float, 3>();
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      a[0][y][x] = static_cast<float>(R.at(x, y));
      a[1][y][x] = static_cast<float>(G.at(x, y));
      a[2][y][x] = static_cast<float>(B.at(x, y));
    }
  return out;
}

torch::Tensor render_multispectral(const torch::Tensor& rgb, int factor) {
  DIFFSAT_EXPECT(rgb.dim() == 3 && rgb.size(0) == 3, "render_multispectral expects [3, H, W]");
  DIFFSAT_EXPECT(factor >= 1 && rgb.size(1) % factor == 0, "factor must divide the image size");
  auto r = rgb[0], g = rgb[1], b = rgb[2];
  auto v = torch::amax(rgb, 0);
  auto mn = torch::amin(rgb, 0);
  auto s = torch::where(v > 1e-6, (v - mn) / v.clamp_min(1e-6), torch::zeros_like(v));
  auto nir = s * v;  // vegetation-like response
  std::vector<torch::Tensor> bands = {
      0.2 + 0.3 * (r + g + b) / 3.0,  // B1 aerosol
      b,                              // B2
      g,                              // B3
      r,                              // B4
      0.5 * r + 0.5 * nir,            // B5
      0.3 * r + 0.7 * nir,            // B6
      nir,                            // B7
      nir,                            // B8
      0.95 * nir,                     // B8A
      0.2 + 0.1 * v,                  // B9 water vapour
      0.05 + 0.02 * v,                // B10 cirrus
      0.6 * v + 0.2 * (1.0 - s),      // B11
      0.5 * v,                        // B12
  };
  auto full = torch::stack(bands, 0).unsqueeze(0);
  return torch::nn::functional::avg_pool2d(full,
                                           torch::nn::functional::AvgPool2dFuncOptions(factor))
      .squeeze(0)
      .contiguous();
}

HsvImage to_hsv(const torch::Tensor& rgb) {
  DIFFSAT_EXPECT(rgb.dim() == 3 && rgb.size(0) == 3, "expected a [3, H, W] image");
  auto t = rgb.to(torch::kFloat64).contiguous();
  HsvImage out;
  out.height = static_cast<int>(t.size(1));
  out.width = static_cast<int>(t.size(2));
  const auto n = static_cast<std::size_t>(out.height) * out.width;
  out.h.resize(n), out.s.resize(n), out.v.resize(n);
  const double* p = t.data_ptr<double>();
  for (std::size_t i = 0; i < n; ++i) {
    const double r = p[i], g = p[n + i], b = p[2 * n + i];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), c = mx - mn;
    double h = 0.0;
    if (c > 0) {
      if (mx == r) h = 60.0 * std::fmod((g - b) / c, 6.0);
      else if (mx == g) h = 60.0 * ((b - r) / c + 2.0);
      else h = 60.0 * ((r - g) / c + 4.0);
      if (h < 0) h += 360.0;
    }
    out.h[i] = h;
    out.s[i] = mx > 0 ? c / mx : 0.0;
    out.v[i] = mx;
  }
  return out;
}

ProbeResult probe_metadata(const torch::Tensor& rgb) {
  const auto hsv = to_hsv(rgb.clamp(0.0, 1.0));
  const int H = hsv.height, W = hsv.width;
  const auto n = hsv.h.size();
  ProbeResult res;

  std::vector<bool> cloud(n);
  std::size_t clouds = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cloud[i] = hsv.s[i] < 0.15 && hsv.v[i] > 0.9;
    clouds += cloud[i];
  }
  res.cloud_fraction = static_cast<double>(clouds) / static_cast<double>(n);

  std::array<double, 12> hist{};
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (hsv.s[i] < 0.2 || hsv.v[i] < 0.1 || cloud[i]) continue;
    hist[static_cast<std::size_t>(month_from_hue(hsv.h[i]) - 1)] += 1.0;
    total += 1.0;
  }
  // A uniform gray image has no saturated pixels at all.
  if (total > 0) {
    const auto best = std::max_element(hist.begin(), hist.end());
    res.month = static_cast<int>(best - hist.begin()) + 1;
    res.month_confidence = *best / total * std::min(1.0, total / (0.05 * n));
  }

  // Sharpness: lower quartile of |Laplacian| of V away from clouds.
  std::vector<double> lap;
  for (int y = 1; y + 1 < H; ++y)
    for (int x = 1; x + 1 < W; ++x) {
      bool near_cloud = false;
      for (int dy = -1; dy <= 1 && !near_cloud; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (cloud[static_cast<std::size_t>((y + dy) * W + x + dx)]) near_cloud = true;
      if (near_cloud) continue;
      auto v = [&](int xx, int yy) { return hsv.v[static_cast<std::size_t>(yy * W + xx)]; };
      lap.push_back(std::abs(4 * v(x, y) - v(x - 1, y) - v(x + 1, y) - v(x, y - 1) - v(x, y + 1)));
    }
  if (lap.size() >= 16) {
    // Mean of the lower half: robust to structure edges, continuous under 8-bit rounding.
    const auto half = lap.size() / 2;
    std::nth_element(lap.begin(), lap.begin() + static_cast<long>(half), lap.end());
    double acc = 0.0;
    for (std::size_t i = 0; i < half; ++i) acc += lap[i];
    res.sharpness = acc / static_cast<double>(half);
    const double e = std::max(res.sharpness, 1e-9);
    if (e >= kSharpnessThresholdSharp) res.gsd_bucket = 0;
    else if (e >= kSharpnessThresholdSoft) res.gsd_bucket = 1;
    else res.gsd_bucket = 2;
    // Confidence from the log-distance to the nearest threshold.
    const double d = std::min(std::abs(std::log(e / kSharpnessThresholdSharp)),
                              std::abs(std::log(e / kSharpnessThresholdSoft)));
    res.gsd_confidence = std::min(1.0, d / std::log(2.0));
    if (total == 0) res.gsd_confidence = std::min(res.gsd_confidence, 0.1);
  }
  res.cloud_confidence = total > 0 || clouds > 0 ? 1.0 : 0.1;
  return res;
}

std::string gazetteer_country(double lon, double lat) {
  static const char* names[8] = {"Aldoria", "Brenmark", "Cassivane", "Dunmere",
                                 "Eskavia", "Farolia",  "Gandria",   "Hollund"};
  const int col = std::clamp(static_cast<int>((lon + 180.0) / 90.0), 0, 3);
  const int row = lat >= 0 ? 1 : 0;
  return names[row * 4 + col];
}

std::string gazetteer_city(double lon, double lat) {
  static const char* names[6] = {"Port Ilse", "Varno", "Keth", "Amberlin", "Sul Tamar", "Oriel"};
  const int col = std::clamp(static_cast<int>((lon + 180.0) / 120.0), 0, 2);
  const int row = lat >= 0 ? 1 : 0;
  return names[row * 3 + col];
}

MetadataRecord sample_scene_metadata(Rng& rng) {
  MetadataRecord md;
  md.lon = -180.0 + 360.0 * rng.uniform();
  md.lat = -60.0 + 130.0 * rng.uniform();
  md.gsd = 0.3 + 4.7 * rng.uniform();
  md.cloud_cover = rng.bernoulli(0.6) ? 0.0 : 0.05 + 0.45 * rng.uniform();
  md.year = static_cast<double>(rng.uniform_int(2002, 2020));
  md.month = static_cast<double>(rng.uniform_int(1, 12));
  md.day = static_cast<double>(rng.uniform_int(1, 28));
  return md;
}

GenMode parse_gen_mode(std::string_view s) {
  if (s == "single") return GenMode::kSingle;
  if (s == "temporal") return GenMode::kTemporal;
  if (s == "superres") return GenMode::kSuperres;
  if (s == "inpaint") return GenMode::kInpaint;
  throw ConfigError("unknown mode '" + std::string(s) +
                    "' (expected single|temporal|superres|inpaint)");
}

std::string to_string(GenMode m) {
  switch (m) {
    case GenMode::kSingle: return "single";
    case GenMode::kTemporal: return "temporal";
    case GenMode::kSuperres: return "superres";
    case GenMode::kInpaint: return "inpaint";
  }
  return "?";
}

SyntheticSceneSpec spec_from_record(const ManifestRecord& r) {
  DIFFSAT_EXPECT(r.scene && r.seed, "record " + r.id + " carries no synthetic scene");
  SyntheticSceneSpec s;
  s.seed = *r.seed;
  s.frame_seed = mix_seed(*r.seed, static_cast<std::uint64_t>(r.metadata.date_key()));
  s.metadata = r.metadata;
  s.scene = parse_scene_class(*r.scene);
  return s;
}

namespace {

ManifestRecord base_record(const std::string& id, const SyntheticSceneSpec& spec) {
  ManifestRecord r;
  r.id = id;
  r.image_path = "images/" + id + ".png";
  r.dataset_kind = DatasetKind::kSynthetic;
  r.labels.object = scene_object_name(spec.scene);
  r.labels.country = gazetteer_country(spec.metadata.lon, spec.metadata.lat);
  r.metadata = spec.metadata;
  r.scene = to_string(spec.scene);
  r.seed = spec.seed;
  return r;
}

SyntheticSceneSpec make_spec(std::uint64_t layout_seed, const MetadataRecord& md, SceneClass c) {
  SyntheticSceneSpec s;
  s.seed = layout_seed;
  s.frame_seed = mix_seed(layout_seed, static_cast<std::uint64_t>(md.date_key()));
  s.metadata = md;
  s.scene = c;
  return s;
}

}  // namespace

std::vector<ManifestRecord> generate_synthetic_dataset(const GenOptions& opts) {
  if (opts.n < 1) throw ConfigError("--n must be >= 1");
  if (opts.out_dir.empty()) throw ConfigError("output directory required");
  const int size = opts.image_size;
  if (size % 8 != 0 || size < 16) throw ConfigError("image size must be a multiple of 8, >= 16");
  fs::create_directories(opts.out_dir / "images");
  std::vector<ManifestRecord> records;
  const fs::path out = opts.out_dir;

  for (int i = 0; i < opts.n; ++i) {
    Rng rng(mix_seed(opts.seed, static_cast<std::uint64_t>(i)));
    const auto layout_seed = mix_seed(opts.seed ^ 0xD1FFULL, static_cast<std::uint64_t>(i));
    const auto scene = static_cast<SceneClass>(rng.uniform_int(0, kNumSceneClasses - 1));
    MetadataRecord md = sample_scene_metadata(rng);

    switch (opts.mode) {
      case GenMode::kSingle: {
        const auto spec = make_spec(layout_seed, md, scene);
        auto r = base_record(strformat("s%06d", i), spec);
        write_png(out / r.image_path, render_scene(spec, size));
        records.push_back(r);
        break;
      }
      case GenMode::kTemporal: {
        const int frames = static_cast<int>(rng.uniform_int(2, 5));
        md.year = static_cast<double>(rng.uniform_int(2003, 2010));
        const std::string seq = strformat("q%05d", i);
        for (int f = 0; f < frames; ++f) {
          if (f > 0) md.year += static_cast<double>(rng.uniform_int(1, 3));
          md.month = static_cast<double>(rng.uniform_int(1, 12));
          md.day = static_cast<double>(rng.uniform_int(1, 28));
          md.cloud_cover = rng.bernoulli(0.6) ? 0.0 : 0.05 + 0.3 * rng.uniform();
          const auto spec = make_spec(layout_seed, md, scene);
          auto r = base_record(seq + strformat("_f%d", f), spec);
          r.sequence_id = seq;
          r.frame_key = md.date_key();
          write_png(out / r.image_path, render_scene(spec, size));
          records.push_back(r);
        }
        break;
      }
      case GenMode::kSuperres: {
        md.gsd = 0.3 + 0.6 * rng.uniform();
        md.cloud_cover = 0.0;
        const auto spec = make_spec(layout_seed, md, scene);
        auto r = base_record(strformat("r%06d", i), spec);
        const auto hr = render_scene(spec, size);
        write_png(out / r.image_path, hr);
        r.lowres_path = "lowres/" + r.id + ".f32";
        MultispectralImage ms;
        ms.data = render_multispectral(hr, opts.lowres_factor);
        for (auto b : sentinel2_bands()) ms.bands.emplace_back(b);
        write_multispectral(out / *r.lowres_path, ms);
        records.push_back(r);
        break;
      }
      case GenMode::kInpaint: {
        const auto spec = make_spec(layout_seed, md, scene);
        auto r = base_record(strformat("p%06d", i), spec);
        static const char* disasters[4] = {"flooding", "wildfire", "hurricane", "earthquake"};
        r.dataset_kind = DatasetKind::kXbd;
        r.labels = {};
        r.labels.disaster_type = disasters[rng.uniform_int(0, 3)];
        r.labels.phase = "after";
        const auto clean = render_scene(spec, size);
        write_png(out / r.image_path, clean);
        const int box = size / 2;  // 25% of the pixels
        const auto x0 = rng.uniform_int(0, size - box), y0 = rng.uniform_int(0, size - box);
        auto mask = torch::zeros({size, size}, torch::kFloat32);
        mask.narrow(0, y0, box).narrow(1, x0, box).fill_(1.0f);
        r.mask_path = "masks/" + r.id + ".png";
        write_png(out / *r.mask_path, mask.unsqueeze(0));
        Rng crng(mix_seed(layout_seed, 0xC0ULL));
        auto corrupted =
            inpaint_prepare(to_signed(clean), mask, CorruptionKind::kCloudWhite, crng).frame;
        r.corrupted_path = "corrupted/" + r.id + ".png";
        write_png(out / *r.corrupted_path, to_unit(corrupted));
        records.push_back(r);
        break;
      }
    }
  }
  write_manifest(out / "manifest.jsonl", records);
  return records;
}

}  // namespace diffsat
