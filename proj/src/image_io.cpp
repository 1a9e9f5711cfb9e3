#include "diffsat/image_io.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>

#include "diffsat/errors.hpp"

namespace diffsat {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(const fs::path& path, const char* what) {
  throw DataError("PNG " + std::string(what) + ": " + path.string());
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

}  // namespace

torch::Tensor read_png(const fs::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw DependencyError("cannot open image " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) png_fail(path, "read init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    png_fail(path, "read init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    png_fail(path, "decode error");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_expand(png);
  png_read_update_info(png, info);
  const auto w = png_get_image_width(png, info);
  const auto h = png_get_image_height(png, info);
  const int ch = png_get_channels(png, info);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * ch);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * ch;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  const int out_ch = (ch == 1 || ch == 2) ? 1 : 3;
  auto t = torch::from_blob(buf.data(), {static_cast<long>(h), static_cast<long>(w), ch},
                            torch::kUInt8)
               .narrow(2, 0, out_ch)
               .permute({2, 0, 1})
               .to(torch::kFloat32)
               .div(255.0);
  return t.contiguous();
}

void write_png(const fs::path& path, const torch::Tensor& img) {
  DIFFSAT_EXPECT(img.dim() == 3 && (img.size(0) == 1 || img.size(0) == 3),
                 "write_png expects [1|3, H, W]");
  ensure_parent(path);
  const int ch = static_cast<int>(img.size(0));
  const auto h = img.size(1), w = img.size(2);
  auto bytes = img.detach()
                   .to(torch::kFloat32)
                   .clamp(0.0, 1.0)
                   .mul(255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) png_fail(path, "write init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    png_fail(path, "write init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    png_fail(path, "encode error");
  }
  png_init_io(png, fp.get());
  png_set_compression_level(png, 6);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               ch == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* data = bytes.data_ptr<std::uint8_t>();
  for (long y = 0; y < h; ++y) png_write_row(png, data + y * w * ch);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_png_grid(const fs::path& path, const torch::Tensor& imgs, int cols) {
  DIFFSAT_EXPECT(imgs.dim() == 4 && imgs.size(0) > 0, "grid expects [N, C, H, W]");
  const auto n = imgs.size(0), c = imgs.size(1), h = imgs.size(2), w = imgs.size(3);
  cols = static_cast<int>(std::min<std::int64_t>(std::max(cols, 1), n));
  const auto rows = (n + cols - 1) / cols;
  auto grid = torch::zeros({c, rows * h, cols * w}, torch::kFloat32);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto r = i / cols, q = i % cols;
    grid.narrow(1, r * h, h).narrow(2, q * w, w).copy_(imgs[i]);
  }
  write_png(path, grid);
}

void write_multispectral(const fs::path& path, const MultispectralImage& img) {
  DIFFSAT_EXPECT(img.data.dim() == 3, "multispectral image must be [C, H, W]");
  DIFFSAT_EXPECT(img.bands.empty() || img.bands.size() == static_cast<std::size_t>(img.data.size(0)),
                 "one band name per channel");
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  ensure_parent(path);
  auto t = img.data.detach().to(torch::kFloat32).contiguous();
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  nlohmann::json side{{"dtype", "float32-le"},
                      {"shape", {t.size(0), t.size(1), t.size(2)}},
                      {"bands", img.bands}};
  std::ofstream js(path.string() + ".json");
  js << side.dump(2) << "\n";
}

MultispectralImage read_multispectral(const fs::path& path) {
  const fs::path side_path = path.string() + ".json";
  std::ifstream js(side_path);
  if (!js) throw DependencyError("missing multispectral sidecar " + side_path.string());
  nlohmann::json side;
  try {
    js >> side;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad sidecar " + side_path.string() + ": " + e.what());
  }
  if (side.value("dtype", "") != "float32-le")
    throw DataError("unsupported multispectral dtype in " + side_path.string());
  auto shape = side.at("shape").get<std::vector<std::int64_t>>();
  if (shape.size() != 3) throw DataError("multispectral shape must have 3 entries");
  MultispectralImage img;
  img.bands = side.value("bands", std::vector<std::string>{});
  img.data = torch::empty(shape, torch::kFloat32);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open " + path.string());
  const auto bytes = static_cast<std::streamsize>(img.data.numel() * sizeof(float));
  in.read(reinterpret_cast<char*>(img.data.data_ptr<float>()), bytes);
  if (in.gcount() != bytes) throw DataError("truncated multispectral file " + path.string());
  return img;
}

torch::Tensor read_image(const fs::path& path) {
  if (path.extension() == ".f32") return read_multispectral(path).data;
  return read_png(path);
}

}  // namespace diffsat
