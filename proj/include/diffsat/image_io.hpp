#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

namespace diffsat {

namespace fs = std::filesystem;

/// 8-bit PNG (gray, RGB or RGBA; alpha dropped) -> float [C, H, W] in [0, 1].
torch::Tensor read_png(const fs::path& path);
/// [C, H, W] (C = 1 or 3) in [0, 1], rounded to 8 bits. Creates parent dirs.
void write_png(const fs::path& path, const torch::Tensor& img);
/// Tiles [N, C, H, W] images into a grid with `cols` columns.
void write_png_grid(const fs::path& path, const torch::Tensor& imgs, int cols);

struct MultispectralImage {
  torch::Tensor data;  // [C, H, W] float32
  std::vector<std::string> bands;
};

/// Flat little-endian float32 file plus a `<path>.json` sidecar with shape and
/// band names.
void write_multispectral(const fs::path& path, const MultispectralImage& img);
MultispectralImage read_multispectral(const fs::path& path);

/// PNG or multispectral, by extension (.png / .f32). Values as stored.
torch::Tensor read_image(const fs::path& path);

/// [0, 1] <-> [-1, 1].
inline torch::Tensor to_signed(const torch::Tensor& x) { return x * 2.0 - 1.0; }
inline torch::Tensor to_unit(const torch::Tensor& x) { return (x + 1.0) * 0.5; }

}  // namespace diffsat
