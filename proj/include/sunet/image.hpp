#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "sunet/tensor.hpp"

namespace sunet {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes an 8-bit PNG to [H,W,3] floats in [0,1] (value / 255). Gray and
/// alpha channels are expanded / dropped; 16-bit input is reduced to 8 bits.
Tensor<float> load_png(const std::filesystem::path& path);

/// Clips to [0,1], rounds to 8 bits and writes an RGB PNG. Accepts [H,W,3]
/// or [1,H,W,3].
void save_png(const std::filesystem::path& path, const Tensor<float>& image);

/// Every *.png under `dir` (recursively), sorted by path.
std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir);

}  // namespace sunet
