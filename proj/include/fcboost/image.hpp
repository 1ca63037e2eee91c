#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/types.h>

namespace fcboost {

/// Square RGB image, channel-major (CHW), values in [-1, 1].
struct ItemImage {
  int size = 0;
  std::vector<float> pixels;  // 3 * size * size

  ItemImage() = default;
  explicit ItemImage(int size_) : size(size_), pixels(3 * static_cast<std::size_t>(size_) * size_, 1.0f) {}

  float& at(int channel, int y, int x) {
    return pixels[(static_cast<std::size_t>(channel) * size + y) * size + x];
  }
  float at(int channel, int y, int x) const {
    return pixels[(static_cast<std::size_t>(channel) * size + y) * size + x];
  }

  friend bool operator==(const ItemImage&, const ItemImage&) = default;
};

/// [3, H, W] float tensor sharing no storage with the image.
torch::Tensor to_tensor(const ItemImage& image);
/// Accepts [3, H, W]; values are clamped into [-1, 1].
ItemImage from_tensor(const torch::Tensor& chw);

/// Rounds to the 8-bit grid used by PNG storage.
ItemImage quantize(const ItemImage& image);

std::vector<std::uint8_t> encode_png(const ItemImage& image);
ItemImage decode_png(const std::vector<std::uint8_t>& bytes);
void write_png(const ItemImage& image, const std::string& path);
ItemImage read_png(const std::string& path);

/// Writes a rows x cols grid of equally sized tiles (row-major order).
void write_png_grid(const std::vector<ItemImage>& tiles, int cols, const std::string& path);

}  // namespace fcboost
