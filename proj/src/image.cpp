#include "fcboost/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <torch/torch.h>

#include "fcboost/common.hpp"

namespace fcboost {
namespace {

std::uint8_t to_byte(float v) {
  const float unit = std::clamp((v + 1.0f) * 0.5f, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(unit * 255.0f));
}

float from_byte(std::uint8_t b) { return static_cast<float>(b) / 255.0f * 2.0f - 1.0f; }

std::vector<std::uint8_t> encode_rgb(const std::vector<std::uint8_t>& rgb, int width, int height) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, rgb.data(), 0, nullptr)) {
    fail(ErrorCode::io, std::string("PNG encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, rgb.data(), 0, nullptr)) {
    fail(ErrorCode::io, std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "write failed for '" + path + "'");
}

}  // namespace

torch::Tensor to_tensor(const ItemImage& image) {
  return torch::from_blob(const_cast<float*>(image.pixels.data()), {3, image.size, image.size},
                          torch::kFloat32)
      .clone();
}

ItemImage from_tensor(const torch::Tensor& chw) {
  if (chw.dim() != 3 || chw.size(0) != 3 || chw.size(1) != chw.size(2)) {
    fail(ErrorCode::contract, "expected a [3, S, S] image tensor");
  }
  const auto t = chw.detach().to(torch::kCPU, torch::kFloat32).clamp(-1.0, 1.0).contiguous();
  ItemImage image(static_cast<int>(t.size(1)));
  std::memcpy(image.pixels.data(), t.data_ptr<float>(), image.pixels.size() * sizeof(float));
  return image;
}

ItemImage quantize(const ItemImage& image) {
  ItemImage out = image;
  for (float& v : out.pixels) v = from_byte(to_byte(v));
  return out;
}

std::vector<std::uint8_t> encode_png(const ItemImage& image) {
  const int s = image.size;
  std::vector<std::uint8_t> rgb(3 * static_cast<std::size_t>(s) * s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      for (int c = 0; c < 3; ++c) {
        rgb[(static_cast<std::size_t>(y) * s + x) * 3 + c] = to_byte(image.at(c, y, x));
      }
    }
  }
  return encode_rgb(rgb, s, s);
}

ItemImage decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    fail(ErrorCode::io, std::string("PNG decode failed: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  if (image.width != image.height) {
    png_image_free(&image);
    fail(ErrorCode::domain, "PNG item images must be square");
  }
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
    fail(ErrorCode::io, std::string("PNG decode failed: ") + image.message);
  }
  const int s = static_cast<int>(image.width);
  ItemImage out(s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.at(c, y, x) = from_byte(rgb[(static_cast<std::size_t>(y) * s + x) * 3 + c]);
      }
    }
  }
  return out;
}

void write_png(const ItemImage& image, const std::string& path) {
  write_bytes(encode_png(image), path);
}

ItemImage read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open image '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes);
  } catch (const Error& e) {
    fail(e.code(), path + ": " + e.what());
  }
}

void write_png_grid(const std::vector<ItemImage>& tiles, int cols, const std::string& path) {
  if (tiles.empty() || cols <= 0) fail(ErrorCode::contract, "empty image grid");
  const int s = tiles.front().size;
  const int rows = static_cast<int>((tiles.size() + cols - 1) / cols);
  const int width = cols * s;
  const int height = rows * s;
  std::vector<std::uint8_t> rgb(3 * static_cast<std::size_t>(width) * height, 255);
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    if (tiles[t].size != s) fail(ErrorCode::contract, "grid tiles differ in size");
    const int ox = static_cast<int>(t % cols) * s;
    const int oy = static_cast<int>(t / cols) * s;
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        for (int c = 0; c < 3; ++c) {
          rgb[(static_cast<std::size_t>(oy + y) * width + ox + x) * 3 + c] =
              to_byte(tiles[t].at(c, y, x));
        }
      }
    }
  }
  write_bytes(encode_rgb(rgb, width, height), path);
}

}  // namespace fcboost
