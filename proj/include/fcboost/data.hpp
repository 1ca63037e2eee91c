#pragma once

#include <vector>

#include <torch/torch.h>

#include "fcboost/outfits.hpp"

namespace fcboost {

/// Dataset split loaded into memory: images[n][slot] is the item of
/// category `slot` of outfit n as a [3, R, R] tensor in [-1, 1].
struct OutfitTensors {
  std::vector<OutfitRecord> records;
  torch::Tensor images;  // [N, 4, 3, R, R]

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  int resolution() const { return images.defined() ? static_cast<int>(images.size(-1)) : 0; }
  /// [N, 3, R, R] view of one category slot.
  torch::Tensor category(Category c) const { return images.select(1, slot(c)); }
};

/// Reads the PNG files of a split. `limit` < 0 loads every record.
OutfitTensors load_split(const DatasetManifest& manifest, Split split, std::int64_t limit = -1);

/// Concatenates 4 item images [B, 4, 3, R, R] into the encoder input
/// [B, 12, R, R] in slot order.
torch::Tensor stack_outfit(const torch::Tensor& outfit);

}  // namespace fcboost
