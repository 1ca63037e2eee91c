#include "fcboost/data.hpp"

namespace fcboost {

OutfitTensors load_split(const DatasetManifest& manifest, Split split, std::int64_t limit) {
  OutfitTensors out;
  for (const OutfitRecord* record : manifest.split(split)) {
    if (limit >= 0 && static_cast<std::int64_t>(out.records.size()) >= limit) break;
    out.records.push_back(*record);
  }
  const int r = manifest.resolution;
  out.images = torch::empty({static_cast<std::int64_t>(out.records.size()), kNumCategories, 3, r, r});
  for (std::size_t n = 0; n < out.records.size(); ++n) {
    for (int s = 0; s < kNumCategories; ++s) {
      const auto image = read_png((manifest.root / out.records[n].files[s]).string());
      if (image.size != r) {
        fail(ErrorCode::io, "image '" + out.records[n].files[s] + "' does not match the manifest resolution");
      }
      out.images[static_cast<std::int64_t>(n)][s].copy_(to_tensor(image));
    }
  }
  return out;
}

torch::Tensor stack_outfit(const torch::Tensor& outfit) {
  if (outfit.dim() != 5 || outfit.size(1) != kNumCategories || outfit.size(2) != 3) {
    fail(ErrorCode::contract, "expected an outfit batch of shape [B, 4, 3, R, R]");
  }
  return outfit.flatten(1, 2);
}

}  // namespace fcboost
