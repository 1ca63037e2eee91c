#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace fcboost {

/// Checkpoint container shared by every network and by the training state.
///
/// Layout (little endian):
///   "FCBK" | u32 format version | u64 header length | header JSON | payload
///
/// The header is a self-describing JSON object: `kind`, free-form metadata
/// (category, resolution, architecture config, config hash) and a `tensors`
/// table giving name, dtype, shape, byte offset and byte length of each
/// tensor inside the payload.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string kind;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor& tensor(const std::string& name) const;
  bool has_tensor(const std::string& name) const;
};

/// Writes atomically (temporary file + rename).
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Header only; the payload is not read.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

/// Copies named state (parameters and buffers) of `module` into a checkpoint.
Checkpoint module_checkpoint(const torch::nn::Module& module, std::string kind,
                             nlohmann::json metadata);
/// Loads tensors into `module` in place. Every module tensor must be present
/// with the same shape; extra tensors in the checkpoint are an error.
void load_module_state(torch::nn::Module& module, const Checkpoint& checkpoint,
                       const std::string& prefix = "");

void write_json_file(const nlohmann::json& value, const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace fcboost
