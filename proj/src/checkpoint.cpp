#include "fcboost/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "fcboost/common.hpp"
#include "fcboost/nn.hpp"

namespace fcboost {
namespace {

constexpr char kMagic[4] = {'F', 'C', 'B', 'K'};

std::string dtype_name(torch::ScalarType type) {
  switch (type) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: fail(ErrorCode::contract, "unsupported checkpoint tensor dtype");
  }
}

torch::ScalarType dtype_from(const std::string& name) {
  if (name == "f32") return torch::kFloat32;
  if (name == "f64") return torch::kFloat64;
  if (name == "i64") return torch::kInt64;
  fail(ErrorCode::io, "unknown checkpoint dtype '" + name + "'");
}

template <typename T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

nlohmann::json read_header(std::istream& in, const std::filesystem::path& path) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    fail(ErrorCode::io, "'" + path.string() + "' is not an FCBK checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version != Checkpoint::kFormatVersion) {
    fail(ErrorCode::incompatible_checkpoint,
         "'" + path.string() + "' has format version " + std::to_string(version));
  }
  const auto length = read_pod<std::uint64_t>(in);
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) fail(ErrorCode::io, "truncated checkpoint header in '" + path.string() + "'");
  return nlohmann::json::parse(text);
}

}  // namespace

const torch::Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  fail(ErrorCode::io, "checkpoint of kind '" + kind + "' has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
  for (const auto& entry : tensors) {
    if (entry.first == name) return true;
  }
  return false;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  nlohmann::json header = checkpoint.metadata;
  header["format_version"] = Checkpoint::kFormatVersion;
  header["kind"] = checkpoint.kind;
  nlohmann::json table = nlohmann::json::array();
  std::vector<torch::Tensor> payload;
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    auto t = tensor.detach().cpu().contiguous();
    const std::uint64_t bytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
    table.push_back({{"name", name},
                     {"dtype", dtype_name(t.scalar_type())},
                     {"shape", t.sizes().vec()},
                     {"offset", offset},
                     {"bytes", bytes}});
    offset += bytes;
    payload.push_back(std::move(t));
  }
  header["tensors"] = std::move(table);
  const std::string text = header.dump();

  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorCode::io, "cannot write checkpoint '" + tmp.string() + "'");
    out.write(kMagic, 4);
    write_pod(out, Checkpoint::kFormatVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : payload) {
      out.write(static_cast<const char*>(t.data_ptr()),
                static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!out) fail(ErrorCode::io, "write failed for checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::io, "cannot move checkpoint into '" + path.string() + "': " + ec.message());
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::missing_artifact, "checkpoint '" + path.string() + "' not found");
  return read_header(in, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::missing_artifact, "checkpoint '" + path.string() + "' not found");
  nlohmann::json header = read_header(in, path);
  Checkpoint checkpoint;
  checkpoint.kind = header.at("kind").get<std::string>();
  const auto table = header.at("tensors");
  for (const auto& entry : table) {
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype"))));
    const auto bytes = entry.at("bytes").get<std::uint64_t>();
    if (bytes != static_cast<std::uint64_t>(t.numel() * t.element_size())) {
      fail(ErrorCode::io, "tensor '" + entry.at("name").get<std::string>() +
                              "' has inconsistent size in '" + path.string() + "'");
    }
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(bytes));
    if (!in) fail(ErrorCode::io, "truncated checkpoint payload in '" + path.string() + "'");
    checkpoint.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  header.erase("tensors");
  header.erase("kind");
  header.erase("format_version");
  checkpoint.metadata = std::move(header);
  return checkpoint;
}

Checkpoint module_checkpoint(const torch::nn::Module& module, std::string kind,
                             nlohmann::json metadata) {
  Checkpoint checkpoint;
  checkpoint.kind = std::move(kind);
  checkpoint.metadata = std::move(metadata);
  for (auto& [name, tensor] : nn::named_state(module)) {
    checkpoint.tensors.emplace_back(name, tensor.detach().clone());
  }
  return checkpoint;
}

void load_module_state(torch::nn::Module& module, const Checkpoint& checkpoint,
                       const std::string& prefix) {
  torch::NoGradGuard no_grad;
  std::size_t matched = 0;
  for (auto& [name, tensor] : nn::named_state(module)) {
    const auto& source = checkpoint.tensor(prefix + name);
    if (source.sizes() != tensor.sizes()) {
      fail(ErrorCode::incompatible_checkpoint,
           "shape mismatch for '" + name + "' in checkpoint of kind '" + checkpoint.kind + "'");
    }
    tensor.copy_(source);
    ++matched;
  }
  std::size_t expected = 0;
  for (const auto& entry : checkpoint.tensors) {
    if (entry.first.rfind(prefix, 0) == 0) ++expected;
  }
  if (matched != expected) {
    fail(ErrorCode::incompatible_checkpoint,
         "checkpoint of kind '" + checkpoint.kind + "' holds tensors the module does not have");
  }
}

void write_json_file(const nlohmann::json& value, const std::filesystem::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path);
  if (!out) fail(ErrorCode::io, "cannot write '" + path.string() + "'");
  out << value.dump(2) << '\n';
  if (!out) fail(ErrorCode::io, "write failed for '" + path.string() + "'");
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::missing_artifact, "'" + path.string() + "' not found");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::io, "malformed JSON in '" + path.string() + "': " + e.what());
  }
}

}  // namespace fcboost
