#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fcboost/boost_train.hpp"
#include "fcboost/pipeline.hpp"

namespace httplib {
class Server;
}

namespace fcboost {

/// Request rejected by validation; `fields` names every offending field.
class RequestError : public std::runtime_error {
 public:
  RequestError(std::vector<std::string> fields, std::vector<std::string> messages);
  const std::vector<std::string>& fields() const { return fields_; }
  const std::vector<std::string>& messages() const { return messages_; }

 private:
  std::vector<std::string> fields_;
  std::vector<std::string> messages_;
};

/// Raised for requests that arrive before the model is loaded.
class NotReadyError : public std::runtime_error {
 public:
  NotReadyError() : std::runtime_error("model is still loading") {}
};

struct GenerationRequest {
  struct Item {
    Category category = Category::upper;
    std::optional<std::string> item_id;
    std::optional<std::string> image_base64;  // PNG
  };
  std::vector<Item> given;
  std::vector<Item> locks;
  int k = 1;
  int rounds = 2;
  std::optional<std::uint64_t> seed;

  static constexpr int kMaxK = 16;
  static constexpr int kMaxRounds = 4;

  /// Throws RequestError listing every invalid field.
  static GenerationRequest from_json(const nlohmann::json& j);
};

class GenerationService {
 public:
  GenerationService(Layout layout, std::string run_name);
  ~GenerationService();

  /// Loads checkpoints and the catalog; safe to call from a worker thread.
  void warm_up();
  bool ready() const { return snapshot() != nullptr; }

  nlohmann::json health() const;
  /// Test-split items ordered by id. Throws NotReadyError before warm-up.
  nlohmann::json catalog(int page, int page_size = 24) const;
  /// Throws NotReadyError, RequestError, or Error.
  nlohmann::json generate(const nlohmann::json& request) const;
  nlohmann::json generate(const GenerationRequest& request) const;

  std::string model_hash() const;

 private:
  struct Snapshot;
  std::shared_ptr<const Snapshot> snapshot() const;

  Layout layout_;
  std::string run_name_;
  mutable std::mutex mutex_;
  std::shared_ptr<const Snapshot> snapshot_;
  std::string last_error_;
};

/// Registers GET /api/health, GET /api/catalog and POST /api/generate.
void install_routes(httplib::Server& server, GenerationService& service);

/// Blocks serving on host:port; warm-up runs in the background.
void serve(GenerationService& service, const std::string& host, int port);

}  // namespace fcboost
