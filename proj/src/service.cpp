#include "fcboost/service.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <thread>

#include "httplib.h"

#include "fcboost/checkpoint.hpp"
#include "fcboost/image.hpp"
#include "fcboost/metrics.hpp"

namespace fcboost {
namespace {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot read '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string png_base64(const ItemImage& image) {
  const auto bytes = encode_png(image);
  return base64_encode(bytes);
}

struct CatalogItem {
  std::string id;
  std::string outfit_id;
  Category category;
  std::string png_base64;
};

}  // namespace

RequestError::RequestError(std::vector<std::string> fields, std::vector<std::string> messages)
    : std::runtime_error("invalid request"), fields_(std::move(fields)), messages_(std::move(messages)) {}

GenerationRequest GenerationRequest::from_json(const nlohmann::json& j) {
  std::vector<std::string> fields, messages;
  auto bad = [&](const std::string& field, const std::string& message) {
    if (std::find(fields.begin(), fields.end(), field) == fields.end()) fields.push_back(field);
    messages.push_back(field + ": " + message);
  };
  GenerationRequest req;
  if (!j.is_object()) throw RequestError({"body"}, {"body: expected a JSON object"});

  auto parse_items = [&](const char* key, bool allow_id, std::vector<Item>& out) {
    if (!j.contains(key)) return;
    const auto& list = j.at(key);
    if (!list.is_array()) {
      bad(key, "expected an array");
      return;
    }
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto prefix = std::string(key) + "[" + std::to_string(i) + "]";
      const auto& e = list[i];
      if (!e.is_object()) {
        bad(prefix, "expected an object");
        continue;
      }
      Item item;
      bool ok = true;
      try {
        item.category = parse_category(e.value("category", std::string()));
      } catch (const Error&) {
        bad(prefix + ".category", "expected one of upper, bag, lower, shoes");
        ok = false;
      }
      const bool has_id = e.contains("item_id");
      const bool has_image = e.contains("image");
      if (has_id && !allow_id) {
        bad(prefix + ".item_id", "locks must carry an inline image");
        ok = false;
      }
      if (has_id == has_image && allow_id) {
        bad(prefix, "exactly one of item_id or image is required");
        ok = false;
      }
      if (!allow_id && !has_image && !has_id) {
        bad(prefix + ".image", "required");
        ok = false;
      }
      if (has_id) {
        if (e.at("item_id").is_string()) item.item_id = e.at("item_id").get<std::string>();
        else { bad(prefix + ".item_id", "expected a string"); ok = false; }
      }
      if (has_image) {
        if (e.at("image").is_string()) item.image_base64 = e.at("image").get<std::string>();
        else { bad(prefix + ".image", "expected a base64 PNG string"); ok = false; }
      }
      if (ok) out.push_back(std::move(item));
    }
  };
  parse_items("given", true, req.given);
  parse_items("locks", false, req.locks);
  if (!j.contains("given")) bad("given", "required");

  if (j.contains("k")) {
    if (!j.at("k").is_number_integer() || j.at("k").get<long long>() < 1 || j.at("k").get<long long>() > kMaxK) {
      bad("k", "expected an integer in [1, " + std::to_string(kMaxK) + "]");
    } else {
      req.k = j.at("k").get<int>();
    }
  }
  if (j.contains("rounds")) {
    if (!j.at("rounds").is_number_integer() || j.at("rounds").get<long long>() < 0 ||
        j.at("rounds").get<long long>() > kMaxRounds) {
      bad("rounds", "expected an integer in [0, " + std::to_string(kMaxRounds) + "]");
    } else {
      req.rounds = j.at("rounds").get<int>();
    }
  }
  if (j.contains("seed") && !j.at("seed").is_null()) {
    if (!j.at("seed").is_number_unsigned() && !(j.at("seed").is_number_integer() && j.at("seed").get<long long>() >= 0)) {
      bad("seed", "expected a non-negative integer");
    } else {
      req.seed = j.at("seed").get<std::uint64_t>();
    }
  }

  std::array<int, kNumCategories> seen{};
  for (std::size_t i = 0; i < req.given.size(); ++i) {
    if (seen[slot(req.given[i].category)]++) bad("given[" + std::to_string(i) + "].category", "duplicate category");
  }
  for (std::size_t i = 0; i < req.locks.size(); ++i) {
    if (seen[slot(req.locks[i].category)]++) {
      bad("locks[" + std::to_string(i) + "].category", "category already given or locked");
    }
  }
  std::size_t total = 0;
  for (const char* key : {"given", "locks"}) {
    if (j.contains(key) && j.at(key).is_array()) total += j.at(key).size();
  }
  if (j.contains("given") && (total < 1 || total > 3)) {
    bad(req.locks.empty() ? "given" : "locks", "given and locked items together must cover 1 to 3 categories");
  }
  if (!fields.empty()) throw RequestError(fields, messages);
  return req;
}

// ---------------------------------------------------------------------------

struct GenerationService::Snapshot {
  FCBoostModel model;
  int resolution = 0;
  std::vector<CatalogItem> catalog;
  std::map<std::string, std::size_t> by_id;
  std::size_t outfits = 0;
  std::string model_hash;
  nlohmann::json checkpoints;
};

GenerationService::GenerationService(Layout layout, std::string run_name)
    : layout_(std::move(layout)), run_name_(std::move(run_name)) {}

GenerationService::~GenerationService() = default;

std::shared_ptr<const GenerationService::Snapshot> GenerationService::snapshot() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return snapshot_;
}

void GenerationService::warm_up() {
  try {
    auto snap = std::make_shared<Snapshot>();
    snap->model = load_trained_model(layout_, run_name_);
    snap->resolution = snap->model.resolution();
    nlohmann::json hashes = nlohmann::json::object();
    std::string all;
    for (auto& gen : snap->model.generators) {
      const auto h = nn::state_hash(*gen);
      hashes["gan_" + std::string(category_name(gen->category()))] = h;
      all += h;
    }
    hashes["booster"] = nn::state_hash(*snap->model.booster);
    all += hashes["booster"].get<std::string>();
    for (auto& enc : snap->model.encoders) {
      const auto h = nn::state_hash(*enc);
      hashes["encoder_" + std::string(category_name(enc->category()))] = h;
      all += h;
    }
    snap->checkpoints = hashes;
    snap->model_hash = sha256_hex(all);

    const auto manifest = load_manifest(layout_.data());
    for (const OutfitRecord* record : manifest.split(Split::test)) {
      ++snap->outfits;
      for (Category c : kAllCategories) {
        CatalogItem item;
        item.outfit_id = record->id;
        item.category = c;
        item.id = record->id + "_" + std::string(category_name(c));
        item.png_base64 = base64_encode(read_file_bytes(manifest.root / record->files[slot(c)]));
        snap->catalog.push_back(std::move(item));
      }
    }
    std::sort(snap->catalog.begin(), snap->catalog.end(),
              [](const CatalogItem& a, const CatalogItem& b) { return a.id < b.id; });
    for (std::size_t i = 0; i < snap->catalog.size(); ++i) snap->by_id[snap->catalog[i].id] = i;

    std::lock_guard<std::mutex> lock(mutex_);
    snapshot_ = std::move(snap);
    last_error_.clear();
  } catch (const std::exception& e) {
    std::lock_guard<std::mutex> lock(mutex_);
    last_error_ = e.what();
    throw;
  }
}

std::string GenerationService::model_hash() const {
  const auto snap = snapshot();
  return snap ? snap->model_hash : std::string();
}

nlohmann::json GenerationService::health() const {
  const auto snap = snapshot();
  nlohmann::json j = {{"status", snap ? "ready" : "loading"}, {"run", run_name_}, {"model_hash", model_hash()}};
  if (snap) {
    j["checkpoints"] = snap->checkpoints;
    j["resolution"] = snap->resolution;
  } else {
    std::lock_guard<std::mutex> lock(mutex_);
    if (!last_error_.empty()) j["error"] = last_error_;
  }
  return j;
}

nlohmann::json GenerationService::catalog(int page, int page_size) const {
  const auto snap = snapshot();
  if (!snap) throw NotReadyError();
  std::vector<std::string> fields, messages;
  if (page < 0) { fields.push_back("page"); messages.push_back("page: must be non-negative"); }
  if (page_size < 1 || page_size > 200) {
    fields.push_back("page_size");
    messages.push_back("page_size: must lie in [1, 200]");
  }
  if (!fields.empty()) throw RequestError(fields, messages);
  nlohmann::json items = nlohmann::json::array();
  const std::size_t begin = static_cast<std::size_t>(page) * static_cast<std::size_t>(page_size);
  for (std::size_t i = begin; i < std::min(snap->catalog.size(), begin + static_cast<std::size_t>(page_size)); ++i) {
    const auto& item = snap->catalog[i];
    items.push_back({{"id", item.id},
                     {"outfit_id", item.outfit_id},
                     {"category", category_name(item.category)},
                     {"thumbnail", item.png_base64}});
  }
  return {{"items", items},
          {"page", page},
          {"page_size", page_size},
          {"total_items", snap->catalog.size()},
          {"total_outfits", snap->outfits},
          {"model_hash", snap->model_hash}};
}

nlohmann::json GenerationService::generate(const nlohmann::json& request) const {
  if (!snapshot()) throw NotReadyError();
  return generate(GenerationRequest::from_json(request));
}

nlohmann::json GenerationService::generate(const GenerationRequest& request) const {
  const auto snap = snapshot();
  if (!snap) throw NotReadyError();
  const int r = snap->resolution;

  // Resolve given and locked items to images.
  std::vector<std::string> fields, messages;
  auto given = torch::ones({1, kNumCategories, 3, r, r});
  SlotMask mask{};
  std::array<std::string, kNumCategories> echo;
  std::array<std::string, kNumCategories> role;
  auto resolve = [&](const GenerationRequest::Item& item, const std::string& prefix, const char* kind) {
    std::string b64;
    if (item.item_id) {
      const auto it = snap->by_id.find(*item.item_id);
      if (it == snap->by_id.end()) {
        fields.push_back(prefix + ".item_id");
        messages.push_back(prefix + ".item_id: unknown catalog item '" + *item.item_id + "'");
        return;
      }
      if (snap->catalog[it->second].category != item.category) {
        fields.push_back(prefix + ".category");
        messages.push_back(prefix + ".category: does not match the catalog item");
        return;
      }
      b64 = snap->catalog[it->second].png_base64;
    } else {
      b64 = *item.image_base64;
    }
    ItemImage image;
    try {
      image = decode_png(base64_decode(b64));
    } catch (const Error&) {
      fields.push_back(prefix + ".image");
      messages.push_back(prefix + ".image: not a valid base64 PNG");
      return;
    }
    if (image.size != r) {
      fields.push_back(prefix + ".image");
      messages.push_back(prefix + ".image: expected " + std::to_string(r) + "x" + std::to_string(r) + " pixels");
      return;
    }
    const int s = slot(item.category);
    given[0][s].copy_(to_tensor(image));
    mask[s] = true;
    echo[s] = b64;
    role[s] = kind;
  };
  for (std::size_t i = 0; i < request.given.size(); ++i) {
    resolve(request.given[i], "given[" + std::to_string(i) + "]", "given");
  }
  for (std::size_t i = 0; i < request.locks.size(); ++i) {
    resolve(request.locks[i], "locks[" + std::to_string(i) + "]", "locked");
  }
  if (!fields.empty()) throw RequestError(fields, messages);

  std::uint64_t seed = 0;
  if (request.seed) {
    seed = *request.seed;
  } else {
    std::random_device rd;
    seed = ((static_cast<std::uint64_t>(rd()) << 32) | rd()) & ((1ULL << 53) - 1);
  }
  Rng rng(seed);
  const auto z = nn::normal_tensor(rng, {1, request.k, kLatentDim});

  RoundOutputs out;
  {
    torch::NoGradGuard no_grad;
    FCBoostModel model = snap->model;
    out = boost_forward(model, given, {mask}, z, request.rounds);
  }

  nlohmann::json sets = nlohmann::json::array();
  for (int k = 0; k < request.k; ++k) {
    nlohmann::json scores = nlohmann::json::array();
    for (int t = 0; t <= request.rounds; ++t) {
      bool blank = false;
      const double s = oracle_outfit_score_or_zero(out.outfits[static_cast<std::size_t>(t)][0][k], {}, &blank);
      scores.push_back({{"round", t}, {"score", s}, {"blank", blank}});
    }
    nlohmann::json items = nlohmann::json::array();
    for (int c = 0; c < kNumCategories; ++c) {
      nlohmann::json item = {{"category", category_name(category_at(c))}};
      if (mask[c]) {
        item["role"] = role[c];
        item["image"] = echo[c];
      } else {
        nlohmann::json rounds = nlohmann::json::array();
        for (int t = 0; t <= request.rounds; ++t) {
          rounds.push_back(png_base64(from_tensor(out.outfits[static_cast<std::size_t>(t)][0][k][c])));
        }
        item["role"] = "synthesized";
        item["image"] = rounds.back();
        item["rounds"] = rounds;
      }
      item["round_scores"] = scores;
      items.push_back(item);
    }
    sets.push_back({{"index", k}, {"items", items}, {"round_scores", scores}});
  }
  return {{"sets", sets},
          {"seed", seed},
          {"k", request.k},
          {"rounds", request.rounds},
          {"model_hash", snap->model_hash}};
}

// ---------------------------------------------------------------------------

void install_routes(httplib::Server& server, GenerationService& service) {
  auto send = [&service](httplib::Response& res, int status, nlohmann::json body) {
    if (!body.contains("model_hash")) body["model_hash"] = service.model_hash();
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  auto guarded = [send](httplib::Response& res, const std::function<nlohmann::json()>& fn) {
    try {
      send(res, 200, fn());
    } catch (const NotReadyError&) {
      send(res, 503, {{"error", "loading"}, {"status", "loading"}, {"message", "model is still loading"}});
    } catch (const RequestError& e) {
      send(res, 400, {{"error", "invalid request"}, {"fields", e.fields()}, {"messages", e.messages()}});
    } catch (const Error& e) {
      send(res, 500, {{"error", std::string(error_code_name(e.code()))}, {"message", e.what()}});
    } catch (const std::exception& e) {
      send(res, 500, {{"error", "internal"}, {"message", e.what()}});
    }
  };
  server.Get("/api/health", [&service, send](const httplib::Request&, httplib::Response& res) {
    send(res, 200, service.health());
  });
  server.Get("/api/catalog", [&service, guarded](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&]() {
      auto int_param = [&](const char* name, int fallback) {
        if (!req.has_param(name)) return fallback;
        try {
          return std::stoi(req.get_param_value(name));
        } catch (const std::exception&) {
          throw RequestError({name}, {std::string(name) + ": expected an integer"});
        }
      };
      return service.catalog(int_param("page", 0), int_param("page_size", 24));
    });
  });
  server.Post("/api/generate", [&service, guarded](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&]() {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception&) {
        throw RequestError({"body"}, {"body: not valid JSON"});
      }
      return service.generate(body);
    });
  });
}

void serve(GenerationService& service, const std::string& host, int port) {
  httplib::Server server;
  install_routes(server, service);
  std::thread warm([&service]() {
    try {
      service.warm_up();
    } catch (const std::exception&) {
      // Reported through /api/health.
    }
  });
  warm.detach();
  if (!server.listen(host, port)) fail(ErrorCode::io, "cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace fcboost
