#include "latentcsi/service.hpp"

#include <httplib.h>

#include <chrono>
#include <cmath>
#include <json.hpp>
#include <mutex>
#include <semaphore>
#include <set>
#include <thread>
#include <unordered_map>

#include "latentcsi/error.hpp"
#include "latentcsi/image.hpp"

namespace latentcsi {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

HttpResponse json_response(int status, const json& j) {
  HttpResponse r;
  r.status = status;
  r.body = j.dump();
  return r;
}

HttpResponse error_response(int status, const std::string& message, const std::string& field = "") {
  json j = {{"error", message}};
  if (!field.empty()) j["field"] = field;
  return json_response(status, j);
}

[[noreturn]] void reject(const std::string& field, const std::string& why) {
  throw InvalidArgument(field + ": " + why);
}

std::string field_of(const std::string& message) {
  const auto p = message.find(':');
  return p == std::string::npos ? "" : message.substr(0, p);
}

json params_json(const Img2ImgParams& p) {
  return {{"prompt", p.prompt},
          {"strength", p.strength},
          {"steps", p.steps},
          {"guidance_scale", p.guidance_scale},
          {"seed", p.seed}};
}

std::string b64(const std::string& bytes) { return httplib::detail::base64_encode(bytes); }

}  // namespace

GenerateRequest parse_generate_request(const std::string& body, const Img2ImgParams& defaults) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception&) {
    reject("body", "not valid JSON");
  }
  if (!j.is_object()) reject("body", "expected a JSON object");
  static const std::set<std::string> known{"sample_id", "csi", "prompt", "strength",
                                           "steps", "guidance_scale", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) reject(k, "unknown field");
  }
  GenerateRequest r;
  r.params = defaults;
  if (j.contains("sample_id")) {
    if (!j["sample_id"].is_string()) reject("sample_id", "must be a string");
    r.sample_id = j["sample_id"].get<std::string>();
  }
  if (j.contains("csi")) {
    const auto& c = j["csi"];
    if (!c.is_array() || c.empty()) reject("csi", "must be a nonempty array of amplitudes");
    AmplitudeVector a;
    for (const auto& v : c) {
      if (!v.is_number() || !std::isfinite(v.get<double>())) reject("csi", "values must be finite numbers");
      a.values.push_back(v.get<float>());
    }
    r.csi = std::move(a);
  }
  if (r.sample_id && r.csi) reject("sample_id", "give either sample_id or csi, not both");
  if (!r.sample_id && !r.csi) reject("sample_id", "one of sample_id or csi is required");
  if (j.contains("prompt")) {
    if (!j["prompt"].is_string()) reject("prompt", "must be a string");
    r.params.prompt = j["prompt"].get<std::string>();
  }
  if (j.contains("strength")) {
    if (!j["strength"].is_number()) reject("strength", "must be a number");
    const double s = j["strength"].get<double>();
    if (!(s >= 0.0 && s <= 1.0)) reject("strength", "must be in [0, 1]");
    r.params.strength = s;
  }
  if (j.contains("steps")) {
    if (!j["steps"].is_number_integer()) reject("steps", "must be an integer");
    const auto s = j["steps"].get<long long>();
    if (s < 1 || s > 1000) reject("steps", "must be in [1, 1000]");
    r.params.steps = static_cast<int>(s);
  }
  if (j.contains("guidance_scale")) {
    if (!j["guidance_scale"].is_number()) reject("guidance_scale", "must be a number");
    const double g = j["guidance_scale"].get<double>();
    if (!(std::isfinite(g) && g >= 0.0)) reject("guidance_scale", "must be finite and >= 0");
    r.params.guidance_scale = g;
  }
  if (j.contains("seed")) {
    // Non-negative integer literals parse as unsigned.
    if (!j["seed"].is_number_unsigned()) reject("seed", "must be a non-negative integer");
    r.params.seed = j["seed"].get<std::uint64_t>();
  }
  return r;
}

struct Loaded {
  ServiceState state;
  std::unordered_map<std::string, std::size_t> by_id;
  std::string samples_body;
};

struct InferenceService::Impl {
  ServiceConfig cfg;
  mutable std::mutex mu;
  std::shared_ptr<const Loaded> loaded;
  std::string load_error;
  mutable std::counting_semaphore<1024> slots;
  httplib::Server server;
  std::thread thread;
  int port = -1;

  explicit Impl(ServiceConfig c) : cfg(std::move(c)), slots(std::max(1, cfg.max_concurrency)) {}

  std::shared_ptr<const Loaded> current() const {
    std::lock_guard lk(mu);
    return loaded;
  }

  HttpResponse healthz() const {
    std::lock_guard lk(mu);
    json j = {{"status", "ok"}, {"ready", loaded != nullptr}};
    if (!load_error.empty()) j["error"] = load_error;
    if (loaded) {
      const auto& p = *loaded->state.pipeline;
      j["target"] = target_name(p.target());
      j["backend"] = p.backend() ? json(p.backend()->info().identity) : json(nullptr);
      j["samples"] = loaded->state.dataset.manifest.entries.size();
    }
    return json_response(200, j);
  }

  HttpResponse sample(const Loaded& l, const std::string& id) const {
    auto it = l.by_id.find(id);
    if (it == l.by_id.end()) return error_response(404, "unknown sample '" + id + "'");
    const auto& ds = l.state.dataset;
    const auto& e = ds.manifest.entries[it->second];
    json j = {{"sample_id", e.sample_id},
              {"split", split_name(e.split)},
              {"caption", e.caption},
              {"timestamp", e.csi_timestamp},
              {"width", ds.images[it->second].width},
              {"height", ds.images[it->second].height},
              {"image_png_base64", b64(encode_png(ds.images[it->second]))},
              {"csi", {{"subcarriers", ds.amplitudes[it->second].values.size()},
                       {"amplitudes", ds.amplitudes[it->second].values}}}};
    if (e.subject_box) {
      const auto& b = *e.subject_box;
      j["box"] = {b.x, b.y, b.w, b.h};
    } else {
      j["box"] = nullptr;
    }
    return json_response(200, j);
  }

  HttpResponse generate(const Loaded& l, const std::string& body,
                        const std::map<std::string, std::string>& query) const {
    GenerateRequest req;
    try {
      req = parse_generate_request(body, cfg.defaults);
    } catch (const InvalidArgument& e) {
      return error_response(400, e.what(), field_of(e.what()));
    }
    const auto& ds = l.state.dataset;
    const auto& pl = *l.state.pipeline;
    AmplitudeVector raw;
    std::optional<std::size_t> index;
    if (req.sample_id) {
      auto it = l.by_id.find(*req.sample_id);
      if (it == l.by_id.end()) return error_response(404, "unknown sample '" + *req.sample_id + "'");
      index = it->second;
      raw = ds.amplitudes[it->second];
    } else {
      raw = *req.csi;
      if (static_cast<int>(raw.values.size()) != pl.checkpoint().spec.s) {
        return error_response(400,
                              "csi: expected " + std::to_string(pl.checkpoint().spec.s) +
                                  " amplitudes, got " + std::to_string(raw.values.size()),
                              "csi");
      }
    }
    if (pl.target() == TargetKind::kPixel && req.params.strength != 0.0) {
      return error_response(400, "strength: pixel checkpoints support only strength 0", "strength");
    }

    slots.acquire();
    struct Release {
      std::counting_semaphore<1024>& s;
      ~Release() { s.release(); }
    } release{slots};

    const auto t0 = Clock::now();
    Img2ImgResult res;
    json timing;
    std::optional<double> lmse;
    if (pl.target() == TargetKind::kLatent) {
      const LatentTensor z = pl.predict_latent(raw);
      timing["csi_encoder_ms"] = ms_since(t0);
      const auto t1 = Clock::now();
      res = img2img(z, req.params, *pl.backend());
      timing["img2img_ms"] = ms_since(t1);
      if (index) lmse = latent_mse(z, target_latent(*pl.backend(), ds.images[*index]));
    } else {
      res = pl.generate(raw, req.params);
      timing["csi_encoder_ms"] = ms_since(t0);
      timing["img2img_ms"] = 0.0;
    }
    const auto t2 = Clock::now();
    const std::string png = encode_png(res.image);
    timing["png_ms"] = ms_since(t2);
    timing["total_ms"] = ms_since(t0);

    json echo = params_json(req.params);
    echo["sample_id"] = req.sample_id ? json(*req.sample_id) : json(nullptr);
    const bool direct = req.params.strength == 0.0;

    auto fmt = query.find("format");
    if (fmt != query.end() && fmt->second == "png") {
      HttpResponse r;
      r.content_type = "image/png";
      r.body = png;
      r.headers["X-Params"] = echo.dump();
      r.headers["X-T-Start"] = std::to_string(res.t_start);
      r.headers["X-Direct-Decode"] = direct ? "true" : "false";
      if (lmse) r.headers["X-Latent-MSE"] = json(*lmse).dump();
      return r;
    }
    if (fmt != query.end() && fmt->second != "json") {
      return error_response(400, "format: must be 'json' or 'png'", "format");
    }
    json j = {{"image_png_base64", b64(png)},
              {"width", res.image.width},
              {"height", res.image.height},
              {"params", echo},
              {"t_start", res.t_start},
              {"steps_taken", res.steps_taken},
              {"direct_decode", direct},
              {"latent_mse", lmse ? json(*lmse) : json(nullptr)},
              {"target", target_name(pl.target())},
              {"timing", timing}};
    return json_response(200, j);
  }
};

InferenceService::InferenceService(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {
  if (impl_->cfg.max_concurrency < 1 || impl_->cfg.max_concurrency > 1024) {
    throw InvalidArgument("max_concurrency must be in [1, 1024]");
  }
  if (impl_->cfg.thumbnail_size < 1) throw InvalidArgument("thumbnail_size must be >= 1");
  validate(impl_->cfg.defaults);
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> q;
    for (const auto& [k, v] : req.params) q.emplace(k, v);
    HttpResponse r = handle(req.method, req.path, req.body, q);
    res.status = r.status;
    for (const auto& [k, v] : r.headers) res.set_header(k, v);
    res.set_content(std::move(r.body), r.content_type);
  };
  impl_->server.Get(".*", route);
  impl_->server.Post(".*", route);
}

InferenceService::~InferenceService() { stop(); }

void InferenceService::provide(ServiceState state) {
  if (!state.pipeline) throw InvalidArgument("service state has no pipeline");
  auto l = std::make_shared<Loaded>();
  const auto& ds = state.dataset;
  const int T = impl_->cfg.thumbnail_size;
  json list = json::array();
  for (std::size_t i = 0; i < ds.manifest.entries.size(); ++i) {
    const auto& e = ds.manifest.entries[i];
    l->by_id.emplace(e.sample_id, i);
    if (e.split != Split::kTest) continue;
    list.push_back({{"sample_id", e.sample_id},
                    {"caption", e.caption},
                    {"timestamp", e.csi_timestamp},
                    {"thumbnail_png_base64", b64(encode_png(resize_bilinear(ds.images[i], T, T)))}});
  }
  l->samples_body = json{{"samples", list}, {"thumbnail_size", T}}.dump();
  l->state = std::move(state);
  std::lock_guard lk(impl_->mu);
  impl_->loaded = std::move(l);
  impl_->load_error.clear();
}

void InferenceService::fail(const std::string& message) {
  std::lock_guard lk(impl_->mu);
  impl_->load_error = message;
}

bool InferenceService::ready() const { return impl_->current() != nullptr; }

HttpResponse InferenceService::handle(const std::string& method, const std::string& path,
                                      const std::string& body,
                                      const std::map<std::string, std::string>& query) const {
  try {
    if (path == "/healthz") {
      if (method != "GET") return error_response(405, "use GET");
      return impl_->healthz();
    }
    const bool api = path.rfind("/api/", 0) == 0;
    if (!api) return error_response(404, "no route for " + path);
    const auto l = impl_->current();
    if (!l) {
      HttpResponse r = error_response(503, "service is loading");
      r.headers["Retry-After"] = "1";
      return r;
    }
    if (path == "/api/samples") {
      if (method != "GET") return error_response(405, "use GET");
      HttpResponse r;
      r.body = l->samples_body;
      return r;
    }
    constexpr std::string_view kSample = "/api/samples/";
    if (path.rfind(kSample, 0) == 0) {
      if (method != "GET") return error_response(405, "use GET");
      return impl_->sample(*l, path.substr(kSample.size()));
    }
    if (path == "/api/generate") {
      if (method != "POST") return error_response(405, "use POST");
      return impl_->generate(*l, body, query);
    }
    return error_response(404, "no route for " + path);
  } catch (const InvalidArgument& e) {
    return error_response(400, e.what(), field_of(e.what()));
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
}

int InferenceService::bind() {
  if (impl_->cfg.port == 0) {
    impl_->port = impl_->server.bind_to_any_port(impl_->cfg.host);
  } else if (impl_->server.bind_to_port(impl_->cfg.host, impl_->cfg.port)) {
    impl_->port = impl_->cfg.port;
  } else {
    impl_->port = -1;
  }
  if (impl_->port < 0) {
    throw IoError("cannot bind " + impl_->cfg.host + ":" + std::to_string(impl_->cfg.port));
  }
  return impl_->port;
}

void InferenceService::serve() { impl_->server.listen_after_bind(); }

int InferenceService::start() {
  const int port = bind();
  impl_->thread = std::thread([this] { serve(); });
  impl_->server.wait_until_ready();
  return port;
}

void InferenceService::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace latentcsi
