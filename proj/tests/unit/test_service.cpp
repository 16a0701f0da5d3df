#include <doctest.h>

#include <httplib.h>

#include <json.hpp>

#include "latentcsi/error.hpp"
#include "latentcsi/service.hpp"
#include "latentcsi/toy_backend.hpp"

using namespace latentcsi;
using nlohmann::json;

namespace {

ModelSpec small_encoder() {
  EncoderConfig c;
  c.s = 64;
  c.b = 8;
  c.d = 1;
  c.latent_channels = 4;
  c.init_spatial = 4;
  c.attention_blocks = {1};
  c.ctx_tokens = 4;
  c.ctx_dim = 8;
  return model_spec(c);
}

ServiceState make_state() {
  ServiceState st;
  st.dataset = generate_synthetic(30, 3, SyntheticConfig{});
  Checkpoint ck;
  ck.spec = small_encoder();
  ck.weights = build_model(ck.spec, 1);
  ck.norm_stats = st.dataset.manifest.norm_stats;
  ck.target = TargetKind::kLatent;
  std::shared_ptr<const LatentBackend> backend = ToyBackend::initialize(ToyBackendConfig{}, 2);
  st.pipeline = std::make_shared<const CsiImagePipeline>(std::move(ck), backend);
  return st;
}

ServiceConfig quick_config() {
  ServiceConfig c;
  c.port = 0;
  c.defaults.steps = 3;
  return c;
}

std::string first_test_id(const ServiceState& st) {
  return st.dataset.manifest.entries[st.dataset.manifest.indices(Split::kTest).front()].sample_id;
}

}  // namespace

TEST_SUITE("service") {

TEST_CASE("request parsing applies defaults and names the bad field") {
  Img2ImgParams d;
  d.steps = 7;
  const auto r = parse_generate_request(R"({"sample_id": "s1", "seed": 4})", d);
  CHECK(*r.sample_id == "s1");
  CHECK(r.params.steps == 7);
  CHECK(r.params.seed == 4);
  CHECK(r.params.strength == d.strength);

  auto field_of = [&](const std::string& body) {
    try {
      parse_generate_request(body, d);
    } catch (const InvalidArgument& e) {
      const std::string m = e.what();
      return m.substr(0, m.find(':'));
    }
    return std::string("accepted");
  };
  CHECK(field_of(R"({"sample_id": "a", "strength": 1.5})") == "strength");
  CHECK(field_of(R"({"sample_id": "a", "steps": 0})") == "steps");
  CHECK(field_of(R"({"sample_id": "a", "steps": 2.5})") == "steps");
  CHECK(field_of(R"({"sample_id": "a", "guidance_scale": -1})") == "guidance_scale");
  CHECK(field_of(R"({"sample_id": "a", "guidance": 2})") == "guidance");
  CHECK(field_of(R"({"sample_id": "a", "seed": -3})") == "seed");
  CHECK(field_of(R"({})") == "sample_id");
  CHECK(field_of(R"({"sample_id": "a", "csi": [1, 2]})") == "sample_id");
  CHECK(field_of("[1]") != "accepted");
  CHECK(field_of("{not json") != "accepted");
  CHECK(field_of(R"({"csi": [1, 2, 3]})") == "accepted");
}

TEST_CASE("api answers 503 until state is provided") {
  InferenceService svc(quick_config());
  CHECK_FALSE(svc.ready());
  auto h = svc.handle("GET", "/healthz", "");
  CHECK(h.status == 200);
  CHECK(json::parse(h.body)["ready"] == false);
  const auto r = svc.handle("GET", "/api/samples", "");
  CHECK(r.status == 503);
  CHECK(r.headers.count("Retry-After") == 1);
  svc.fail("backend missing");
  h = svc.handle("GET", "/healthz", "");
  CHECK(json::parse(h.body)["error"] == "backend missing");
  CHECK(svc.handle("POST", "/api/generate", "{}").status == 503);
}

TEST_CASE("routing, listings and error codes") {
  InferenceService svc(quick_config());
  const auto st = make_state();
  const auto test_idx = st.dataset.manifest.indices(Split::kTest);
  const std::string id = first_test_id(st);
  svc.provide(st);
  REQUIRE(svc.ready());

  const auto list = json::parse(svc.handle("GET", "/api/samples", "").body);
  REQUIRE(list["samples"].size() == test_idx.size());
  for (std::size_t i = 0; i < test_idx.size(); ++i) {
    CHECK(list["samples"][i]["sample_id"] == st.dataset.manifest.entries[test_idx[i]].sample_id);
    CHECK(list["samples"][i]["thumbnail_png_base64"].get<std::string>().rfind("iVBORw0KGgo", 0) == 0);
  }

  const auto one = svc.handle("GET", "/api/samples/" + id, "");
  REQUIRE(one.status == 200);
  const auto j = json::parse(one.body);
  CHECK(j["sample_id"] == id);
  CHECK(j["csi"]["amplitudes"].size() == 64);
  CHECK(j["width"] == 64);

  CHECK(svc.handle("GET", "/api/samples/does-not-exist", "").status == 404);
  CHECK(svc.handle("GET", "/nowhere", "").status == 404);
  CHECK(svc.handle("DELETE", "/api/generate", "").status == 405);

  const auto bad = svc.handle("POST", "/api/generate", json{{"sample_id", id}, {"strength", 1.5}}.dump());
  CHECK(bad.status == 400);
  CHECK(json::parse(bad.body)["field"] == "strength");
  CHECK(svc.handle("POST", "/api/generate", json{{"sample_id", "nope"}}.dump()).status == 404);
  const auto wrong_len = svc.handle("POST", "/api/generate", json{{"csi", {1.0, 2.0}}}.dump());
  CHECK(wrong_len.status == 400);
  CHECK(svc.handle("POST", "/api/generate", json{{"sample_id", id}}.dump(), {{"format", "gif"}}).status == 400);
}

TEST_CASE("generation is reproducible under a seed") {
  InferenceService svc(quick_config());
  const auto st = make_state();
  const std::string id = first_test_id(st);
  svc.provide(st);
  const std::string body = json{{"sample_id", id}, {"seed", 9}, {"strength", 0.5}}.dump();
  const auto a = json::parse(svc.handle("POST", "/api/generate", body).body);
  const auto b = json::parse(svc.handle("POST", "/api/generate", body).body);
  CHECK(a["image_png_base64"] == b["image_png_base64"]);
  CHECK(a["t_start"] == 500);
  CHECK(a["steps_taken"] == 3);
  CHECK(a["params"]["seed"] == 9);
  CHECK(a["latent_mse"].get<double>() >= 0);
  for (const char* k : {"csi_encoder_ms", "img2img_ms", "png_ms", "total_ms"}) CHECK(a["timing"].contains(k));

  const auto png = svc.handle("POST", "/api/generate", body, {{"format", "png"}});
  CHECK(png.status == 200);
  CHECK(png.content_type == "image/png");
  CHECK(png.body.rfind("\x89PNG", 0) == 0);
  CHECK(png.headers.at("X-T-Start") == "500");
  CHECK(json::parse(png.headers.at("X-Params"))["seed"] == 9);

  const auto z = json::parse(svc.handle("POST", "/api/generate", json{{"sample_id", id}, {"strength", 0.0}}.dump()).body);
  CHECK(z["direct_decode"] == true);
  CHECK(z["steps_taken"] == 0);
}

TEST_CASE("the service works over a real socket") {
  InferenceService svc(quick_config());
  const int port = svc.start();
  REQUIRE(port > 0);
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(60, 0);
  auto r = cli.Get("/healthz");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(cli.Get("/api/samples")->status == 503);

  const auto st = make_state();
  const std::string id = first_test_id(st);
  svc.provide(st);
  r = cli.Get("/api/samples");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(r->get_header_value("Content-Type").find("application/json") != std::string::npos);
  r = cli.Post("/api/generate?format=png", json{{"sample_id", id}, {"seed", 1}}.dump(), "application/json");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(r->get_header_value("Content-Type") == "image/png");
  CHECK(r->body.rfind("\x89PNG", 0) == 0);
  r = cli.Post("/api/generate", R"({"sample_id": 3})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 400);
  svc.stop();
}

}  // TEST_SUITE
