#pragma once

// HTTP inference service over a loaded pipeline and dataset.
//
//   GET  /healthz            liveness plus loading state
//   GET  /api/samples        test-split ids with 128 px PNG thumbnails
//   GET  /api/samples/{id}   reference image, caption, box, CSI amplitudes
//   POST /api/generate       JSON request -> JSON (base64 PNG) or image/png
//                            with ?format=png
//
// Requests to /api/* answer 503 until state is provided.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "latentcsi/csi_data.hpp"
#include "latentcsi/pipeline.hpp"

namespace latentcsi {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;           // 0 binds any free port
  int max_concurrency = 2;   // generations running at once
  int thumbnail_size = 128;
  Img2ImgParams defaults{};  // strength 0.6, 100 steps, guidance 1
};

struct ServiceState {
  Dataset dataset;
  std::shared_ptr<const CsiImagePipeline> pipeline;
};

struct GenerateRequest {
  std::optional<std::string> sample_id;
  std::optional<AmplitudeVector> csi;  // raw amplitudes; bypasses the manifest
  Img2ImgParams params;
};

/// Parses and range-checks a request body. Missing fields take the
/// defaults. Throws InvalidArgument whose message starts with the field.
GenerateRequest parse_generate_request(const std::string& body, const Img2ImgParams& defaults);

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::map<std::string, std::string> headers;
};

class InferenceService {
 public:
  explicit InferenceService(ServiceConfig cfg);
  ~InferenceService();
  InferenceService(const InferenceService&) = delete;
  InferenceService& operator=(const InferenceService&) = delete;

  /// Makes the service ready. Safe to call from a loader thread while
  /// serving; state is immutable afterwards.
  void provide(ServiceState state);
  /// Records a loading failure; /healthz reports it and /api/* stay 503.
  void fail(const std::string& message);
  bool ready() const;

  /// Routing without sockets. `query` holds decoded query parameters.
  HttpResponse handle(const std::string& method, const std::string& path,
                      const std::string& body,
                      const std::map<std::string, std::string>& query = {}) const;

  /// Binds the listening socket; returns the bound port.
  int bind();
  /// Serves until stop(); call after bind().
  void serve();
  /// bind() and serve() on a background thread; returns the bound port.
  int start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace latentcsi
