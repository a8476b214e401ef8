#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "carid/checkpoint.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace carid {

/// Version tag carried by every JSON body the service returns.
inline constexpr int kApiSchemaVersion = 1;

struct ClassLabel {
  std::string make;
  std::string model_name;
};

/// make = first whitespace-separated token; model_name = the rest with a
/// trailing four-digit year removed ("BMW M3 Coupe 2012" -> "BMW", "M3 Coupe").
ClassLabel parse_class_name(const std::string& class_name);

struct Prediction {
  int class_id = 0;
  std::string class_name;
  std::string make;
  std::string model_name;
  double confidence = 0.0;
};

struct PredictionResult {
  std::vector<Prediction> predictions;  // confidence descending, class id ascending on ties
  std::string model_version;
  double latency_ms = 0.0;
};

nlohmann::json to_json(const PredictionResult& result);

/// Eval-mode model plus everything needed to preprocess and label. Read-only
/// after construction, so predict() may run concurrently.
class ServingModel {
 public:
  explicit ServingModel(Checkpoint checkpoint);
  /// Throws CorruptCheckpoint, VersionMismatch, IoError.
  static std::shared_ptr<const ServingModel> load(const std::filesystem::path& path);

  /// Full softmax over all classes for a decoded BGR image.
  std::vector<double> probabilities(const cv::Mat& image) const;

  /// Throws UndecodableImage, TopKOutOfRange.
  PredictionResult predict(std::span<const unsigned char> image_bytes, int top_k) const;

  const std::vector<std::string>& class_names() const noexcept { return checkpoint_.meta.class_names; }
  const std::string& model_version() const noexcept { return checkpoint_.model_version; }
  int num_classes() const noexcept { return checkpoint_.meta.num_classes; }
  const CheckpointMeta& meta() const noexcept { return checkpoint_.meta; }

 private:
  Checkpoint checkpoint_;
  AugmentationPolicy policy_;
};

/// Decodes encoded image bytes to 8-bit BGR. Throws UndecodableImage.
cv::Mat decode_image(std::span<const unsigned char> bytes);

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t max_upload_bytes = 10u * 1024u * 1024u;
  int default_top_k = 5;
  int threads = 8;
  std::string cors_origin = "*";
  /// When non-empty, each upload and its prediction are written here.
  std::filesystem::path audit_dir;
  /// JSON-lines access log; a null stream disables it.
  std::ostream* access_log = nullptr;
};

/// HTTP front end:
///   POST /api/predict   multipart field "image" (or a raw image body), ?top_k=
///   GET  /api/labels
///   GET  /api/health
/// Errors are {"schema_version", "error": {"code", "message"}}.
class Server {
 public:
  Server(std::shared_ptr<const ServingModel> model, ServeOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds options.host:options.port (0 picks a free port); returns the
  /// bound port or -1.
  int bind();
  /// Blocks until stop().
  bool listen();
  void stop();
  void wait_until_ready() const;

  /// Swaps the served model; in-flight requests finish on the old one.
  void reload(std::shared_ptr<const ServingModel> model);
  std::shared_ptr<const ServingModel> model() const;

 private:
  void install_routes();
  void log_access(const std::string& line);
  void audit(std::span<const unsigned char> bytes, const PredictionResult& result);

  std::unique_ptr<httplib::Server> http_;
  ServeOptions options_;
  mutable std::shared_mutex model_mutex_;
  std::shared_ptr<const ServingModel> model_;
  std::mutex log_mutex_;
};

}  // namespace carid
