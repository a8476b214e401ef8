#include "carid/serve.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <numeric>
#include <ostream>

#include <opencv2/imgcodecs.hpp>

#include "carid/trainer.hpp"
#include "httplib.h"

namespace carid {

namespace {

using Clock = std::chrono::steady_clock;

thread_local Clock::time_point request_start;

nlohmann::json error_body(std::string_view code, const std::string& message) {
  return {{"schema_version", kApiSchemaVersion}, {"error", {{"code", code}, {"message", message}}}};
}

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

std::string format_mb(std::size_t bytes) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", static_cast<double>(bytes) / (1024.0 * 1024.0));
  return buf;
}

}  // namespace

ClassLabel parse_class_name(const std::string& class_name) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < class_name.size()) {
    while (i < class_name.size() && std::isspace(static_cast<unsigned char>(class_name[i]))) ++i;
    std::size_t j = i;
    while (j < class_name.size() && !std::isspace(static_cast<unsigned char>(class_name[j]))) ++j;
    if (j > i) tokens.push_back(class_name.substr(i, j - i));
    i = j;
  }
  ClassLabel label;
  if (tokens.empty()) return label;
  label.make = tokens.front();
  std::size_t end = tokens.size();
  const auto& last = tokens.back();
  if (end > 1 && last.size() == 4 && std::all_of(last.begin(), last.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    --end;
  }
  for (std::size_t k = 1; k < end; ++k) {
    if (k > 1) label.model_name += ' ';
    label.model_name += tokens[k];
  }
  return label;
}

nlohmann::json to_json(const PredictionResult& result) {
  auto preds = nlohmann::json::array();
  for (const auto& p : result.predictions) {
    preds.push_back({{"class_id", p.class_id},
                     {"class_name", p.class_name},
                     {"make", p.make},
                     {"model_name", p.model_name},
                     {"confidence", p.confidence}});
  }
  return {{"schema_version", kApiSchemaVersion},
          {"predictions", preds},
          {"model_version", result.model_version},
          {"latency_ms", result.latency_ms}};
}

cv::Mat decode_image(std::span<const unsigned char> bytes) {
  if (bytes.empty()) throw Error(Errc::undecodable_image, "empty upload");
  const cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8U, const_cast<unsigned char*>(bytes.data()));
  cv::Mat image;
  try {
    image = cv::imdecode(raw, cv::IMREAD_COLOR);
  } catch (const cv::Exception&) {
    image.release();
  }
  if (image.empty()) throw Error(Errc::undecodable_image, "upload is not a decodable image");
  return image;
}

ServingModel::ServingModel(Checkpoint checkpoint) : checkpoint_(std::move(checkpoint)) {
  policy_ = checkpoint_.meta.eval_policy();
  checkpoint_.model->eval();
  for (auto& p : checkpoint_.model->parameters()) p.set_requires_grad(false);
}

std::shared_ptr<const ServingModel> ServingModel::load(const std::filesystem::path& path) {
  return std::make_shared<const ServingModel>(load_checkpoint(path));
}

std::vector<double> ServingModel::probabilities(const cv::Mat& image) const {
  torch::NoGradGuard guard;
  auto batch = to_batch({eval_transform(policy_, image)});
  Model model = checkpoint_.model;  // shared handle; forward is read-only in eval mode
  auto logits = model->forward(batch).to(torch::kDouble);
  auto probs = torch::softmax(logits, 1).contiguous();
  const double* p = probs.data_ptr<double>();
  return std::vector<double>(p, p + probs.size(1));
}

PredictionResult ServingModel::predict(std::span<const unsigned char> image_bytes, int top_k) const {
  const auto start = Clock::now();
  if (top_k < 1 || top_k > num_classes()) {
    throw Error(Errc::top_k_out_of_range,
                "top_k must lie in [1, " + std::to_string(num_classes()) + "], got " + std::to_string(top_k));
  }
  const auto probs = probabilities(decode_image(image_bytes));
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });

  PredictionResult result;
  result.model_version = model_version();
  for (int k = 0; k < top_k; ++k) {
    const int id = order[k];
    Prediction p;
    p.class_id = id;
    p.class_name = class_names()[id];
    auto label = parse_class_name(p.class_name);
    p.make = std::move(label.make);
    p.model_name = std::move(label.model_name);
    p.confidence = probs[id];
    result.predictions.push_back(std::move(p));
  }
  result.latency_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  return result;
}

Server::Server(std::shared_ptr<const ServingModel> model, ServeOptions options)
    : http_(std::make_unique<httplib::Server>()), options_(std::move(options)), model_(std::move(model)) {
  if (!model_) throw Error(Errc::invalid_argument, "no model to serve");
  const int threads = std::max(1, options_.threads);
  http_->new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
  // Multipart framing adds a little on top of the image itself; the image
  // size is checked exactly in the handler.
  http_->set_payload_max_length(options_.max_upload_bytes + 64 * 1024);
  install_routes();
}

Server::~Server() { stop(); }

std::shared_ptr<const ServingModel> Server::model() const {
  std::shared_lock lock(model_mutex_);
  return model_;
}

void Server::reload(std::shared_ptr<const ServingModel> model) {
  if (!model) throw Error(Errc::invalid_argument, "no model to serve");
  std::unique_lock lock(model_mutex_);
  model_ = std::move(model);
}

int Server::bind() {
  if (options_.port == 0) return http_->bind_to_any_port(options_.host);
  return http_->bind_to_port(options_.host, options_.port) ? options_.port : -1;
}

bool Server::listen() { return http_->listen_after_bind(); }

void Server::stop() {
  if (http_) http_->stop();
}

void Server::wait_until_ready() const { http_->wait_until_ready(); }

void Server::log_access(const std::string& line) {
  if (!options_.access_log) return;
  std::lock_guard lock(log_mutex_);
  *options_.access_log << line << '\n' << std::flush;
}

void Server::audit(std::span<const unsigned char> bytes, const PredictionResult& result) {
  if (options_.audit_dir.empty()) return;
  std::lock_guard lock(log_mutex_);
  std::filesystem::create_directories(options_.audit_dir);
  static std::uint64_t counter = 0;
  const auto stamp = std::chrono::duration_cast<std::chrono::microseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
  const std::string stem = std::to_string(stamp) + "-" + std::to_string(counter++);
  std::ofstream(options_.audit_dir / (stem + ".img"), std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  auto entry = to_json(result);
  entry["file"] = stem + ".img";
  entry["ts"] = utc_now();
  std::ofstream(options_.audit_dir / "audit.jsonl", std::ios::app) << entry.dump() << '\n';
}

void Server::install_routes() {
  auto& http = *http_;

  http.set_pre_routing_handler([](const httplib::Request&, httplib::Response&) {
    request_start = Clock::now();
    return httplib::Server::HandlerResponse::Unhandled;
  });

  http.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", options_.cors_origin);
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.set_header("Access-Control-Max-Age", "600");
    if (options_.cors_origin != "*") res.set_header("Vary", "Origin");
  });

  http.set_error_handler([this](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    if (res.status == 413) {
      send_json(res, 413, error_body("payload_too_large",
                                     "image exceeds the " + format_mb(options_.max_upload_bytes) + " MB upload cap"));
    } else if (res.status == 404) {
      send_json(res, 404, error_body("not_found", "no such endpoint"));
    } else {
      send_json(res, res.status, error_body("http_error", httplib::status_message(res.status)));
    }
  });

  http.set_logger([this](const httplib::Request& req, const httplib::Response& res) {
    if (!options_.access_log) return;
    nlohmann::json line = {{"ts", utc_now()},
                           {"method", req.method},
                           {"path", req.path},
                           {"status", res.status},
                           {"remote_addr", req.remote_addr},
                           {"bytes_in", req.body.size()},
                           {"bytes_out", res.body.size()}};
    if (request_start != Clock::time_point{}) {
      line["latency_ms"] = std::chrono::duration<double, std::milli>(Clock::now() - request_start).count();
    }
    log_access(line.dump());
  });

  http.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  http.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
    auto m = model();
    send_json(res, 200,
              {{"schema_version", kApiSchemaVersion},
               {"status", "ok"},
               {"model_version", m->model_version()},
               {"num_classes", m->num_classes()}});
  });

  http.Get("/api/labels", [this](const httplib::Request&, httplib::Response& res) {
    auto m = model();
    auto labels = nlohmann::json::array();
    for (std::size_t i = 0; i < m->class_names().size(); ++i) {
      const auto& name = m->class_names()[i];
      auto label = parse_class_name(name);
      labels.push_back({{"class_id", i}, {"class_name", name}, {"make", label.make}, {"model_name", label.model_name}});
    }
    send_json(res, 200,
              {{"schema_version", kApiSchemaVersion}, {"model_version", m->model_version()}, {"labels", labels}});
  });

  http.Post("/api/predict", [this](const httplib::Request& req, httplib::Response& res) {
    auto m = model();
    int top_k = options_.default_top_k;
    if (req.has_param("top_k")) {
      const auto text = req.get_param_value("top_k");
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), top_k);
      if (ec != std::errc() || ptr != text.data() + text.size()) {
        send_json(res, 422, error_body("top_k_out_of_range", "top_k must be an integer, got '" + text + "'"));
        return;
      }
    }
    const std::string* payload = &req.body;
    std::string file_content;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("image")) {
        send_json(res, 400, error_body("missing_image", "multipart field 'image' is required"));
        return;
      }
      file_content = req.get_file_value("image").content;
      payload = &file_content;
    }
    if (payload->size() > options_.max_upload_bytes) {
      send_json(res, 413, error_body("payload_too_large",
                                     "image exceeds the " + format_mb(options_.max_upload_bytes) + " MB upload cap"));
      return;
    }
    const std::span<const unsigned char> bytes(reinterpret_cast<const unsigned char*>(payload->data()),
                                               payload->size());
    try {
      auto result = m->predict(bytes, top_k);
      audit(bytes, result);
      send_json(res, 200, to_json(result));
    } catch (const Error& e) {
      switch (e.code()) {
        case Errc::undecodable_image:
          send_json(res, 400, error_body("undecodable_image", e.what()));
          break;
        case Errc::top_k_out_of_range:
          send_json(res, 422, error_body("top_k_out_of_range", e.what()));
          break;
        default:
          send_json(res, 500, error_body(to_string(e.code()), e.what()));
      }
    } catch (const std::exception& e) {
      send_json(res, 500, error_body("internal_error", e.what()));
    }
  });
}

}  // namespace carid
