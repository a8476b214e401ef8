#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <opencv2/core.hpp>

#include "carid/augment.hpp"
#include "carid/dataset.hpp"
#include "carid/model.hpp"
#include "carid/train_config.hpp"
#include "json.hpp"

namespace carid {

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;  // rate used during this epoch

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

nlohmann::json to_json(const EpochMetrics& m);

/// Raised when a training batch yields a non-finite loss. Carries the epochs
/// completed before the failure.
class NanLossError : public Error {
 public:
  NanLossError(int epoch, std::vector<EpochMetrics> history)
      : Error(Errc::nan_loss, "non-finite loss in epoch " + std::to_string(epoch)),
        epoch_(epoch),
        history_(std::move(history)) {}
  int epoch() const noexcept { return epoch_; }
  const std::vector<EpochMetrics>& history() const noexcept { return history_; }

 private:
  int epoch_;
  std::vector<EpochMetrics> history_;
};

/// Decodes and crops record images, optionally keeping them in memory.
/// Safe to share between loader threads.
class ImageSource {
 public:
  explicit ImageSource(bool cache = true) : cache_(cache) {}
  /// Throws ImageNotFound, UndecodableImage, BBoxOutOfBounds.
  cv::Mat get(const ImageRecord& record);

 private:
  bool cache_;
  std::mutex mutex_;
  std::unordered_map<std::string, cv::Mat> images_;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  /// Keyed by class name; only classes present in the split.
  std::map<std::string, double> per_class_accuracy;
  std::vector<int> predictions;
  std::vector<int> labels;
};

struct TrainOptions {
  /// Appended with one JSON object per epoch when non-empty.
  std::filesystem::path metrics_file;
  bool cache_images = true;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  /// 1-based epoch whose weights the model now holds.
  int best_epoch = 0;
  EpochMetrics best;
};

/// Fine-tunes `model` in place and leaves it holding the weights of the
/// epoch with the highest val_accuracy (earliest on ties), in eval mode.
/// Sample i of epoch e is augmented with seed (config.seed, e, i); batches
/// and results do not depend on config.num_workers.
/// Throws EmptySplit, NanLossError, InvalidArgument.
TrainResult train(Model& model, const DatasetManifest& manifest, const AugmentationPolicy& policy,
                  const TrainConfig& config, const TrainOptions& options = {});

/// Deterministic evaluation with eval_transform. Argmax ties resolve to the
/// lowest class id. Throws EmptySplit.
EvalResult evaluate(Model& model, const DatasetManifest& manifest, Split split,
                    const AugmentationPolicy& policy, int batch_size = 32, ImageSource* source = nullptr);

/// Stacks eval_transform outputs into an (n, 3, h, w) tensor.
torch::Tensor to_batch(const std::vector<ImageTensor>& images);

}  // namespace carid
