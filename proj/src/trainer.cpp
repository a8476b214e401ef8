#include "carid/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include "carid/rng.hpp"
#include "carid/scheduler.hpp"

namespace carid {

namespace {

// Runs fn(i) for i in [0, n) across `workers` threads. Each index writes its
// own output slot, so scheduling never changes results.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  const auto w = static_cast<std::size_t>(std::max(1, std::min<int>(workers, static_cast<int>(n))));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(w);
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += w) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<std::pair<std::string, torch::Tensor>> snapshot(const Model& model) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : model->named_parameters()) out.emplace_back(p.key(), p.value().detach().clone());
  for (const auto& b : model->named_buffers()) out.emplace_back(b.key(), b.value().detach().clone());
  return out;
}

void restore(Model& model, const std::vector<std::pair<std::string, torch::Tensor>>& state) {
  torch::NoGradGuard guard;
  auto params = model->named_parameters();
  auto buffers = model->named_buffers();
  for (const auto& [name, value] : state) {
    if (auto* p = params.find(name)) {
      p->copy_(value);
    } else if (auto* b = buffers.find(name)) {
      b->copy_(value);
    }
  }
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

std::unique_ptr<torch::optim::Optimizer> make_optimizer(const Model& model, const TrainConfig& config) {
  std::vector<torch::Tensor> params;
  for (const auto& p : model->parameters()) {
    if (p.requires_grad()) params.push_back(p);
  }
  if (config.optimizer == OptimizerKind::sgd) {
    return std::make_unique<torch::optim::SGD>(
        params, torch::optim::SGDOptions(config.lr).momentum(config.momentum).weight_decay(config.weight_decay));
  }
  return std::make_unique<torch::optim::Adam>(params,
                                              torch::optim::AdamOptions(config.lr).weight_decay(config.weight_decay));
}

}  // namespace

nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},           {"train_loss", m.train_loss}, {"train_accuracy", m.train_accuracy},
          {"val_loss", m.val_loss},     {"val_accuracy", m.val_accuracy}, {"lr", m.lr}};
}

cv::Mat ImageSource::get(const ImageRecord& record) {
  const std::string key = record.image_path.string() + "#" + std::to_string(record.bbox.x_min) + "," +
                          std::to_string(record.bbox.y_min) + "," + std::to_string(record.bbox.x_max) + "," +
                          std::to_string(record.bbox.y_max);
  if (cache_) {
    std::lock_guard lock(mutex_);
    if (auto it = images_.find(key); it != images_.end()) return it->second;
  }
  cv::Mat image = load_cropped(record);
  if (cache_) {
    std::lock_guard lock(mutex_);
    images_.emplace(key, image);
  }
  return image;
}

torch::Tensor to_batch(const std::vector<ImageTensor>& images) {
  if (images.empty()) return torch::empty({0, 3, 0, 0});
  const auto& first = images.front();
  auto out = torch::empty({static_cast<int64_t>(images.size()), first.channels, first.height, first.width});
  auto* dst = out.data_ptr<float>();
  const std::size_t plane = first.data.size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].data.size() != plane) throw Error(Errc::shape_mismatch, "batch images differ in size");
    std::copy(images[i].data.begin(), images[i].data.end(), dst + i * plane);
  }
  return out;
}

EvalResult evaluate(Model& model, const DatasetManifest& manifest, Split split, const AugmentationPolicy& policy,
                    int batch_size, ImageSource* source) {
  const auto records = manifest.records_in(split);
  if (records.empty()) throw Error(Errc::empty_split, std::string(to_string(split)) + " split is empty");
  ImageSource local(false);
  ImageSource& images = source ? *source : local;

  model->eval();
  torch::NoGradGuard guard;
  EvalResult result;
  double loss_sum = 0.0;
  std::map<int, std::pair<int, int>> per_class;  // correct, total
  const std::size_t bs = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t start = 0; start < records.size(); start += bs) {
    const std::size_t end = std::min(records.size(), start + bs);
    std::vector<ImageTensor> tensors;
    std::vector<int64_t> labels;
    for (std::size_t i = start; i < end; ++i) {
      tensors.push_back(eval_transform(policy, images.get(records[i])));
      labels.push_back(records[i].class_id);
    }
    auto logits = model->forward(to_batch(tensors)).to(torch::kDouble);
    auto target = torch::tensor(labels, torch::kLong);
    loss_sum += torch::nll_loss(torch::log_softmax(logits, 1), target, {}, at::Reduction::Sum).item<double>();
    auto pred = logits.argmax(1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int p = static_cast<int>(pred[static_cast<int64_t>(i)].item<int64_t>());
      const int y = static_cast<int>(labels[i]);
      result.predictions.push_back(p);
      result.labels.push_back(y);
      auto& [c, t] = per_class[y];
      c += p == y;
      ++t;
    }
  }
  int correct = 0;
  for (const auto& [cls, ct] : per_class) {
    correct += ct.first;
    const std::string name = cls < static_cast<int>(manifest.class_names.size()) ? manifest.class_names[cls]
                                                                                   : std::to_string(cls);
    result.per_class_accuracy[name] = static_cast<double>(ct.first) / ct.second;
  }
  result.accuracy = static_cast<double>(correct) / static_cast<double>(records.size());
  result.loss = loss_sum / static_cast<double>(records.size());
  return result;
}

TrainResult train(Model& model, const DatasetManifest& manifest, const AugmentationPolicy& policy,
                  const TrainConfig& config, const TrainOptions& options) {
  if (config.epochs <= 0) throw Error(Errc::invalid_argument, "epochs must be > 0");
  if (config.batch_size <= 0) throw Error(Errc::invalid_argument, "batch_size must be > 0");
  if (model->num_classes() != manifest.num_classes) {
    throw Error(Errc::invalid_argument, "model has " + std::to_string(model->num_classes()) +
                                            " classes, manifest has " + std::to_string(manifest.num_classes));
  }
  const auto train_records = manifest.records_in(Split::train);
  if (train_records.empty()) throw Error(Errc::empty_split, "train split is empty");
  if (manifest.count(Split::val) == 0) throw Error(Errc::empty_split, "val split is empty");

  torch::set_num_threads(std::max(1, config.threads));
  torch::manual_seed(derive_key({config.seed, hash_label("train")}) >> 1);
  ImageSource images(options.cache_images);
  auto optimizer = make_optimizer(model, config);
  SchedulerState sched;
  sched.current_lr = config.lr;

  std::ofstream metrics_out;
  if (!options.metrics_file.empty()) {
    if (options.metrics_file.has_parent_path()) std::filesystem::create_directories(options.metrics_file.parent_path());
    metrics_out.open(options.metrics_file, std::ios::app);
    if (!metrics_out) throw Error(Errc::io_error, "cannot open " + options.metrics_file.string());
  }

  TrainResult result;
  std::vector<std::pair<std::string, torch::Tensor>> best_state;
  const std::size_t n = train_records.size();
  const auto bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    CounterRng shuffle_rng(derive_key({config.seed, hash_label("shuffle"), static_cast<std::uint64_t>(epoch)}));
    seeded_shuffle(order.begin(), order.end(), shuffle_rng);

    model->train(true);
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t count = std::min(n, start + bs) - start;
      std::vector<ImageTensor> tensors(count);
      std::vector<int64_t> labels(count);
      parallel_for(count, config.num_workers, [&](std::size_t k) {
        const std::size_t idx = order[start + k];
        const auto& rec = train_records[idx];
        const auto seed = derive_key({config.seed, hash_label("sample"), static_cast<std::uint64_t>(epoch), idx});
        tensors[k] = apply(policy, images.get(rec), seed);
        labels[k] = rec.class_id;
      });
      auto target = torch::tensor(labels, torch::kLong);
      optimizer->zero_grad();
      auto logits = model->forward(to_batch(tensors));
      auto loss = torch::cross_entropy_loss(logits, target);
      const double loss_value = loss.item<double>();
      if (!std::isfinite(loss_value)) throw NanLossError(epoch, result.history);
      loss.backward();
      optimizer->step();
      loss_sum += loss_value * static_cast<double>(count);
      correct += logits.argmax(1).eq(target).sum().item<int64_t>();
    }

    const auto val = evaluate(model, manifest, Split::val, policy, config.batch_size, &images);
    if (!std::isfinite(val.loss)) throw NanLossError(epoch, result.history);
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(n);
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    m.val_loss = val.loss;
    m.val_accuracy = val.accuracy;
    m.lr = sched.current_lr;
    result.history.push_back(m);

    if (result.best_epoch == 0 || m.val_accuracy > result.best.val_accuracy) {
      result.best_epoch = epoch;
      result.best = m;
      best_state = snapshot(model);
    }
    if (metrics_out) metrics_out << to_json(m).dump() << '\n' << std::flush;
    if (options.on_epoch) options.on_epoch(m);

    sched = scheduler_step(sched, m.val_accuracy, config.patience, config.factor, config.threshold);
    set_lr(*optimizer, sched.current_lr);
  }

  restore(model, best_state);
  model->eval();
  return result;
}

}  // namespace carid
