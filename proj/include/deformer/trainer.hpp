#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "deformer/checkpoint.hpp"
#include "deformer/datasets.hpp"
#include "deformer/joint.hpp"
#include "deformer/model.hpp"
#include "deformer/optimizer.hpp"

namespace deformer {

// Type-erased training view over a dataset: canonical features per sample.
struct FeatureDataset {
  int dim = 0;
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  std::size_t test_size = 0;
  std::function<SampleFeatures(std::size_t)> train;
  std::function<SampleFeatures(std::size_t)> val;
  std::function<SampleFeatures(std::size_t)> test;
};

inline FeatureDataset dataset_view(const ImageDataset& images) {
  FeatureDataset view;
  view.dim = images.dim();
  view.train_size = images.train.size();
  view.val_size = images.val.size();
  view.test_size = images.test.size();
  const int rows = images.rows, cols = images.cols;
  view.train = [&images, rows, cols](std::size_t i) { return image_features(images.train[i], rows, cols); };
  view.val = [&images, rows, cols](std::size_t i) { return image_features(images.val[i], rows, cols); };
  view.test = [&images, rows, cols](std::size_t i) { return image_features(images.test[i], rows, cols); };
  return view;
}

inline FeatureDataset dataset_view(const TabularDataset& table) {
  FeatureDataset view;
  view.dim = table.dim();
  view.train_size = static_cast<std::size_t>(table.train.rows());
  view.val_size = static_cast<std::size_t>(table.val.rows());
  view.test_size = static_cast<std::size_t>(table.test.rows());
  view.train = [&table](std::size_t i) {
    return row_features(table.train.row(static_cast<Index>(i)).transpose());
  };
  view.val = [&table](std::size_t i) {
    return row_features(table.val.row(static_cast<Index>(i)).transpose());
  };
  view.test = [&table](std::size_t i) {
    return row_features(table.test.row(static_cast<Index>(i)).transpose());
  };
  return view;
}

// Holds seeded draws from a synthetic joint; the oracle keeps the table.
struct JointDraws {
  int dim = 0;
  std::vector<std::vector<std::uint8_t>> train;
  std::vector<std::vector<std::uint8_t>> val;
  std::vector<std::vector<std::uint8_t>> test;

  static JointDraws from(const SyntheticJoint& joint, std::size_t n_train, std::size_t n_val,
                         std::size_t n_test, std::uint64_t seed) {
    JointDraws draws;
    draws.dim = joint.dim();
    Rng rng(seed, StreamLabel::data);
    draws.train.reserve(n_train);
    for (std::size_t i = 0; i < n_train; ++i) draws.train.push_back(joint.sample(rng));
    draws.val.reserve(n_val);
    for (std::size_t i = 0; i < n_val; ++i) draws.val.push_back(joint.sample(rng));
    draws.test.reserve(n_test);
    for (std::size_t i = 0; i < n_test; ++i) draws.test.push_back(joint.sample(rng));
    return draws;
  }
};

inline FeatureDataset dataset_view(const JointDraws& draws) {
  FeatureDataset view;
  view.dim = draws.dim;
  view.train_size = draws.train.size();
  view.val_size = draws.val.size();
  view.test_size = draws.test.size();
  view.train = [&draws](std::size_t i) { return binary_column_features(draws.train[i]); };
  view.val = [&draws](std::size_t i) { return binary_column_features(draws.val[i]); };
  view.test = [&draws](std::size_t i) { return binary_column_features(draws.test[i]); };
  return view;
}

struct TrainConfig {
  AdamConfig adam;
  int batch_size = 1;
  int max_epochs = 50;
  int patience = 5;
  double lr_factor = 0.1;
  int early_stop_multiple = 3;
  long long max_steps = 0;    // 0 = unlimited
  double max_seconds = 0.0;   // 0 = unlimited
  std::uint64_t seed = 12345;
  std::string out_dir;        // empty = keep everything in memory
  bool verbose = false;
};

struct EpochRow {
  int epoch = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> history;
  double best_val = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
  bool stopped_early = false;
  std::string best_checkpoint;
  std::string last_checkpoint;
};

namespace detail {

template <typename S>
void save_training_checkpoint(const std::string& path, DeformerModel<S>& model, AdamState<S>& adam,
                              const PlateauSchedule& schedule, int epoch, const Rng& data_rng,
                              const Rng& ordering_rng, const Rng& dropout_rng) {
  Metadata metadata;
  metadata.emplace_back("precision", Scalar<S>::name);
  metadata.emplace_back("epoch", std::to_string(epoch));
  append_model_config(metadata, model.cfg);
  char lr_text[32];
  std::snprintf(lr_text, sizeof(lr_text), "%.17g", adam.cfg.lr);
  metadata.emplace_back("optimizer.lr_current", lr_text);
  metadata.emplace_back("optimizer.step_count", std::to_string(adam.step_count));
  char best_text[32];
  std::snprintf(best_text, sizeof(best_text), "%.17g", schedule.best);
  metadata.emplace_back("schedule.best", best_text);
  metadata.emplace_back("schedule.epochs_since_best", std::to_string(schedule.epochs_since_best));
  metadata.emplace_back("schedule.reduced", schedule.reduced ? "1" : "0");
  metadata.emplace_back("rng.data", data_rng.serialize());
  metadata.emplace_back("rng.ordering", ordering_rng.serialize());
  metadata.emplace_back("rng.dropout", dropout_rng.serialize());

  NamedArrays<S> arrays;
  auto params = model.parameters();
  for (auto& [name, tensor] : params) arrays.emplace_back(name, tensor.value());
  for (std::size_t i = 0; i < params.size(); ++i) {
    arrays.emplace_back("adam.m." + params[i].first, adam.first_moments()[i]);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    arrays.emplace_back("adam.v." + params[i].first, adam.second_moments()[i]);
  }
  save_checkpoint(path, metadata, arrays);
}

}  // namespace detail

// Order-shuffled training per the training recipe: every sample gets a fresh
// random ordering each epoch, validation uses one fixed seeded ordering per
// sample, the best-validation checkpoint is retained.
template <typename S>
TrainResult train(DeformerModel<S>& model, const FeatureDataset& data, const TrainConfig& config,
                  const std::string& resume_path = "") {
  if (data.train_size == 0) throw DataError("train: empty training split");
  if (config.batch_size < 1) throw ConfigError("train: batch size must be >= 1");

  auto params = model.parameters();
  AdamState<S> adam;
  adam.cfg = config.adam;
  adam.init(params);
  PlateauSchedule schedule;
  schedule.patience = config.patience;
  schedule.factor = config.lr_factor;
  schedule.stop_multiple = config.early_stop_multiple;

  Rng data_rng(config.seed, StreamLabel::data);
  Rng ordering_rng(config.seed, StreamLabel::ordering);
  Rng dropout_rng(config.seed, StreamLabel::dropout);
  Rng* dropout = model.cfg.tf.dropout_p > 0.0 ? &dropout_rng : nullptr;

  int start_epoch = 1;
  if (!resume_path.empty()) {
    auto [metadata, arrays] = load_checkpoint<S>(resume_path);
    restore_parameters(model, arrays);
    for (std::size_t i = 0; i < params.size(); ++i) {
      bool found_m = false, found_v = false;
      for (const auto& [name, matrix] : arrays) {
        if (name == "adam.m." + params[i].first) {
          adam.first_moments()[i] = matrix;
          found_m = true;
        } else if (name == "adam.v." + params[i].first) {
          adam.second_moments()[i] = matrix;
          found_v = true;
        }
      }
      if (!found_m || !found_v) {
        throw DataError("checkpoint: missing optimizer state for '" + params[i].first + "'");
      }
    }
    adam.cfg.lr = std::stod(metadata_value(metadata, "optimizer.lr_current"));
    adam.step_count = std::stoll(metadata_value(metadata, "optimizer.step_count"));
    schedule.best = std::stod(metadata_value(metadata, "schedule.best"));
    schedule.epochs_since_best = static_cast<int>(std::stoll(metadata_value(metadata, "schedule.epochs_since_best")));
    schedule.reduced = metadata_value(metadata, "schedule.reduced") == "1";
    data_rng.deserialize(metadata_value(metadata, "rng.data"));
    ordering_rng.deserialize(metadata_value(metadata, "rng.ordering"));
    dropout_rng.deserialize(metadata_value(metadata, "rng.dropout"));
    start_epoch = static_cast<int>(std::stoll(metadata_value(metadata, "epoch"))) + 1;
  }

  // One fixed seeded ordering per validation sample keeps the early-stop
  // signal low-variance; stream index 1 so training orderings are untouched.
  std::vector<std::vector<int>> val_orderings(data.val_size);
  {
    Rng val_rng(config.seed, StreamLabel::ordering, 1);
    for (auto& ordering : val_orderings) ordering = shuffle_ordering(data.dim, val_rng);
  }

  TrainResult result;
  std::ofstream log;
  std::string best_path, last_path;
  if (!config.out_dir.empty()) {
    std::filesystem::create_directories(config.out_dir);
    const std::string log_path = config.out_dir + "/training_log.csv";
    const bool fresh = resume_path.empty() || !std::filesystem::exists(log_path);
    log.open(log_path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) log << "epoch,train_nll,val_nll,lr,seconds\n";
    best_path = config.out_dir + "/best.ckpt";
    last_path = config.out_dir + "/last.ckpt";
  }

  const auto run_start = std::chrono::steady_clock::now();
  long long steps_taken = 0;
  bool budget_exhausted = false;

  for (int epoch = start_epoch; epoch <= config.max_epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();

    std::vector<std::size_t> order(data.train_size);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[data_rng.uniform_int(i)]);
    }

    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t batch_start = 0; batch_start < order.size();
         batch_start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t batch_end =
          std::min(order.size(), batch_start + static_cast<std::size_t>(config.batch_size));
      Tensor<S> batch_loss;
      for (std::size_t i = batch_start; i < batch_end; ++i) {
        const auto ordering = shuffle_ordering(data.dim, ordering_rng);
        const auto sample = order_features(data.train(order[i]), ordering);
        auto loss = nll(model, sample, dropout);
        const double value = static_cast<double>(loss.value()(0, 0));
        if (!std::isfinite(value)) {
          throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_start / config.batch_size) + ", sample " +
                               std::to_string(order[i]));
        }
        epoch_loss += value;
        ++seen;
        batch_loss = i == batch_start ? loss : add(batch_loss, loss);
      }
      auto mean_loss = scale(batch_loss, S(1) / static_cast<S>(batch_end - batch_start));
      backward(mean_loss);
      adam.step(params);
      model.zero_grad();
      ++steps_taken;

      if (config.max_steps > 0 && steps_taken >= config.max_steps) {
        budget_exhausted = true;
      }
      if (config.max_seconds > 0.0) {
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - run_start).count();
        if (elapsed >= config.max_seconds) budget_exhausted = true;
      }
      if (budget_exhausted) break;
    }

    // Validation under the fixed per-sample orderings.
    double val_nll = std::numeric_limits<double>::quiet_NaN();
    if (data.val_size > 0) {
      NoGradGuard no_grad;
      double total = 0.0;
      for (std::size_t i = 0; i < data.val_size; ++i) {
        const auto sample = order_features(data.val(i), val_orderings[i]);
        total += static_cast<double>(nll(model, sample).value()(0, 0));
      }
      val_nll = total / static_cast<double>(data.val_size);
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_nll = seen > 0 ? epoch_loss / static_cast<double>(seen) : std::numeric_limits<double>::quiet_NaN();
    row.val_nll = val_nll;
    row.lr = adam.cfg.lr;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    result.history.push_back(row);
    result.epochs_run = epoch;
    if (log.is_open()) {
      char line[160];
      std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.3f\n", row.epoch, row.train_nll,
                    row.val_nll, row.lr, row.seconds);
      log << line;
      log.flush();
    }
    if (config.verbose) {
      std::printf("epoch %d  train %.4f  val %.4f  lr %.2e  (%.1fs)\n", row.epoch, row.train_nll,
                  row.val_nll, row.lr, row.seconds);
      std::fflush(stdout);
    }

    const bool improved = val_nll < result.best_val;
    if (improved) result.best_val = val_nll;

    if (!last_path.empty()) {
      detail::save_training_checkpoint(last_path, model, adam, schedule, epoch, data_rng, ordering_rng,
                                       dropout_rng);
      result.last_checkpoint = last_path;
      if (improved || result.best_checkpoint.empty()) {
        std::filesystem::copy_file(last_path, best_path, std::filesystem::copy_options::overwrite_existing);
        result.best_checkpoint = best_path;
      }
    }

    const bool should_stop = data.val_size > 0 && schedule.observe(val_nll, adam.cfg.lr);
    if (should_stop) {
      result.stopped_early = true;
      break;
    }
    if (budget_exhausted) break;
  }
  return result;
}

// Mean per-sample NLL of a split with one fixed seeded ordering per sample.
template <typename S>
double mean_split_nll(const DeformerModel<S>& model, const FeatureDataset& data,
                      const std::function<SampleFeatures(std::size_t)>& split, std::size_t count,
                      std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(seed, StreamLabel::ordering, 2);
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto sample = order_features(split(i), shuffle_ordering(data.dim, rng));
    total += static_cast<double>(nll(model, sample).value()(0, 0));
  }
  return total / static_cast<double>(count);
}

}  // namespace deformer
