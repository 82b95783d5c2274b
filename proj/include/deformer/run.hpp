#pragma once

#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "deformer/config.hpp"
#include "deformer/gradcheck.hpp"
#include "deformer/inference.hpp"
#include "deformer/pgm.hpp"

namespace deformer {

// ---------------------------------------------------------------------------
// Dataset resolution
// ---------------------------------------------------------------------------

// Owns whichever dataset the config names and exposes the training view.
// The view's closures borrow from the owned objects, so the bundle must
// outlive any use of `view`.
struct DatasetBundle {
  std::unique_ptr<ImageDataset> images;
  std::unique_ptr<TabularDataset> table;
  std::unique_ptr<SyntheticJoint> joint;
  std::unique_ptr<JointDraws> draws;
  FeatureDataset view;
  std::string kind;
};

inline BinarizeSpec binarize_spec_from(const RunConfig& config) {
  static constexpr const char* kModes[] = {"threshold", "stochastic"};
  BinarizeSpec spec;
  spec.mode = config.get_choice("dataset.binarize", kModes) == "threshold"
                  ? BinarizeSpec::Mode::threshold
                  : BinarizeSpec::Mode::stochastic;
  spec.threshold = static_cast<int>(config.get_int("dataset.threshold"));
  const std::uint64_t seed = config.get_seed("dataset.binarize_seed");
  spec.seed = seed != 0 ? seed : config.get_seed("seed");
  return spec;
}

inline DatasetBundle load_dataset_bundle(const RunConfig& config) {
  static constexpr const char* kKinds[] = {"synthetic_joint", "image_idx", "tabular_csv"};
  DatasetBundle bundle;
  bundle.kind = config.get_choice("dataset.kind", kKinds);
  if (bundle.kind == "image_idx") {
    const std::string train_path = config.get_string("dataset.train_images");
    const std::string test_path = config.get_string("dataset.test_images");
    if (train_path.empty() || test_path.empty()) {
      throw ConfigError("config keys 'dataset.train_images' and 'dataset.test_images' are required for "
                        "image_idx datasets");
    }
    bundle.images = std::make_unique<ImageDataset>(
        load_image_dataset(train_path, test_path, binarize_spec_from(config),
                           static_cast<int>(config.get_int("dataset.val_count")),
                           config.get_seed("dataset.val_seed")));
    bundle.view = dataset_view(*bundle.images);
  } else if (bundle.kind == "tabular_csv") {
    const std::string csv_path = config.get_string("dataset.csv");
    if (csv_path.empty()) {
      throw ConfigError("config key 'dataset.csv' is required for tabular_csv datasets");
    }
    TabularOptions options;
    options.noise_scale = config.get_double("dataset.noise_scale");
    options.test_fraction = config.get_double("dataset.test_fraction");
    options.val_fraction = config.get_double("dataset.val_fraction");
    options.seed = config.get_seed("seed");
    const std::string drop = config.get_string("dataset.drop_columns");
    std::size_t start = 0;
    while (start < drop.size()) {
      std::size_t end = drop.find(',', start);
      if (end == std::string::npos) end = drop.size();
      if (end > start) options.drop_columns.push_back(drop.substr(start, end - start));
      start = end + 1;
    }
    bundle.table = std::make_unique<TabularDataset>(preprocess_tabular(load_csv(csv_path), options));
    bundle.view = dataset_view(*bundle.table);
  } else {
    const std::string joint_path = config.get_string("dataset.joint");
    if (joint_path.empty()) {
      throw ConfigError("config key 'dataset.joint' is required for synthetic_joint datasets");
    }
    bundle.joint = std::make_unique<SyntheticJoint>(SyntheticJoint::load(joint_path));
    bundle.draws = std::make_unique<JointDraws>(JointDraws::from(
        *bundle.joint, static_cast<std::size_t>(config.get_int("dataset.train_samples")),
        static_cast<std::size_t>(config.get_int("dataset.val_samples")),
        static_cast<std::size_t>(config.get_int("dataset.test_samples")), config.get_seed("seed")));
    bundle.view = dataset_view(*bundle.draws);
  }
  return bundle;
}

inline ModelConfig model_config_from(const RunConfig& config, const DatasetBundle& bundle) {
  static constexpr const char* kHeads[] = {"bernoulli", "categorical", "mixture"};
  static constexpr const char* kIdentities[] = {"auto", "pixel", "tabular"};
  ModelConfig cfg;
  const std::string identity = config.get_choice("model.identity", kIdentities);
  if (identity == "auto") {
    cfg.identity = bundle.kind == "image_idx" ? IdentityMode::pixel : IdentityMode::tabular;
  } else {
    cfg.identity = identity == "pixel" ? IdentityMode::pixel : IdentityMode::tabular;
  }
  if (cfg.identity == IdentityMode::pixel) {
    if (bundle.images == nullptr) {
      throw ConfigError("config key 'model.identity': pixel identities need an image dataset");
    }
    cfg.image_rows = bundle.images->rows;
    cfg.image_cols = bundle.images->cols;
  } else {
    const int width = static_cast<int>(config.get_int("model.table_width"));
    cfg.table_width = width != 0 ? width : bundle.view.dim;
    cfg.embed_dim = static_cast<int>(config.get_int("model.embed_dim"));
  }
  cfg.mlp_hidden1 = static_cast<int>(config.get_int("model.mlp_hidden1"));
  cfg.mlp_hidden2 = static_cast<int>(config.get_int("model.mlp_hidden2"));
  const std::string head = config.get_choice("model.head", kHeads);
  cfg.head.kind = head == "bernoulli"     ? HeadKind::bernoulli
                  : head == "categorical" ? HeadKind::categorical
                                          : HeadKind::mixture;
  cfg.head.labels = static_cast<int>(config.get_int("model.labels"));
  cfg.head.components = static_cast<int>(config.get_int("model.components"));
  cfg.tf.d_model = static_cast<int>(config.get_int("model.d_model"));
  cfg.tf.n_heads = static_cast<int>(config.get_int("model.heads"));
  cfg.tf.d_ff = static_cast<int>(config.get_int("model.d_ff"));
  cfg.tf.n_layers = static_cast<int>(config.get_int("model.layers"));
  cfg.tf.dropout_p = config.get_double("model.dropout");
  cfg.validate();
  return cfg;
}

inline std::string prepare_output_dir(const RunConfig& config) {
  const std::string dir = config.get_string("output.dir");
  std::filesystem::create_directories(dir);
  config.write_resolved(dir + "/resolved_config.txt");
  return dir;
}

inline std::function<SampleFeatures(std::size_t)> split_of(const FeatureDataset& view,
                                                           const std::string& name, std::size_t& count) {
  if (name == "train") {
    count = view.train_size;
    return view.train;
  }
  if (name == "val") {
    count = view.val_size;
    return view.val;
  }
  count = view.test_size;
  return view.test;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

template <typename S>
int run_train(const RunConfig& config) {
  const std::string out_dir = prepare_output_dir(config);
  DatasetBundle bundle = load_dataset_bundle(config);
  const ModelConfig model_cfg = model_config_from(config, bundle);

  Rng init_rng(config.get_seed("seed"), StreamLabel::init);
  DeformerModel<S> model(model_cfg, init_rng);

  TrainConfig train_cfg;
  train_cfg.adam.lr = config.get_double("optimizer.lr");
  train_cfg.adam.beta1 = config.get_double("optimizer.beta1");
  train_cfg.adam.beta2 = config.get_double("optimizer.beta2");
  train_cfg.adam.eps = config.get_double("optimizer.eps");
  train_cfg.adam.clip_norm = config.get_double("optimizer.clip_norm");
  train_cfg.batch_size = static_cast<int>(config.get_int("optimizer.batch_size"));
  train_cfg.max_epochs = static_cast<int>(config.get_int("optimizer.max_epochs"));
  train_cfg.patience = static_cast<int>(config.get_int("optimizer.patience"));
  train_cfg.lr_factor = config.get_double("optimizer.lr_factor");
  train_cfg.early_stop_multiple = static_cast<int>(config.get_int("optimizer.early_stop_multiple"));
  train_cfg.max_steps = config.get_int("optimizer.max_steps");
  train_cfg.max_seconds = config.get_double("optimizer.max_seconds");
  train_cfg.seed = config.get_seed("seed");
  train_cfg.out_dir = out_dir;
  train_cfg.verbose = true;

  std::printf("training %s model: D=%d, %zu parameters, %zu train / %zu val / %zu test samples\n",
              bundle.kind.c_str(), model_cfg.dim(), model.parameter_count(), bundle.view.train_size,
              bundle.view.val_size, bundle.view.test_size);
  const TrainResult result = train(model, bundle.view, train_cfg, config.get_string("train.resume"));
  std::printf("finished after %d epochs; best validation NLL %.6f nats\n", result.epochs_run,
              result.best_val);
  std::printf("checkpoints: %s (best), %s (last); log: %s/training_log.csv\n",
              result.best_checkpoint.c_str(), result.last_checkpoint.c_str(), out_dir.c_str());
  return 0;
}

template <typename S>
DeformerModel<S> model_from_config_checkpoint(const RunConfig& config) {
  const std::string path = config.get_string("checkpoint.path");
  if (path.empty()) {
    throw ConfigError("config key 'checkpoint.path': a checkpoint is required for this command");
  }
  return load_model<S>(path);
}

template <typename S>
int run_eval(const RunConfig& config) {
  const std::string out_dir = prepare_output_dir(config);
  DeformerModel<S> model = model_from_config_checkpoint<S>(config);
  DatasetBundle bundle = load_dataset_bundle(config);

  static constexpr const char* kSplits[] = {"train", "val", "test"};
  std::size_t count = 0;
  auto split = split_of(bundle.view, config.get_choice("eval.split", kSplits), count);
  const long long limit = config.get_int("eval.limit");
  if (limit > 0) count = std::min(count, static_cast<std::size_t>(limit));
  if (count == 0) throw DataError("eval: selected split is empty");

  const int orderings = static_cast<int>(config.get_int("eval.orderings"));
  const std::uint64_t eval_seed = config.get_seed("eval.seed");
  const std::uint64_t seed = eval_seed != 0 ? eval_seed : config.get_seed("seed");
  const auto entries = score_dataset(model, split, count, orderings, seed,
                                     static_cast<int>(config.get_int("eval.threads")));
  const EvalSummary summary = summarize(entries);

  write_eval_csv(out_dir + "/eval_report.csv", entries);
  write_summary_csv(out_dir + "/eval_summary.csv", summary);
  std::printf("scored %zu samples with K=%d orderings: mean NLL %.6f nats (std %.6f, median %.6f)\n",
              summary.count, orderings, summary.mean, summary.stddev, summary.median);
  std::printf("reports: %s/eval_report.csv, %s/eval_summary.csv\n", out_dir.c_str(), out_dir.c_str());
  return 0;
}

template <typename S>
int run_generate(const RunConfig& config) {
  const std::string out_dir = prepare_output_dir(config);
  DeformerModel<S> model = model_from_config_checkpoint<S>(config);
  const int count = static_cast<int>(config.get_int("generate.count"));
  const double clamp_sigmas = config.get_double("generate.clamp_sigmas");
  const int orderings = static_cast<int>(config.get_int("eval.orderings"));
  const std::uint64_t seed = config.get_seed("seed");
  const int dim = model.cfg.dim();
  const auto ids = canonical_identities(model.cfg);

  struct Scored {
    GeneratedSample sample;
    EvalEntry entry;
  };
  std::vector<Scored> scored(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    // Fresh random ordering per sample, from the sampling stream.
    Rng rng(seed, StreamLabel::sampling, static_cast<std::uint64_t>(i));
    scored[i].sample = generate(model, shuffle_ordering(dim, rng), rng, clamp_sigmas);
    SampleFeatures features;
    features.reserve(static_cast<std::size_t>(dim));
    for (int f = 0; f < dim; ++f) features.emplace_back(ids[f], scored[i].sample.values[f]);
    scored[i].entry = average_nll(model, features, orderings, mix64(seed) ^ static_cast<std::uint64_t>(i));
    scored[i].entry.sample_id = static_cast<std::size_t>(i);
  }
  std::sort(scored.begin(), scored.end(),
            [](const Scored& a, const Scored& b) { return a.entry.mean_nll < b.entry.mean_nll; });

  std::vector<EvalEntry> entries;
  for (const auto& s : scored) entries.push_back(s.entry);
  write_eval_csv(out_dir + "/generated_nll.csv", entries);

  if (model.cfg.identity == IdentityMode::pixel) {
    for (std::size_t rank = 0; rank < scored.size(); ++rank) {
      std::vector<std::uint8_t> pixels(static_cast<std::size_t>(dim));
      for (int f = 0; f < dim; ++f) {
        pixels[static_cast<std::size_t>(f)] = scored[rank].sample.values[f].label ? 255 : 0;
      }
      char name[64];
      std::snprintf(name, sizeof(name), "/gen_%03zu.pgm", rank);
      write_pgm(out_dir + name, model.cfg.image_rows, model.cfg.image_cols, pixels);
    }
  } else {
    std::ofstream rows(out_dir + "/generated_rows.csv");
    for (const auto& s : scored) {
      for (int f = 0; f < dim; ++f) {
        if (f > 0) rows << ",";
        if (model.cfg.head.kind == HeadKind::mixture) {
          char cell[32];
          std::snprintf(cell, sizeof(cell), "%.17g", s.sample.values[f].value);
          rows << cell;
        } else {
          rows << s.sample.values[f].label;
        }
      }
      rows << "\n";
    }
  }
  std::printf("generated %d samples (NLL-sorted); lowest %.4f, highest %.4f nats\n", count,
              scored.front().entry.mean_nll, scored.back().entry.mean_nll);
  return 0;
}

template <typename S>
int run_impute(const RunConfig& config) {
  const std::string out_dir = prepare_output_dir(config);
  DeformerModel<S> model = model_from_config_checkpoint<S>(config);
  if (model.cfg.identity != IdentityMode::pixel) {
    throw ConfigError("impute: the imputation command operates on image models");
  }
  DatasetBundle bundle = load_dataset_bundle(config);
  if (bundle.images == nullptr) throw ConfigError("impute: an image dataset is required");

  static constexpr const char* kModes[] = {"sample", "argmax"};
  const bool argmax = config.get_choice("impute.mode", kModes) == "argmax";
  const int count = std::min<int>(static_cast<int>(config.get_int("impute.count")),
                                  static_cast<int>(bundle.images->test.size()));
  const int missing_count = static_cast<int>(config.get_int("impute.missing"));
  const int dim = model.cfg.dim();
  if (missing_count < 0 || missing_count > dim) {
    throw ConfigError("config key 'impute.missing': must be in [0, " + std::to_string(dim) + "]");
  }
  const std::uint64_t seed = config.get_seed("seed");
  const auto ids = canonical_identities(model.cfg);

  std::ofstream log(out_dir + "/impute_log.csv");
  log << "sample_id,mode,matched_missing,ordering\n";
  for (int i = 0; i < count; ++i) {
    Rng rng(seed, StreamLabel::sampling, static_cast<std::uint64_t>(i));
    const auto& image = bundle.images->test[static_cast<std::size_t>(i)];

    // Pick the missing pixel set uniformly without replacement.
    std::vector<int> all(dim);
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t j = all.size(); j > 1; --j) std::swap(all[j - 1], all[rng.uniform_int(j)]);
    std::vector<char> is_missing(static_cast<std::size_t>(dim), 0);
    for (int j = 0; j < missing_count; ++j) is_missing[static_cast<std::size_t>(all[j])] = 1;

    ImputationTask task;
    task.fill = argmax ? ImputationTask::Fill::argmax : ImputationTask::Fill::sample;
    for (int f = 0; f < dim; ++f) {
      if (is_missing[static_cast<std::size_t>(f)]) {
        task.missing.push_back(ids[static_cast<std::size_t>(f)]);
      } else {
        task.observed.emplace_back(ids[static_cast<std::size_t>(f)],
                                   FeatureValue::discrete(image[static_cast<std::size_t>(f)]));
      }
    }
    const ImputationResult result = impute(model, task, rng);

    int matched = 0;
    std::vector<std::uint8_t> filled(static_cast<std::size_t>(dim));
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(dim));
    std::vector<std::uint8_t> original(static_cast<std::size_t>(dim));
    for (int f = 0; f < dim; ++f) {
      filled[f] = result.values[f].label ? 255 : 0;
      mask[f] = is_missing[f] ? 255 : 0;
      original[f] = image[f] ? 255 : 0;
      if (is_missing[f] && result.values[f].label == image[f]) ++matched;
    }
    char name[64];
    std::snprintf(name, sizeof(name), "/impute_%03d_filled.pgm", i);
    write_pgm(out_dir + name, model.cfg.image_rows, model.cfg.image_cols, filled);
    std::snprintf(name, sizeof(name), "/impute_%03d_mask.pgm", i);
    write_pgm(out_dir + name, model.cfg.image_rows, model.cfg.image_cols, mask);
    std::snprintf(name, sizeof(name), "/impute_%03d_original.pgm", i);
    write_pgm(out_dir + name, model.cfg.image_rows, model.cfg.image_cols, original);

    log << i << "," << (argmax ? "argmax" : "sample") << "," << matched << ",";
    for (std::size_t j = 0; j < result.ordering.size(); ++j) {
      if (j > 0) log << " ";
      log << result.ordering[j];
    }
    log << "\n";
  }
  std::printf("imputed %d images with %d missing pixels each; PGMs in %s\n", count, missing_count,
              out_dir.c_str());
  return 0;
}

template <typename S>
int run_ood(const RunConfig& config) {
  const std::string out_dir = prepare_output_dir(config);
  DeformerModel<S> model = model_from_config_checkpoint<S>(config);
  DatasetBundle bundle = load_dataset_bundle(config);

  const std::string ood_path = config.get_string("ood.images");
  if (ood_path.empty()) throw ConfigError("config key 'ood.images': an OOD IDX file is required");
  int rows = 0, cols = 0;
  auto ood_images = images_from_idx(load_idx(ood_path), binarize_spec_from(config), rows, cols);
  if (rows * cols != model.cfg.dim()) {
    throw DataError("ood: images are " + std::to_string(rows) + "x" + std::to_string(cols) +
                    ", model expects " + std::to_string(model.cfg.dim()) + " features");
  }

  std::size_t in_count = bundle.view.test_size;
  std::size_t out_count = ood_images.size();
  const long long limit = config.get_int("ood.limit");
  if (limit > 0) {
    in_count = std::min(in_count, static_cast<std::size_t>(limit));
    out_count = std::min(out_count, static_cast<std::size_t>(limit));
  }
  auto out_split = [&ood_images, rows, cols](std::size_t i) {
    return image_features(ood_images[i], rows, cols);
  };

  const int orderings = static_cast<int>(config.get_int("eval.orderings"));
  const std::uint64_t eval_seed = config.get_seed("eval.seed");
  const std::uint64_t seed = eval_seed != 0 ? eval_seed : config.get_seed("seed");
  const OodReport report = ood_score(model, bundle.view.test, in_count, out_split, out_count, orderings,
                                     seed, static_cast<int>(config.get_int("eval.threads")));

  write_eval_csv(out_dir + "/id_scores.csv", report.in_distribution);
  write_eval_csv(out_dir + "/ood_scores.csv", report.out_of_distribution);
  write_summary_csv(out_dir + "/id_summary.csv", report.in_summary);
  write_summary_csv(out_dir + "/ood_summary.csv", report.out_summary);
  std::printf("in-distribution mean NLL %.4f (std %.4f); OOD mean NLL %.4f; gap %.4f nats\n",
              report.in_summary.mean, report.in_summary.stddev, report.out_summary.mean,
              report.out_summary.mean - report.in_summary.mean);
  return 0;
}

// ---------------------------------------------------------------------------
// Selftest
// ---------------------------------------------------------------------------

namespace selftest_detail {

// The two visibility rules, restated independently of build_mask.
inline bool rules_allow(Index row, Index col) {
  const bool row_is_z = row % 2 == 0;
  const Index k2 = row / 2 + 1;
  const bool col_is_z = col % 2 == 0;
  const Index k1 = col / 2 + 1;
  if (row_is_z) return col_is_z ? k1 <= k2 : k1 < k2;
  return k1 <= k2;
}

inline ModelConfig selftest_model_config(int table_width, HeadKind head) {
  ModelConfig cfg;
  cfg.identity = IdentityMode::tabular;
  cfg.table_width = table_width;
  cfg.embed_dim = 4;
  cfg.mlp_hidden1 = 8;
  cfg.mlp_hidden2 = 16;
  cfg.head.kind = head;
  cfg.head.components = 3;
  cfg.tf = TransformerConfig{.d_model = 8, .n_heads = 2, .d_ff = 12, .n_layers = 2, .dropout_p = 0.0};
  return cfg;
}

}  // namespace selftest_detail

// Gradient checks, mask-rule enumeration and normalization checks; returns 0
// when everything passes, 5 otherwise. Always runs in 64-bit.
inline int run_selftest() {
  int failures = 0;
  auto report = [&](const char* name, bool ok, double value = 0.0, double bound = 0.0) {
    if (ok) {
      std::printf("[ok]   %s\n", name);
    } else {
      ++failures;
      std::printf("[FAIL] %s (%.3g, bound %.3g)\n", name, value, bound);
    }
    std::fflush(stdout);
  };

  // Mask-rule enumeration, D = 1..8.
  {
    bool ok = true;
    for (int dim = 1; dim <= 8 && ok; ++dim) {
      const Mask mask = build_mask(dim);
      for (Index r = 0; r < mask.rows() && ok; ++r) {
        for (Index c = 0; c < mask.cols() && ok; ++c) {
          ok = mask(r, c) == selftest_detail::rules_allow(r, c);
        }
      }
    }
    report("mask rules match brute-force enumeration (D=1..8)", ok);
  }

  // Softmax guarantees.
  {
    Rng rng(1001);
    bool ok = true;
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      Mat<double> x(4, 7);
      for (Index r = 0; r < 4; ++r) {
        for (Index c = 0; c < 7; ++c) x(r, c) = rng.uniform(-40.0, 40.0);
      }
      const auto y = softmax_rows(Tensor<double>(x));
      for (Index r = 0; r < 4; ++r) {
        worst = std::max(worst, std::abs(y.value().row(r).sum() - 1.0));
        ok = ok && y.value().row(r).minCoeff() > 0.0;
      }
    }
    report("softmax rows sum to 1 +/- 1e-6 and stay positive", ok && worst < 1e-6, worst, 1e-6);

    Mat<double> logits(1, 2);
    logits << 5.0, 9.0;
    Mask blocked(1, 2);
    blocked << false, true;
    const auto weights = softmax_rows(masked_fill(Tensor<double>(logits), blocked, mask_fill_value<double>()));
    report("masked attention weight falls below 1e-30", weights.value()(0, 1) < 1e-30,
           weights.value()(0, 1), 1e-30);
  }

  // Primitive gradient spot-checks.
  {
    Rng rng(1002);
    auto random_matrix = [&](Index rows, Index cols) {
      Mat<double> m(rows, cols);
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-1.5, 1.5);
      }
      return m;
    };
    std::vector<Tensor<double>> point{Tensor<double>(random_matrix(3, 4), true),
                                      Tensor<double>(random_matrix(4, 3), true)};
    Tensor<double> weights(random_matrix(3, 3));
    auto f = [&](const std::vector<Tensor<double>>& xs) {
      auto product = matmul(softmax_rows(xs[0]), sigmoid(xs[1]));
      return sum_all(mul(layer_norm_rows(product, Tensor<double>(Mat<double>::Ones(1, 3)),
                                         Tensor<double>(Mat<double>::Zero(1, 3))),
                         weights));
    };
    const double err = finite_difference_check<double>(f, point, 1e-5);
    report("composite primitive gradient check < 1e-5", err < 1e-5, err, 1e-5);
  }

  // Full-model gradient checks, both heads.
  {
    Rng rng(1003);
    DeformerModel<double> binary(selftest_detail::selftest_model_config(3, HeadKind::bernoulli), rng);
    for (auto& layer : binary.layers) {
      layer.wq.mutable_value() *= 3.0;
      layer.wk.mutable_value() *= 3.0;
    }
    std::vector<std::uint8_t> bits = {1, 0, 1};
    const auto sample = order_features(binary_column_features(bits), identity_ordering(3));
    std::vector<Tensor<double>> params;
    for (auto& [name, tensor] : binary.parameters()) params.push_back(tensor);
    auto f_discrete = [&](const std::vector<Tensor<double>>&) { return nll_discrete(binary, sample); };
    const double err_d = finite_difference_check_adaptive<double>(f_discrete, params);
    report("full-model gradient check, bernoulli head < 1e-5", err_d < 1e-5, err_d, 1e-5);

    DeformerModel<double> mixture(selftest_detail::selftest_model_config(3, HeadKind::mixture), rng);
    for (auto& layer : mixture.layers) {
      layer.wq.mutable_value() *= 3.0;
      layer.wk.mutable_value() *= 3.0;
    }
    Vec<double> row(3);
    row << 0.4, -0.9, 1.3;
    const auto continuous = order_features(row_features(row), identity_ordering(3));
    std::vector<Tensor<double>> mixture_params;
    for (auto& [name, tensor] : mixture.parameters()) mixture_params.push_back(tensor);
    auto f_mixture = [&](const std::vector<Tensor<double>>&) {
      return nll_continuous(mixture, continuous);
    };
    const double err_c = finite_difference_check_adaptive<double>(f_mixture, mixture_params);
    report("full-model gradient check, mixture head < 1e-5", err_c < 1e-5, err_c, 1e-5);
  }

  // Normalization: sum over configurations of exp(-NLL) is 1.
  {
    bool ok = true;
    double worst = 0.0;
    for (int dim = 3; dim <= 6; ++dim) {
      for (int trial = 0; trial < 3; ++trial) {
        Rng rng(2000 + 10 * dim + trial);
        DeformerModel<double> model(selftest_detail::selftest_model_config(dim, HeadKind::bernoulli), rng);
        Rng order_rng(3000 + dim);
        const auto ordering = shuffle_ordering(dim, order_rng);
        NoGradGuard no_grad;
        double sum = 0.0;
        for (std::size_t i = 0; i < (std::size_t{1} << dim); ++i) {
          std::vector<std::uint8_t> bits(dim);
          std::size_t index = i;
          for (int d = dim - 1; d >= 0; --d) {
            bits[d] = index & 1;
            index >>= 1;
          }
          const auto sample = order_features(binary_column_features(bits), ordering);
          sum += std::exp(-static_cast<double>(nll_discrete(model, sample).value()(0, 0)));
        }
        worst = std::max(worst, std::abs(sum - 1.0));
        ok = ok && std::abs(sum - 1.0) < 1e-6;
      }
    }
    report("exp(-NLL) sums to 1 +/- 1e-6 over all configurations (D=3..6)", ok, worst, 1e-6);
  }

  if (failures == 0) {
    std::printf("selftest passed\n");
    return 0;
  }
  std::printf("selftest FAILED: %d check(s)\n", failures);
  return 5;
}

}  // namespace deformer
