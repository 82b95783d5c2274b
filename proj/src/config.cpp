#include "deformer/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "deformer/errors.hpp"

namespace deformer {

namespace {

// clang-format off
constexpr KeySpec kKeys[] = {
    {"profile",                 "desk",  "paper", "desk",  "default profile for every other key (desk | paper)", KeySpec::Kind::choice, "desk|paper"},
    {"seed",                    "12345", "12345", "desk",  "master seed; module streams derive from it by fixed labels", KeySpec::Kind::seed},
    {"precision",               "f64",   "f32",   "desk",  "scalar width (f64 | f32); f64 for oracle-grade runs, f32 for speed", KeySpec::Kind::choice, "f64|f32"},
    {"output.dir",              "out",   "out",   "desk",  "directory for checkpoints, logs, reports and resolved_config"},

    {"dataset.kind",            "synthetic_joint", "image_idx", "desk", "synthetic_joint | image_idx | tabular_csv", KeySpec::Kind::choice, "synthetic_joint|image_idx|tabular_csv"},
    {"dataset.train_images",    "",      "",      "desk",  "IDX file with training images (image_idx)"},
    {"dataset.test_images",     "",      "",      "desk",  "IDX file with test images (image_idx)"},
    {"dataset.csv",             "",      "",      "desk",  "CSV file with numeric columns (tabular_csv)"},
    {"dataset.joint",           "",      "",      "desk",  "synthetic joint table file (synthetic_joint)"},
    {"dataset.binarize",        "threshold", "threshold", "desk", "threshold | stochastic pixel binarization", KeySpec::Kind::choice, "threshold|stochastic"},
    {"dataset.threshold",       "128",   "128",   "desk",  "binarization threshold; pixel >= t maps to 1", KeySpec::Kind::integer},
    {"dataset.binarize_seed",   "0",     "0",     "desk",  "seed for stochastic binarization (0 = derive from master)", KeySpec::Kind::seed},
    {"dataset.val_count",       "1200",  "1200",  "paper", "training images held out for validation", KeySpec::Kind::integer},
    {"dataset.val_seed",        "0",     "0",     "desk",  "0 = hold out the last images in file order, else seeded selection", KeySpec::Kind::seed},
    {"dataset.drop_columns",    "",      "",      "desk",  "comma-separated CSV columns to drop before preprocessing"},
    {"dataset.noise_scale",     "0.001", "0.001", "desk",  "uniform dequantization noise amplitude for tabular data", KeySpec::Kind::real},
    {"dataset.test_fraction",   "0.1",   "0.1",   "desk",  "tabular test split fraction (of all rows)", KeySpec::Kind::real},
    {"dataset.val_fraction",    "0.1",   "0.1",   "desk",  "tabular validation split fraction (of non-test rows)", KeySpec::Kind::real},
    {"dataset.train_samples",   "20000", "20000", "desk",  "training draws from a synthetic joint", KeySpec::Kind::integer},
    {"dataset.val_samples",     "2000",  "2000",  "desk",  "validation draws from a synthetic joint", KeySpec::Kind::integer},
    {"dataset.test_samples",    "4000",  "4000",  "desk",  "test draws from a synthetic joint", KeySpec::Kind::integer},

    {"model.head",              "bernoulli", "bernoulli", "paper", "bernoulli | categorical | mixture output head", KeySpec::Kind::choice, "bernoulli|categorical|mixture"},
    {"model.labels",            "2",     "2",     "paper", "label count C for the categorical head", KeySpec::Kind::integer},
    {"model.components",        "5",     "150",   "paper", "mixture components J (paper uses 3*150 = 450 outputs)", KeySpec::Kind::integer},
    {"model.identity",          "auto",  "auto",  "desk",  "auto | pixel | tabular identity encoding", KeySpec::Kind::choice, "auto|pixel|tabular"},
    {"model.image_rows",        "28",    "28",    "paper", "image height for pixel identities", KeySpec::Kind::integer},
    {"model.image_cols",        "28",    "28",    "paper", "image width for pixel identities", KeySpec::Kind::integer},
    {"model.table_width",       "0",     "0",     "desk",  "feature count for tabular identities (0 = infer from data)", KeySpec::Kind::integer},
    {"model.embed_dim",         "20",    "20",    "paper", "identity embedding width for tabular data", KeySpec::Kind::integer},
    {"model.mlp_hidden1",       "32",    "128",   "paper", "first hidden width of the g_z / g_u MLPs", KeySpec::Kind::integer},
    {"model.mlp_hidden2",       "64",    "256",   "paper", "second hidden width of the g_z / g_u MLPs", KeySpec::Kind::integer},
    {"model.d_model",           "64",    "512",   "paper", "transformer width (also the MLP output width)", KeySpec::Kind::integer},
    {"model.heads",             "4",     "8",     "paper", "attention heads", KeySpec::Kind::integer},
    {"model.d_ff",              "256",   "2048",  "paper", "feed-forward inner width", KeySpec::Kind::integer},
    {"model.layers",            "2",     "6",     "paper", "encoder layers", KeySpec::Kind::integer},
    {"model.dropout",           "0.0",   "0.0",   "paper", "dropout probability (paper: 0.0 images, 0.2 tabular)", KeySpec::Kind::real},

    {"optimizer.lr",            "1e-3",  "1e-6",  "paper", "Adam initial learning rate", KeySpec::Kind::real},
    {"optimizer.beta1",         "0.9",   "0.9",   "paper", "Adam beta1", KeySpec::Kind::real},
    {"optimizer.beta2",         "0.999", "0.999", "paper", "Adam beta2", KeySpec::Kind::real},
    {"optimizer.eps",           "1e-9",  "1e-9",  "paper", "Adam epsilon", KeySpec::Kind::real},
    {"optimizer.batch_size",    "32",    "1",     "paper", "samples per optimizer step (paper: 1 images, 128 tabular)", KeySpec::Kind::integer},
    {"optimizer.patience",      "5",     "5",     "paper", "epochs without validation improvement before the lr drop (paper: 5 images, 20 tabular)", KeySpec::Kind::integer},
    {"optimizer.lr_factor",     "0.1",   "0.1",   "paper", "one-time lr reduction factor (1e-6 -> 1e-7 in the paper)", KeySpec::Kind::real},
    {"optimizer.max_epochs",    "20",    "50",    "paper", "epoch budget", KeySpec::Kind::integer},
    {"optimizer.early_stop_multiple", "3", "3",   "desk",  "stop after this multiple of patience without improvement", KeySpec::Kind::integer},
    {"optimizer.clip_norm",     "0",     "0",     "desk",  "global gradient-norm clip (0 = off)", KeySpec::Kind::real},
    {"optimizer.max_steps",     "0",     "0",     "desk",  "optimizer step budget (0 = unlimited)", KeySpec::Kind::integer},
    {"optimizer.max_seconds",   "0",     "0",     "desk",  "wall-clock training budget in seconds (0 = unlimited)", KeySpec::Kind::real},
    {"train.resume",            "",      "",      "desk",  "checkpoint to resume training from"},

    {"checkpoint.path",         "",      "",      "desk",  "model checkpoint consumed by eval / generate / impute / ood"},

    {"eval.orderings",          "10",    "10",    "paper", "orderings K averaged per sample (paper: 10 random orderings)", KeySpec::Kind::integer},
    {"eval.seed",               "0",     "0",     "desk",  "ordering seed for evaluation (0 = derive from master)", KeySpec::Kind::seed},
    {"eval.threads",            "1",     "1",     "desk",  "worker threads for per-sample evaluation fan-out", KeySpec::Kind::integer},
    {"eval.split",              "test",  "test",  "desk",  "train | val | test split to score", KeySpec::Kind::choice, "train|val|test"},
    {"eval.limit",              "0",     "0",     "desk",  "cap on scored samples (0 = all)", KeySpec::Kind::integer},

    {"generate.count",          "50",    "50",    "paper", "samples to generate (paper: 50 images in Fig. 2 style)", KeySpec::Kind::integer},
    {"generate.clamp_sigmas",   "10",    "10",    "desk",  "clamp continuous draws to +/- this many training stds (0 = raw)", KeySpec::Kind::real},

    {"impute.count",            "10",    "10",    "desk",  "images to run imputation on", KeySpec::Kind::integer},
    {"impute.missing",          "100",   "100",   "paper", "missing pixels per image (paper: 100 removed pixels)", KeySpec::Kind::integer},
    {"impute.mode",             "sample", "sample", "desk", "sample | argmax fill mode", KeySpec::Kind::choice, "sample|argmax"},

    {"ood.images",              "",      "",      "desk",  "IDX file with out-of-distribution images"},
    {"ood.limit",               "0",     "0",     "desk",  "cap on OOD samples scored (0 = all)", KeySpec::Kind::integer},
};
// clang-format on

const KeySpec* find_key(const std::string& key) {
  for (const auto& spec : kKeys) {
    if (key == spec.key) return &spec;
  }
  return nullptr;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

std::span<const KeySpec> RunConfig::keys() { return kKeys; }

void RunConfig::check_known(const std::string& key) {
  if (find_key(key) == nullptr) throw ConfigError("unknown config key '" + key + "'");
}

RunConfig RunConfig::resolve(const std::string& config_path,
                             const std::vector<std::pair<std::string, std::string>>& overrides) {
  // Parse the file first so the profile can come from any layer.
  std::vector<std::pair<std::string, std::string>> file_values;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file '" + config_path + "'");
    std::string line;
    std::size_t line_number = 0;
    while (std::getline(in, line)) {
      ++line_number;
      const auto comment = line.find('#');
      if (comment != std::string::npos) line.erase(comment);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(line_number) + " is not 'key = value': '" + line +
                          "'");
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      check_known(key);
      file_values.emplace_back(key, value);
    }
  }
  for (const auto& [key, value] : overrides) check_known(key);

  std::string profile = "desk";
  for (const auto& [key, value] : file_values) {
    if (key == "profile") profile = value;
  }
  for (const auto& [key, value] : overrides) {
    if (key == "profile") profile = value;
  }
  if (profile != "desk" && profile != "paper") {
    throw ConfigError("config key 'profile': expected desk or paper, got '" + profile + "'");
  }

  RunConfig config;
  config.profile_ = profile;
  for (const auto& spec : kKeys) {
    config.values_[spec.key] = profile == "paper" ? spec.paper_default : spec.desk_default;
  }
  for (const auto& [key, value] : file_values) config.values_[key] = value;
  for (const auto& [key, value] : overrides) config.values_[key] = value;
  config.values_["profile"] = profile;
  return config;
}

std::string RunConfig::get_string(const std::string& key) const {
  check_known(key);
  return values_.at(key);
}

long long RunConfig::get_int(const std::string& key) const {
  const std::string value = get_string(key);
  long long parsed = 0;
  const auto result = std::from_chars(value.data(), value.data() + value.size(), parsed);
  if (result.ec != std::errc() || result.ptr != value.data() + value.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as an integer");
  }
  return parsed;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string value = get_string(key);
  try {
    std::size_t consumed = 0;
    const double parsed = std::stod(value, &consumed);
    if (consumed != value.size()) throw std::invalid_argument(value);
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a number");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string value = get_string(key);
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a boolean");
}

std::uint64_t RunConfig::get_seed(const std::string& key) const {
  const long long value = get_int(key);
  if (value < 0) throw ConfigError("config key '" + key + "': seed must be non-negative");
  return static_cast<std::uint64_t>(value);
}

std::string RunConfig::get_choice(const std::string& key, std::span<const char* const> allowed) const {
  const std::string value = get_string(key);
  for (const char* choice : allowed) {
    if (value == choice) return value;
  }
  std::string expected;
  for (const char* choice : allowed) {
    if (!expected.empty()) expected += " | ";
    expected += choice;
  }
  throw ConfigError("config key '" + key + "': expected one of " + expected + ", got '" + value + "'");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  check_known(key);
  values_[key] = value;
  if (key == "profile") profile_ = value;
}

void RunConfig::validate_types() const {
  for (const auto& spec : kKeys) {
    switch (spec.kind) {
      case KeySpec::Kind::text:
        break;
      case KeySpec::Kind::integer:
        get_int(spec.key);
        break;
      case KeySpec::Kind::real:
        get_double(spec.key);
        break;
      case KeySpec::Kind::seed:
        get_seed(spec.key);
        break;
      case KeySpec::Kind::choice: {
        const std::string value = values_.at(spec.key);
        std::string allowed(spec.choices);
        bool found = false;
        std::size_t start = 0;
        while (start <= allowed.size()) {
          std::size_t end = allowed.find('|', start);
          if (end == std::string::npos) end = allowed.size();
          if (value == allowed.substr(start, end - start)) {
            found = true;
            break;
          }
          start = end + 1;
        }
        if (!found) {
          throw ConfigError("config key '" + std::string(spec.key) + "': expected one of " + allowed +
                            ", got '" + value + "'");
        }
        break;
      }
    }
  }
}

void RunConfig::write_resolved(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write resolved config to '" + path + "'");
  out << "# effective configuration; rerun with --config " << path << " to reproduce\n";
  for (const auto& spec : kKeys) {
    out << spec.key << " = " << values_.at(spec.key) << "\n";
  }
}

std::string config_help_table() {
  std::ostringstream out;
  out << "Configuration keys (flat `key = value` file; override with --set key=value):\n\n";
  std::size_t width = 0;
  for (const auto& spec : kKeys) width = std::max(width, std::string(spec.key).size());
  for (const auto& spec : kKeys) {
    out << "  " << spec.key << std::string(width - std::string(spec.key).size() + 2, ' ');
    out << "desk=" << (*spec.desk_default ? spec.desk_default : "(empty)");
    out << "  paper=" << (*spec.paper_default ? spec.paper_default : "(empty)");
    out << "  [" << spec.provenance << "-default]";
    out << "\n" << std::string(width + 4, ' ') << spec.description << "\n";
  }
  return out.str();
}

}  // namespace deformer
