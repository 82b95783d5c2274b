#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <string>
#include <utility>
#include <vector>

#include "deformer/checkpoint.hpp"
#include "deformer/run.hpp"

namespace {

using deformer::RunConfig;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::string profile;
  std::string out_dir;
};

void attach_common(CLI::App* cmd, CommonOptions& options) {
  cmd->add_option("--config", options.config_path, "flat key = value configuration file");
  cmd->add_option("--set", options.sets, "override one config key, e.g. --set optimizer.lr=1e-3");
  cmd->add_option("--profile", options.profile, "default profile: desk or paper");
  cmd->add_option("--out", options.out_dir, "output directory (overrides output.dir)");
}

std::vector<std::pair<std::string, std::string>> parse_overrides(const CommonOptions& options) {
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const auto& entry : options.sets) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) {
      throw CLI::ValidationError("--set", "expected key=value, got '" + entry + "'");
    }
    overrides.emplace_back(entry.substr(0, eq), entry.substr(eq + 1));
  }
  if (!options.profile.empty()) overrides.emplace_back("profile", options.profile);
  if (!options.out_dir.empty()) overrides.emplace_back("output.dir", options.out_dir);
  return overrides;
}

template <typename S>
int dispatch(const std::string& command, const RunConfig& config) {
  if (command == "train") return deformer::run_train<S>(config);
  if (command == "eval") return deformer::run_eval<S>(config);
  if (command == "generate") return deformer::run_generate<S>(config);
  if (command == "impute") return deformer::run_impute<S>(config);
  if (command == "ood") return deformer::run_ood<S>(config);
  throw CLI::ValidationError("subcommand", "unknown command '" + command + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deformer: order-agnostic autoregressive distribution estimation"};
  app.footer(deformer::config_help_table());
  app.require_subcommand(1);

  CommonOptions options;
  const char* const commands[] = {"train", "eval", "generate", "impute", "ood", "selftest"};
  const char* const descriptions[] = {
      "train a model and write checkpoints + a training log",
      "exact-likelihood evaluation averaged over random orderings",
      "ancestral sampling; writes NLL-sorted samples",
      "fill in missing pixels conditioned on the observed ones",
      "score in-distribution vs out-of-distribution datasets",
      "run gradient, mask-rule and normalization self-checks"};
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    attach_common(app.add_subcommand(commands[i], descriptions[i]), options);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& error) {
    const int code = app.exit(error);
    return code == 0 ? 0 : 1;  // usage errors map to exit 1
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const auto overrides = parse_overrides(options);
    RunConfig config = RunConfig::resolve(options.config_path, overrides);
    config.validate_types();

    if (command == "selftest") return deformer::run_selftest();

    // Commands that consume a checkpoint follow its precision.
    static constexpr const char* kPrecisions[] = {"f64", "f32"};
    std::string precision = config.get_choice("precision", kPrecisions);
    if (command != "train") {
      const std::string checkpoint = config.get_string("checkpoint.path");
      if (!checkpoint.empty()) {
        precision = deformer::metadata_value(deformer::read_checkpoint_metadata(checkpoint), "precision");
        config.set("precision", precision);
      }
    }
    return precision == "f32" ? dispatch<float>(command, config) : dispatch<double>(command, config);
  } catch (const CLI::Error& error) {
    std::fprintf(stderr, "error: %s\n", error.what());
    return 1;
  } catch (const deformer::ConfigError& error) {
    std::fprintf(stderr, "config error: %s\n", error.what());
    return 2;
  } catch (const deformer::DataError& error) {
    std::fprintf(stderr, "data error: %s\n", error.what());
    return 3;
  } catch (const deformer::NumericalError& error) {
    std::fprintf(stderr, "numerical error: %s\n", error.what());
    return 4;
  } catch (const deformer::ShapeError& error) {
    std::fprintf(stderr, "shape error: %s\n", error.what());
    return 4;
  } catch (const std::exception& error) {
    std::fprintf(stderr, "error: %s\n", error.what());
    return 1;
  }
}
