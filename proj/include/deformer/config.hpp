#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace deformer {

// One registered configuration key. Defaults come in two named profiles:
// "paper" carries the published training setup, "desk" a configuration small
// enough to converge on a laptop-scale run.
struct KeySpec {
  enum class Kind { text, integer, real, seed, choice };
  const char* key;
  const char* desk_default;
  const char* paper_default;
  const char* provenance;  // "paper" or "desk" (artifact-chosen value)
  const char* description;
  Kind kind = Kind::text;
  const char* choices = nullptr;  // "a|b|c" for Kind::choice
};

// Flat `key = value` configuration with dotted sections. Unknown keys are
// rejected rather than ignored.
class RunConfig {
 public:
  static std::span<const KeySpec> keys();

  // Resolution order: profile defaults, then file values, then overrides.
  // The profile itself may be set in any of the three layers.
  static RunConfig resolve(const std::string& config_path,
                           const std::vector<std::pair<std::string, std::string>>& overrides);

  const std::string& profile() const { return profile_; }

  std::string get_string(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::uint64_t get_seed(const std::string& key) const;

  // Validates that the value is one of the allowed choices.
  std::string get_choice(const std::string& key, std::span<const char* const> allowed) const;

  void set(const std::string& key, const std::string& value);

  // Type-checks every key's value against the registry; throws ConfigError
  // naming the first offending key. Run before any file I/O so malformed
  // values always exit with the config error code.
  void validate_types() const;

  // Writes every effective key so a run can be reproduced from the file.
  void write_resolved(const std::string& path) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::string profile_ = "desk";
  std::map<std::string, std::string> values_;

  static void check_known(const std::string& key);
};

// Renders the key table appended to --help: every key with both profile
// defaults and where the default comes from.
std::string config_help_table();

}  // namespace deformer
