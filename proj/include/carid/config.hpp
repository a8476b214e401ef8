#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "carid/error.hpp"

namespace carid {

struct ConfigEntry;

/// A YAML-shaped value tree: null, bool, int, float, string, list, or an
/// insertion-ordered map with unique keys.
class ConfigNode {
 public:
  using List = std::vector<ConfigNode>;
  using Map = std::vector<ConfigEntry>;

  ConfigNode() = default;
  ConfigNode(std::nullptr_t) {}
  ConfigNode(bool v) : value_(v) {}
  ConfigNode(int v) : value_(static_cast<std::int64_t>(v)) {}
  ConfigNode(std::int64_t v) : value_(v) {}
  ConfigNode(double v) : value_(v) {}
  ConfigNode(const char* v) : value_(std::string(v)) {}
  ConfigNode(std::string v) : value_(std::move(v)) {}
  ConfigNode(List v) : value_(std::move(v)) {}
  ConfigNode(Map v) : value_(std::move(v)) {}

  static ConfigNode map() { return ConfigNode(Map{}); }
  static ConfigNode list() { return ConfigNode(List{}); }

  bool is_null() const noexcept { return std::holds_alternative<std::monostate>(value_); }
  bool is_bool() const noexcept { return std::holds_alternative<bool>(value_); }
  bool is_int() const noexcept { return std::holds_alternative<std::int64_t>(value_); }
  bool is_float() const noexcept { return std::holds_alternative<double>(value_); }
  bool is_number() const noexcept { return is_int() || is_float(); }
  bool is_string() const noexcept { return std::holds_alternative<std::string>(value_); }
  bool is_list() const noexcept { return std::holds_alternative<List>(value_); }
  bool is_map() const noexcept { return std::holds_alternative<Map>(value_); }
  bool is_scalar() const noexcept { return !is_list() && !is_map(); }

  bool as_bool() const;
  std::int64_t as_int() const;
  /// Ints promote to double.
  double as_double() const;
  const std::string& as_string() const;
  const List& as_list() const;
  List& as_list();
  const Map& as_map() const;
  Map& as_map();

  /// Child lookup on a map node; nullptr when absent or not a map.
  const ConfigNode* find(std::string_view key) const;
  ConfigNode* find(std::string_view key);
  /// Dotted-path lookup ("model.optimizer.lr").
  const ConfigNode* find_path(std::string_view dotted) const;

  /// Inserts or replaces a key, turning a null node into a map.
  ConfigNode& set(std::string_view key, ConfigNode value);
  /// Creates intermediate maps as needed.
  ConfigNode& set_path(std::string_view dotted, ConfigNode value);
  bool erase(std::string_view key);

  /// Short human-readable rendering of a scalar (lists/maps in flow style).
  std::string render() const;
  std::string_view type_name() const noexcept;

  friend bool operator==(const ConfigNode& a, const ConfigNode& b);

 private:
  std::variant<std::monostate, bool, std::int64_t, double, std::string, List, Map> value_;
};

struct ConfigEntry {
  std::string key;
  ConfigNode value;
  friend bool operator==(const ConfigEntry&, const ConfigEntry&) = default;
};

/// Parses YAML text. Throws ParseError carrying `source` and the line.
/// Quoted scalars stay strings; plain scalars resolve as null, int, float,
/// bool, then string.
ConfigNode parse_yaml(std::string_view text, std::string_view source = "<string>");
ConfigNode load_yaml_file(const std::filesystem::path& path);

/// Emits block-style YAML that parse_yaml reads back to an equal tree.
std::string to_yaml(const ConfigNode& node);
void save_yaml_file(const ConfigNode& node, const std::filesystem::path& path);

/// Parses one override value with precedence int, float, bool, string.
/// A value starting with '[' or '{' is read as a YAML flow collection.
ConfigNode parse_override_value(std::string_view text);

/// Deep merge: maps merge key-wise and other values in `overlay` replace the
/// base value. A map meeting a non-map throws TypeMismatch; with that rule
/// merge is associative.
ConfigNode merge(const ConfigNode& base, const ConfigNode& overlay);

// ---------------------------------------------------------------------------
// Composition

/// The config groups, each a directory of `<name>.yaml` files under the
/// config root. A group file's content is mounted under the group's key.
inline constexpr std::string_view kConfigGroups[] = {"data",         "model", "trainer",
                                                     "augmentation", "hpo",   "serve",
                                                     "logger"};

struct DefaultsEntry {
  std::string group;  // "_self_" marks where the root file's own keys merge
  std::string name;
  friend bool operator==(const DefaultsEntry&, const DefaultsEntry&) = default;
};

struct ComposeOptions {
  /// Run validate() on the result and throw InvalidConfig on violations.
  bool validate = true;
};

/// Merges group files in defaults order (later wins), then applies dotted
/// `path=value` overrides. An override whose path is a bare group name
/// (`model=resnet50`) selects a different file for that group instead.
///
/// Throws MissingGroupFile, ParseError, UnknownOverridePath, TypeMismatch,
/// InvalidConfig.
ConfigNode compose(const std::filesystem::path& config_root, std::span<const DefaultsEntry> defaults,
                   std::span<const std::string> overrides, ComposeOptions options = {});

/// Reads `<config_root>/defaults.yaml`, whose `defaults:` list names one file
/// per group, and composes it.
ConfigNode compose_root(const std::filesystem::path& config_root,
                        std::span<const std::string> overrides, ComposeOptions options = {});

/// Applies overrides to an already-resolved tree (e.g. a run's saved
/// config.yaml) with the same strictness as compose().
ConfigNode compose_resolved(const ConfigNode& resolved, std::span<const std::string> overrides,
                            ComposeOptions options = {});

std::vector<DefaultsEntry> read_defaults_list(const ConfigNode& root_file);

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string path;
  std::string value;
  std::string constraint;
  friend bool operator==(const Violation&, const Violation&) = default;
};

enum class ValidationMode {
  train,
  /// Additionally bounds every tuned field by its search-space domain.
  tune,
};

/// Empty iff every field satisfies its range/enum constraint. Structural
/// problems (unknown keys, wrong types) are reported here too.
std::vector<Violation> validate(const ConfigNode& node, ValidationMode mode = ValidationMode::train);

std::string format_violations(std::span<const Violation> violations);

/// The fully-defaulted configuration tree; every valid path exists in it.
const ConfigNode& default_config();

}  // namespace carid
