#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "carid/augment.hpp"
#include "carid/backbone_registry.hpp"
#include "carid/config.hpp"
#include "carid/hpo.hpp"

namespace carid {

namespace {

enum class FieldType { boolean, integer, number, string, int_pair, float_triple, transform_list };

using Check = std::function<std::optional<std::string>(const ConfigNode&)>;

struct FieldSpec {
  std::string path;
  FieldType type;
  ConfigNode fallback;
  bool nullable = false;
  Check check;
};

std::string fmt(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

Check positive() {
  return [](const ConfigNode& n) -> std::optional<std::string> {
    if (n.as_double() > 0.0) return std::nullopt;
    return "must be > 0";
  };
}

Check at_least(double lo) {
  return [lo](const ConfigNode& n) -> std::optional<std::string> {
    if (n.as_double() >= lo) return std::nullopt;
    return "must be >= " + fmt(lo);
  };
}

Check closed(double lo, double hi) {
  return [lo, hi](const ConfigNode& n) -> std::optional<std::string> {
    const double v = n.as_double();
    if (v >= lo && v <= hi) return std::nullopt;
    return "must lie in [" + fmt(lo) + ", " + fmt(hi) + "]";
  };
}

Check half_open(double lo, double hi) {
  return [lo, hi](const ConfigNode& n) -> std::optional<std::string> {
    const double v = n.as_double();
    if (v >= lo && v < hi) return std::nullopt;
    return "must lie in [" + fmt(lo) + ", " + fmt(hi) + ")";
  };
}

Check open(double lo, double hi) {
  return [lo, hi](const ConfigNode& n) -> std::optional<std::string> {
    const double v = n.as_double();
    if (v > lo && v < hi) return std::nullopt;
    return "must lie in (" + fmt(lo) + ", " + fmt(hi) + ")";
  };
}

Check int_choice(std::vector<std::int64_t> allowed) {
  return [allowed](const ConfigNode& n) -> std::optional<std::string> {
    for (auto a : allowed) {
      if (n.as_int() == a) return std::nullopt;
    }
    std::string text = "must be one of {";
    for (std::size_t i = 0; i < allowed.size(); ++i) text += (i ? ", " : "") + std::to_string(allowed[i]);
    return text + "}";
  };
}

Check string_choice(std::vector<std::string> allowed) {
  return [allowed](const ConfigNode& n) -> std::optional<std::string> {
    for (const auto& a : allowed) {
      if (n.as_string() == a) return std::nullopt;
    }
    std::string text = "must be one of {";
    for (std::size_t i = 0; i < allowed.size(); ++i) text += (i ? ", " : "") + allowed[i];
    return text + "}";
  };
}

Check non_empty() {
  return [](const ConfigNode& n) -> std::optional<std::string> {
    if (!n.as_string().empty()) return std::nullopt;
    return "must not be empty";
  };
}

Check backbone_name() {
  return [](const ConfigNode& n) -> std::optional<std::string> {
    std::string known;
    for (const auto& info : backbone_registry()) {
      if (info.name == n.as_string()) return std::nullopt;
      known += (known.empty() ? "" : ", ") + std::string(info.name);
    }
    return "must name a registered backbone {" + known + "}";
  };
}

const std::vector<FieldSpec>& schema() {
  static const std::vector<FieldSpec> fields = [] {
    std::vector<FieldSpec> f;
    auto add = [&f](std::string path, FieldType type, ConfigNode fallback, Check check = {},
                    bool nullable = false) {
      f.push_back({std::move(path), type, std::move(fallback), nullable, std::move(check)});
    };
    using T = FieldType;
    add("name", T::string, "run", non_empty());
    add("seed", T::integer, 0, at_least(0));

    add("data.root", T::string, "data");
    add("data.annotations", T::string, "annotations.csv", non_empty());
    add("data.source_tag", T::string, "");
    add("data.batch_size", T::integer, 32, int_choice({32, 64, 128}));
    add("data.num_workers", T::integer, 1, at_least(1));
    add("data.cache_images", T::boolean, true);
    add("data.split.train", T::number, 0.7, closed(0.0, 1.0));
    add("data.split.val", T::number, 0.15, closed(0.0, 1.0));
    add("data.split.test", T::number, 0.15, closed(0.0, 1.0));
    add("data.dedup.enabled", T::boolean, true);
    add("data.dedup.hash_size", T::integer, 8, at_least(2));
    add("data.dedup.threshold", T::integer, 10, at_least(0));

    add("model.name", T::string, "efficientnetv2_b2", backbone_name());
    add("model.pretrained", T::boolean, true);
    add("model.weights_dir", T::string, "weights");
    add("model.unfreeze_last_block", T::boolean, true);
    add("model.net.dropout_value", T::number, 0.5, half_open(0.0, 1.0));
    add("model.optimizer.target", T::string, "adam", string_choice({"adam", "sgd"}));
    add("model.optimizer.lr", T::number, 1e-3, positive());
    add("model.optimizer.weight_decay", T::number, 0.0, at_least(0.0));
    add("model.optimizer.momentum", T::number, 0.9, half_open(0.0, 1.0));
    add("model.scheduler.patience", T::integer, 5, at_least(1));
    add("model.scheduler.factor", T::number, 0.1, open(0.0, 1.0));
    add("model.scheduler.monitor", T::string, "val_accuracy", string_choice({"val_accuracy"}));
    add("model.scheduler.threshold", T::number, 1e-4, at_least(0.0));

    add("trainer.epochs", T::integer, 100, at_least(1));
    add("trainer.threads", T::integer, 1, at_least(1));

    add("augmentation.output_size", T::int_pair, nullptr, {}, true);
    add("augmentation.mean", T::float_triple, nullptr, {}, true);
    add("augmentation.std", T::float_triple, nullptr,
        [](const ConfigNode& n) -> std::optional<std::string> {
          for (const auto& c : n.as_list()) {
            if (!(c.as_double() > 0.0)) return "components must be > 0";
          }
          return std::nullopt;
        },
        true);
    add("augmentation.min_input_side", T::integer, 1, at_least(1));
    add("augmentation.transforms", T::transform_list, ConfigNode::list());

    add("hpo.n_trials", T::integer, 30, at_least(1));
    add("hpo.epochs", T::integer, 10, at_least(1));
    add("hpo.gamma", T::number, 0.25, open(0.0, 1.0));
    add("hpo.n_startup", T::integer, 10, at_least(0));
    add("hpo.n_candidates", T::integer, 24, at_least(1));
    add("hpo.study_file", T::string, "study.json", non_empty());

    add("serve.host", T::string, "127.0.0.1", non_empty());
    add("serve.port", T::integer, 8080, closed(0, 65535));
    add("serve.max_upload_mb", T::number, 10.0, positive());
    add("serve.top_k", T::integer, 5, at_least(1));
    add("serve.threads", T::integer, 8, at_least(1));
    add("serve.cors_origin", T::string, "*", non_empty());
    add("serve.audit_log", T::boolean, false);
    add("serve.audit_dir", T::string, "audit");
    add("serve.access_log", T::string, "");

    add("logger.metrics_file", T::string, "metrics.jsonl", non_empty());
    add("logger.level", T::string, "info", string_choice({"debug", "info", "warn", "error"}));
    return f;
  }();
  return fields;
}

const FieldSpec* find_field(std::string_view path) {
  for (const auto& f : schema()) {
    if (f.path == path) return &f;
  }
  return nullptr;
}

bool is_section(std::string_view path) {
  for (const auto& f : schema()) {
    if (f.path.size() > path.size() && f.path.compare(0, path.size(), path) == 0 &&
        f.path[path.size()] == '.') {
      return true;
    }
  }
  return false;
}

std::string join(std::string_view prefix, std::string_view key) {
  return prefix.empty() ? std::string(key) : std::string(prefix) + "." + std::string(key);
}

// Type check only; ranges are validate()'s job. Returns the expected shape on failure.
std::optional<std::string> type_problem(const FieldSpec& f, const ConfigNode& n) {
  if (n.is_null()) {
    if (f.nullable) return std::nullopt;
    return "must not be null";
  }
  switch (f.type) {
    case FieldType::boolean:
      if (n.is_bool()) return std::nullopt;
      return "expected a boolean";
    case FieldType::integer:
      if (n.is_int()) return std::nullopt;
      return "expected an integer";
    case FieldType::number:
      if (n.is_number()) return std::nullopt;
      return "expected a number";
    case FieldType::string:
      if (n.is_string()) return std::nullopt;
      return "expected a string";
    case FieldType::int_pair:
      if (n.is_list() && n.as_list().size() == 2 && n.as_list()[0].is_int() && n.as_list()[1].is_int()) {
        if (n.as_list()[0].as_int() > 0 && n.as_list()[1].as_int() > 0) return std::nullopt;
        return "entries must be positive";
      }
      return "expected [height, width] integers or null";
    case FieldType::float_triple:
      if (n.is_list() && n.as_list().size() == 3) {
        bool ok = true;
        for (const auto& c : n.as_list()) ok = ok && c.is_number();
        if (ok) return std::nullopt;
      }
      return "expected three numbers or null";
    case FieldType::transform_list:
      if (n.is_list()) return std::nullopt;
      return "expected a list of transforms";
  }
  return std::nullopt;
}

// Ints stored into float-typed fields become floats so every resolved tree
// has one canonical form.
ConfigNode canonical(const FieldSpec& f, ConfigNode n) {
  if (f.type == FieldType::number && n.is_int()) return ConfigNode(static_cast<double>(n.as_int()));
  if (f.type == FieldType::float_triple && n.is_list()) {
    for (auto& c : n.as_list()) {
      if (c.is_int()) c = ConfigNode(static_cast<double>(c.as_int()));
    }
  }
  return n;
}

void canonicalize(ConfigNode& node) {
  for (const auto& f : schema()) {
    if (const ConfigNode* v = node.find_path(f.path)) {
      if (!type_problem(f, *v)) node.set_path(f.path, canonical(f, *v));
    }
  }
}

std::string substitute_env(const std::string& text) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const auto start = text.find("${env:", pos);
    if (start == std::string::npos) break;
    const auto end = text.find('}', start);
    if (end == std::string::npos) break;
    out.append(text, pos, start - pos);
    const std::string var = text.substr(start + 6, end - start - 6);
    const char* value = std::getenv(var.c_str());
    if (!value) throw Error(Errc::invalid_config, "environment variable " + var + " is not set");
    out += value;
    pos = end + 1;
  }
  out.append(text, pos, std::string::npos);
  return out;
}

void substitute_env(ConfigNode& node) {
  if (node.is_string()) {
    if (node.as_string().find("${env:") != std::string::npos) node = ConfigNode(substitute_env(node.as_string()));
  } else if (node.is_list()) {
    for (auto& item : node.as_list()) substitute_env(item);
  } else if (node.is_map()) {
    for (auto& entry : node.as_map()) substitute_env(entry.value);
  }
}

struct ParsedOverride {
  std::string path;
  std::string text;
};

ParsedOverride split_override(const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(Errc::parse_error, "override '" + item + "' must look like path=value");
  }
  return {item.substr(0, eq), item.substr(eq + 1)};
}

bool is_group(std::string_view name) {
  for (auto g : kConfigGroups) {
    if (g == name) return true;
  }
  return false;
}

void apply_override(ConfigNode& node, const ParsedOverride& o) {
  const FieldSpec* f = find_field(o.path);
  if (!f) throw Error(Errc::unknown_override_path, o.path);
  ConfigNode value = parse_override_value(o.text);
  if (f->type == FieldType::string && value.is_scalar() && !value.is_null()) {
    std::string raw = o.text;
    if (raw.size() >= 2 && (raw.front() == '"' || raw.front() == '\'') && raw.back() == raw.front()) {
      raw = raw.substr(1, raw.size() - 2);
    }
    value = ConfigNode(raw);
  }
  substitute_env(value);
  if (auto problem = type_problem(*f, value)) {
    throw Error(Errc::type_mismatch, o.path + ": " + *problem + ", got '" + o.text + "'");
  }
  node.set_path(o.path, canonical(*f, std::move(value)));
}

ConfigNode load_group_file(const std::filesystem::path& root, const DefaultsEntry& e) {
  if (!is_group(e.group)) throw Error(Errc::missing_group_file, "unknown config group '" + e.group + "'");
  const auto file = root / e.group / (e.name + ".yaml");
  if (!std::filesystem::exists(file)) throw Error(Errc::missing_group_file, file.string());
  ConfigNode content = load_yaml_file(file);
  if (content.is_null()) return ConfigNode::map();
  if (!content.is_map()) throw Error(Errc::parse_error, file.string() + ": top level must be a map");
  return content;
}

ConfigNode finish(ConfigNode node, std::span<const ParsedOverride> overrides, ComposeOptions options) {
  substitute_env(node);
  canonicalize(node);
  for (const auto& o : overrides) apply_override(node, o);
  if (options.validate) {
    const auto violations = validate(node);
    if (!violations.empty()) throw Error(Errc::invalid_config, format_violations(violations));
  }
  return node;
}

ConfigNode compose_impl(const std::filesystem::path& root, std::vector<DefaultsEntry> defaults,
                        const ConfigNode* self, std::span<const std::string> overrides,
                        ComposeOptions options) {
  std::vector<ParsedOverride> dotted;
  for (const auto& item : overrides) {
    auto o = split_override(item);
    if (o.path.find('.') == std::string::npos && is_group(o.path)) {
      auto it = std::find_if(defaults.begin(), defaults.end(),
                             [&](const DefaultsEntry& d) { return d.group == o.path; });
      if (it != defaults.end()) {
        it->name = o.text;
      } else {
        auto self_pos = std::find_if(defaults.begin(), defaults.end(),
                                     [](const DefaultsEntry& d) { return d.group == "_self_"; });
        defaults.insert(self_pos, DefaultsEntry{o.path, o.text});
      }
      continue;
    }
    dotted.push_back(std::move(o));
  }

  ConfigNode merged = default_config();
  bool self_merged = false;
  auto merge_self = [&] {
    if (!self) return;
    for (const auto& entry : self->as_map()) {
      if (entry.key == "defaults") continue;
      ConfigNode one = ConfigNode::map();
      one.set(entry.key, entry.value);
      merged = merge(merged, one);
    }
  };
  for (const auto& e : defaults) {
    if (e.group == "_self_") {
      merge_self();
      self_merged = true;
      continue;
    }
    ConfigNode mounted = ConfigNode::map();
    mounted.set(e.group, load_group_file(root, e));
    merged = merge(merged, mounted);
  }
  if (!self_merged) merge_self();
  return finish(std::move(merged), dotted, options);
}

}  // namespace

const ConfigNode& default_config() {
  static const ConfigNode node = [] {
    ConfigNode n = ConfigNode::map();
    for (const auto& f : schema()) n.set_path(f.path, f.fallback);
    return n;
  }();
  return node;
}

std::vector<DefaultsEntry> read_defaults_list(const ConfigNode& root_file) {
  std::vector<DefaultsEntry> out;
  const ConfigNode* list = root_file.find("defaults");
  if (!list || list->is_null()) return out;
  if (!list->is_list()) throw Error(Errc::parse_error, "defaults: expected a list");
  for (const auto& item : list->as_list()) {
    if (item.is_string() && item.as_string() == "_self_") {
      out.push_back({"_self_", ""});
    } else if (item.is_map() && item.as_map().size() == 1 && item.as_map()[0].value.is_string()) {
      out.push_back({item.as_map()[0].key, item.as_map()[0].value.as_string()});
    } else {
      throw Error(Errc::parse_error, "defaults: entries must be `group: name` or _self_");
    }
  }
  return out;
}

ConfigNode compose(const std::filesystem::path& config_root, std::span<const DefaultsEntry> defaults,
                   std::span<const std::string> overrides, ComposeOptions options) {
  std::optional<ConfigNode> self;
  const bool wants_self = std::any_of(defaults.begin(), defaults.end(),
                                      [](const DefaultsEntry& d) { return d.group == "_self_"; });
  if (wants_self && std::filesystem::exists(config_root / "defaults.yaml")) {
    self = load_yaml_file(config_root / "defaults.yaml");
    if (!self->is_map()) self.reset();
  }
  return compose_impl(config_root, {defaults.begin(), defaults.end()}, self ? &*self : nullptr, overrides,
                      options);
}

ConfigNode compose_root(const std::filesystem::path& config_root, std::span<const std::string> overrides,
                        ComposeOptions options) {
  const auto file = config_root / "defaults.yaml";
  if (!std::filesystem::exists(file)) throw Error(Errc::missing_group_file, file.string());
  ConfigNode root = load_yaml_file(file);
  if (root.is_null()) root = ConfigNode::map();
  if (!root.is_map()) throw Error(Errc::parse_error, file.string() + ": top level must be a map");
  return compose_impl(config_root, read_defaults_list(root), &root, overrides, options);
}

ConfigNode compose_resolved(const ConfigNode& resolved, std::span<const std::string> overrides,
                            ComposeOptions options) {
  std::vector<ParsedOverride> dotted;
  for (const auto& item : overrides) {
    auto o = split_override(item);
    if (o.path.find('.') == std::string::npos && is_group(o.path)) {
      throw Error(Errc::unknown_override_path,
                  o.path + ": selecting a group file needs a config root, not a resolved config");
    }
    dotted.push_back(std::move(o));
  }
  return finish(resolved, dotted, options);
}

namespace {

void walk(const ConfigNode& node, const std::string& prefix, std::vector<Violation>& out) {
  for (const auto& entry : node.as_map()) {
    const std::string path = join(prefix, entry.key);
    if (const FieldSpec* f = find_field(path)) {
      if (auto problem = type_problem(*f, entry.value)) {
        out.push_back({path, entry.value.render(), *problem});
        continue;
      }
      if (entry.value.is_null()) continue;
      if (f->check) {
        if (auto problem = f->check(entry.value)) out.push_back({path, entry.value.render(), *problem});
      }
      if (f->type == FieldType::transform_list) {
        const auto& items = entry.value.as_list();
        for (std::size_t i = 0; i < items.size(); ++i) {
          if (auto problem = check_transform_item(items[i])) {
            out.push_back({path + "[" + std::to_string(i) + "]", items[i].render(), *problem});
          }
        }
      }
    } else if (is_section(path)) {
      if (!entry.value.is_map()) {
        out.push_back({path, entry.value.render(), "expected a map"});
      } else {
        walk(entry.value, path, out);
      }
    } else {
      out.push_back({path, entry.value.render(), "unknown key"});
    }
  }
}

}  // namespace

std::vector<Violation> validate(const ConfigNode& node, ValidationMode mode) {
  std::vector<Violation> out;
  if (!node.is_map()) {
    out.push_back({"", node.render(), "configuration must be a map"});
    return out;
  }
  walk(node, "", out);
  for (const auto& f : schema()) {
    if (!node.find_path(f.path)) out.push_back({f.path, "<missing>", "required"});
  }

  const ConfigNode* tr = node.find_path("data.split.train");
  const ConfigNode* va = node.find_path("data.split.val");
  const ConfigNode* te = node.find_path("data.split.test");
  if (tr && va && te && tr->is_number() && va->is_number() && te->is_number()) {
    const double sum = tr->as_double() + va->as_double() + te->as_double();
    if (std::abs(sum - 1.0) > 1e-9) out.push_back({"data.split", fmt(sum), "ratios must sum to 1"});
  }

  if (mode == ValidationMode::tune) {
    for (const auto& p : define_space().params) {
      const ConfigNode* v = node.find_path(p.name);
      if (!v || !(v->is_number() || v->is_string())) continue;
      ParamValue value;
      if (v->is_string()) {
        value = v->as_string();
      } else if (v->is_int()) {
        value = v->as_int();
      } else {
        value = v->as_double();
      }
      if (p.contains(value)) continue;
      std::string domain;
      if (p.kind == ParamKind::categorical) {
        for (const auto& c : p.choices) domain += (domain.empty() ? "" : ", ") + render(c);
        domain = "{" + domain + "}";
      } else {
        domain = "[" + fmt(p.low) + ", " + fmt(p.high) + "]";
      }
      out.push_back({p.name, v->render(), "must lie in the tuning domain " + domain});
    }
  }
  return out;
}

std::string format_violations(std::span<const Violation> violations) {
  std::string out;
  for (const auto& v : violations) {
    if (!out.empty()) out += "\n";
    out += v.path + " = " + v.value + ": " + v.constraint;
  }
  return out;
}

}  // namespace carid
