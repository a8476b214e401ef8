#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "carid/config.hpp"

namespace carid {

namespace {

[[noreturn]] void wrong_type(const ConfigNode& node, std::string_view wanted) {
  throw Error(Errc::type_mismatch,
              "expected " + std::string(wanted) + ", found " + std::string(node.type_name()));
}

bool is_null_word(std::string_view s) {
  return s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL";
}

std::optional<bool> parse_bool_word(std::string_view s) {
  if (s == "true" || s == "True" || s == "TRUE") return true;
  if (s == "false" || s == "False" || s == "FALSE") return false;
  return std::nullopt;
}

std::optional<std::int64_t> parse_int_word(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::string_view digits = s;
  if (digits.front() == '+') digits.remove_prefix(1);
  std::int64_t value = 0;
  const auto* end = digits.data() + digits.size();
  const auto [ptr, ec] = std::from_chars(digits.data(), end, value);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  return value;
}

std::optional<double> parse_float_word(std::string_view s) {
  if (s == ".inf" || s == ".Inf" || s == ".INF" || s == "+.inf") return HUGE_VAL;
  if (s == "-.inf" || s == "-.Inf" || s == "-.INF") return -HUGE_VAL;
  if (s == ".nan" || s == ".NaN" || s == ".NAN") return std::nan("");
  if (s.empty() || s.find_first_of("0123456789") == std::string_view::npos) return std::nullopt;
  std::string_view body = s;
  if (body.front() == '+') body.remove_prefix(1);
  double value = 0;
  const auto* end = body.data() + body.size();
  const auto [ptr, ec] = std::from_chars(body.data(), end, value);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  return value;
}

ConfigNode resolve_plain_scalar(std::string_view s) {
  if (is_null_word(s)) return ConfigNode{};
  if (auto i = parse_int_word(s)) return ConfigNode{*i};
  if (auto f = parse_float_word(s)) return ConfigNode{*f};
  if (auto b = parse_bool_word(s)) return ConfigNode{*b};
  return ConfigNode{std::string(s)};
}

ConfigNode from_yaml(const YAML::Node& node, std::string_view source) {
  switch (node.Type()) {
    case YAML::NodeType::Undefined:
    case YAML::NodeType::Null:
      return ConfigNode{};
    case YAML::NodeType::Scalar: {
      const std::string& tag = node.Tag();
      const std::string& text = node.Scalar();
      if (tag == "!" || tag == "tag:yaml.org,2002:str") return ConfigNode{text};
      return resolve_plain_scalar(text);
    }
    case YAML::NodeType::Sequence: {
      ConfigNode::List items;
      for (const auto& child : node) items.push_back(from_yaml(child, source));
      return ConfigNode{std::move(items)};
    }
    case YAML::NodeType::Map: {
      ConfigNode out = ConfigNode::map();
      for (const auto& kv : node) {
        if (!kv.first.IsScalar()) {
          throw Error(Errc::parse_error, std::string(source) + ":" +
                                             std::to_string(kv.first.Mark().line + 1) +
                                             ": map keys must be scalars");
        }
        const std::string key = kv.first.Scalar();
        if (out.find(key)) {
          throw Error(Errc::parse_error, std::string(source) + ":" +
                                             std::to_string(kv.first.Mark().line + 1) +
                                             ": duplicate key '" + key + "'");
        }
        out.set(key, from_yaml(kv.second, source));
      }
      return out;
    }
  }
  return ConfigNode{};
}

std::string format_double(double v) {
  if (std::isnan(v)) return ".nan";
  if (std::isinf(v)) return v > 0 ? ".inf" : "-.inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, ptr);
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  return out + '"';
}

bool plain_key(std::string_view key) {
  if (key.empty()) return false;
  for (char c : key) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '_' || c == '-';
    if (!ok) return false;
  }
  // Keys that would resolve to non-strings must be quoted to survive reparse.
  return resolve_plain_scalar(key).is_string();
}

std::string scalar_text(const ConfigNode& node) {
  if (node.is_null()) return "null";
  if (node.is_bool()) return node.as_bool() ? "true" : "false";
  if (node.is_int()) return std::to_string(node.as_int());
  if (node.is_float()) return format_double(node.as_double());
  return quote(node.as_string());
}

std::string flow_text(const ConfigNode& node) {
  if (node.is_list()) {
    std::string out = "[";
    const auto& items = node.as_list();
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (i) out += ", ";
      out += flow_text(items[i]);
    }
    return out + "]";
  }
  if (node.is_map()) {
    std::string out = "{";
    const auto& entries = node.as_map();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i) out += ", ";
      out += (plain_key(entries[i].key) ? entries[i].key : quote(entries[i].key)) + ": " +
             flow_text(entries[i].value);
    }
    return out + "}";
  }
  return scalar_text(node);
}

bool all_scalars(const ConfigNode::List& items) {
  return std::all_of(items.begin(), items.end(), [](const auto& n) { return n.is_scalar(); });
}

void emit(std::ostringstream& out, const ConfigNode& node, int indent);

void emit_map_entries(std::ostringstream& out, const ConfigNode::Map& entries, int indent,
                      bool first_inline) {
  const std::string pad(static_cast<std::size_t>(indent), ' ');
  bool first = true;
  for (const auto& entry : entries) {
    if (!(first && first_inline)) out << pad;
    first = false;
    out << (plain_key(entry.key) ? entry.key : quote(entry.key)) << ':';
    const auto& value = entry.value;
    const bool nested = (value.is_map() && !value.as_map().empty()) ||
                        (value.is_list() && !value.as_list().empty() && !all_scalars(value.as_list()));
    if (nested) {
      out << '\n';
      emit(out, value, indent + 2);
    } else {
      out << ' ' << flow_text(value) << '\n';
    }
  }
}

void emit(std::ostringstream& out, const ConfigNode& node, int indent) {
  const std::string pad(static_cast<std::size_t>(indent), ' ');
  if (node.is_map()) {
    if (node.as_map().empty()) {
      out << pad << "{}\n";
      return;
    }
    emit_map_entries(out, node.as_map(), indent, false);
  } else if (node.is_list()) {
    for (const auto& item : node.as_list()) {
      out << pad << "- ";
      if (item.is_map() && !item.as_map().empty()) {
        emit_map_entries(out, item.as_map(), indent + 2, true);
      } else if (item.is_list() && !item.as_list().empty() && !all_scalars(item.as_list())) {
        out << '\n';
        emit(out, item, indent + 2);
      } else {
        out << flow_text(item) << '\n';
      }
    }
  } else {
    out << pad << scalar_text(node) << '\n';
  }
}

}  // namespace

bool ConfigNode::as_bool() const {
  if (!is_bool()) wrong_type(*this, "bool");
  return std::get<bool>(value_);
}

std::int64_t ConfigNode::as_int() const {
  if (!is_int()) wrong_type(*this, "int");
  return std::get<std::int64_t>(value_);
}

double ConfigNode::as_double() const {
  if (is_int()) return static_cast<double>(std::get<std::int64_t>(value_));
  if (!is_float()) wrong_type(*this, "float");
  return std::get<double>(value_);
}

const std::string& ConfigNode::as_string() const {
  if (!is_string()) wrong_type(*this, "string");
  return std::get<std::string>(value_);
}

const ConfigNode::List& ConfigNode::as_list() const {
  if (!is_list()) wrong_type(*this, "list");
  return std::get<List>(value_);
}

ConfigNode::List& ConfigNode::as_list() {
  if (!is_list()) wrong_type(*this, "list");
  return std::get<List>(value_);
}

const ConfigNode::Map& ConfigNode::as_map() const {
  if (!is_map()) wrong_type(*this, "map");
  return std::get<Map>(value_);
}

ConfigNode::Map& ConfigNode::as_map() {
  if (!is_map()) wrong_type(*this, "map");
  return std::get<Map>(value_);
}

const ConfigNode* ConfigNode::find(std::string_view key) const {
  if (!is_map()) return nullptr;
  for (const auto& e : std::get<Map>(value_))
    if (e.key == key) return &e.value;
  return nullptr;
}

ConfigNode* ConfigNode::find(std::string_view key) {
  if (!is_map()) return nullptr;
  for (auto& e : std::get<Map>(value_))
    if (e.key == key) return &e.value;
  return nullptr;
}

const ConfigNode* ConfigNode::find_path(std::string_view dotted) const {
  const ConfigNode* node = this;
  while (node) {
    const auto dot = dotted.find('.');
    node = node->find(dotted.substr(0, dot));
    if (dot == std::string_view::npos) return node;
    dotted.remove_prefix(dot + 1);
  }
  return nullptr;
}

ConfigNode& ConfigNode::set(std::string_view key, ConfigNode value) {
  if (is_null()) value_ = Map{};
  auto& entries = as_map();
  for (auto& e : entries) {
    if (e.key == key) {
      e.value = std::move(value);
      return e.value;
    }
  }
  entries.push_back({std::string(key), std::move(value)});
  return entries.back().value;
}

ConfigNode& ConfigNode::set_path(std::string_view dotted, ConfigNode value) {
  const auto dot = dotted.find('.');
  if (dot == std::string_view::npos) return set(dotted, std::move(value));
  const auto head = dotted.substr(0, dot);
  ConfigNode* child = find(head);
  if (!child || !child->is_map()) child = &set(head, ConfigNode::map());
  return child->set_path(dotted.substr(dot + 1), std::move(value));
}

bool ConfigNode::erase(std::string_view key) {
  if (!is_map()) return false;
  auto& entries = std::get<Map>(value_);
  const auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.key == key; });
  if (it == entries.end()) return false;
  entries.erase(it);
  return true;
}

std::string ConfigNode::render() const {
  if (is_string()) return as_string();
  return flow_text(*this);
}

std::string_view ConfigNode::type_name() const noexcept {
  switch (value_.index()) {
    case 0: return "null";
    case 1: return "bool";
    case 2: return "int";
    case 3: return "float";
    case 4: return "string";
    case 5: return "list";
    default: return "map";
  }
}

bool operator==(const ConfigNode& a, const ConfigNode& b) {
  if (a.value_.index() != b.value_.index()) return false;
  if (a.is_float()) {
    const double x = std::get<double>(a.value_);
    const double y = std::get<double>(b.value_);
    return x == y || (std::isnan(x) && std::isnan(y));
  }
  return a.value_ == b.value_;
}

ConfigNode parse_yaml(std::string_view text, std::string_view source) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(text));
  } catch (const YAML::Exception& e) {
    throw Error(Errc::parse_error, std::string(source) + ":" + std::to_string(e.mark.line + 1) +
                                       ": " + e.msg);
  }
  return from_yaml(root, source);
}

ConfigNode load_yaml_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_error, "cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_yaml(buffer.str(), path.string());
}

std::string to_yaml(const ConfigNode& node) {
  std::ostringstream out;
  emit(out, node, 0);
  return out.str();
}

void save_yaml_file(const ConfigNode& node, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
  out << to_yaml(node);
  if (!out) throw Error(Errc::io_error, "short write to " + path.string());
}

ConfigNode parse_override_value(std::string_view text) {
  if (!text.empty() && (text.front() == '[' || text.front() == '{')) {
    return parse_yaml(text, "<override>");
  }
  if (text.size() >= 2 && ((text.front() == '"' && text.back() == '"') ||
                           (text.front() == '\'' && text.back() == '\''))) {
    return ConfigNode{std::string(text.substr(1, text.size() - 2))};
  }
  if (text == "null" || text == "~") return ConfigNode{};
  if (auto i = parse_int_word(text)) return ConfigNode{*i};
  if (auto f = parse_float_word(text)) return ConfigNode{*f};
  if (auto b = parse_bool_word(text)) return ConfigNode{*b};
  return ConfigNode{std::string(text)};
}

namespace {

ConfigNode merge_at(const ConfigNode& base, const ConfigNode& overlay, const std::string& path) {
  if (base.is_map() != overlay.is_map()) {
    throw Error(Errc::type_mismatch, (path.empty() ? std::string("<root>") : path) + ": cannot merge a " +
                                         std::string(overlay.type_name()) + " over a " +
                                         std::string(base.type_name()));
  }
  if (!base.is_map()) return overlay;
  ConfigNode out = base;
  for (const auto& entry : overlay.as_map()) {
    if (const ConfigNode* existing = out.find(entry.key)) {
      out.set(entry.key, merge_at(*existing, entry.value, path.empty() ? entry.key : path + "." + entry.key));
    } else {
      out.set(entry.key, entry.value);
    }
  }
  return out;
}

}  // namespace

ConfigNode merge(const ConfigNode& base, const ConfigNode& overlay) { return merge_at(base, overlay, ""); }

}  // namespace carid
