#include "carid/hpo.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>

#include "carid/rng.hpp"

namespace carid {

using nlohmann::json;

std::string_view to_string(ParamKind kind) noexcept {
  switch (kind) {
    case ParamKind::categorical: return "categorical";
    case ParamKind::float_uniform: return "float_uniform";
    case ParamKind::float_log_uniform: return "float_log_uniform";
    case ParamKind::int_uniform: return "int_uniform";
  }
  return "?";
}

std::string_view to_string(TrialState state) noexcept {
  switch (state) {
    case TrialState::pending: return "pending";
    case TrialState::complete: return "complete";
    case TrialState::failed: return "failed";
  }
  return "?";
}

std::string render(const ParamValue& value) {
  if (const auto* s = std::get_if<std::string>(&value)) return *s;
  if (const auto* i = std::get_if<std::int64_t>(&value)) return std::to_string(*i);
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, std::get<double>(value));
  return std::string(buf, end);
}

double as_number(const ParamValue& value) {
  if (const auto* i = std::get_if<std::int64_t>(&value)) return static_cast<double>(*i);
  if (const auto* d = std::get_if<double>(&value)) return *d;
  throw Error(Errc::type_mismatch, "parameter value '" + std::get<std::string>(value) + "' is not numeric");
}

ParamSpec ParamSpec::categorical(std::string name, std::vector<ParamValue> choices) {
  ParamSpec p;
  p.name = std::move(name);
  p.kind = ParamKind::categorical;
  p.choices = std::move(choices);
  p.check();
  return p;
}

ParamSpec ParamSpec::uniform(std::string name, double low, double high) {
  ParamSpec p;
  p.name = std::move(name);
  p.kind = ParamKind::float_uniform;
  p.low = low;
  p.high = high;
  p.check();
  return p;
}

ParamSpec ParamSpec::log_uniform(std::string name, double low, double high) {
  ParamSpec p = uniform(std::move(name), low, high);
  p.kind = ParamKind::float_log_uniform;
  p.check();
  return p;
}

ParamSpec ParamSpec::integer(std::string name, std::int64_t low, std::int64_t high) {
  ParamSpec p = uniform(std::move(name), static_cast<double>(low), static_cast<double>(high));
  p.kind = ParamKind::int_uniform;
  return p;
}

void ParamSpec::check() const {
  if (name.empty()) throw Error(Errc::invalid_argument, "parameter name must not be empty");
  if (kind == ParamKind::categorical) {
    if (choices.empty()) throw Error(Errc::invalid_argument, name + ": categorical domain is empty");
    return;
  }
  if (!(std::isfinite(low) && std::isfinite(high) && low < high)) {
    throw Error(Errc::invalid_argument, name + ": requires low < high");
  }
  if (kind == ParamKind::float_log_uniform && !(low > 0.0)) {
    throw Error(Errc::invalid_argument, name + ": log-uniform requires low > 0");
  }
  if (kind == ParamKind::int_uniform && (low != std::floor(low) || high != std::floor(high))) {
    throw Error(Errc::invalid_argument, name + ": integer bounds required");
  }
}

bool ParamSpec::contains(const ParamValue& value) const {
  switch (kind) {
    case ParamKind::categorical:
      return std::find(choices.begin(), choices.end(), value) != choices.end();
    case ParamKind::int_uniform: {
      const auto* i = std::get_if<std::int64_t>(&value);
      return i && *i >= low && *i <= high;
    }
    case ParamKind::float_uniform:
    case ParamKind::float_log_uniform: {
      if (std::holds_alternative<std::string>(value)) return false;
      const double v = as_number(value);
      return std::isfinite(v) && v >= low && v <= high && (kind == ParamKind::float_uniform || v > 0.0);
    }
  }
  return false;
}

const ParamSpec* SearchSpace::find(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

void SearchSpace::check() const {
  std::set<std::string> seen;
  for (const auto& p : params) {
    p.check();
    if (!seen.insert(p.name).second) throw Error(Errc::invalid_argument, "duplicate parameter " + p.name);
  }
}

SearchSpace define_space() {
  return SearchSpace{{
      ParamSpec::categorical("model.optimizer.target", {std::string("adam"), std::string("sgd")}),
      ParamSpec::uniform("model.net.dropout_value", 0.3, 0.6),
      ParamSpec::categorical("data.batch_size",
                             {std::int64_t{32}, std::int64_t{64}, std::int64_t{128}}),
      ParamSpec::integer("model.scheduler.patience", 5, 10),
      ParamSpec::uniform("model.scheduler.factor", 0.1, 0.5),
      ParamSpec::log_uniform("model.optimizer.weight_decay", 1e-5, 1e-3),
      ParamSpec::log_uniform("model.optimizer.lr", 1e-4, 1e-2),
  }};
}

const Trial* Study::find(int id) const {
  for (const auto& t : trials) {
    if (t.id == id) return &t;
  }
  return nullptr;
}

std::vector<const Trial*> Study::complete() const {
  std::vector<const Trial*> out;
  for (const auto& t : trials) {
    if (t.state == TrialState::complete) out.push_back(&t);
  }
  return out;
}

Partition partition(const Study& study, double gamma) {
  auto done = study.complete();
  std::stable_sort(done.begin(), done.end(), [](const Trial* a, const Trial* b) {
    if (*a->objective != *b->objective) return *a->objective > *b->objective;
    return a->id < b->id;
  });
  Partition out;
  if (done.empty()) return out;
  const auto n_good = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(done.size()))));
  out.good.assign(done.begin(), done.begin() + static_cast<std::ptrdiff_t>(std::min(n_good, done.size())));
  out.bad.assign(done.begin() + static_cast<std::ptrdiff_t>(out.good.size()), done.end());
  return out;
}

namespace tpe {

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

Mixture fit(std::vector<double> observations, double low, double high, const TpeOptions& options) {
  Mixture m;
  m.low = low;
  m.high = high;
  const double range = high - low;
  const double min_sigma = options.min_bandwidth * range;
  // Spacing is measured between sorted neighbours, the prior mean included;
  // end points look one way only.
  const bool with_prior = options.prior_weight > 0.0 || observations.empty();
  const double centre = 0.5 * (low + high);
  std::vector<std::pair<double, bool>> pts;
  for (double x : observations) pts.emplace_back(x, false);
  if (with_prior) pts.emplace_back(centre, true);
  std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (pts[i].second) continue;
    const double left = i == 0 ? 0.0 : pts[i].first - pts[i - 1].first;
    const double right = i + 1 == n ? 0.0 : pts[i + 1].first - pts[i].first;
    const double spacing = n == 1 ? range : std::max(left, right);
    m.mu.push_back(pts[i].first);
    m.sigma.push_back(std::clamp(spacing, min_sigma, range));
    m.weight.push_back(1.0);
  }
  if (with_prior) {
    m.mu.push_back(centre);
    m.sigma.push_back(range);
    m.weight.push_back(options.prior_weight > 0.0 ? options.prior_weight : 1.0);
  }
  double total = 0.0;
  for (double w : m.weight) total += w;
  for (double& w : m.weight) w /= total;
  return m;
}

double Mixture::log_pdf(double x) const {
  std::vector<double> terms;
  terms.reserve(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double z = (x - mu[i]) / sigma[i];
    const double mass = normal_cdf((high - mu[i]) / sigma[i]) - normal_cdf((low - mu[i]) / sigma[i]);
    terms.push_back(std::log(weight[i]) - 0.5 * z * z - std::log(sigma[i] * std::sqrt(2.0 * std::numbers::pi)) -
                    std::log(std::max(mass, 1e-300)));
  }
  return log_sum_exp(terms);
}

}  // namespace tpe

namespace {

// Numeric dimensions are modelled in an internal coordinate: log for
// log-uniform, widened by half a step on each side for integers.
struct Coord {
  double low;
  double high;
};

Coord coord_bounds(const ParamSpec& p) {
  switch (p.kind) {
    case ParamKind::float_log_uniform: return {std::log(p.low), std::log(p.high)};
    case ParamKind::int_uniform: return {p.low - 0.5, p.high + 0.5};
    default: return {p.low, p.high};
  }
}

double to_coord(const ParamSpec& p, const ParamValue& v) {
  const double x = as_number(v);
  return p.kind == ParamKind::float_log_uniform ? std::log(x) : x;
}

ParamValue from_coord(const ParamSpec& p, double x) {
  switch (p.kind) {
    case ParamKind::float_log_uniform:
      return std::clamp(std::exp(x), p.low, p.high);
    case ParamKind::int_uniform:
      return static_cast<std::int64_t>(std::clamp(std::round(x), p.low, p.high));
    default:
      return std::clamp(x, p.low, p.high);
  }
}

double sample_mixture(const tpe::Mixture& m, CounterRng& rng) {
  double u = rng.uniform();
  std::size_t k = 0;
  while (k + 1 < m.weight.size() && u >= m.weight[k]) {
    u -= m.weight[k];
    ++k;
  }
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double x = m.mu[k] + m.sigma[k] * rng.normal();
    if (x >= m.low && x <= m.high) return x;
  }
  return std::clamp(m.mu[k], m.low, m.high);
}

ParamValue sample_prior(const ParamSpec& p, CounterRng& rng) {
  switch (p.kind) {
    case ParamKind::categorical:
      return p.choices[rng.below(p.choices.size())];
    case ParamKind::int_uniform:
      return static_cast<std::int64_t>(p.low) +
             static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(p.high - p.low) + 1));
    case ParamKind::float_log_uniform:
      return std::clamp(std::exp(rng.uniform(std::log(p.low), std::log(p.high))), p.low, p.high);
    case ParamKind::float_uniform:
      return rng.uniform(p.low, p.high);
  }
  return {};
}

std::vector<double> categorical_weights(const ParamSpec& p, const std::vector<const Trial*>& trials) {
  std::vector<double> w(p.choices.size(), 1.0);
  for (const Trial* t : trials) {
    auto it = t->params.find(p.name);
    if (it == t->params.end()) continue;
    auto pos = std::find(p.choices.begin(), p.choices.end(), it->second);
    if (pos != p.choices.end()) w[static_cast<std::size_t>(pos - p.choices.begin())] += 1.0;
  }
  double total = 0.0;
  for (double x : w) total += x;
  for (double& x : w) x /= total;
  return w;
}

ParamValue sample_tpe(const ParamSpec& p, const Partition& part, CounterRng& rng, const TpeOptions& options) {
  if (p.kind == ParamKind::categorical) {
    const auto l = categorical_weights(p, part.good);
    const auto g = categorical_weights(p, part.bad);
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < options.n_candidates; ++c) {
      double u = rng.uniform();
      std::size_t k = 0;
      while (k + 1 < l.size() && u >= l[k]) {
        u -= l[k];
        ++k;
      }
      const double score = std::log(l[k]) - std::log(g[k]);
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    return p.choices[best];
  }

  const Coord b = coord_bounds(p);
  auto observations = [&](const std::vector<const Trial*>& trials) {
    std::vector<double> out;
    for (const Trial* t : trials) {
      auto it = t->params.find(p.name);
      if (it != t->params.end() && !std::holds_alternative<std::string>(it->second)) {
        out.push_back(std::clamp(to_coord(p, it->second), b.low, b.high));
      }
    }
    return out;
  };
  const auto l = tpe::fit(observations(part.good), b.low, b.high, options);
  const auto g = tpe::fit(observations(part.bad), b.low, b.high, options);
  double best_x = l.mu.front();
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < options.n_candidates; ++c) {
    const double x = sample_mixture(l, rng);
    const double score = l.log_pdf(x) - g.log_pdf(x);
    if (score > best_score) {
      best_score = score;
      best_x = x;
    }
  }
  return from_coord(p, best_x);
}

Trial& find_mutable(Study& study, int id) {
  for (auto& t : study.trials) {
    if (t.id == id) return t;
  }
  throw Error(Errc::unknown_trial, std::to_string(id));
}

std::atomic<bool> g_crash_before_rename{false};

}  // namespace

ParamMap suggest_params(const Study& study, std::uint64_t seed, const TpeOptions& options) {
  study.space.check();
  const auto done = study.complete();
  const bool startup = static_cast<int>(done.size()) < std::max(options.n_startup, 1);
  const Partition part = startup ? Partition{} : partition(study, options.gamma);
  ParamMap out;
  for (std::size_t d = 0; d < study.space.params.size(); ++d) {
    const auto& p = study.space.params[d];
    CounterRng rng(derive_key({seed, hash_label("tpe"), static_cast<std::uint64_t>(study.trials.size()),
                               static_cast<std::uint64_t>(d)}));
    out[p.name] = startup ? sample_prior(p, rng) : sample_tpe(p, part, rng, options);
  }
  return out;
}

const Trial& ask(Study& study, std::uint64_t seed, const TpeOptions& options) {
  Trial t;
  t.id = study.trials.empty() ? 0 : study.trials.back().id + 1;
  t.params = suggest_params(study, seed, options);
  study.trials.push_back(std::move(t));
  return study.trials.back();
}

void tell(Study& study, int trial_id, double objective) {
  Trial& t = find_mutable(study, trial_id);
  if (t.state != TrialState::pending) throw Error(Errc::already_complete, std::to_string(trial_id));
  if (!std::isfinite(objective)) {
    t.state = TrialState::failed;
    t.note = "non-finite objective";
    return;
  }
  t.objective = objective;
  t.state = TrialState::complete;
}

void tell_failed(Study& study, int trial_id, std::string reason) {
  Trial& t = find_mutable(study, trial_id);
  if (t.state != TrialState::pending) throw Error(Errc::already_complete, std::to_string(trial_id));
  t.state = TrialState::failed;
  t.note = std::move(reason);
}

const Trial& best_trial(const Study& study) {
  const Trial* best = nullptr;
  for (const auto& t : study.trials) {
    if (t.state != TrialState::complete) continue;
    if (!best || *t.objective > *best->objective || (*t.objective == *best->objective && t.id < best->id)) {
      best = &t;
    }
  }
  if (!best) throw Error(Errc::no_complete_trials, "study has no complete trials");
  return *best;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json value_json(const ParamValue& v) {
  return std::visit([](const auto& x) { return json(x); }, v);
}

ParamValue value_from_json(const json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number_integer()) return j.get<std::int64_t>();
  if (j.is_number()) return j.get<double>();
  throw Error(Errc::storage_unavailable, "unsupported parameter value " + j.dump());
}

}  // namespace

json to_json(const Study& study) {
  json space = json::array();
  for (const auto& p : study.space.params) {
    json entry = {{"name", p.name}, {"kind", to_string(p.kind)}};
    if (p.kind == ParamKind::categorical) {
      json choices = json::array();
      for (const auto& c : p.choices) choices.push_back(value_json(c));
      entry["choices"] = choices;
    } else if (p.kind == ParamKind::int_uniform) {
      entry["low"] = static_cast<std::int64_t>(p.low);
      entry["high"] = static_cast<std::int64_t>(p.high);
    } else {
      entry["low"] = p.low;
      entry["high"] = p.high;
    }
    space.push_back(entry);
  }
  json trials = json::array();
  for (const auto& t : study.trials) {
    json params = json::object();
    for (const auto& [k, v] : t.params) params[k] = value_json(v);
    json entry = {{"id", t.id},
                  {"params", params},
                  {"objective", t.objective ? json(*t.objective) : json(nullptr)},
                  {"state", to_string(t.state)}};
    if (!t.note.empty()) entry["note"] = t.note;
    trials.push_back(entry);
  }
  return {{"space", space}, {"trials", trials}};
}

Study study_from_json(const json& j) {
  try {
    Study s;
    for (const auto& e : j.at("space")) {
      ParamSpec p;
      p.name = e.at("name").get<std::string>();
      const auto kind = e.at("kind").get<std::string>();
      if (kind == "categorical") {
        p.kind = ParamKind::categorical;
        for (const auto& c : e.at("choices")) p.choices.push_back(value_from_json(c));
      } else {
        if (kind == "float_uniform") {
          p.kind = ParamKind::float_uniform;
        } else if (kind == "float_log_uniform") {
          p.kind = ParamKind::float_log_uniform;
        } else if (kind == "int_uniform") {
          p.kind = ParamKind::int_uniform;
        } else {
          throw Error(Errc::storage_unavailable, "unknown parameter kind " + kind);
        }
        p.low = e.at("low").get<double>();
        p.high = e.at("high").get<double>();
      }
      s.space.params.push_back(std::move(p));
    }
    for (const auto& e : j.at("trials")) {
      Trial t;
      t.id = e.at("id").get<int>();
      for (const auto& [k, v] : e.at("params").items()) t.params[k] = value_from_json(v);
      if (!e.at("objective").is_null()) t.objective = e.at("objective").get<double>();
      const auto state = e.at("state").get<std::string>();
      if (state == "pending") {
        t.state = TrialState::pending;
      } else if (state == "complete") {
        t.state = TrialState::complete;
      } else if (state == "failed") {
        t.state = TrialState::failed;
      } else {
        throw Error(Errc::storage_unavailable, "unknown trial state " + state);
      }
      if (t.state == TrialState::complete && !t.objective) {
        throw Error(Errc::storage_unavailable, "complete trial without objective");
      }
      if (e.contains("note")) t.note = e.at("note").get<std::string>();
      s.trials.push_back(std::move(t));
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(Errc::storage_unavailable, e.what());
  }
}

// ---------------------------------------------------------------------------
// Store

namespace {

class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error(Errc::storage_unavailable, "cannot open lock " + path.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw Error(Errc::storage_unavailable, "cannot lock " + path.string());
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

std::filesystem::path lock_path(const std::filesystem::path& p) { return p.string() + ".lock"; }

}  // namespace

StudyStore::StudyStore(std::filesystem::path path) : path_(std::move(path)) {}

bool StudyStore::exists() const { return std::filesystem::exists(path_); }

Study StudyStore::load() const {
  std::ifstream in(path_);
  if (!in) throw Error(Errc::storage_unavailable, "cannot read " + path_.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(Errc::storage_unavailable, path_.string() + ": " + e.what());
  }
  return study_from_json(j);
}

void StudyStore::save(const Study& study) const {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  FileLock lock(lock_path(path_));
  const auto tmp = std::filesystem::path(path_.string() + ".tmp");
  {
    const std::string text = to_json(study).dump(2) + "\n";
    const int fd = ::open(tmp.c_str(), O_CREAT | O_TRUNC | O_WRONLY | O_CLOEXEC, 0644);
    if (fd < 0) throw Error(Errc::storage_unavailable, "cannot write " + tmp.string());
    std::size_t written = 0;
    while (written < text.size()) {
      const auto n = ::write(fd, text.data() + written, text.size() - written);
      if (n <= 0) {
        ::close(fd);
        throw Error(Errc::storage_unavailable, "short write to " + tmp.string());
      }
      written += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
  }
  if (g_crash_before_rename.exchange(false)) {
    throw Error(Errc::storage_unavailable, "injected crash before rename");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path_, ec);
  if (ec) throw Error(Errc::storage_unavailable, "rename failed: " + ec.message());
}

void StudyStore::inject_crash_before_rename(bool enabled) { g_crash_before_rename = enabled; }

// ---------------------------------------------------------------------------

Objective maximize_negated(Objective cost) {
  return [cost = std::move(cost)](const Trial& t) { return -cost(t); };
}

Study run_study(const Objective& objective, const SearchSpace& space, int n_trials, std::uint64_t seed,
                const TpeOptions& options, const StudyStore* store) {
  if (n_trials < 1) throw Error(Errc::invalid_argument, "n_trials must be >= 1");
  space.check();
  Study study;
  study.space = space;
  if (store && store->exists()) {
    study = store->load();
    if (!(study.space == space)) {
      throw Error(Errc::storage_unavailable, store->path().string() + " holds a different search space");
    }
    for (auto& t : study.trials) {
      if (t.state == TrialState::pending) {
        t.state = TrialState::failed;
        t.note = "interrupted";
      }
    }
  }
  while (static_cast<int>(study.trials.size()) < n_trials) {
    const int id = ask(study, seed, options).id;
    const Trial snapshot = study.trials.back();
    try {
      tell(study, id, objective(snapshot));
    } catch (const std::exception& e) {
      tell_failed(study, id, e.what());
    }
    if (store) store->save(study);
  }
  if (study.complete().empty()) {
    throw Error(Errc::all_trials_failed, std::to_string(study.trials.size()) + " trials, none complete");
  }
  return study;
}

}  // namespace carid
