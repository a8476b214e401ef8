#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

#include "carid/error.hpp"

namespace carid {

enum class ParamKind { categorical, float_uniform, float_log_uniform, int_uniform };

std::string_view to_string(ParamKind kind) noexcept;

/// Categorical choices may be strings or integers (batch sizes).
using ParamValue = std::variant<std::int64_t, double, std::string>;

std::string render(const ParamValue& value);
double as_number(const ParamValue& value);

struct ParamSpec {
  std::string name;
  ParamKind kind = ParamKind::float_uniform;
  std::vector<ParamValue> choices;  // categorical only
  double low = 0.0;                 // numeric kinds, inclusive
  double high = 1.0;

  static ParamSpec categorical(std::string name, std::vector<ParamValue> choices);
  static ParamSpec uniform(std::string name, double low, double high);
  static ParamSpec log_uniform(std::string name, double low, double high);
  static ParamSpec integer(std::string name, std::int64_t low, std::int64_t high);

  /// Throws InvalidArgument when the declaration itself is ill-formed.
  void check() const;
  bool contains(const ParamValue& value) const;

  friend bool operator==(const ParamSpec&, const ParamSpec&) = default;
};

struct SearchSpace {
  std::vector<ParamSpec> params;

  const ParamSpec* find(std::string_view name) const;
  /// Names unique, every spec well-formed.
  void check() const;

  friend bool operator==(const SearchSpace&, const SearchSpace&) = default;
};

/// The seven tuned fields, named by their config paths.
SearchSpace define_space();

enum class TrialState { pending, complete, failed };

std::string_view to_string(TrialState state) noexcept;

using ParamMap = std::map<std::string, ParamValue>;

struct Trial {
  int id = 0;
  ParamMap params;
  std::optional<double> objective;
  TrialState state = TrialState::pending;
  std::string note;  // failure reason, empty otherwise

  friend bool operator==(const Trial&, const Trial&) = default;
};

struct TpeOptions {
  double gamma = 0.25;
  int n_startup = 10;
  int n_candidates = 24;
  /// Weight of the prior component in each Parzen mixture.
  double prior_weight = 1.0;
  /// Lower bandwidth bound as a fraction of the (transformed) range.
  double min_bandwidth = 0.01;
};

struct Study {
  SearchSpace space;
  std::vector<Trial> trials;

  const Trial* find(int id) const;
  std::vector<const Trial*> complete() const;

  friend bool operator==(const Study&, const Study&) = default;
};

/// Completed trials split into the top-gamma "good" set and the rest.
/// Ordering: objective descending, then id ascending.
struct Partition {
  std::vector<const Trial*> good;
  std::vector<const Trial*> bad;
};

Partition partition(const Study& study, double gamma);

/// Pure: identical (study history, seed, options) gives identical params.
/// Below n_startup completed trials every dimension is drawn from its prior.
ParamMap suggest_params(const Study& study, std::uint64_t seed, const TpeOptions& options = {});

/// Appends a pending trial carrying suggest_params() and returns it.
const Trial& ask(Study& study, std::uint64_t seed, const TpeOptions& options = {});

/// Throws UnknownTrial, AlreadyComplete.
void tell(Study& study, int trial_id, double objective);
void tell_failed(Study& study, int trial_id, std::string reason);

/// Highest objective among complete trials; ties go to the lowest id.
/// Throws NoCompleteTrials.
const Trial& best_trial(const Study& study);

nlohmann::json to_json(const Study& study);
Study study_from_json(const nlohmann::json& json);

/// JSON file store. Writes go through a temp file and rename; an advisory
/// lock on `<path>.lock` serializes writers.
class StudyStore {
 public:
  explicit StudyStore(std::filesystem::path path);

  const std::filesystem::path& path() const noexcept { return path_; }
  bool exists() const;
  /// Throws StorageUnavailable when the file is unreadable or corrupt.
  Study load() const;
  void save(const Study& study) const;

  /// Test hook: the next save() throws after the temp file is written and
  /// before it replaces the study.
  static void inject_crash_before_rename(bool enabled);

 private:
  std::filesystem::path path_;
};

using Objective = std::function<double(const Trial&)>;

/// Wraps a cost function so run_study can maximize it.
Objective maximize_negated(Objective cost);

/// Runs until the study holds n_trials finished trials. An objective that
/// throws marks its trial failed. With a store, the study is resumed from it
/// when present and persisted after every trial; interrupted pending trials
/// are marked failed.
/// Throws AllTrialsFailed when no trial completes.
Study run_study(const Objective& objective, const SearchSpace& space, int n_trials,
                std::uint64_t seed, const TpeOptions& options = {},
                const StudyStore* store = nullptr);

namespace tpe {
// Exposed for tests.

/// Truncated-Gaussian Parzen mixture on [low, high] in the transformed
/// (log for log-uniform) space, with one prior component at the centre.
struct Mixture {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::vector<double> weight;  // normalized
  double low = 0.0;
  double high = 1.0;

  double log_pdf(double x) const;
};

Mixture fit(std::vector<double> observations, double low, double high, const TpeOptions& options);

}  // namespace tpe

}  // namespace carid
