#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "carid/config.hpp"
#include "carid/hpo.hpp"
#include "carid/rng.hpp"
#include "synthetic.hpp"

namespace {

using namespace carid;
namespace fs = std::filesystem;

double branin(double x1, double x2) {
  constexpr double a = 1.0, b = 5.1 / (4.0 * std::numbers::pi * std::numbers::pi), c = 5.0 / std::numbers::pi,
                   r = 6.0, s = 10.0, t = 1.0 / (8.0 * std::numbers::pi);
  return a * std::pow(x2 - b * x1 * x1 + c * x1 - r, 2) + s * (1 - t) * std::cos(x1) + s;
}

SearchSpace branin_space() {
  return {{ParamSpec::uniform("x1", -5.0, 10.0), ParamSpec::uniform("x2", 0.0, 15.0)}};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Trial completed(int id, ParamMap params, double objective) {
  Trial t;
  t.id = id;
  t.params = std::move(params);
  t.objective = objective;
  t.state = TrialState::complete;
  return t;
}

// Random history over `space`: prior-sampled params, mixed states.
Study random_history(const SearchSpace& space, CounterRng& rng, int n) {
  Study s;
  s.space = space;
  for (int i = 0; i < n; ++i) {
    Study empty;
    empty.space = space;
    Trial t;
    t.id = i;
    t.params = suggest_params(empty, rng.next_u64());
    // Occasionally pin values to the bounds to stress the kernels.
    for (const auto& p : space.params) {
      if (p.kind != ParamKind::categorical && rng.bernoulli(0.1)) {
        const double v = rng.bernoulli(0.5) ? p.low : p.high;
        t.params[p.name] = p.kind == ParamKind::int_uniform ? ParamValue(static_cast<std::int64_t>(v)) : ParamValue(v);
      }
    }
    const double u = rng.uniform();
    if (u < 0.1) {
      t.state = TrialState::failed;
    } else if (u < 0.15) {
      t.state = TrialState::pending;
    } else {
      t.state = TrialState::complete;
      t.objective = rng.bernoulli(0.2) ? 0.5 : rng.uniform();  // ties included
    }
    s.trials.push_back(t);
  }
  return s;
}

// ---------------------------------------------------------------------------

TEST(Space, SevenParamsWithDeclaredDomains) {
  const auto s = define_space();
  ASSERT_EQ(s.params.size(), 7u);
  EXPECT_NO_THROW(s.check());
  auto get = [&](const char* n) { return *s.find(n); };
  EXPECT_EQ(get("model.optimizer.target").choices, (std::vector<ParamValue>{std::string("adam"), std::string("sgd")}));
  EXPECT_EQ(get("model.net.dropout_value").kind, ParamKind::float_uniform);
  EXPECT_EQ(get("model.net.dropout_value").low, 0.3);
  EXPECT_EQ(get("model.net.dropout_value").high, 0.6);
  EXPECT_EQ(get("data.batch_size").choices,
            (std::vector<ParamValue>{std::int64_t{32}, std::int64_t{64}, std::int64_t{128}}));
  EXPECT_EQ(get("model.scheduler.patience").kind, ParamKind::int_uniform);
  EXPECT_EQ(get("model.scheduler.patience").low, 5);
  EXPECT_EQ(get("model.scheduler.patience").high, 10);
  EXPECT_EQ(get("model.scheduler.factor").low, 0.1);
  EXPECT_EQ(get("model.scheduler.factor").high, 0.5);
  EXPECT_EQ(get("model.optimizer.weight_decay").kind, ParamKind::float_log_uniform);
  EXPECT_EQ(get("model.optimizer.weight_decay").low, 1e-5);
  EXPECT_EQ(get("model.optimizer.weight_decay").high, 1e-3);
  EXPECT_EQ(get("model.optimizer.lr").kind, ParamKind::float_log_uniform);
  EXPECT_EQ(get("model.optimizer.lr").low, 1e-4);
  EXPECT_EQ(get("model.optimizer.lr").high, 1e-2);
  // Every name is a config path.
  for (const auto& p : s.params) EXPECT_NE(default_config().find_path(p.name), nullptr) << p.name;
}

TEST(Space, IllFormedDeclarationsAreRejected) {
  EXPECT_THROW(ParamSpec::uniform("x", 1.0, 1.0).check(), Error);
  EXPECT_THROW(ParamSpec::log_uniform("x", 0.0, 1.0).check(), Error);
  EXPECT_THROW(ParamSpec::integer("x", 3, 2).check(), Error);
  EXPECT_THROW(ParamSpec::categorical("x", {}).check(), Error);
  SearchSpace dup{{ParamSpec::uniform("x", 0, 1), ParamSpec::uniform("x", 0, 2)}};
  EXPECT_THROW(dup.check(), Error);
}

TEST(Prior, EmptyStudyDrawsInDomainAndLogUniformLr) {
  Study s;
  s.space = define_space();
  constexpr int kDraws = 10000;
  std::vector<double> u;
  std::map<std::int64_t, int> batch, patience;
  for (int i = 0; i < kDraws; ++i) {
    const auto p = suggest_params(s, static_cast<std::uint64_t>(i));
    for (const auto& spec : s.space.params) ASSERT_TRUE(spec.contains(p.at(spec.name))) << spec.name;
    u.push_back((std::log10(std::get<double>(p.at("model.optimizer.lr"))) + 4.0) / 2.0);
    ++batch[std::get<std::int64_t>(p.at("data.batch_size"))];
    ++patience[std::get<std::int64_t>(p.at("model.scheduler.patience"))];
  }
  // One-sample Kolmogorov-Smirnov against U(0, 1).
  std::sort(u.begin(), u.end());
  double d = 0.0;
  for (int i = 0; i < kDraws; ++i) {
    d = std::max({d, (i + 1.0) / kDraws - u[static_cast<std::size_t>(i)], u[static_cast<std::size_t>(i)] - static_cast<double>(i) / kDraws});
  }
  const double lambda = (std::sqrt(kDraws) + 0.12 + 0.11 / std::sqrt(kDraws)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  EXPECT_GT(p, 0.01) << "D=" << d;

  ASSERT_EQ(batch.size(), 3u);
  for (const auto& [_, n] : batch) EXPECT_NEAR(n / double(kDraws), 1.0 / 3.0, 0.03);
  ASSERT_EQ(patience.size(), 6u);
  EXPECT_EQ(patience.begin()->first, 5);
  EXPECT_EQ(patience.rbegin()->first, 10);
}

TEST(Partition, SizesOrderingAndExclusions) {
  CounterRng rng(derive_key({7}));
  for (int round = 0; round < 300; ++round) {
    const auto s = random_history(define_space(), rng, static_cast<int>(rng.below(50)));
    const double gamma = rng.uniform(0.05, 0.95);
    const auto part = partition(s, gamma);
    const auto done = s.complete();
    if (done.empty()) {
      EXPECT_TRUE(part.good.empty());
      continue;
    }
    const auto expected_good = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(done.size()))));
    ASSERT_EQ(part.good.size(), expected_good);
    ASSERT_EQ(part.good.size() + part.bad.size(), done.size());
    std::set<int> ids;
    for (const auto* t : part.good) ids.insert(t->id);
    for (const auto* t : part.bad) {
      ASSERT_FALSE(ids.contains(t->id));
      ids.insert(t->id);
    }
    for (const auto* t : done) ASSERT_TRUE(ids.contains(t->id));
    double worst_good = 1e9, best_bad = -1e9;
    for (const auto* t : part.good) worst_good = std::min(worst_good, *t->objective);
    for (const auto* t : part.bad) best_bad = std::max(best_bad, *t->objective);
    ASSERT_GE(worst_good, best_bad);
  }
}

TEST(Suggest, ReproducibleForSameHistoryAndSeed) {
  CounterRng rng(derive_key({8}));
  const auto s = random_history(define_space(), rng, 40);
  int differing = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_EQ(suggest_params(s, seed), suggest_params(s, seed));
    differing += suggest_params(s, seed) != suggest_params(s, seed + 100);
  }
  EXPECT_GE(differing, 18);
}

TEST(Suggest, DomainFuzzTenThousand) {
  CounterRng rng(derive_key({9}));
  const auto space = define_space();
  int out_of_domain = 0, non_positive_log = 0, wrong_type = 0;
  Study s;
  for (int i = 0; i < 10000; ++i) {
    if (i % 50 == 0) s = random_history(space, rng, static_cast<int>(rng.below(60)));
    TpeOptions o;
    o.gamma = rng.uniform(0.05, 0.95);
    o.n_startup = static_cast<int>(rng.below(15));
    o.n_candidates = 1 + static_cast<int>(rng.below(48));
    const auto p = suggest_params(s, rng.next_u64(), o);
    for (const auto& spec : space.params) {
      const auto& v = p.at(spec.name);
      out_of_domain += !spec.contains(v);
      if (spec.kind == ParamKind::float_log_uniform) non_positive_log += !(std::get<double>(v) > 0.0);
      if (spec.kind == ParamKind::int_uniform) wrong_type += !std::holds_alternative<std::int64_t>(v);
      if (spec.kind == ParamKind::float_uniform || spec.kind == ParamKind::float_log_uniform) {
        wrong_type += !std::holds_alternative<double>(v);
      }
    }
  }
  EXPECT_EQ(out_of_domain, 0);
  EXPECT_EQ(non_positive_log, 0);
  EXPECT_EQ(wrong_type, 0);
}

TEST(Suggest, ConcentratesNearQuadraticDropoutOptimum) {
  Study s;
  s.space = define_space();
  CounterRng rng(derive_key({10}));
  Study empty;
  empty.space = s.space;
  for (int i = 0; i < 30; ++i) {
    auto params = suggest_params(empty, rng.next_u64());
    const double d = std::get<double>(params.at("model.net.dropout_value"));
    s.trials.push_back(completed(i, params, -(d - 0.35) * (d - 0.35)));
  }
  std::vector<double> picks;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    picks.push_back(std::get<double>(suggest_params(s, seed).at("model.net.dropout_value")));
  }
  EXPECT_NEAR(median(picks), 0.35, 0.05);
}

TEST(Suggest, FavoursCategoryHoldingTheGoodSet) {
  Study s;
  s.space = define_space();
  CounterRng rng(derive_key({11}));
  Study empty;
  empty.space = s.space;
  for (int i = 0; i < 40; ++i) {
    auto params = suggest_params(empty, rng.next_u64());
    params["model.optimizer.target"] = std::string(i % 2 ? "sgd" : "adam");
    const bool adam = i % 2 == 0;
    s.trials.push_back(completed(i, params, adam ? 0.8 + 0.01 * rng.uniform() : 0.1 * rng.uniform()));
  }
  ASSERT_TRUE(std::all_of(partition(s, 0.25).good.begin(), partition(s, 0.25).good.end(), [](const Trial* t) {
    return std::get<std::string>(t->params.at("model.optimizer.target")) == "adam";
  }));
  int adam = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    adam += std::get<std::string>(suggest_params(s, seed).at("model.optimizer.target")) == "adam";
  }
  EXPECT_GT(adam, 100);
}

// ---------------------------------------------------------------------------

TEST(AskTell, StateMachineAndBestTrial) {
  Study s;
  s.space = define_space();
  EXPECT_EQ(s.trials.size(), 0u);
  try {
    best_trial(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::no_complete_trials);
  }
  const int a = ask(s, 1).id;
  EXPECT_EQ(s.trials.back().state, TrialState::pending);
  tell(s, a, 0.4);
  EXPECT_EQ(best_trial(s).id, a);
  try {
    tell(s, a, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::already_complete);
  }
  try {
    tell(s, 99, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unknown_trial);
  }
  const int b = ask(s, 1).id;
  const int c = ask(s, 1).id;
  EXPECT_NE(b, c);
  tell(s, c, 0.4);
  tell_failed(s, b, "diverged");
  EXPECT_EQ(s.find(b)->state, TrialState::failed);
  EXPECT_EQ(s.find(b)->note, "diverged");
  EXPECT_EQ(best_trial(s).id, a);  // tie goes to the lower id
  for (const auto& t : s.trials)
    for (const auto& spec : s.space.params) EXPECT_TRUE(spec.contains(t.params.at(spec.name)));
}

TEST(AskTell, ReplayedBestsAreReported) {
  Study s;
  s.space = define_space();
  ParamMap resnet = {{"model.optimizer.target", std::string("adam")}, {"model.net.dropout_value", 0.320},
                     {"data.batch_size", std::int64_t{32}},         {"model.scheduler.patience", std::int64_t{5}},
                     {"model.scheduler.factor", 0.1},               {"model.optimizer.weight_decay", 7.91e-05},
                     {"model.optimizer.lr", 0.000147}};
  ParamMap effnet = resnet;
  effnet["model.optimizer.lr"] = 0.00157;
  effnet["model.optimizer.weight_decay"] = 0.000216;
  s.trials.push_back(completed(0, effnet, 0.6633));
  s.trials.push_back(completed(1, resnet, 0.7212));
  const auto& best = best_trial(s);
  EXPECT_EQ(std::get<double>(best.params.at("model.optimizer.lr")), 0.000147);
  EXPECT_EQ(std::get<double>(best.params.at("model.optimizer.weight_decay")), 7.91e-05);
}

TEST(RunStudy, CountsFailuresAndRaisesWhenNothingCompletes) {
  int calls = 0;
  const auto s = run_study(
      [&](const Trial& t) {
        ++calls;
        if (t.id % 3 == 0) throw std::runtime_error("boom");
        return std::get<double>(t.params.at("x1"));
      },
      branin_space(), 12, 5);
  EXPECT_EQ(calls, 12);
  EXPECT_EQ(s.trials.size(), 12u);
  EXPECT_EQ(std::count_if(s.trials.begin(), s.trials.end(), [](const Trial& t) { return t.state == TrialState::failed; }), 4);
  EXPECT_EQ(s.complete().size(), 8u);
  try {
    run_study([](const Trial&) -> double { throw std::runtime_error("always"); }, branin_space(), 5, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::all_trials_failed);
  }
  EXPECT_THROW(run_study([](const Trial&) { return 0.0; }, branin_space(), 0, 1), Error);
}

TEST(RunStudy, FailedTrialsDoNotShapeDensities) {
  // Same completed history with and without failed trials interleaved at the
  // end gives the same suggestion once the trial count is matched.
  Study base;
  base.space = branin_space();
  CounterRng rng(derive_key({12}));
  for (int i = 0; i < 20; ++i) {
    base.trials.push_back(completed(i, {{"x1", rng.uniform(-5, 10)}, {"x2", rng.uniform(0, 15)}}, rng.uniform()));
  }
  Study with_failed = base;
  Trial f;
  f.id = 20;
  f.params = {{"x1", 9.9}, {"x2", 14.9}};
  f.state = TrialState::failed;
  with_failed.trials.push_back(f);
  Study with_pending = base;
  f.state = TrialState::pending;
  with_pending.trials.push_back(f);
  for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_EQ(suggest_params(with_failed, seed), suggest_params(with_pending, seed));
  const auto p = partition(with_failed, 0.25);
  EXPECT_EQ(p.good.size() + p.bad.size(), 20u);
}

TEST(Efficacy, QuadraticLearningRate) {
  SearchSpace space{{ParamSpec::log_uniform("lr", 1e-4, 1e-2)}};
  const auto cost = [](const Trial& t) {
    const double lr = std::get<double>(t.params.at("lr"));
    return (lr - 3e-3) * (lr - 3e-3);
  };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = run_study(maximize_negated(cost), space, 40, seed);
    const double lr = std::get<double>(best_trial(s).params.at("lr"));
    EXPECT_GE(lr, 1e-3) << seed;
    EXPECT_LE(lr, 9e-3) << seed;
    EXPECT_LE(*best_trial(s).objective, 0.0);
  }
}

TEST(Efficacy, BraninTpeBeatsRandomSearchMedian) {
  const auto objective = [](const Trial& t) {
    return -branin(std::get<double>(t.params.at("x1")), std::get<double>(t.params.at("x2")));
  };
  TpeOptions random_search;
  random_search.n_startup = 1000;
  std::vector<double> tpe_best, random_best;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    tpe_best.push_back(*best_trial(run_study(objective, branin_space(), 30, seed)).objective);
    random_best.push_back(*best_trial(run_study(objective, branin_space(), 30, seed, random_search)).objective);
  }
  EXPECT_GE(median(tpe_best), median(random_best));
}

TEST(Mixture, DensityIntegratesToOne) {
  TpeOptions o;
  for (const auto& obs : {std::vector<double>{}, std::vector<double>{0.1}, std::vector<double>{0.0, 0.0, 1.0, 0.5, 0.51}}) {
    const auto m = tpe::fit(obs, 0.0, 1.0, o);
    double sum = 0.0;
    constexpr int kSteps = 20000;
    for (int i = 0; i < kSteps; ++i) sum += std::exp(m.log_pdf((i + 0.5) / kSteps)) / kSteps;
    EXPECT_NEAR(sum, 1.0, 1e-3) << obs.size();
    EXPECT_EQ(m.mu.size(), obs.size() + 1);
    for (double s : m.sigma) EXPECT_GE(s, 0.01 - 1e-12);
  }
}

// ---------------------------------------------------------------------------

TEST(Store, RoundTripAndJsonLayout) {
  const auto dir = fixtures::temp_dir("store");
  const StudyStore store(dir / "study.json");
  EXPECT_FALSE(store.exists());
  Study s;
  s.space = define_space();
  for (int i = 0; i < 3; ++i) tell(s, ask(s, 2).id, 0.1 * i);
  ask(s, 2);
  tell_failed(s, ask(s, 2).id, "nan");
  store.save(s);
  EXPECT_TRUE(store.exists());
  EXPECT_EQ(store.load(), s);
  std::ifstream in(store.path());
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("space").size(), 7u);
  ASSERT_EQ(j.at("trials").size(), 5u);
  for (const char* key : {"id", "params", "objective", "state"}) EXPECT_TRUE(j.at("trials")[0].contains(key)) << key;
  EXPECT_EQ(j.at("trials")[3].at("state"), "pending");
  EXPECT_TRUE(j.at("trials")[3].at("objective").is_null());
  EXPECT_EQ(study_from_json(to_json(s)), s);
}

TEST(Store, CrashBeforeRenameKeepsPreviousStudy) {
  const auto dir = fixtures::temp_dir("crash");
  const StudyStore store(dir / "study.json");
  Study s;
  s.space = define_space();
  tell(s, ask(s, 3).id, 0.5);
  store.save(s);
  Study next = s;
  tell(next, ask(next, 3).id, 0.9);
  StudyStore::inject_crash_before_rename(true);
  EXPECT_ANY_THROW(store.save(next));
  StudyStore::inject_crash_before_rename(false);
  EXPECT_EQ(store.load(), s);
  store.save(next);
  EXPECT_EQ(store.load(), next);
}

TEST(Store, CorruptOrMissingFileIsStorageUnavailable) {
  const auto dir = fixtures::temp_dir("corrupt");
  std::ofstream(dir / "study.json") << "{\"space\": [";
  for (const auto& path : {dir / "study.json", dir / "absent.json"}) {
    try {
      StudyStore(path).load();
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::storage_unavailable);
    }
  }
}

TEST(Store, ResumeContinuesTheSameSequence) {
  const auto objective = [](const Trial& t) { return -branin(std::get<double>(t.params.at("x1")), std::get<double>(t.params.at("x2"))); };
  const auto one_go = run_study(objective, branin_space(), 14, 4);
  const auto dir = fixtures::temp_dir("resume");
  const StudyStore store(dir / "study.json");
  run_study(objective, branin_space(), 9, 4, {}, &store);
  // Simulate an interrupted trial left pending by a killed process.
  Study interrupted = store.load();
  EXPECT_EQ(interrupted.trials.size(), 9u);
  const auto resumed = run_study(objective, branin_space(), 14, 4, {}, &store);
  EXPECT_EQ(resumed.trials, one_go.trials);
  EXPECT_EQ(store.load(), resumed);

  ask(interrupted, 4);
  store.save(interrupted);
  const auto after = run_study(objective, branin_space(), 12, 4, {}, &store);
  EXPECT_EQ(after.trials[9].state, TrialState::failed);
  EXPECT_EQ(after.trials.size(), 12u);
}

}  // namespace
