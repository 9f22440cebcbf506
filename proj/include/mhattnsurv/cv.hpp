#pragma once

// Stratified splitting, nested cross-validation with a dropout-rate grid,
// inner-fold prediction averaging and the head-count ablation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhattnsurv/data.hpp"
#include "mhattnsurv/dataset.hpp"
#include "mhattnsurv/errors.hpp"
#include "mhattnsurv/metrics.hpp"
#include "mhattnsurv/numerics.hpp"
#include "mhattnsurv/train.hpp"

namespace mhattnsurv {

using Fold = std::vector<std::size_t>;

/// Round-robin assignment after a seeded shuffle of each stratum. Events
/// are dealt first and non-events continue from the next fold, so totals
/// also differ by at most one.
inline std::vector<Fold> stratified_kfold(const std::vector<PatientRecord>& labels, std::size_t k,
                                          RngStream rng) {
  if (k < 2) throw DomainError("stratified_kfold: k must be >= 2");
  if (k > labels.size())
    throw DomainError("stratified_kfold: k=" + std::to_string(k) + " exceeds " +
                      std::to_string(labels.size()) + " patients");
  Fold events, censored;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i].event ? events : censored).push_back(i);
  auto event_rng = rng.child("events");
  auto censored_rng = rng.child("censored");
  event_rng.shuffle(events.begin(), events.end());
  censored_rng.shuffle(censored.begin(), censored.end());
  std::vector<Fold> folds(k);
  std::size_t next = 0;
  for (auto i : events) folds[next++ % k].push_back(i);
  for (auto i : censored) folds[next++ % k].push_back(i);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

struct OuterFold {
  Fold test;                 // indices into the dataset
  std::vector<Fold> inner;   // partition of the outer-train set
  Fold train() const {
    Fold out;
    for (const auto& f : inner) out.insert(out.end(), f.begin(), f.end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

struct FoldPlan {
  std::uint64_t seed = 0;
  std::vector<std::string> ids;  // dataset order the indices refer to
  std::vector<OuterFold> outer;
};

namespace detail {

inline void check_stratified(const std::vector<PatientRecord>& labels, const std::vector<Fold>& folds,
                             const std::string& where) {
  std::size_t total = 0, total_events = 0;
  for (const auto& f : folds) {
    total += f.size();
    for (auto i : f) total_events += labels[i].event != 0;
  }
  const double global = static_cast<double>(total_events) / static_cast<double>(total);
  for (std::size_t k = 0; k < folds.size(); ++k) {
    const auto& f = folds[k];
    if (f.empty()) throw UsageError(where + ": fold " + std::to_string(k) + " is empty");
    std::size_t e = 0;
    for (auto i : f) e += labels[i].event != 0;
    const double n = static_cast<double>(f.size());
    if (std::abs(static_cast<double>(e) / n - global) > 1.0 / n + 1e-12)
      throw UsageError(where + ": fold " + std::to_string(k) + " is not stratified");
  }
}

inline void check_partition(const std::vector<Fold>& folds, const Fold& universe, const std::string& where) {
  std::vector<std::size_t> all;
  for (const auto& f : folds) all.insert(all.end(), f.begin(), f.end());
  std::sort(all.begin(), all.end());
  if (std::adjacent_find(all.begin(), all.end()) != all.end())
    throw UsageError(where + ": folds overlap");
  if (all != universe) throw UsageError(where + ": folds do not cover the split");
}

}  // namespace detail

/// Throws UsageError naming the violated invariant.
inline void check_fold_plan(const FoldPlan& plan, const std::vector<PatientRecord>& labels) {
  if (plan.ids.size() != labels.size()) throw UsageError("fold plan: patient count mismatch");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (plan.ids[i] != labels[i].id) throw UsageError("fold plan: patient order mismatch at " + labels[i].id);
  Fold everyone(labels.size());
  std::iota(everyone.begin(), everyone.end(), 0);
  std::vector<Fold> tests;
  for (const auto& o : plan.outer) tests.push_back(o.test);
  detail::check_partition(tests, everyone, "outer folds");
  detail::check_stratified(labels, tests, "outer folds");
  for (std::size_t k = 0; k < plan.outer.size(); ++k) {
    const auto& o = plan.outer[k];
    const auto train = o.train();
    Fold expected;
    std::set_difference(everyone.begin(), everyone.end(), o.test.begin(), o.test.end(),
                        std::back_inserter(expected));
    const std::string where = "outer fold " + std::to_string(k) + " inner folds";
    detail::check_partition(o.inner, expected, where);
    detail::check_stratified(labels, o.inner, where);
    // no index on both sides of the outer split
    Fold both;
    std::set_intersection(train.begin(), train.end(), o.test.begin(), o.test.end(), std::back_inserter(both));
    if (!both.empty()) throw UsageError("outer fold " + std::to_string(k) + ": train/test overlap");
  }
}

inline FoldPlan make_fold_plan(const std::vector<PatientRecord>& labels, std::uint64_t seed,
                               std::size_t k_outer = 5, std::size_t k_inner = 4) {
  const RngStream split(seed, "split");
  FoldPlan plan;
  plan.seed = seed;
  for (const auto& r : labels) plan.ids.push_back(r.id);
  const auto tests = stratified_kfold(labels, k_outer, split.child("outer"));
  for (std::size_t o = 0; o < tests.size(); ++o) {
    OuterFold fold;
    fold.test = tests[o];
    Fold train;
    std::set<std::size_t> test_set(fold.test.begin(), fold.test.end());
    std::vector<PatientRecord> train_labels;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (!test_set.count(i)) {
        train.push_back(i);
        train_labels.push_back(labels[i]);
      }
    for (const auto& f : stratified_kfold(train_labels, k_inner, split.child("inner", o))) {
      Fold mapped;
      for (auto j : f) mapped.push_back(train[j]);
      fold.inner.push_back(std::move(mapped));
    }
    plan.outer.push_back(std::move(fold));
  }
  check_fold_plan(plan, labels);
  return plan;
}

inline nlohmann::json to_json(const FoldPlan& plan) {
  auto ids = [&](const Fold& f) {
    std::vector<std::string> out;
    for (auto i : f) out.push_back(plan.ids[i]);
    return out;
  };
  nlohmann::json j;
  j["seed"] = plan.seed;
  j["patients"] = plan.ids;
  auto& outer = j["outer"] = nlohmann::json::array();
  for (const auto& o : plan.outer) {
    nlohmann::json fold;
    fold["test"] = ids(o.test);
    fold["inner"] = nlohmann::json::array();
    for (const auto& f : o.inner) fold["inner"].push_back(ids(f));
    outer.push_back(std::move(fold));
  }
  return j;
}

inline FoldPlan fold_plan_from_json(const nlohmann::json& j, const std::vector<PatientRecord>& labels) {
  FoldPlan plan;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    plan.ids.push_back(labels[i].id);
    index[labels[i].id] = i;
  }
  auto fold = [&](const nlohmann::json& arr) {
    Fold f;
    for (const auto& id : arr) {
      const auto it = index.find(id.get<std::string>());
      if (it == index.end()) throw ConfigError("fold plan: unknown patient '" + id.get<std::string>() + "'");
      f.push_back(it->second);
    }
    std::sort(f.begin(), f.end());
    return f;
  };
  try {
    plan.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& o : j.at("outer")) {
      OuterFold of;
      of.test = fold(o.at("test"));
      for (const auto& f : o.at("inner")) of.inner.push_back(fold(f));
      plan.outer.push_back(std::move(of));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("fold plan: ") + ex.what());
  }
  check_fold_plan(plan, labels);
  return plan;
}

// ---------------------------------------------------------------------------
// Prediction averaging

struct RiskPrediction {
  std::string id;
  double risk = 0.0;
};

using PredictionSet = std::vector<RiskPrediction>;

/// Per-patient arithmetic mean of raw risks; every set must cover the same
/// patients in the same order.
inline PredictionSet aggregate_predictions(const std::vector<PredictionSet>& sets) {
  if (sets.empty()) throw DomainError("aggregate_predictions: no prediction sets");
  PredictionSet out = sets.front();
  for (std::size_t s = 1; s < sets.size(); ++s) {
    if (sets[s].size() != out.size()) throw DomainError("aggregate_predictions: patient-set mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (sets[s][i].id != out[i].id)
        throw DomainError("aggregate_predictions: patient-set mismatch at '" + sets[s][i].id + "'");
      out[i].risk += sets[s][i].risk;
    }
  }
  for (auto& p : out) p.risk /= static_cast<double>(sets.size());
  return out;
}

// ---------------------------------------------------------------------------
// Nested CV

struct GridSpec {
  std::vector<double> dropout_rates{0.0, 0.2, 0.5, 0.8, 0.95};
  std::vector<std::size_t> head_counts{1, 4, 8, 16, 32};

  void validate() const {
    if (dropout_rates.empty()) throw ConfigError("grid: dropout_rates must be non-empty");
    for (double r : dropout_rates)
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("grid: dropout rate " + format_real(r) + " outside [0, 1)");
    if (head_counts.empty()) throw ConfigError("grid: head_counts must be non-empty");
    for (auto h : head_counts)
      if (h < 1) throw ConfigError("grid: head counts must be >= 1");
  }
};

struct InnerRun {
  std::size_t inner = 0;
  double val_cindex = std::nan("");
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
};

struct OuterResult {
  std::size_t fold = 0;
  std::map<double, std::vector<InnerRun>> inner_runs;  // by dropout rate
  double selected_rate = 0.0;
  PredictionSet test_predictions;
  double test_cindex = std::nan("");
};

struct CVReport {
  std::string model;
  std::size_t heads = 0;
  std::uint64_t seed = 0;
  FoldPlan plan;
  std::vector<OuterResult> outer;
  double mean_cindex = std::nan("");
};

/// Mean inner-validation c-index; NaN entries are ignored.
inline double mean_val_cindex(const std::vector<InnerRun>& runs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : runs)
    if (std::isfinite(r.val_cindex)) {
      sum += r.val_cindex;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::nan("");
}

/// Inner models of outer fold `o` use a seed derived from (seed, o, inner)
/// so every grid rate starts from the same initialization.
inline std::uint64_t inner_seed(std::uint64_t seed, std::size_t outer, std::size_t inner) {
  return RngStream(seed, "init").child("inner-model", outer * 1000 + inner).next_u64();
}

namespace detail {

/// Runs `jobs` on up to `threads` workers; results land in job order.
template <typename F>
void parallel_for(std::size_t jobs, std::size_t threads, F&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, jobs));
  if (threads == 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < jobs;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

inline CVReport nested_cv(const Dataset& data, const GridSpec& grid, const TrainConfig& config,
                          ModelKind kind, const FoldPlan& plan, std::size_t threads = 1) {
  grid.validate();
  config.validate();
  data.validate();
  check_fold_plan(plan, data.patients);
  for (std::size_t o = 0; o < plan.outer.size(); ++o) {
    if (count_events(data.subset(plan.outer[o].test).patients) == 0)
      throw ConfigError("outer fold " + std::to_string(o) + " has zero events");
    for (std::size_t k = 0; k < plan.outer[o].inner.size(); ++k)
      if (count_events(data.subset(plan.outer[o].inner[k]).patients) == 0)
        throw ConfigError("outer fold " + std::to_string(o) + " inner fold " + std::to_string(k) +
                          " has zero events");
  }

  CVReport report;
  report.model = to_string(kind);
  report.heads = kind == ModelKind::mhattn ? config.heads : 0;
  report.seed = config.seed;
  report.plan = plan;

  const auto& rates = grid.dropout_rates;
  for (std::size_t o = 0; o < plan.outer.size(); ++o) {
    const auto& outer = plan.outer[o];
    const std::size_t k_inner = outer.inner.size();
    const std::size_t jobs = rates.size() * k_inner;
    std::vector<AnyTrainResult> models(jobs);
    detail::parallel_for(jobs, threads, [&](std::size_t job) {
      const std::size_t r = job / k_inner, k = job % k_inner;
      Fold train;
      for (std::size_t j = 0; j < k_inner; ++j)
        if (j != k) train.insert(train.end(), outer.inner[j].begin(), outer.inner[j].end());
      std::sort(train.begin(), train.end());
      TrainConfig cfg = config;
      cfg.feature_dropout_rate = rates[r];
      cfg.seed = inner_seed(config.seed, o, k);
      models[job] = train_kind(kind, data.subset(train), data.subset(outer.inner[k]), cfg);
    });

    OuterResult result;
    result.fold = o;
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_r = 0;
    for (std::size_t r = 0; r < rates.size(); ++r) {
      auto& runs = result.inner_runs[rates[r]];
      for (std::size_t k = 0; k < k_inner; ++k) {
        const auto& m = models[r * k_inner + k];
        runs.push_back({k, m.best_val_cindex, m.best_epoch, m.steps});
      }
      const double mean = mean_val_cindex(runs);
      if (std::isfinite(mean) && mean > best) {
        best = mean;
        best_r = r;
      }
    }
    result.selected_rate = rates[best_r];

    const Dataset test = data.subset(outer.test);
    std::vector<PredictionSet> sets(k_inner);
    detail::parallel_for(k_inner, threads, [&](std::size_t k) {
      const auto risks = predict_sampled(models[best_r * k_inner + k].best, test, config.test_patches,
                                         config.seed, "test");
      for (std::size_t i = 0; i < test.size(); ++i) sets[k].push_back({test.patients[i].id, risks[i]});
    });
    result.test_predictions = aggregate_predictions(sets);
    std::vector<double> risks;
    for (const auto& p : result.test_predictions) risks.push_back(p.risk);
    const auto counts = concordance_counts(risks, times_of(test.patients), events_of(test.patients));
    if (counts.comparable > 0) result.test_cindex = counts.value();
    report.outer.push_back(std::move(result));
  }

  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : report.outer)
    if (std::isfinite(r.test_cindex)) {
      sum += r.test_cindex;
      ++n;
    }
  if (n) report.mean_cindex = sum / static_cast<double>(n);
  return report;
}

/// Outer-test predictions of every patient, in dataset order.
inline PredictionSet all_test_predictions(const CVReport& report) {
  std::map<std::string, double> by_id;
  for (const auto& o : report.outer)
    for (const auto& p : o.test_predictions)
      if (!by_id.emplace(p.id, p.risk).second)
        throw UsageError("cv report: patient " + p.id + " predicted twice");
  PredictionSet out;
  for (const auto& id : report.plan.ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw UsageError("cv report: patient " + id + " has no test prediction");
    out.push_back({id, it->second});
  }
  return out;
}

inline nlohmann::json to_json(const CVReport& report) {
  nlohmann::json j;
  j["model"] = report.model;
  j["heads"] = report.heads;
  j["seed"] = report.seed;
  j["mean_cindex"] = report.mean_cindex;
  j["outer"] = nlohmann::json::array();
  for (const auto& o : report.outer) {
    nlohmann::json fold;
    fold["fold"] = o.fold;
    fold["selected_dropout_rate"] = o.selected_rate;
    fold["test_cindex"] = o.test_cindex;
    fold["grid"] = nlohmann::json::array();
    for (const auto& [rate, runs] : o.inner_runs) {
      nlohmann::json g;
      g["dropout_rate"] = rate;
      g["mean_val_cindex"] = mean_val_cindex(runs);
      g["inner"] = nlohmann::json::array();
      for (const auto& r : runs)
        g["inner"].push_back({{"inner", r.inner}, {"val_cindex", r.val_cindex},
                              {"best_epoch", r.best_epoch}, {"steps", r.steps}});
      fold["grid"].push_back(std::move(g));
    }
    fold["test_predictions"] = nlohmann::json::array();
    for (const auto& p : o.test_predictions)
      fold["test_predictions"].push_back({{"id", p.id}, {"risk", p.risk}});
    j["outer"].push_back(std::move(fold));
  }
  j["fold_plan"] = to_json(report.plan);
  return j;
}

/// One row per outer fold plus a mean row.
inline void write_cv_folds_csv(const CVReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PathError("cannot open '" + path + "' for writing");
  out << "model,heads,fold,selected_dropout_rate,test_cindex\n";
  for (const auto& o : report.outer)
    out << report.model << ',' << report.heads << ',' << o.fold << ',' << format_real(o.selected_rate) << ','
        << format_real(o.test_cindex) << '\n';
  out << report.model << ',' << report.heads << ",mean,," << format_real(report.mean_cindex) << '\n';
}

inline void write_predictions_csv(const CVReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PathError("cannot open '" + path + "' for writing");
  std::map<std::string, std::size_t> fold_of;
  for (const auto& o : report.outer)
    for (const auto& p : o.test_predictions) fold_of[p.id] = o.fold;
  out << "id,fold,risk\n";
  for (const auto& p : all_test_predictions(report))
    out << p.id << ',' << fold_of[p.id] << ',' << format_real(p.risk) << '\n';
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::size_t heads = 0;
  double mean_cindex = std::nan("");
  std::vector<double> fold_cindex;
};

/// nested_cv per head count on one shared fold plan.
inline std::vector<AblationRow> ablation_runner(const Dataset& data, const GridSpec& grid,
                                                const TrainConfig& config, const FoldPlan& plan,
                                                std::size_t threads = 1,
                                                std::vector<CVReport>* reports = nullptr) {
  grid.validate();
  for (auto h : grid.head_counts)
    if (data.dim % h != 0)
      throw ConfigError("head count " + std::to_string(h) + " does not divide d=" + std::to_string(data.dim));
  std::vector<AblationRow> rows;
  for (auto h : grid.head_counts) {
    TrainConfig cfg = config;
    cfg.heads = h;
    auto report = nested_cv(data, grid, cfg, ModelKind::mhattn, plan, threads);
    AblationRow row{h, report.mean_cindex, {}};
    for (const auto& o : report.outer) row.fold_cindex.push_back(o.test_cindex);
    rows.push_back(std::move(row));
    if (reports) reports->push_back(std::move(report));
  }
  return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PathError("cannot open '" + path + "' for writing");
  std::size_t folds = 0;
  for (const auto& r : rows) folds = std::max(folds, r.fold_cindex.size());
  out << "heads";
  for (std::size_t f = 0; f < folds; ++f) out << ",fold" << f;
  out << ",mean_cindex\n";
  for (const auto& r : rows) {
    out << r.heads;
    for (std::size_t f = 0; f < folds; ++f)
      out << ',' << (f < r.fold_cindex.size() ? format_real(r.fold_cindex[f]) : "");
    out << ',' << format_real(r.mean_cindex) << '\n';
  }
}

}  // namespace mhattnsurv
