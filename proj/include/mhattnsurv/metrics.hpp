#pragma once

// Survival metrics: Harrell's c-index, Kaplan-Meier, k-group log-rank,
// IPCW cumulative/dynamic AUC and risk tertiles.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "mhattnsurv/errors.hpp"
#include "mhattnsurv/numerics.hpp"
#include "mhattnsurv/records.hpp"

namespace mhattnsurv {

namespace detail {

inline void require_same_length(std::size_t a, std::size_t b, std::size_t c, const char* who) {
  if (a != b || a != c) throw DimensionError(std::string(who) + ": input lengths differ");
}

/// Ranks with ties collapsed: equal values share a rank in [0, distinct).
inline std::vector<std::size_t> dense_ranks(std::span<const double> values,
                                            std::size_t& distinct) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  distinct = sorted.size();
  std::vector<std::size_t> ranks(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    ranks[i] = static_cast<std::size_t>(
        std::lower_bound(sorted.begin(), sorted.end(), values[i]) - sorted.begin());
  return ranks;
}

class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i, std::int64_t v) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) tree_[i] += v;
  }
  /// Sum over [0, i).
  std::int64_t prefix(std::size_t i) const {
    std::int64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<std::int64_t> tree_;
};

}  // namespace detail

/// Integer pair counts behind the c-index. Value = (2*concordant + tied) /
/// (2*comparable).
struct ConcordanceCounts {
  std::int64_t concordant = 0;
  std::int64_t tied = 0;
  std::int64_t comparable = 0;

  double value() const {
    return static_cast<double>(2 * concordant + tied) / static_cast<double>(2 * comparable);
  }
};

/// Pair (i, j) is comparable iff t_i < t_j and event_i; concordant iff
/// risk_i > risk_j; tied risks count one half. O(N log N).
inline ConcordanceCounts concordance_counts(std::span<const double> risk,
                                            std::span<const double> time,
                                            std::span<const int> event) {
  detail::require_same_length(risk.size(), time.size(), event.size(), "c_index");
  const std::size_t n = risk.size();
  std::size_t distinct = 0;
  const auto rank = detail::dense_ranks(risk, distinct);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return time[a] > time[b];
  });

  // Sweep from the longest time down; the tree holds everyone with a
  // strictly longer time than the current group.
  detail::Fenwick tree(distinct);
  std::int64_t inserted = 0;
  ConcordanceCounts counts;
  std::size_t g = 0;
  while (g < n) {
    std::size_t end = g;
    while (end < n && time[order[end]] == time[order[g]]) ++end;
    for (std::size_t p = g; p < end; ++p) {
      const std::size_t i = order[p];
      if (!event[i]) continue;
      const std::int64_t below = tree.prefix(rank[i]);
      const std::int64_t equal = tree.prefix(rank[i] + 1) - below;
      counts.concordant += below;
      counts.tied += equal;
      counts.comparable += inserted;
    }
    for (std::size_t p = g; p < end; ++p) {
      tree.add(rank[order[p]], 1);
      ++inserted;
    }
    g = end;
  }
  return counts;
}

inline double c_index(std::span<const double> risk, std::span<const double> time,
                      std::span<const int> event) {
  const auto counts = concordance_counts(risk, time, event);
  if (counts.comparable == 0) throw DomainError("c_index: no comparable pairs");
  return counts.value();
}

inline double c_index(std::span<const double> risk, const std::vector<PatientRecord>& labels) {
  const auto t = times_of(labels);
  const auto e = events_of(labels);
  return c_index(risk, t, e);
}

// ---------------------------------------------------------------------------
// Kaplan-Meier

/// Right-continuous step function evaluated at its distinct event times.
/// S(t) = 1 before the first event time.
struct KMCurve {
  std::vector<double> time;
  std::vector<double> survival;
  std::vector<std::size_t> at_risk;
  std::vector<std::size_t> events;
  std::size_t initial_at_risk = 0;

  double at(double t) const {
    const auto it = std::upper_bound(time.begin(), time.end(), t);
    if (it == time.begin()) return 1.0;
    return survival[static_cast<std::size_t>(it - time.begin()) - 1];
  }
};

/// Product-limit estimate over distinct event times. Records censored at an
/// event time stay at risk for that time.
inline KMCurve km_estimator(std::span<const double> time, std::span<const int> event) {
  if (time.empty()) throw DomainError("km_estimator: empty input");
  if (time.size() != event.size()) throw DimensionError("km_estimator: input lengths differ");
  std::vector<std::size_t> order(time.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return time[a] < time[b];
  });
  KMCurve curve;
  curve.initial_at_risk = time.size();
  std::size_t at_risk = time.size();
  double s = 1.0;
  std::size_t g = 0;
  while (g < order.size()) {
    std::size_t end = g;
    std::size_t deaths = 0;
    while (end < order.size() && time[order[end]] == time[order[g]]) {
      deaths += event[order[end]] != 0;
      ++end;
    }
    if (deaths > 0) {
      s *= 1.0 - static_cast<double>(deaths) / static_cast<double>(at_risk);
      curve.time.push_back(time[order[g]]);
      curve.survival.push_back(s);
      curve.at_risk.push_back(at_risk);
      curve.events.push_back(deaths);
    }
    at_risk -= end - g;
    g = end;
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Log-rank

struct SurvivalGroup {
  std::vector<double> time;
  std::vector<int> event;
};

struct LogRankResult {
  double chi_square = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

/// Upper tail of the chi-square distribution.
inline double chi_square_sf(double x, std::size_t dof) {
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * static_cast<double>(dof), 0.5 * x);
}

/// k-group log-rank test with hypergeometric covariance. The statistic uses
/// the first k-1 groups; singular directions of the covariance are dropped.
inline LogRankResult logrank(const std::vector<SurvivalGroup>& groups) {
  const std::size_t k = groups.size();
  if (k < 2) throw DomainError("logrank: at least two groups are required");
  struct Obs {
    double time;
    int event;
    std::size_t group;
  };
  std::vector<Obs> all;
  for (std::size_t g = 0; g < k; ++g) {
    if (groups[g].time.empty()) throw DomainError("logrank: group " + std::to_string(g) + " is empty");
    if (groups[g].time.size() != groups[g].event.size())
      throw DimensionError("logrank: group " + std::to_string(g) + " lengths differ");
    for (std::size_t i = 0; i < groups[g].time.size(); ++i)
      all.push_back({groups[g].time[i], groups[g].event[i], g});
  }
  std::sort(all.begin(), all.end(), [](const Obs& a, const Obs& b) { return a.time < b.time; });

  std::vector<double> at_risk(k, 0.0);
  for (const auto& o : all) at_risk[o.group] += 1.0;
  std::vector<double> observed_minus_expected(k, 0.0);
  DenseMatrix cov(k, k);
  std::size_t total_events = 0;

  std::size_t g = 0;
  while (g < all.size()) {
    std::size_t end = g;
    std::vector<double> deaths(k, 0.0);
    std::vector<double> leaving(k, 0.0);
    while (end < all.size() && all[end].time == all[g].time) {
      deaths[all[end].group] += all[end].event;
      leaving[all[end].group] += 1.0;
      ++end;
    }
    const double d = std::accumulate(deaths.begin(), deaths.end(), 0.0);
    const double n = std::accumulate(at_risk.begin(), at_risk.end(), 0.0);
    if (d > 0.0) {
      total_events += static_cast<std::size_t>(d);
      for (std::size_t a = 0; a < k; ++a) observed_minus_expected[a] += deaths[a] - d * at_risk[a] / n;
      if (n > 1.0) {
        const double factor = d * (n - d) / (n - 1.0);
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b = 0; b < k; ++b)
            cov(a, b) += factor * (at_risk[a] / n) * ((a == b ? 1.0 : 0.0) - at_risk[b] / n);
      }
    }
    for (std::size_t a = 0; a < k; ++a) at_risk[a] -= leaving[a];
    g = end;
  }
  if (total_events == 0) throw DomainError("logrank: no events");

  DenseMatrix reduced(k - 1, k - 1);
  std::vector<double> diff(k - 1);
  for (std::size_t a = 0; a + 1 < k; ++a) {
    diff[a] = observed_minus_expected[a];
    for (std::size_t b = 0; b + 1 < k; ++b) reduced(a, b) = cov(a, b);
  }
  const auto solved = solve_psd(reduced, diff, 1e-10);
  LogRankResult out;
  out.chi_square = std::max(0.0, dot<double>(diff, solved));
  out.dof = k - 1;
  out.p_value = chi_square_sf(out.chi_square, out.dof);
  return out;
}

// ---------------------------------------------------------------------------
// IPCW time-dependent AUC

/// Cumulative/dynamic AUC at horizon t. Cases: t_i <= t with an event,
/// weighted 1/G(t_i-). Controls: t_j > t, weighted 1/G(t). G is the
/// Kaplan-Meier estimate of the censoring distribution.
inline double ipcw_auc(std::span<const double> risk, std::span<const double> time,
                       std::span<const int> event, double horizon) {
  detail::require_same_length(risk.size(), time.size(), event.size(), "ipcw_auc");
  std::vector<int> censored(event.size());
  for (std::size_t i = 0; i < event.size(); ++i) censored[i] = event[i] ? 0 : 1;
  const KMCurve censoring = km_estimator(time, censored);
  auto left_limit = [&](double t) {
    const auto it = std::lower_bound(censoring.time.begin(), censoring.time.end(), t);
    if (it == censoring.time.begin()) return 1.0;
    return censoring.survival[static_cast<std::size_t>(it - censoring.time.begin()) - 1];
  };

  std::vector<double> control_risk;
  for (std::size_t j = 0; j < time.size(); ++j)
    if (time[j] > horizon) control_risk.push_back(risk[j]);
  if (control_risk.empty()) throw DomainError("ipcw_auc: no controls at horizon");
  const double g_horizon = censoring.at(horizon);
  if (!(g_horizon > 0.0)) throw NumericError("ipcw_auc: censoring survival is zero at horizon");
  std::sort(control_risk.begin(), control_risk.end());

  // Controls share one weight, so it cancels from the ratio.
  double numer = 0.0;
  double case_weight = 0.0;
  bool any_case = false;
  for (std::size_t i = 0; i < time.size(); ++i) {
    if (!(time[i] <= horizon && event[i])) continue;
    any_case = true;
    const double g = left_limit(time[i]);
    if (!(g > 0.0)) throw NumericError("ipcw_auc: censoring survival is zero before a case");
    const double w = 1.0 / g;
    const auto lo = std::lower_bound(control_risk.begin(), control_risk.end(), risk[i]);
    const auto hi = std::upper_bound(lo, control_risk.end(), risk[i]);
    const double below = static_cast<double>(lo - control_risk.begin());
    const double ties = static_cast<double>(hi - lo);
    numer += w * (below + 0.5 * ties);
    case_weight += w;
  }
  if (!any_case) throw DomainError("ipcw_auc: no cases at horizon");
  return numer / (case_weight * static_cast<double>(control_risk.size()));
}

// ---------------------------------------------------------------------------
// Tertiles

enum class RiskGroup { low = 0, medium = 1, high = 2 };

inline const char* to_string(RiskGroup g) {
  switch (g) {
    case RiskGroup::low: return "low";
    case RiskGroup::medium: return "medium";
    case RiskGroup::high: return "high";
  }
  return "?";
}

struct TertileThresholds {
  double lower = 0.0;
  double upper = 0.0;
};

/// Nearest-rank cut points at 1/3 and 2/3 of the sorted scores.
inline TertileThresholds tertile_thresholds(std::span<const double> risk) {
  const std::size_t n = risk.size();
  if (n < 3) throw DomainError("tertile_groups: at least three patients are required");
  std::vector<double> sorted(risk.begin(), risk.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t rank_lower = (n + 2) / 3;      // ceil(n/3)
  const std::size_t rank_upper = (2 * n + 2) / 3;  // ceil(2n/3)
  return {sorted[rank_lower - 1], sorted[rank_upper - 1]};
}

/// Scores at or below a threshold fall in the lower group.
inline std::vector<RiskGroup> tertile_groups(std::span<const double> risk) {
  const auto cut = tertile_thresholds(risk);
  std::vector<RiskGroup> out;
  out.reserve(risk.size());
  for (double r : risk) {
    if (r <= cut.lower) out.push_back(RiskGroup::low);
    else if (r <= cut.upper) out.push_back(RiskGroup::medium);
    else out.push_back(RiskGroup::high);
  }
  return out;
}

/// Pearson correlation; NaN when either input has zero variance.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("pearson: length mismatch");
  if (a.size() < 2) return std::nan("");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace mhattnsurv
