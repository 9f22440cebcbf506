#pragma once

// Shared fixtures and brute-force oracles for the test binaries.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mhattnsurv/metrics.hpp"
#include "mhattnsurv/model.hpp"
#include "mhattnsurv/numerics.hpp"
#include "mhattnsurv/records.hpp"
#include "mhattnsurv/train.hpp"

namespace testing_support {

using namespace mhattnsurv;
namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = fs::temp_directory_path() /
            ("mhattnsurv_" + tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  std::string str(const std::string& name = {}) const { return (name.empty() ? path_ : path_ / name).string(); }

 private:
  fs::path path_;
};

/// Owning copy of a span, for equality assertions.
template <typename T>
std::vector<std::remove_const_t<T>> vec(std::span<T> s) {
  return {s.begin(), s.end()};
}

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline Matrix<double> random_matrix(std::size_t rows, std::size_t cols, RngStream& rng, double sd = 1.0) {
  Matrix<double> m(rows, cols);
  for (auto& v : m.values()) v = rng.normal(0.0, sd);
  return m;
}

inline EmbeddingBag<double> random_bag(std::size_t n, std::size_t d, RngStream& rng) {
  return {"bag", random_matrix(n, d, rng)};
}

/// Survival labels with times drawn from a small grid (so ties occur) and
/// roughly `censor_fraction` censored.
inline std::vector<PatientRecord> random_labels(std::size_t n, RngStream& rng, double censor_fraction = 0.3,
                                                std::size_t time_levels = 8) {
  std::vector<PatientRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].id = "p" + std::to_string(i);
    out[i].time = 1.0 + static_cast<double>(rng.uniform_index(time_levels));
    out[i].event = rng.bernoulli(censor_fraction) ? 0 : 1;
  }
  return out;
}

/// Risks drawn from a few levels so ties occur.
inline std::vector<double> random_risks(std::size_t n, RngStream& rng, std::size_t levels = 6) {
  std::vector<double> out(n);
  for (auto& r : out) r = static_cast<double>(rng.uniform_index(levels)) * 0.5 - 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// O(N^2) oracles

struct PairCounts {
  double numer = 0.0;
  double comparable = 0.0;
};

inline PairCounts brute_cindex_counts(const std::vector<double>& risk, const std::vector<double>& time,
                                      const std::vector<int>& event) {
  PairCounts c;
  for (std::size_t i = 0; i < risk.size(); ++i)
    for (std::size_t j = 0; j < risk.size(); ++j) {
      if (!(event[i] && time[i] < time[j])) continue;
      c.comparable += 1.0;
      if (risk[i] > risk[j]) c.numer += 1.0;
      else if (risk[i] == risk[j]) c.numer += 0.5;
    }
  return c;
}

inline double brute_cindex(const std::vector<double>& risk, const std::vector<double>& time,
                           const std::vector<int>& event) {
  const auto c = brute_cindex_counts(risk, time, event);
  return c.numer / c.comparable;
}

/// Censoring survival G by a direct product over distinct censoring times,
/// evaluated at t (right-continuous) or just before t.
inline double brute_censoring_survival(const std::vector<double>& time, const std::vector<int>& event, double t,
                                       bool left_limit) {
  std::vector<double> distinct;
  for (std::size_t i = 0; i < time.size(); ++i)
    if (!event[i]) distinct.push_back(time[i]);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  double g = 1.0;
  for (double u : distinct) {
    if (left_limit ? !(u < t) : !(u <= t)) break;
    double at_risk = 0.0, cens = 0.0;
    for (std::size_t i = 0; i < time.size(); ++i) {
      if (time[i] >= u) at_risk += 1.0;
      if (time[i] == u && !event[i]) cens += 1.0;
    }
    g *= 1.0 - cens / at_risk;
  }
  return g;
}

inline double brute_ipcw_auc(const std::vector<double>& risk, const std::vector<double>& time,
                             const std::vector<int>& event, double horizon) {
  double numer = 0.0, denom = 0.0;
  const double g_t = brute_censoring_survival(time, event, horizon, false);
  for (std::size_t i = 0; i < risk.size(); ++i) {
    if (!(time[i] <= horizon && event[i])) continue;
    const double wi = 1.0 / brute_censoring_survival(time, event, time[i], true);
    for (std::size_t j = 0; j < risk.size(); ++j) {
      if (!(time[j] > horizon)) continue;
      const double wj = 1.0 / g_t;
      const double s = risk[i] > risk[j] ? 1.0 : (risk[i] == risk[j] ? 0.5 : 0.0);
      numer += wi * wj * s;
      denom += wi * wj;
    }
  }
  return numer / denom;
}

/// k-group log-rank from its definition: O - E and the hypergeometric
/// covariance summed over distinct event times, chi-square from the first
/// k-1 groups via a dense solve.
inline double brute_logrank(const std::vector<SurvivalGroup>& groups) {
  const std::size_t k = groups.size();
  std::vector<double> times;
  for (const auto& g : groups)
    for (std::size_t i = 0; i < g.time.size(); ++i)
      if (g.event[i]) times.push_back(g.time[i]);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  std::vector<double> oe(k, 0.0);
  std::vector<std::vector<double>> v(k, std::vector<double>(k, 0.0));
  for (double t : times) {
    std::vector<double> n(k, 0.0), d(k, 0.0);
    for (std::size_t g = 0; g < k; ++g)
      for (std::size_t i = 0; i < groups[g].time.size(); ++i) {
        if (groups[g].time[i] >= t) n[g] += 1.0;
        if (groups[g].time[i] == t && groups[g].event[i]) d[g] += 1.0;
      }
    double N = 0.0, D = 0.0;
    for (std::size_t g = 0; g < k; ++g) {
      N += n[g];
      D += d[g];
    }
    for (std::size_t a = 0; a < k; ++a) {
      oe[a] += d[a] - D * n[a] / N;
      if (N <= 1.0) continue;
      for (std::size_t b = 0; b < k; ++b) {
        const double delta = a == b ? 1.0 : 0.0;
        v[a][b] += D * (n[a] / N) * (delta - n[b] / N) * (N - D) / (N - 1.0);
      }
    }
  }
  // Gaussian elimination on the leading (k-1) block.
  const std::size_t m = k - 1;
  std::vector<std::vector<double>> a(m, std::vector<double>(m + 1));
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < m; ++c) a[r][c] = v[r][c];
    a[r][m] = oe[r];
  }
  for (std::size_t c = 0; c < m; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < m; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    for (std::size_t r = 0; r < m; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (std::size_t q = c; q <= m; ++q) a[r][q] -= f * a[c][q];
    }
  }
  double chi = 0.0;
  for (std::size_t r = 0; r < m; ++r) chi += oe[r] * a[r][m] / a[r][r];
  return chi;
}

// ---------------------------------------------------------------------------
// End-to-end gradient harness

/// One random instance: a batch of bags, labels, a fixed feature-dropout
/// scale and model parameters.
struct GradInstance {
  std::vector<Matrix<double>> bags;
  std::vector<double> time;
  std::vector<int> event;
  std::vector<double> scale;  // empty = no feature dropout
  ModelParams<double> params;
  std::uint64_t key_seed = 0;
};

inline std::vector<double> flatten(ModelParams<double> p) {
  std::vector<double> out;
  for (const auto& a : p.arrays()) out.insert(out.end(), a.values.begin(), a.values.end());
  return out;
}

inline ModelParams<double> unflatten(const ModelParams<double>& shape, std::span<const double> x) {
  ModelParams<double> p = shape;
  std::size_t k = 0;
  for (const auto& a : p.arrays())
    for (auto& v : a.values) v = x[k++];
  return p;
}

/// Key dropout draws from a fresh copy of the same stream each call, so the
/// mask is a constant of the function.
inline std::vector<MHTrace<double>> forward_batch(const GradInstance& inst, const ModelParams<double>& p) {
  RngStream key_rng(inst.key_seed, "dropout");
  std::vector<MHTrace<double>> traces;
  for (const auto& x : inst.bags) traces.push_back(p.pool(x, &key_rng));
  return traces;
}

inline std::vector<double> batch_risks(const std::vector<MHTrace<double>>& traces, const ModelParams<double>& p,
                                       const std::vector<double>& scale) {
  std::vector<double> risks;
  for (const auto& tr : traces) {
    double r = p.fc.bias;
    for (std::size_t m = 0; m < tr.pooled.size(); ++m)
      r += p.fc.weight[m] * tr.pooled[m] * (scale.empty() ? 1.0 : scale[m]);
    risks.push_back(r);
  }
  return risks;
}

inline double end_to_end_loss(const GradInstance& inst, const ModelParams<double>& p) {
  const auto traces = forward_batch(inst, p);
  return cox_loss<double>(batch_risks(traces, p, inst.scale), inst.time, inst.event)->loss;
}

inline std::vector<double> analytic_gradient(const GradInstance& inst) {
  const auto traces = forward_batch(inst, inst.params);
  const auto loss = cox_loss<double>(batch_risks(traces, inst.params, inst.scale), inst.time, inst.event);
  auto grads = backward(inst.params, traces, std::span<const double>(loss->grad), std::span<const double>(inst.scale));
  return flatten(grads);
}

inline std::vector<double> numeric_gradient(const GradInstance& inst, double step = 1e-5) {
  return central_difference_grad(
      [&](std::span<const double> x) { return end_to_end_loss(inst, unflatten(inst.params, x)); },
      flatten(inst.params), step);
}

/// max |a - b| / max |b|, the norm-wise relative error.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return scale > 0.0 ? diff / scale : diff;
}

/// Mixed censoring with at least one event; optional key and feature dropout.
inline GradInstance make_grad_instance(std::uint64_t seed, std::size_t n, std::size_t d, std::size_t h,
                                       std::size_t batch, double key_dropout = 0.0,
                                       double feature_dropout = 0.0) {
  RngStream rng(seed, "grad-instance");
  GradInstance inst;
  for (std::size_t b = 0; b < batch; ++b) {
    inst.bags.push_back(random_matrix(n, d, rng));
    inst.time.push_back(rng.uniform(0.5, 5.0));
    inst.event.push_back(rng.bernoulli(0.6) ? 1 : 0);
  }
  inst.event[rng.uniform_index(batch)] = 1;
  inst.params = init_params<double>(d, h, rng.child("init"), key_dropout);
  // Larger than the default init so attention is far from uniform.
  for (auto& v : inst.params.query) v *= 4.0;
  inst.params.fc.bias = 0.1;
  if (feature_dropout > 0.0) {
    auto mask_rng = rng.child("mask");
    inst.scale = draw_feature_mask(d, feature_dropout, mask_rng).scale<double>();
  }
  inst.key_seed = seed;
  return inst;
}

}  // namespace testing_support
