#pragma once

// Evaluation reports (c-index, annual IPCW AUC, tertile Kaplan-Meier curves,
// log-rank) and head-level analysis of trained multi-head models.

#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhattnsurv/data.hpp"
#include "mhattnsurv/dataset.hpp"
#include "mhattnsurv/metrics.hpp"
#include "mhattnsurv/model.hpp"
#include "mhattnsurv/train.hpp"

namespace mhattnsurv {

inline nlohmann::json json_real(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
inline std::string csv_real(double v) { return std::isfinite(v) ? format_real(v) : "NA"; }

// ---------------------------------------------------------------------------
// Head-wise c-index

struct HeadwiseCIndex {
  std::vector<double> per_head;
  double all_heads = std::nan("");
};

/// Each head's risk keeps only that head's chunk of S (plus the bias). All
/// heads share one trace per patient from the seeded evaluation sample.
template <std::floating_point T>
HeadwiseCIndex headwise_cindex(const ModelParams<T>& model, const Dataset& data, std::size_t n_patches,
                               std::uint64_t seed, std::string_view label = "test") {
  const std::size_t h = model.heads, hd = model.head_dim();
  std::vector<std::vector<double>> head_risk(h);
  std::vector<double> all;
  const RngStream base(seed, "sample");
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto rng = base.child(label).child(data.patients[i].id);
    const auto rows = sample_patches(data.bags[i].n(), n_patches, rng);
    const auto tr = model.pool(gather_rows<T>(data.bags[i].features, rows));
    double total = static_cast<double>(model.fc.bias);
    for (std::size_t c = 0; c < h; ++c) {
      double r = static_cast<double>(model.fc.bias);
      for (std::size_t m = c * hd; m < (c + 1) * hd; ++m) {
        r += static_cast<double>(model.fc.weight[m] * tr.pooled[m]);
        total += static_cast<double>(model.fc.weight[m] * tr.pooled[m]);
      }
      head_risk[c].push_back(r);
    }
    all.push_back(total);
  }
  HeadwiseCIndex out;
  for (const auto& r : head_risk) out.per_head.push_back(c_index(r, data.patients));
  out.all_heads = c_index(all, data.patients);
  return out;
}

// ---------------------------------------------------------------------------
// Head correlations

struct HeadCorrelations {
  DenseMatrix attention;  // h x h, NaN marks an undefined correlation
  DenseMatrix patch_risk;
  std::size_t patches = 0;
};

namespace detail {

inline DenseMatrix correlation_matrix(const std::vector<std::vector<double>>& series) {
  const std::size_t h = series.size();
  DenseMatrix out(h, h);
  for (std::size_t a = 0; a < h; ++a)
    for (std::size_t b = 0; b < h; ++b) {
      const double r = pearson(series[a], series[b]);
      out(a, b) = (a == b && std::isfinite(r)) ? 1.0 : r;
    }
  return out;
}

}  // namespace detail

/// Per patch and head: the attention logit Q_c . K_c (a patch's logit does
/// not depend on which group it is sampled into, so averaging over passes
/// leaves it unchanged) and the patch risk fc_w_c . x_c without bias.
/// Correlations pool every patch of every bag.
template <std::floating_point T>
HeadCorrelations head_correlations(const ModelParams<T>& model, const Dataset& data) {
  const std::size_t h = model.heads, hd = model.head_dim();
  std::vector<std::vector<double>> logits(h), risks(h);
  std::size_t total = 0;
  for (const auto& bag : data.bags) {
    const auto x = bag.features.template cast<T>();
    const auto keys = relu(matmul(x, model.key_weight));
    for (std::size_t j = 0; j < x.rows(); ++j) {
      for (std::size_t c = 0; c < h; ++c) {
        double logit = 0.0, risk = 0.0;
        for (std::size_t m = c * hd; m < (c + 1) * hd; ++m) {
          logit += static_cast<double>(model.query[m] * keys(j, m));
          risk += static_cast<double>(model.fc.weight[m] * x(j, m));
        }
        logits[c].push_back(logit);
        risks[c].push_back(risk);
      }
      ++total;
    }
  }
  if (total < 2) throw DomainError("head_correlations: at least two patches are required");
  return {detail::correlation_matrix(logits), detail::correlation_matrix(risks), total};
}

inline void write_matrix_csv(const DenseMatrix& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PathError("cannot open '" + path + "' for writing");
  out << "head";
  for (std::size_t c = 0; c < m.cols(); ++c) out << ",H" << c + 1;
  out << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out << 'H' << r + 1;
    for (std::size_t c = 0; c < m.cols(); ++c) out << ',' << csv_real(m(r, c));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Survival report

struct TimedValue {
  double time = 0.0;
  double value = std::nan("");
  std::string note;  // why the value is missing, if it is
};

struct EvalReport {
  std::size_t patients = 0;
  std::size_t events = 0;
  double cindex = std::nan("");
  std::vector<TimedValue> auc;
  std::vector<RiskGroup> groups;
  std::vector<KMCurve> km;  // low, medium, high
  std::optional<LogRankResult> logrank_result;
  std::string logrank_note;
};

/// AUC at each horizon, KM per risk tertile and the log-rank test across
/// non-empty tertiles. Metrics that are undefined on the data are reported
/// as missing with a note.
inline EvalReport evaluate_predictions(std::span<const double> risk, const std::vector<PatientRecord>& labels,
                                       const std::vector<double>& horizons = {1, 2, 3, 4, 5}) {
  if (risk.size() != labels.size()) throw DimensionError("evaluate: predictions and labels differ in length");
  EvalReport rep;
  rep.patients = labels.size();
  rep.events = count_events(labels);
  const auto time = times_of(labels);
  const auto event = events_of(labels);
  const auto counts = concordance_counts(risk, time, event);
  if (counts.comparable > 0) rep.cindex = counts.value();
  for (double t : horizons) {
    TimedValue v{t, std::nan(""), {}};
    try {
      v.value = ipcw_auc(risk, time, event, t);
    } catch (const std::exception& ex) {
      v.note = ex.what();
    }
    rep.auc.push_back(v);
  }
  if (labels.size() >= 3) {
    rep.groups = tertile_groups(risk);
    std::vector<SurvivalGroup> g(3);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto& grp = g[static_cast<std::size_t>(rep.groups[i])];
      grp.time.push_back(time[i]);
      grp.event.push_back(event[i]);
    }
    std::vector<SurvivalGroup> nonempty;
    for (const auto& grp : g) {
      rep.km.push_back(grp.time.empty() ? KMCurve{} : km_estimator(grp.time, grp.event));
      if (!grp.time.empty()) nonempty.push_back(grp);
    }
    try {
      rep.logrank_result = logrank(nonempty);
    } catch (const std::exception& ex) {
      rep.logrank_note = ex.what();
    }
  } else {
    rep.logrank_note = "fewer than three patients";
  }
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["patients"] = r.patients;
  j["events"] = r.events;
  j["cindex"] = json_real(r.cindex);
  j["ipcw_auc"] = nlohmann::json::array();
  for (const auto& a : r.auc) {
    nlohmann::json e{{"time", a.time}, {"auc", json_real(a.value)}};
    if (!a.note.empty()) e["note"] = a.note;
    j["ipcw_auc"].push_back(std::move(e));
  }
  std::size_t sizes[3] = {0, 0, 0};
  for (auto g : r.groups) ++sizes[static_cast<std::size_t>(g)];
  j["tertile_sizes"] = {{"low", sizes[0]}, {"medium", sizes[1]}, {"high", sizes[2]}};
  if (r.logrank_result)
    j["logrank"] = {{"chi_square", r.logrank_result->chi_square},
                    {"dof", r.logrank_result->dof},
                    {"p_value", r.logrank_result->p_value}};
  else
    j["logrank"] = {{"note", r.logrank_note}};
  return j;
}

/// metrics.csv, metrics.json, km_<group>.csv under `dir`.
inline void write_eval_report(const EvalReport& r, const std::string& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "metrics.csv");
    out << "metric,time,value\n";
    out << "cindex,," << csv_real(r.cindex) << '\n';
    for (const auto& a : r.auc) out << "ipcw_auc," << format_real(a.time) << ',' << csv_real(a.value) << '\n';
    if (r.logrank_result) {
      out << "logrank_chi_square,," << format_real(r.logrank_result->chi_square) << '\n';
      out << "logrank_dof,," << r.logrank_result->dof << '\n';
      out << "logrank_p_value,," << format_real(r.logrank_result->p_value) << '\n';
    }
  }
  {
    std::ofstream out(fs::path(dir) / "metrics.json");
    out << to_json(r).dump(2) << '\n';
  }
  for (std::size_t g = 0; g < r.km.size(); ++g) {
    std::ofstream out(fs::path(dir) / ("km_" + std::string(to_string(static_cast<RiskGroup>(g))) + ".csv"));
    out << "time,survival,at_risk\n";
    const auto& k = r.km[g];
    out << "0,1," << k.initial_at_risk << '\n';
    for (std::size_t i = 0; i < k.time.size(); ++i)
      out << format_real(k.time[i]) << ',' << format_real(k.survival[i]) << ',' << k.at_risk[i] << '\n';
  }
}

}  // namespace mhattnsurv
