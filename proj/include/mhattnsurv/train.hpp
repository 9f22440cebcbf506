#pragma once

// Cox partial-likelihood training: loss, batch-shared feature dropout,
// Adam, cosine restarts, patch sampling and the epoch loop with early
// stopping on validation c-index.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mhattnsurv/dataset.hpp"
#include "mhattnsurv/errors.hpp"
#include "mhattnsurv/metrics.hpp"
#include "mhattnsurv/model.hpp"
#include "mhattnsurv/numerics.hpp"

namespace mhattnsurv {

enum class ModelKind { mhattn, avgpool, gated, cluster };
enum class Precision { f64, f32 };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::mhattn: return "mhattn";
    case ModelKind::avgpool: return "avgpool";
    case ModelKind::gated: return "gated";
    case ModelKind::cluster: return "cluster";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "mhattn") return ModelKind::mhattn;
  if (s == "avgpool") return ModelKind::avgpool;
  if (s == "gated") return ModelKind::gated;
  if (s == "cluster") return ModelKind::cluster;
  throw ConfigError("unknown model kind '" + s + "' (expected mhattn|avgpool|gated|cluster)");
}

struct TrainConfig {
  std::size_t patches_per_patient = 32;
  std::size_t patients_per_batch = 64;
  double base_lr = 6e-5;
  std::size_t schedule_period = 4000;
  std::size_t max_epochs = 50000;
  std::size_t eval_every = 100;
  std::size_t val_patches = 100;
  std::size_t test_patches = 1000;
  double feature_dropout_rate = 0.0;
  double key_dropout_rate = 0.0;
  std::size_t heads = 8;
  std::size_t gated_hidden = 64;
  std::size_t clusters = 8;
  std::uint64_t seed = 0;
  std::size_t patience = 50;
  Precision precision = Precision::f64;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(patches_per_patient, "patches_per_patient");
    positive(patients_per_batch, "patients_per_batch");
    positive(schedule_period, "schedule_period");
    positive(max_epochs, "max_epochs");
    positive(eval_every, "eval_every");
    positive(val_patches, "val_patches");
    positive(test_patches, "test_patches");
    positive(heads, "heads");
    positive(gated_hidden, "gated_hidden");
    positive(clusters, "clusters");
    positive(patience, "patience");
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be > 0");
    if (!(feature_dropout_rate >= 0.0 && feature_dropout_rate < 1.0))
      throw ConfigError("feature_dropout_rate must lie in [0, 1)");
    if (!(key_dropout_rate >= 0.0 && key_dropout_rate < 1.0))
      throw ConfigError("key_dropout_rate must lie in [0, 1)");
  }
};

// ---------------------------------------------------------------------------
// Cox loss

template <std::floating_point T>
struct CoxLoss {
  T loss{0};
  std::vector<T> grad;  // dloss / drisk
};

/// Negative mean partial log-likelihood over events with Breslow risk sets
/// R(t_i) = { j : t_j >= t_i }. Returns nullopt for a batch without events.
template <std::floating_point T>
std::optional<CoxLoss<T>> cox_loss(std::span<const T> risk, std::span<const double> time,
                                   std::span<const int> event) {
  const std::size_t n = risk.size();
  if (n == 0 || time.size() != n || event.size() != n)
    throw DimensionError("cox_loss: inputs must have equal non-zero length");
  std::size_t n_events = 0;
  for (int e : event) n_events += e != 0;
  if (n_events == 0) return std::nullopt;

  const T shift = *std::max_element(risk.begin(), risk.end());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return time[a] > time[b];
  });

  // Descending sweep: accumulate the risk-set sums per distinct time.
  struct Group {
    std::size_t begin, end;
    T risk_sum;
    std::size_t deaths;
  };
  std::vector<Group> groups;
  T running{0};
  double log_lik = 0.0;
  for (std::size_t g = 0; g < n;) {
    std::size_t end = g;
    std::size_t deaths = 0;
    while (end < n && time[order[end]] == time[order[g]]) {
      running += std::exp(risk[order[end]] - shift);
      deaths += event[order[end]] != 0;
      ++end;
    }
    const T log_sum = std::log(running) + shift;
    for (std::size_t p = g; p < end; ++p)
      if (event[order[p]]) log_lik += static_cast<double>(risk[order[p]] - log_sum);
    groups.push_back({g, end, running, deaths});
    g = end;
  }

  // Ascending sweep: patient k belongs to the risk set of every event at or
  // before t_k.
  CoxLoss<T> out;
  out.grad.assign(n, T{0});
  const T inv_events = T{1} / static_cast<T>(n_events);
  T inv_acc{0};
  for (std::size_t gi = groups.size(); gi-- > 0;) {
    const auto& grp = groups[gi];
    inv_acc += static_cast<T>(grp.deaths) / grp.risk_sum;
    for (std::size_t p = grp.begin; p < grp.end; ++p) {
      const std::size_t k = order[p];
      const T share = std::exp(risk[k] - shift) * inv_acc;
      out.grad[k] = -inv_events * (static_cast<T>(event[k] != 0) - share);
    }
  }
  out.loss = static_cast<T>(-log_lik / static_cast<double>(n_events));
  return out;
}

template <std::floating_point T>
std::optional<CoxLoss<T>> cox_loss(const std::vector<T>& risk, const std::vector<double>& time,
                                   const std::vector<int>& event) {
  return cox_loss<T>(std::span<const T>(risk), std::span<const double>(time),
                     std::span<const int>(event));
}

// ---------------------------------------------------------------------------
// Feature dropout

/// One keep/drop decision per feature channel, shared by every patient in a
/// batch. Survivors are scaled by 1/(1 - rate).
struct FeatureDropoutMask {
  std::vector<bool> keep;
  double rate = 0.0;

  template <std::floating_point T>
  std::vector<T> scale() const {
    const T s = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> out(keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) out[i] = keep[i] ? s : T{0};
    return out;
  }
};

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
}

inline FeatureDropoutMask draw_feature_mask(std::size_t d, double rate, RngStream& rng) {
  check_dropout_rate(rate);
  FeatureDropoutMask mask;
  mask.rate = rate;
  mask.keep.assign(d, true);
  if (rate > 0.0)
    for (std::size_t j = 0; j < d; ++j) mask.keep[j] = !rng.bernoulli(rate);
  return mask;
}

/// Applies one shared mask to every row at train time; identity otherwise.
template <std::floating_point T>
Matrix<T> feature_dropout(Matrix<T> batch, double rate, RngStream& rng, bool training) {
  check_dropout_rate(rate);
  if (!training || rate == 0.0) return batch;
  const auto scale = draw_feature_mask(batch.cols(), rate, rng).template scale<T>();
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    auto r = batch.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] *= scale[j];
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Adam

template <std::floating_point T>
struct AdamState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam update applied in place to `params`.
template <std::floating_point T>
void adam_step(const std::vector<NamedArray<T>>& params, const std::vector<NamedArray<T>>& grads,
               AdamState<T>& state, double lr) {
  if (!(lr > 0.0)) throw ConfigError("adam_step: learning rate must be > 0");
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter/gradient count");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.values.size(), T{0});
      state.second_moment.emplace_back(p.values.size(), T{0});
    }
  }
  if (state.first_moment.size() != params.size())
    throw DimensionError("adam_step: optimizer state does not match parameters");
  for (std::size_t a = 0; a < params.size(); ++a) {
    if (params[a].values.size() != grads[a].values.size() ||
        state.first_moment[a].size() != params[a].values.size())
      throw DimensionError("adam_step: shape mismatch for " + params[a].name);
    for (T g : grads[a].values)
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + params[a].name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  const T b1 = static_cast<T>(state.beta1);
  const T b2 = static_cast<T>(state.beta2);
  for (std::size_t a = 0; a < params.size(); ++a) {
    auto& m = state.first_moment[a];
    auto& v = state.second_moment[a];
    auto p = params[a].values;
    auto g = grads[a].values;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      const double m_hat = static_cast<double>(m[i]) / correction1;
      const double v_hat = static_cast<double>(v[i]) / correction2;
      p[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + state.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// Schedule and sampling

/// Cosine annealing from base_lr toward 0 over each period, restarting at
/// every multiple of schedule_period.
inline double cosine_lr(std::size_t epoch, const TrainConfig& config) {
  const double period = static_cast<double>(config.schedule_period);
  const double phase = static_cast<double>(epoch % config.schedule_period) / period;
  return config.base_lr * 0.5 * (1.0 + std::cos(M_PI * phase));
}

/// n distinct indices when the bag is large enough, otherwise n draws with
/// replacement.
inline std::vector<std::size_t> sample_patches(std::size_t bag_size, std::size_t n,
                                               RngStream& rng) {
  if (bag_size == 0) throw DomainError("sample_patches: empty bag");
  if (n == 0) throw DomainError("sample_patches: n must be >= 1");
  std::vector<std::size_t> out;
  out.reserve(n);
  if (bag_size >= n) {
    std::vector<std::size_t> pool(bag_size);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.uniform_index(bag_size - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<std::size_t>(rng.uniform_index(bag_size)));
  }
  return out;
}

template <std::floating_point T>
Matrix<T> gather_rows(const Matrix<float>& source, const std::vector<std::size_t>& rows) {
  Matrix<T> out(rows.size(), source.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = source.row(rows[i]);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<T>(src[j]);
  }
  return out;
}

/// Risk for every patient from `n_patches` sampled patches; patient i uses
/// stream (seed, label).child(patient id), so predictions are reproducible
/// and identical across models.
template <PoolingModel M>
std::vector<double> predict_sampled(const M& model, const Dataset& data, std::size_t n_patches,
                                    std::uint64_t seed, std::string_view label = "test") {
  using T = typename M::scalar;
  const RngStream base(seed, "sample");
  std::vector<double> risks;
  risks.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto rng = base.child(label).child(data.patients[i].id);
    const auto rows = sample_patches(data.bags[i].n(), n_patches, rng);
    risks.push_back(static_cast<double>(predict_risk(model, gather_rows<T>(data.bags[i].features, rows))));
  }
  return risks;
}

// ---------------------------------------------------------------------------
// Model construction

template <std::floating_point T>
using AnyModel = std::variant<ModelParams<T>, AvgPoolParams<T>, GatedAttnParams<T>,
                              ClusterAttnParams<T>>;

template <std::floating_point U, std::floating_point T>
AnyModel<U> cast_model(const AnyModel<T>& model) {
  return std::visit(
      [](const auto& m) -> AnyModel<U> {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ModelParams<T>>) {
          return m.template cast<U>();
        } else if constexpr (std::is_same_v<M, AvgPoolParams<T>>) {
          AvgPoolParams<U> out;
          out.fc.weight.assign(m.fc.weight.begin(), m.fc.weight.end());
          out.fc.bias = static_cast<U>(m.fc.bias);
          return out;
        } else {
          auto gated = [](const GatedAttnParams<T>& g) {
            GatedAttnParams<U> out;
            out.projection = g.projection.template cast<U>();
            out.gate.assign(g.gate.begin(), g.gate.end());
            out.fc.weight.assign(g.fc.weight.begin(), g.fc.weight.end());
            out.fc.bias = static_cast<U>(g.fc.bias);
            return out;
          };
          if constexpr (std::is_same_v<M, GatedAttnParams<T>>) {
            return gated(m);
          } else {
            return ClusterAttnParams<U>{m.centroids, gated(m.attn)};
          }
        }
      },
      model);
}

/// Fresh parameters for `kind`. Cluster centroids are fitted by k-means on
/// patches sampled from `train` only.
template <std::floating_point T>
AnyModel<T> make_model(ModelKind kind, const Dataset& train, const TrainConfig& config) {
  const RngStream init(config.seed, "init");
  const std::size_t d = train.dim;
  switch (kind) {
    case ModelKind::mhattn:
      return init_params<T>(d, config.heads, init, config.key_dropout_rate);
    case ModelKind::avgpool:
      return init_avgpool<T>(d, init);
    case ModelKind::gated:
      return init_gated<T>(d, config.gated_hidden, init);
    case ModelKind::cluster: {
      auto rng = init.child("kmeans-sample");
      std::vector<float> pooled;
      std::size_t rows = 0;
      for (const auto& bag : train.bags) {
        for (auto r : sample_patches(bag.n(), config.patches_per_patient, rng)) {
          auto src = bag.features.row(r);
          pooled.insert(pooled.end(), src.begin(), src.end());
          ++rows;
        }
      }
      const Matrix<float> points(rows, d, std::move(pooled));
      auto fit = kmeans(points, std::min(config.clusters, rows), init.child("kmeans"), 100);
      return ClusterAttnParams<T>{std::move(fit.centroids),
                                  init_gated<T>(d, config.gated_hidden, init.child("attn"))};
    }
  }
  throw ConfigError("unknown model kind");
}

// ---------------------------------------------------------------------------
// Training loop

struct HistoryRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = std::nan("");
  double val_cindex = std::nan("");
  std::size_t skipped_batches = 0;
};

template <PoolingModel M>
struct TrainResult {
  M best;
  double best_val_cindex = std::nan("");
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  std::vector<HistoryRow> history;
  AdamState<typename M::scalar> optimizer;
};

/// Validation c-index from `val_patches` sampled per patient, or NaN when the
/// validation set has no comparable pair.
template <PoolingModel M>
double validation_cindex(const M& model, const Dataset& val, const TrainConfig& config,
                         std::size_t evaluation) {
  if (val.size() == 0) return std::nan("");
  const auto risks = predict_sampled(model, val, config.val_patches, config.seed,
                                     "val-" + std::to_string(evaluation));
  const auto counts = concordance_counts(risks, times_of(val.patients), events_of(val.patients));
  return counts.comparable == 0 ? std::nan("") : counts.value();
}

/// Epoch loop. Retains the parameters with the best validation c-index
/// (the final parameters when validation is empty or never evaluable).
template <PoolingModel M>
TrainResult<M> train(M model, const Dataset& train_set, const Dataset& val_set,
                     const TrainConfig& config) {
  using T = typename M::scalar;
  config.validate();
  train_set.validate();
  if (count_events(train_set.patients) == 0)
    throw ConfigError("train: training split contains no events");

  const RngStream sample_base(config.seed, "sample");
  auto shuffle_rng = sample_base.child("shuffle");
  auto patch_rng = sample_base.child("patches");
  RngStream dropout_rng(config.seed, "dropout");

  TrainResult<M> result;
  result.best = model;
  bool have_best = false;
  std::size_t evaluations = 0;
  std::size_t since_improvement = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    const double lr = cosine_lr(epoch, config);
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    std::size_t skipped = 0;

    for (std::size_t b = 0; b < order.size(); b += config.patients_per_batch) {
      const std::size_t e = std::min(order.size(), b + config.patients_per_batch);
      std::vector<double> times;
      std::vector<int> events;
      for (std::size_t p = b; p < e; ++p) {
        times.push_back(train_set.patients[order[p]].time);
        events.push_back(train_set.patients[order[p]].event);
      }
      if (std::none_of(events.begin(), events.end(), [](int v) { return v != 0; })) {
        ++skipped;
        continue;
      }

      std::vector<typename M::Trace> traces;
      traces.reserve(e - b);
      for (std::size_t p = b; p < e; ++p) {
        const auto& bag = train_set.bags[order[p]];
        const auto rows = sample_patches(bag.n(), config.patches_per_patient, patch_rng);
        traces.push_back(model.pool(gather_rows<T>(bag.features, rows), &dropout_rng));
      }
      std::vector<T> scale;
      if (config.feature_dropout_rate > 0.0)
        scale = draw_feature_mask(train_set.dim, config.feature_dropout_rate, dropout_rng)
                    .template scale<T>();

      std::vector<T> risks;
      risks.reserve(traces.size());
      const auto& fc = model.head();
      for (const auto& tr : traces) {
        T r = fc.bias;
        for (std::size_t m = 0; m < tr.pooled.size(); ++m)
          r += fc.weight[m] * tr.pooled[m] * (scale.empty() ? T{1} : scale[m]);
        risks.push_back(r);
      }
      const auto loss = cox_loss<T>(std::span<const T>(risks), times, events);
      auto grads = backward(model, traces, std::span<const T>(loss->grad), std::span<const T>(scale));
      adam_step(model.arrays(), grads.arrays(), result.optimizer, lr);
      ++result.steps;
      loss_sum += static_cast<double>(loss->loss);
      ++loss_count;
    }

    HistoryRow row;
    row.epoch = epoch;
    row.step = result.steps;
    row.lr = lr;
    row.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : std::nan("");
    row.skipped_batches = skipped;

    const bool last = epoch + 1 == config.max_epochs;
    bool stop = false;
    if ((epoch + 1) % config.eval_every == 0 || last) {
      const double c = validation_cindex(model, val_set, config, evaluations++);
      row.val_cindex = c;
      if (std::isfinite(c) && (!have_best || c > result.best_val_cindex)) {
        have_best = true;
        result.best = model;
        result.best_val_cindex = c;
        result.best_epoch = epoch;
        since_improvement = 0;
      } else if (std::isfinite(c)) {
        stop = ++since_improvement >= config.patience;
      }
    }
    result.history.push_back(row);
    if (stop) break;
  }
  if (!have_best) {
    result.best = model;
    result.best_epoch = result.history.empty() ? 0 : result.history.back().epoch;
  }
  return result;
}

/// Trains the requested model kind at the configured precision; the best
/// model is returned in double precision.
struct AnyTrainResult {
  AnyModel<double> best;
  double best_val_cindex = std::nan("");
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  std::vector<HistoryRow> history;
  AdamState<double> optimizer;  // state after the final step
};

template <std::floating_point T>
AnyTrainResult train_kind_as(ModelKind kind, const Dataset& train_set, const Dataset& val_set,
                             const TrainConfig& config) {
  auto initial = make_model<T>(kind, train_set, config);
  return std::visit(
      [&](auto& m) {
        auto r = train(std::move(m), train_set, val_set, config);
        AnyTrainResult out;
        out.best = cast_model<double, T>(AnyModel<T>(std::move(r.best)));
        out.best_val_cindex = r.best_val_cindex;
        out.best_epoch = r.best_epoch;
        out.steps = r.steps;
        out.history = std::move(r.history);
        out.optimizer.step = r.optimizer.step;
        for (const auto& m : r.optimizer.first_moment) out.optimizer.first_moment.emplace_back(m.begin(), m.end());
        for (const auto& v : r.optimizer.second_moment) out.optimizer.second_moment.emplace_back(v.begin(), v.end());
        return out;
      },
      initial);
}

inline AnyTrainResult train_kind(ModelKind kind, const Dataset& train_set, const Dataset& val_set,
                                 const TrainConfig& config) {
  config.validate();
  if (kind == ModelKind::mhattn && (train_set.dim == 0 || train_set.dim % config.heads != 0))
    throw ConfigError("heads=" + std::to_string(config.heads) + " does not divide d=" +
                      std::to_string(train_set.dim));
  return config.precision == Precision::f32
             ? train_kind_as<float>(kind, train_set, val_set, config)
             : train_kind_as<double>(kind, train_set, val_set, config);
}

inline std::vector<double> predict_sampled(const AnyModel<double>& model, const Dataset& data,
                                           std::size_t n_patches, std::uint64_t seed,
                                           std::string_view label = "test") {
  return std::visit([&](const auto& m) { return predict_sampled(m, data, n_patches, seed, label); },
                    model);
}

}  // namespace mhattnsurv
