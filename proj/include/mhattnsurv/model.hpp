#pragma once

// Bag aggregators and the linear risk head.
//
// Every model type exposes the same pooling interface so the trainer can be
// written once:
//   Trace pool(const Matrix<T>& x, RngStream* key_dropout) const;
//   void pool_backward(const Trace&, std::span<const T> d_pooled, Model& grad) const;
//   std::vector<NamedArray<T>> arrays();   // trainable arrays, fixed order
//   RiskHead<T>& head();
// The risk head is applied after pooling (and after batch feature dropout
// during training).

#include <cmath>
#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mhattnsurv/errors.hpp"
#include "mhattnsurv/numerics.hpp"

namespace mhattnsurv {

template <std::floating_point T>
struct EmbeddingBag {
  std::string patient_id;
  Matrix<T> features;  // n patches x d

  std::size_t n() const noexcept { return features.rows(); }
  std::size_t d() const noexcept { return features.cols(); }
};

template <std::floating_point T>
struct NamedArray {
  std::string name;
  std::span<T> values;
};

template <std::floating_point T>
struct RiskHead {
  std::vector<T> weight;
  T bias{0};

  T operator()(std::span<const T> pooled) const {
    return dot<T>(weight, pooled) + bias;
  }
};

namespace detail {

template <std::floating_point T>
void fill_uniform(std::span<T> values, double bound, RngStream& rng) {
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <std::floating_point T>
void require_rows(const Matrix<T>& x, std::size_t d, const char* who) {
  if (x.rows() == 0) throw DomainError(std::string(who) + ": bag has no patches");
  if (x.cols() != d) {
    throw DimensionError(std::string(who) + ": bag dimension " + std::to_string(x.cols()) +
                         " does not match model dimension " + std::to_string(d));
  }
}

// Softmax-attention backward: given weights a and dL/da, returns dL/dlogits.
template <std::floating_point T>
std::vector<T> softmax_backward(std::span<const T> weights, std::span<const T> d_weights) {
  T inner{0};
  for (std::size_t j = 0; j < weights.size(); ++j) inner += weights[j] * d_weights[j];
  std::vector<T> out(weights.size());
  for (std::size_t j = 0; j < weights.size(); ++j) out[j] = weights[j] * (d_weights[j] - inner);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Multi-head attention

template <std::floating_point T>
struct AttentionOutput {
  std::vector<T> pooled;  // S, length d (concatenated head outputs)
  Matrix<T> attention;    // h x n
  T risk{0};
};

/// Everything the backward pass needs from one forward evaluation.
template <std::floating_point T>
struct MHTrace {
  Matrix<T> x;          // n x d
  Matrix<T> key_scale;  // n x d inverted-dropout factors; empty when no dropout
  Matrix<T> keys;       // relu(dropout(x W_K))
  Matrix<T> attention;  // h x n
  std::vector<T> pooled;
};

/// Learnable query, key projection and risk head of the multi-head model.
/// Head c owns columns [c*d/h, (c+1)*d/h) of Q, K and V = X.
template <std::floating_point T>
struct ModelParams {
  using scalar = T;
  using Trace = MHTrace<T>;

  Matrix<T> key_weight;  // W_K, d x d
  std::vector<T> query;  // Q, length d
  RiskHead<T> fc;
  std::size_t heads = 1;
  double key_dropout_rate = 0.0;

  std::size_t dim() const noexcept { return query.size(); }
  std::size_t head_dim() const noexcept { return dim() / heads; }

  RiskHead<T>& head() noexcept { return fc; }
  const RiskHead<T>& head() const noexcept { return fc; }

  void validate() const {
    const std::size_t d = dim();
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("heads=" + std::to_string(heads) + " does not divide d=" +
                        std::to_string(d));
    }
    if (key_weight.rows() != d || key_weight.cols() != d || fc.weight.size() != d) {
      throw DimensionError("ModelParams: inconsistent array shapes for d=" + std::to_string(d));
    }
    if (!(key_dropout_rate >= 0.0 && key_dropout_rate < 1.0)) {
      throw ConfigError("key_dropout_rate must lie in [0, 1)");
    }
  }

  ModelParams zeros_like() const {
    ModelParams z;
    z.key_weight = Matrix<T>(key_weight.rows(), key_weight.cols());
    z.query.assign(query.size(), T{0});
    z.fc.weight.assign(fc.weight.size(), T{0});
    z.heads = heads;
    z.key_dropout_rate = key_dropout_rate;
    return z;
  }

  std::vector<NamedArray<T>> arrays() {
    return {{"W_K", key_weight.values()},
            {"Q", query},
            {"fc_w", fc.weight},
            {"fc_b", std::span<T>(&fc.bias, 1)}};
  }

  template <std::floating_point U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.key_weight = key_weight.template cast<U>();
    out.query.assign(query.begin(), query.end());
    out.fc.weight.assign(fc.weight.begin(), fc.weight.end());
    out.fc.bias = static_cast<U>(fc.bias);
    out.heads = heads;
    out.key_dropout_rate = key_dropout_rate;
    return out;
  }

  /// Forward pass keeping intermediates. `key_dropout` is consulted only when
  /// non-null and key_dropout_rate > 0.
  MHTrace<T> pool(const Matrix<T>& x, RngStream* key_dropout = nullptr) const {
    detail::require_rows(x, dim(), "mh_forward");
    const std::size_t n = x.rows();
    const std::size_t d = dim();
    const std::size_t hd = head_dim();

    MHTrace<T> tr;
    tr.x = x;
    tr.keys = matmul(x, key_weight);
    if (key_dropout != nullptr && key_dropout_rate > 0.0) {
      const T keep_scale = static_cast<T>(1.0 / (1.0 - key_dropout_rate));
      tr.key_scale = Matrix<T>(n, d);
      for (auto& s : tr.key_scale.values())
        s = key_dropout->bernoulli(key_dropout_rate) ? T{0} : keep_scale;
      for (std::size_t i = 0; i < tr.keys.size(); ++i)
        tr.keys.values()[i] *= tr.key_scale.values()[i];
    }
    tr.keys = relu(std::move(tr.keys));

    tr.attention = Matrix<T>(heads, n);
    tr.pooled.assign(d, T{0});
    std::vector<T> logits(n);
    for (std::size_t c = 0; c < heads; ++c) {
      const std::size_t lo = c * hd;
      for (std::size_t j = 0; j < n; ++j) {
        T acc{0};
        for (std::size_t m = lo; m < lo + hd; ++m) acc += query[m] * tr.keys(j, m);
        logits[j] = acc;
      }
      const auto weights = softmax_stable<T>(logits);
      for (std::size_t j = 0; j < n; ++j) {
        tr.attention(c, j) = weights[j];
        for (std::size_t m = lo; m < lo + hd; ++m) tr.pooled[m] += weights[j] * x(j, m);
      }
    }
    return tr;
  }

  /// Accumulates dL/dW_K and dL/dQ into `grad` given dL/dS.
  void pool_backward(const MHTrace<T>& tr, std::span<const T> d_pooled,
                     ModelParams& grad) const {
    const std::size_t n = tr.x.rows();
    const std::size_t d = dim();
    const std::size_t hd = head_dim();
    Matrix<T> d_keys(n, d);
    std::vector<T> d_weights(n);
    for (std::size_t c = 0; c < heads; ++c) {
      const std::size_t lo = c * hd;
      for (std::size_t j = 0; j < n; ++j) {
        T acc{0};
        for (std::size_t m = lo; m < lo + hd; ++m) acc += d_pooled[m] * tr.x(j, m);
        d_weights[j] = acc;
      }
      const auto d_logits = detail::softmax_backward<T>(tr.attention.row(c), d_weights);
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t m = lo; m < lo + hd; ++m) {
          grad.query[m] += d_logits[j] * tr.keys(j, m);
          d_keys(j, m) = d_logits[j] * query[m];
        }
      }
    }
    // Through relu and dropout: keys > 0 exactly where the scaled
    // pre-activation was positive.
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t m = 0; m < d; ++m) {
        if (tr.keys(j, m) <= T{0}) {
          d_keys(j, m) = T{0};
        } else if (!tr.key_scale.empty()) {
          d_keys(j, m) *= tr.key_scale(j, m);
        }
      }
    }
    // dW_K = X^T dPre
    for (std::size_t j = 0; j < n; ++j) {
      auto dk = d_keys.row(j);
      for (std::size_t r = 0; r < d; ++r) {
        const T xr = tr.x(j, r);
        if (xr == T{0}) continue;
        auto g = grad.key_weight.row(r);
        for (std::size_t m = 0; m < d; ++m) g[m] += xr * dk[m];
      }
    }
  }
};

/// Q, W_K and fc_w drawn i.i.d. from U(-1/sqrt(d), 1/sqrt(d)); fc_b = 0.
template <std::floating_point T = double>
ModelParams<T> init_params(std::size_t d, std::size_t heads, RngStream rng,
                           double key_dropout_rate = 0.0) {
  if (heads == 0 || d == 0 || d % heads != 0) {
    throw ConfigError("init_params: heads=" + std::to_string(heads) + " does not divide d=" +
                      std::to_string(d));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  ModelParams<T> p;
  p.heads = heads;
  p.key_dropout_rate = key_dropout_rate;
  p.query.resize(d);
  p.key_weight = Matrix<T>(d, d);
  p.fc.weight.resize(d);
  detail::fill_uniform<T>(p.query, bound, rng);
  detail::fill_uniform<T>(p.key_weight.values(), bound, rng);
  detail::fill_uniform<T>(p.fc.weight, bound, rng);
  p.validate();
  return p;
}

/// Inference forward pass (no dropout).
template <std::floating_point T>
AttentionOutput<T> mh_forward(const EmbeddingBag<T>& bag, const ModelParams<T>& params) {
  auto tr = params.pool(bag.features, nullptr);
  AttentionOutput<T> out;
  out.risk = params.fc(tr.pooled);
  out.pooled = std::move(tr.pooled);
  out.attention = std::move(tr.attention);
  return out;
}

/// Risk with every head outside `keep_heads` (0-based) zeroed before the
/// risk head. The bias is always applied.
template <std::floating_point T>
T head_masked_forward(const EmbeddingBag<T>& bag, const ModelParams<T>& params,
                      const std::set<std::size_t>& keep_heads) {
  for (auto h : keep_heads) {
    if (h >= params.heads) {
      throw DomainError("head_masked_forward: head index " + std::to_string(h) +
                        " out of range for " + std::to_string(params.heads) + " heads");
    }
  }
  const auto tr = params.pool(bag.features, nullptr);
  const std::size_t hd = params.head_dim();
  T risk = params.fc.bias;
  for (auto h : keep_heads)
    for (std::size_t m = h * hd; m < (h + 1) * hd; ++m) risk += params.fc.weight[m] * tr.pooled[m];
  return risk;
}

// ---------------------------------------------------------------------------
// Average pooling

template <std::floating_point T>
struct PoolTrace {
  std::vector<T> pooled;
};

template <std::floating_point T>
struct AvgPoolParams {
  using scalar = T;
  using Trace = PoolTrace<T>;

  RiskHead<T> fc;

  std::size_t dim() const noexcept { return fc.weight.size(); }
  RiskHead<T>& head() noexcept { return fc; }
  const RiskHead<T>& head() const noexcept { return fc; }

  AvgPoolParams zeros_like() const {
    AvgPoolParams z;
    z.fc.weight.assign(fc.weight.size(), T{0});
    return z;
  }

  std::vector<NamedArray<T>> arrays() {
    return {{"fc_w", fc.weight}, {"fc_b", std::span<T>(&fc.bias, 1)}};
  }

  PoolTrace<T> pool(const Matrix<T>& x, RngStream* = nullptr) const {
    detail::require_rows(x, dim(), "avgpool_forward");
    return {row_mean(x)};
  }

  void pool_backward(const PoolTrace<T>&, std::span<const T>, AvgPoolParams&) const {}
};

template <std::floating_point T = double>
AvgPoolParams<T> init_avgpool(std::size_t d, RngStream rng) {
  AvgPoolParams<T> p;
  p.fc.weight.resize(d);
  detail::fill_uniform<T>(p.fc.weight, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  return p;
}

template <std::floating_point T>
T avgpool_forward(const EmbeddingBag<T>& bag, std::span<const T> fc_w, T fc_b) {
  detail::require_rows(bag.features, fc_w.size(), "avgpool_forward");
  const auto mean = row_mean(bag.features);
  return dot<T>(fc_w, mean) + fc_b;
}

// ---------------------------------------------------------------------------
// Gated (tanh) instance attention

template <std::floating_point T>
struct GatedTrace {
  Matrix<T> x;
  Matrix<T> hidden;  // tanh(x V^T), n x L
  std::vector<T> attention;
  std::vector<T> pooled;
};

/// score_j = w . tanh(V x_j); attention = softmax(score); pooled = sum a_j x_j.
template <std::floating_point T>
struct GatedAttnParams {
  using scalar = T;
  using Trace = GatedTrace<T>;

  Matrix<T> projection;  // V_g, L x d
  std::vector<T> gate;   // w_g, length L
  RiskHead<T> fc;

  std::size_t dim() const noexcept { return projection.cols(); }
  std::size_t hidden_width() const noexcept { return projection.rows(); }
  RiskHead<T>& head() noexcept { return fc; }
  const RiskHead<T>& head() const noexcept { return fc; }

  GatedAttnParams zeros_like() const {
    GatedAttnParams z;
    z.projection = Matrix<T>(projection.rows(), projection.cols());
    z.gate.assign(gate.size(), T{0});
    z.fc.weight.assign(fc.weight.size(), T{0});
    return z;
  }

  std::vector<NamedArray<T>> arrays() {
    return {{"V_g", projection.values()},
            {"w_g", gate},
            {"fc_w", fc.weight},
            {"fc_b", std::span<T>(&fc.bias, 1)}};
  }

  GatedTrace<T> pool(const Matrix<T>& x, RngStream* = nullptr) const {
    detail::require_rows(x, dim(), "gated_attn_forward");
    const std::size_t n = x.rows();
    const std::size_t width = hidden_width();
    GatedTrace<T> tr;
    tr.x = x;
    tr.hidden = Matrix<T>(n, width);
    std::vector<T> scores(n);
    for (std::size_t j = 0; j < n; ++j) {
      T s{0};
      for (std::size_t l = 0; l < width; ++l) {
        const T h = std::tanh(dot<T>(projection.row(l), x.row(j)));
        tr.hidden(j, l) = h;
        s += gate[l] * h;
      }
      scores[j] = s;
    }
    tr.attention = softmax_stable<T>(scores);
    tr.pooled.assign(dim(), T{0});
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t m = 0; m < dim(); ++m) tr.pooled[m] += tr.attention[j] * x(j, m);
    return tr;
  }

  void pool_backward(const GatedTrace<T>& tr, std::span<const T> d_pooled,
                     GatedAttnParams& grad) const {
    const std::size_t n = tr.x.rows();
    const std::size_t width = hidden_width();
    std::vector<T> d_weights(n);
    for (std::size_t j = 0; j < n; ++j) d_weights[j] = dot<T>(d_pooled, tr.x.row(j));
    const auto d_scores = detail::softmax_backward<T>(tr.attention, d_weights);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t l = 0; l < width; ++l) {
        const T h = tr.hidden(j, l);
        grad.gate[l] += d_scores[j] * h;
        const T d_pre = d_scores[j] * gate[l] * (T{1} - h * h);
        auto g = grad.projection.row(l);
        for (std::size_t m = 0; m < dim(); ++m) g[m] += d_pre * tr.x(j, m);
      }
    }
  }
};

template <std::floating_point T = double>
GatedAttnParams<T> init_gated(std::size_t d, std::size_t hidden_width, RngStream rng) {
  if (hidden_width == 0) throw ConfigError("gated attention: hidden width must be >= 1");
  GatedAttnParams<T> p;
  p.projection = Matrix<T>(hidden_width, d);
  p.gate.resize(hidden_width);
  p.fc.weight.resize(d);
  detail::fill_uniform<T>(p.projection.values(), 1.0 / std::sqrt(static_cast<double>(d)), rng);
  detail::fill_uniform<T>(p.gate, 1.0 / std::sqrt(static_cast<double>(hidden_width)), rng);
  detail::fill_uniform<T>(p.fc.weight, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  return p;
}

template <std::floating_point T>
struct GatedOutput {
  T risk{0};
  std::vector<T> attention;
};

template <std::floating_point T>
GatedOutput<T> gated_attn_forward(const EmbeddingBag<T>& bag, const GatedAttnParams<T>& params) {
  auto tr = params.pool(bag.features);
  return {params.fc(tr.pooled), std::move(tr.attention)};
}

// ---------------------------------------------------------------------------
// Clustered attention (simplified DeepAttnMISL)

template <std::floating_point T>
struct ClusterTrace {
  GatedTrace<T> gated;  // over non-empty cluster embeddings
  std::vector<T> pooled;
};

/// Patches are assigned to fixed centroids; each non-empty cluster's mean
/// embedding is one instance for a gated attention layer.
template <std::floating_point T>
struct ClusterAttnParams {
  using scalar = T;
  using Trace = ClusterTrace<T>;

  DenseMatrix centroids;  // k x d, fitted on training patches, not trained
  GatedAttnParams<T> attn;

  std::size_t dim() const noexcept { return attn.dim(); }
  std::size_t clusters() const noexcept { return centroids.rows(); }
  RiskHead<T>& head() noexcept { return attn.fc; }
  const RiskHead<T>& head() const noexcept { return attn.fc; }

  ClusterAttnParams zeros_like() const { return {centroids, attn.zeros_like()}; }
  std::vector<NamedArray<T>> arrays() { return attn.arrays(); }

  /// Mean embedding of each non-empty cluster, in cluster order.
  Matrix<T> cluster_embeddings(const Matrix<T>& x) const {
    detail::require_rows(x, dim(), "cluster_attn_forward");
    if (centroids.rows() == 0) throw UsageError("cluster_attn_forward: centroids not fitted");
    const std::size_t d = dim();
    Matrix<T> sums(centroids.rows(), d);
    std::vector<std::size_t> counts(centroids.rows(), 0);
    for (std::size_t j = 0; j < x.rows(); ++j) {
      const auto c = nearest_centroid(x.row(j), centroids);
      ++counts[c];
      for (std::size_t m = 0; m < d; ++m) sums(c, m) += x(j, m);
    }
    std::vector<T> packed;
    std::size_t filled = 0;
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (counts[c] == 0) continue;
      ++filled;
      for (std::size_t m = 0; m < d; ++m) packed.push_back(sums(c, m) / static_cast<T>(counts[c]));
    }
    if (filled == 0) throw DomainError("cluster_attn_forward: all clusters empty");
    return Matrix<T>(filled, d, std::move(packed));
  }

  ClusterTrace<T> pool(const Matrix<T>& x, RngStream* = nullptr) const {
    ClusterTrace<T> tr;
    tr.gated = attn.pool(cluster_embeddings(x));
    tr.pooled = tr.gated.pooled;
    return tr;
  }

  void pool_backward(const ClusterTrace<T>& tr, std::span<const T> d_pooled,
                     ClusterAttnParams& grad) const {
    attn.pool_backward(tr.gated, d_pooled, grad.attn);
  }
};

template <std::floating_point T>
T cluster_attn_forward(const EmbeddingBag<T>& bag, const ClusterAttnParams<T>& params) {
  const auto tr = params.pool(bag.features);
  return params.attn.fc(tr.pooled);
}

// ---------------------------------------------------------------------------
// Generic helpers

template <class M>
concept PoolingModel = requires(M m, const M cm, const Matrix<typename M::scalar>& x,
                                const typename M::Trace& tr,
                                std::span<const typename M::scalar> g) {
  { cm.pool(x, nullptr) } -> std::same_as<typename M::Trace>;
  cm.pool_backward(tr, g, m);
  { m.arrays() } -> std::same_as<std::vector<NamedArray<typename M::scalar>>>;
  { cm.zeros_like() } -> std::same_as<M>;
  { cm.head() } -> std::same_as<const RiskHead<typename M::scalar>&>;
  { tr.pooled } -> std::convertible_to<std::vector<typename M::scalar>>;
};

template <PoolingModel M>
typename M::scalar predict_risk(const M& model, const Matrix<typename M::scalar>& x) {
  const auto tr = model.pool(x, nullptr);
  return model.head()(tr.pooled);
}

/// Batch reverse pass: risks_i = fc(S_i * feature_scale). Returns gradients
/// of sum_i loss_grad_i * risk_i with respect to every trainable array.
template <PoolingModel M>
M backward(const M& model, const std::vector<typename M::Trace>& traces,
           std::span<const typename M::scalar> loss_grad,
           std::span<const typename M::scalar> feature_scale = {}) {
  using T = typename M::scalar;
  if (traces.size() != loss_grad.size())
    throw UsageError("backward: one forward trace is required per risk");
  M grad = model.zeros_like();
  const auto& fc = model.head();
  const std::size_t d = fc.weight.size();
  std::vector<T> d_pooled(d);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& pooled = traces[i].pooled;
    if (pooled.size() != d) throw UsageError("backward: trace does not match model");
    const T g = loss_grad[i];
    grad.head().bias += g;
    for (std::size_t m = 0; m < d; ++m) {
      const T scale = feature_scale.empty() ? T{1} : feature_scale[m];
      grad.head().weight[m] += g * pooled[m] * scale;
      d_pooled[m] = g * fc.weight[m] * scale;
    }
    model.pool_backward(traces[i], d_pooled, grad);
  }
  return grad;
}

}  // namespace mhattnsurv
