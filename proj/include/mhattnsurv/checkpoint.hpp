#pragma once

// Checkpoint files.
//
//   "MHCK" u32 version u32 d u32 h f64 key_dropout_rate
//   W_K (d*d f32) Q (d f32) fc_w (d f32) fc_b (f32)
//   zero or more blocks: tag[4] u64 payload_bytes payload
//   u32 metadata_bytes, UTF-8 JSON metadata
//
// Baselines reuse the fixed arrays: AvgPool is stored with W_K = Q = 0 and
// h = 1, which is the same function; gated and cluster models keep their
// extra arrays in GATE and CLST blocks (centroids as f64).

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mhattnsurv/binary_io.hpp"
#include "mhattnsurv/errors.hpp"
#include "mhattnsurv/model.hpp"
#include "mhattnsurv/train.hpp"

namespace mhattnsurv {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::string config_hash;
  double best_val_cindex = std::nan("");
  std::uint64_t steps = 0;
  std::string model = "mhattn";
  std::uint64_t best_epoch = 0;
};

inline nlohmann::json to_json(const CheckpointMeta& m) {
  nlohmann::json j;
  j["seed"] = m.seed;
  j["config_hash"] = m.config_hash;
  // NaN has no JSON spelling
  j["best_val_cindex"] = std::isfinite(m.best_val_cindex) ? nlohmann::json(m.best_val_cindex) : nlohmann::json();
  j["steps"] = m.steps;
  j["model"] = m.model;
  j["best_epoch"] = m.best_epoch;
  return j;
}

inline CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.best_val_cindex = j.at("best_val_cindex").is_null() ? std::nan("") : j.at("best_val_cindex").get<double>();
  m.steps = j.at("steps").get<std::uint64_t>();
  m.model = j.at("model").get<std::string>();
  m.best_epoch = j.value("best_epoch", std::uint64_t{0});
  return m;
}

/// FNV-1a over the compact dump of `config` (keys are sorted by the JSON
/// library, so equal configs hash equally).
inline std::string config_hash(const nlohmann::json& config) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << detail::fnv1a(config.dump());
  return s.str();
}

template <std::floating_point T>
struct Checkpoint {
  AnyModel<T> model;
  std::optional<AdamState<T>> optimizer;
  CheckpointMeta meta;
};

namespace detail {

template <std::floating_point T>
void put_array(std::ostream& out, std::span<const T> values) {
  for (T v : values) binary::put_f32(out, static_cast<float>(v));
}

template <std::floating_point T>
void read_array(binary::Reader& r, std::span<T> values, const char* what) {
  for (auto& v : values) v = static_cast<T>(r.f32(what));
}

template <std::floating_point T>
std::string gated_payload(const GatedAttnParams<T>& g) {
  std::ostringstream s(std::ios::binary);
  binary::put_u32(s, static_cast<std::uint32_t>(g.projection.rows()));
  put_array<T>(s, g.projection.values());
  put_array<T>(s, g.gate);
  return s.str();
}

template <std::floating_point T>
std::string adam_payload(const AdamState<T>& a) {
  std::ostringstream s(std::ios::binary);
  binary::put_u64(s, a.step);
  binary::put_u32(s, static_cast<std::uint32_t>(a.first_moment.size()));
  for (std::size_t k = 0; k < a.first_moment.size(); ++k) {
    binary::put_u64(s, a.first_moment[k].size());
    for (T v : a.first_moment[k]) binary::put_f64(s, static_cast<double>(v));
    for (T v : a.second_moment[k]) binary::put_f64(s, static_cast<double>(v));
  }
  return s.str();
}

inline void put_block(std::ostream& out, std::string_view tag, const std::string& payload) {
  binary::put_tag(out, tag);
  binary::put_u64(out, payload.size());
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

}  // namespace detail

template <std::floating_point T>
void save_checkpoint(const std::string& path, const AnyModel<T>& model, const CheckpointMeta& meta,
                     const AdamState<T>* optimizer = nullptr) {
  auto out = binary::open_output(path);
  std::size_t d = 0, h = 1;
  double key_dropout = 0.0;
  const RiskHead<T>* fc = nullptr;
  const Matrix<T>* key_weight = nullptr;
  const std::vector<T>* query = nullptr;
  std::string extra;
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        fc = &m.head();
        d = fc->weight.size();
        if constexpr (std::is_same_v<M, ModelParams<T>>) {
          h = m.heads;
          key_dropout = m.key_dropout_rate;
          key_weight = &m.key_weight;
          query = &m.query;
        } else if constexpr (std::is_same_v<M, GatedAttnParams<T>>) {
          std::ostringstream s(std::ios::binary);
          detail::put_block(s, "GATE", detail::gated_payload(m));
          extra = s.str();
        } else if constexpr (std::is_same_v<M, ClusterAttnParams<T>>) {
          std::ostringstream s(std::ios::binary);
          std::ostringstream c(std::ios::binary);
          binary::put_u32(c, static_cast<std::uint32_t>(m.centroids.rows()));
          for (double v : m.centroids.values()) binary::put_f64(c, v);
          detail::put_block(s, "CLST", c.str());
          detail::put_block(s, "GATE", detail::gated_payload(m.attn));
          extra = s.str();
        }
      },
      model);

  binary::put_tag(out, "MHCK");
  binary::put_u32(out, kCheckpointVersion);
  binary::put_u32(out, static_cast<std::uint32_t>(d));
  binary::put_u32(out, static_cast<std::uint32_t>(h));
  binary::put_f64(out, key_dropout);
  if (key_weight) {
    detail::put_array<T>(out, key_weight->values());
    detail::put_array<T>(out, *query);
  } else {
    for (std::size_t i = 0; i < d * d + d; ++i) binary::put_f32(out, 0.0f);
  }
  detail::put_array<T>(out, fc->weight);
  binary::put_f32(out, static_cast<float>(fc->bias));
  out << extra;
  if (optimizer) detail::put_block(out, "ADAM", detail::adam_payload(*optimizer));
  const std::string json = to_json(meta).dump();
  binary::put_u32(out, static_cast<std::uint32_t>(json.size()));
  out.write(json.data(), static_cast<std::streamsize>(json.size()));
  if (!out) throw PathError("failed writing checkpoint '" + path + "'");
}

template <std::floating_point T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  auto in = binary::open_input(path);
  binary::Reader r(in, path);
  r.expect_tag("MHCK", "checkpoint magic");
  const auto version_at = r.offset();
  const auto version = r.u32("checkpoint version");
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version), version_at);
  const std::size_t d = r.u32("dimension");
  const auto heads_at = r.offset();
  const std::size_t h = r.u32("head count");
  const double key_dropout = r.f64("key dropout rate");
  if (d == 0 || h == 0 || d % h != 0)
    throw FormatError(path + ": head count " + std::to_string(h) + " incompatible with d=" + std::to_string(d),
                      heads_at);

  ModelParams<T> mh;
  mh.heads = h;
  mh.key_dropout_rate = key_dropout;
  mh.key_weight = Matrix<T>(d, d);
  mh.query.resize(d);
  mh.fc.weight.resize(d);
  detail::read_array<T>(r, mh.key_weight.values(), "W_K");
  detail::read_array<T>(r, std::span<T>(mh.query), "Q");
  detail::read_array<T>(r, std::span<T>(mh.fc.weight), "fc_w");
  mh.fc.bias = static_cast<T>(r.f32("fc_b"));

  std::optional<GatedAttnParams<T>> gated;
  std::optional<DenseMatrix> centroids;
  std::optional<AdamState<T>> adam;
  for (;;) {
    const bool gate = r.peek_tag("GATE"), clst = r.peek_tag("CLST"), adm = r.peek_tag("ADAM");
    if (!gate && !clst && !adm) break;
    const auto block_at = r.offset();
    r.tag("block tag");
    const auto size = r.u64("block size");
    const auto start = r.offset();
    if (gate) {
      GatedAttnParams<T> g;
      const std::size_t L = r.u32("gate width");
      if (L == 0) throw FormatError(path + ": gate width is zero", start);
      g.projection = Matrix<T>(L, d);
      g.gate.resize(L);
      detail::read_array<T>(r, g.projection.values(), "gate projection");
      detail::read_array<T>(r, std::span<T>(g.gate), "gate vector");
      g.fc = mh.fc;
      gated = std::move(g);
    } else if (clst) {
      const std::size_t k = r.u32("cluster count");
      if (k == 0) throw FormatError(path + ": cluster count is zero", start);
      DenseMatrix c(k, d);
      for (auto& v : c.values()) v = r.f64("centroids");
      centroids = std::move(c);
    } else {
      AdamState<T> a;
      a.step = r.u64("optimizer step");
      const std::size_t arrays = r.u32("optimizer array count");
      for (std::size_t k = 0; k < arrays; ++k) {
        const auto len = r.u64("optimizer array length");
        if (len > size) throw FormatError(path + ": optimizer array length exceeds block", r.offset());
        std::vector<T> m(len), v(len);
        for (auto& x : m) x = static_cast<T>(r.f64("first moment"));
        for (auto& x : v) x = static_cast<T>(r.f64("second moment"));
        a.first_moment.push_back(std::move(m));
        a.second_moment.push_back(std::move(v));
      }
      adam = std::move(a);
    }
    if (r.offset() - start != size)
      throw FormatError(path + ": block size mismatch", block_at);
  }

  const auto meta_at = r.offset();
  const std::size_t meta_len = r.u32("metadata length");
  std::string json(meta_len, '\0');
  r.read_bytes(json.data(), meta_len, "metadata");
  if (!r.at_end()) throw FormatError(path + ": trailing bytes after metadata", r.offset());
  Checkpoint<T> ck;
  try {
    ck.meta = meta_from_json(nlohmann::json::parse(json));
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path + ": bad metadata: " + ex.what(), meta_at);
  }
  ck.optimizer = std::move(adam);

  const auto kind = parse_model_kind(ck.meta.model);
  switch (kind) {
    case ModelKind::mhattn:
      ck.model = std::move(mh);
      break;
    case ModelKind::avgpool:
      ck.model = AvgPoolParams<T>{mh.fc};
      break;
    case ModelKind::gated:
      if (!gated) throw FormatError(path + ": gated model without GATE block", meta_at);
      ck.model = std::move(*gated);
      break;
    case ModelKind::cluster:
      if (!gated || !centroids) throw FormatError(path + ": cluster model without CLST/GATE blocks", meta_at);
      ck.model = ClusterAttnParams<T>{std::move(*centroids), std::move(*gated)};
      break;
  }
  return ck;
}

/// Model input dimension, for checks at the use site.
template <std::floating_point T>
std::size_t model_dim(const AnyModel<T>& model) {
  return std::visit([](const auto& m) { return m.head().weight.size(); }, model);
}

}  // namespace mhattnsurv
