#pragma once

// Strict JSON configuration: every key must be known, types are checked,
// and the resolved values (defaults filled in) serialize back to JSON.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhattnsurv/cv.hpp"
#include "mhattnsurv/data.hpp"
#include "mhattnsurv/errors.hpp"
#include "mhattnsurv/train.hpp"

namespace mhattnsurv {

/// Unknown keys, with dotted paths.
class SchemaError : public ConfigError {
 public:
  explicit SchemaError(std::vector<std::string> keys)
      : ConfigError("unknown config keys: " + join(keys)), keys_(std::move(keys)) {}
  const std::vector<std::string>& keys() const noexcept { return keys_; }

 private:
  static std::string join(const std::vector<std::string>& keys) {
    std::string out;
    for (const auto& k : keys) out += (out.empty() ? "" : ", ") + k;
    return out;
  }
  std::vector<std::string> keys_;
};

/// Reads keys from one JSON object and remembers which were consumed.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string prefix = {}) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw ConfigError(where("") + "expected a JSON object");
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    return has(key) ? convert<T>(key) : fallback;
  }

  /// Missing keys are reported by finish(), after unknown keys.
  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) {
      missing_.push_back(prefix_ + key);
      return T{};
    }
    return convert<T>(key);
  }

  template <typename T>
  std::optional<T> optional(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return convert<T>(key);
  }

  /// Nested object; absent keys yield an empty object.
  ConfigReader& child(const std::string& key) {
    used_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    const auto& sub = j_.contains(key) ? j_.at(key) : empty;
    if (!sub.is_object()) throw ConfigError("config key '" + prefix_ + key + "': expected an object");
    return children_.try_emplace(key, sub, prefix_ + key + ".").first->second;
  }

  /// Appends dotted names of keys that were never consumed.
  void unknown_keys(std::vector<std::string>& out) const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) out.push_back(prefix_ + it.key());
    for (const auto& [k, c] : children_) c.unknown_keys(out);
  }

  /// Throws SchemaError when any key was not consumed, then ConfigError
  /// for the first missing required key.
  void finish() const {
    std::vector<std::string> unknown;
    unknown_keys(unknown);
    std::sort(unknown.begin(), unknown.end());
    if (!unknown.empty()) throw SchemaError(std::move(unknown));
    std::vector<std::string> missing;
    missing_keys(missing);
    if (!missing.empty()) throw ConfigError("missing required config key '" + missing.front() + "'");
  }

 private:
  std::string where(const std::string& key) const {
    return "config key '" + prefix_ + key + "': ";
  }

  template <typename T>
  T convert(const std::string& key) {
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where(key) + "expected a boolean");
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(where(key) + "expected a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(where(key) + "expected an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where(key) + "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where(key) + "expected a string");
    }
    try {
      return v.get<T>();
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError(where(key) + ex.what());
    }
  }

  void missing_keys(std::vector<std::string>& out) const {
    out.insert(out.end(), missing_.begin(), missing_.end());
    for (const auto& [k, c] : children_) c.missing_keys(out);
  }

  const nlohmann::json& j_;
  std::string prefix_;
  std::set<std::string> used_;
  std::vector<std::string> missing_;
  std::map<std::string, ConfigReader> children_;
};

// ---------------------------------------------------------------------------
// Section readers and writers

inline TrainConfig read_train_config(ConfigReader& r, TrainConfig c = {}) {
  c.patches_per_patient = r.get("patches_per_patient", c.patches_per_patient);
  c.patients_per_batch = r.get("patients_per_batch", c.patients_per_batch);
  c.base_lr = r.get("base_lr", c.base_lr);
  c.schedule_period = r.get("schedule_period", c.schedule_period);
  c.max_epochs = r.get("max_epochs", c.max_epochs);
  c.eval_every = r.get("eval_every", c.eval_every);
  c.val_patches = r.get("val_patches", c.val_patches);
  c.test_patches = r.get("test_patches", c.test_patches);
  c.feature_dropout_rate = r.get("feature_dropout_rate", c.feature_dropout_rate);
  c.key_dropout_rate = r.get("key_dropout_rate", c.key_dropout_rate);
  c.heads = r.get("heads", c.heads);
  c.gated_hidden = r.get("gated_hidden", c.gated_hidden);
  c.clusters = r.get("clusters", c.clusters);
  c.patience = r.get("patience", c.patience);
  const auto precision = r.get<std::string>("precision", c.precision == Precision::f32 ? "f32" : "f64");
  if (precision == "f32") c.precision = Precision::f32;
  else if (precision == "f64") c.precision = Precision::f64;
  else throw ConfigError("config key 'precision': expected \"f32\" or \"f64\"");
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"patches_per_patient", c.patches_per_patient},
          {"patients_per_batch", c.patients_per_batch},
          {"base_lr", c.base_lr},
          {"schedule_period", c.schedule_period},
          {"max_epochs", c.max_epochs},
          {"eval_every", c.eval_every},
          {"val_patches", c.val_patches},
          {"test_patches", c.test_patches},
          {"feature_dropout_rate", c.feature_dropout_rate},
          {"key_dropout_rate", c.key_dropout_rate},
          {"heads", c.heads},
          {"gated_hidden", c.gated_hidden},
          {"clusters", c.clusters},
          {"patience", c.patience},
          {"precision", c.precision == Precision::f32 ? "f32" : "f64"}};
}

inline SyntheticConfig read_synthetic_config(ConfigReader& r, SyntheticConfig c = {}) {
  c.name = r.get("name", c.name);
  c.patients = r.get("patients", c.patients);
  c.min_patches = r.get("min_patches", c.min_patches);
  c.max_patches = r.get("max_patches", c.max_patches);
  c.dim = r.get("dim", c.dim);
  c.components = r.get("components", c.components);
  c.signal_component = r.get("signal_component", c.signal_component);
  c.prevalence_low = r.get("prevalence_low", c.prevalence_low);
  c.prevalence_high = r.get("prevalence_high", c.prevalence_high);
  c.beta = r.get("beta", c.beta);
  c.baseline_hazard = r.get("baseline_hazard", c.baseline_hazard);
  c.censoring_rate = r.get("censoring_rate", c.censoring_rate);
  c.signal_shift = r.get("signal_shift", c.signal_shift);
  c.background_level = r.get("background_level", c.background_level);
  c.background_spread = r.get("background_spread", c.background_spread);
  c.background_shift_range = r.get("background_shift_range", c.background_shift_range);
  c.noise_sd = r.get("noise_sd", c.noise_sd);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const SyntheticConfig& c) {
  return {{"name", c.name},
          {"patients", c.patients},
          {"min_patches", c.min_patches},
          {"max_patches", c.max_patches},
          {"dim", c.dim},
          {"components", c.components},
          {"signal_component", c.signal_component},
          {"prevalence_low", c.prevalence_low},
          {"prevalence_high", c.prevalence_high},
          {"beta", c.beta},
          {"baseline_hazard", c.baseline_hazard},
          {"censoring_rate", c.censoring_rate},
          {"signal_shift", c.signal_shift},
          {"background_level", c.background_level},
          {"background_spread", c.background_spread},
          {"background_shift_range", c.background_shift_range},
          {"noise_sd", c.noise_sd}};
}

inline GridSpec read_grid(ConfigReader& r, GridSpec g = {}) {
  g.dropout_rates = r.get("dropout_rates", g.dropout_rates);
  g.head_counts = r.get("head_counts", g.head_counts);
  g.validate();
  return g;
}

inline nlohmann::json to_json(const GridSpec& g) {
  return {{"dropout_rates", g.dropout_rates}, {"head_counts", g.head_counts}};
}

}  // namespace mhattnsurv
