#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mhattnsurv/errors.hpp"

namespace mhattnsurv {

/// Follow-up time (years), event flag (1 = death observed, 0 = censored)
/// and the location of the patient's embedding bag.
struct PatientRecord {
  std::string id;
  double time = 0.0;
  int event = 0;
  std::string bag_path;

  void validate() const {
    if (!(time > 0.0) || !std::isfinite(time))
      throw DomainError("patient " + id + ": time must be a positive finite number");
    if (event != 0 && event != 1) throw DomainError("patient " + id + ": event must be 0 or 1");
  }
};

inline std::vector<double> times_of(const std::vector<PatientRecord>& records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.time);
  return out;
}

inline std::vector<int> events_of(const std::vector<PatientRecord>& records) {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.event);
  return out;
}

inline std::size_t count_events(const std::vector<PatientRecord>& records) {
  std::size_t n = 0;
  for (const auto& r : records) n += r.event != 0;
  return n;
}

}  // namespace mhattnsurv
