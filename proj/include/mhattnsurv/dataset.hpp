#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mhattnsurv/errors.hpp"
#include "mhattnsurv/model.hpp"
#include "mhattnsurv/records.hpp"

namespace mhattnsurv {

/// Labels plus in-memory bags, index-aligned.
struct Dataset {
  std::string name;
  std::size_t dim = 0;
  std::vector<PatientRecord> patients;
  std::vector<EmbeddingBag<float>> bags;

  std::size_t size() const noexcept { return patients.size(); }

  void validate() const {
    if (patients.size() != bags.size())
      throw DimensionError("dataset: " + std::to_string(patients.size()) + " patients but " +
                           std::to_string(bags.size()) + " bags");
    for (std::size_t i = 0; i < patients.size(); ++i) {
      patients[i].validate();
      if (bags[i].n() == 0) throw DomainError("dataset: bag of " + patients[i].id + " is empty");
      if (bags[i].d() != dim)
        throw DimensionError("dataset: bag of " + patients[i].id + " has d=" +
                             std::to_string(bags[i].d()) + ", expected " + std::to_string(dim));
    }
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset out;
    out.name = name;
    out.dim = dim;
    out.patients.reserve(indices.size());
    out.bags.reserve(indices.size());
    for (auto i : indices) {
      out.patients.push_back(patients.at(i));
      out.bags.push_back(bags.at(i));
    }
    return out;
  }
};

}  // namespace mhattnsurv
