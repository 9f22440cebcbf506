#pragma once

// Per-patch attention maps: repeated shuffled passes over a bag, softmax
// within groups of `group_size`, weights averaged over passes and rescaled
// by the group size so that uniform attention reads 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mhattnsurv/binary_io.hpp"
#include "mhattnsurv/data.hpp"
#include "mhattnsurv/errors.hpp"
#include "mhattnsurv/model.hpp"
#include "mhattnsurv/numerics.hpp"
#include "mhattnsurv/train.hpp"

namespace mhattnsurv {

struct AttentionMap {
  std::size_t patches = 0;
  std::size_t heads = 0;
  DenseMatrix weight;                   // heads x patches, rescaled
  std::vector<std::size_t> samples;     // times each patch was drawn
  std::vector<bool> full_groups_only;   // never landed in the short group
};

template <std::floating_point T>
AttentionMap attention_map(const ModelParams<T>& model, const Matrix<float>& bag, RngStream rng,
                           std::size_t passes = 10, std::size_t group_size = 32) {
  if (passes == 0 || group_size == 0) throw ConfigError("attention_map: passes and group_size must be >= 1");
  const std::size_t n = bag.rows(), h = model.heads;
  if (n == 0) throw DomainError("attention_map: bag has no patches");
  if (bag.cols() != model.dim())
    throw DimensionError("attention_map: bag d=" + std::to_string(bag.cols()) + " but model d=" +
                         std::to_string(model.dim()));
  AttentionMap out;
  out.patches = n;
  out.heads = h;
  out.weight = DenseMatrix(h, n);
  out.samples.assign(n, 0);
  out.full_groups_only.assign(n, true);
  std::vector<std::size_t> order(n);
  for (std::size_t p = 0; p < passes; ++p) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += group_size) {
      const std::size_t end = std::min(n, start + group_size);
      const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto tr = model.pool(gather_rows<T>(bag, rows));
      for (std::size_t k = 0; k < rows.size(); ++k) {
        ++out.samples[rows[k]];
        if (rows.size() != group_size) out.full_groups_only[rows[k]] = false;
        for (std::size_t c = 0; c < h; ++c) out.weight(c, rows[k]) += static_cast<double>(tr.attention(c, k));
      }
    }
  }
  const double scale = static_cast<double>(group_size);
  for (std::size_t c = 0; c < h; ++c)
    for (std::size_t j = 0; j < n; ++j)
      out.weight(c, j) = out.weight(c, j) / static_cast<double>(out.samples[j]) * scale;
  return out;
}

struct GridCoord {
  std::size_t row = 0;
  std::size_t col = 0;
};

/// CSV with header patch,row,col; every patch of the bag must appear once.
inline std::vector<GridCoord> read_coordinates(const std::string& path, std::size_t n) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open coordinates '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line.rfind("patch,row,col", 0) != 0) throw ConfigError(path + ": expected header 'patch,row,col'");
  std::vector<std::optional<GridCoord>> coords(n);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream s(line);
    std::string a, b, c;
    if (!std::getline(s, a, ',') || !std::getline(s, b, ',') || !std::getline(s, c))
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected 3 fields");
    std::size_t patch, row, col;
    try {
      patch = std::stoul(a);
      row = std::stoul(b);
      col = std::stoul(c);
    } catch (const std::exception&) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": malformed integer");
    }
    if (patch >= n) throw ConfigError(path + ":" + std::to_string(line_no) + ": patch index out of range");
    if (coords[patch]) throw ConfigError(path + ":" + std::to_string(line_no) + ": duplicate patch");
    coords[patch] = GridCoord{row, col};
  }
  std::vector<GridCoord> out;
  for (std::size_t j = 0; j < n; ++j) {
    if (!coords[j]) throw ConfigError(path + ": no coordinates for patch " + std::to_string(j));
    out.push_back(*coords[j]);
  }
  return out;
}

inline void write_attention_csv(const AttentionMap& map, const std::vector<GridCoord>* coords,
                                const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PathError("cannot open '" + path + "' for writing");
  out << "patch,row,col,head,weight\n";
  for (std::size_t j = 0; j < map.patches; ++j)
    for (std::size_t c = 0; c < map.heads; ++c) {
      out << j << ',';
      if (coords) out << (*coords)[j].row << ',' << (*coords)[j].col;
      else out << ',';
      out << ',' << c + 1 << ',' << format_real(map.weight(c, j)) << '\n';
    }
}

/// Gray level for a rescaled weight: [0, 2] maps linearly onto [0, 255].
inline std::uint8_t heat_level(double w) {
  const double t = std::clamp(w / 2.0, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(t * 255.0));
}

/// One P5 image of the slide grid; cells without a patch stay 0.
inline void write_heatmap_pgm(const AttentionMap& map, std::size_t head, const std::vector<GridCoord>& coords,
                              const std::string& path) {
  std::size_t rows = 0, cols = 0;
  for (const auto& c : coords) {
    rows = std::max(rows, c.row + 1);
    cols = std::max(cols, c.col + 1);
  }
  std::vector<std::uint8_t> pixels(rows * cols, 0);
  for (std::size_t j = 0; j < map.patches; ++j)
    pixels[coords[j].row * cols + coords[j].col] = heat_level(map.weight(head, j));
  auto out = binary::open_output(path);
  out << "P5\n" << cols << ' ' << rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace mhattnsurv
