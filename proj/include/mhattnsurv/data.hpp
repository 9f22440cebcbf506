#pragma once

// Bag files, dataset manifests, label CSVs, the purple-pixel background
// filter and the planted-signal synthetic generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mhattnsurv/binary_io.hpp"
#include "mhattnsurv/dataset.hpp"
#include "mhattnsurv/errors.hpp"
#include "mhattnsurv/metrics.hpp"
#include "mhattnsurv/model.hpp"
#include "mhattnsurv/numerics.hpp"

namespace mhattnsurv {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Bag files: "MHBG", u32 version, u32 n, u32 d, n*d f32 row-major.

inline constexpr std::uint32_t kBagVersion = 1;
inline constexpr std::uint64_t kBagHeaderBytes = 16;

inline void write_bag(const EmbeddingBag<float>& bag, const std::string& path) {
  if (bag.n() == 0) throw DomainError("write_bag: bag " + bag.patient_id + " has no patches");
  if (bag.d() == 0) throw DomainError("write_bag: bag " + bag.patient_id + " has d = 0");
  auto out = binary::open_output(path);
  binary::put_tag(out, "MHBG");
  binary::put_u32(out, kBagVersion);
  binary::put_u32(out, static_cast<std::uint32_t>(bag.n()));
  binary::put_u32(out, static_cast<std::uint32_t>(bag.d()));
  for (float v : bag.features.values()) binary::put_f32(out, v);
  if (!out) throw PathError("write_bag: failed writing '" + path + "'");
}

struct BagHeader {
  std::uint32_t n = 0;
  std::uint32_t d = 0;
};

namespace detail {

inline BagHeader read_bag_header(binary::Reader& r) {
  r.expect_tag("MHBG", "bag magic");
  const auto version_at = r.offset();
  const auto version = r.u32("bag version");
  if (version != kBagVersion)
    throw FormatError(r.source() + ": unsupported bag version " + std::to_string(version), version_at);
  BagHeader h;
  const auto n_at = r.offset();
  h.n = r.u32("bag row count");
  h.d = r.u32("bag dimension");
  if (h.n == 0) throw FormatError(r.source() + ": bag has no patches", n_at);
  if (h.d == 0) throw FormatError(r.source() + ": bag dimension is zero", n_at + 4);
  return h;
}

}  // namespace detail

/// Reads a whole bag. When `expected_d` is given a mismatch is a format
/// error pointing at the dimension field.
inline EmbeddingBag<float> load_bag(const std::string& path,
                                    std::optional<std::size_t> expected_d = std::nullopt,
                                    std::string patient_id = {}) {
  auto in = binary::open_input(path);
  binary::Reader r(in, path);
  const auto h = detail::read_bag_header(r);
  if (expected_d && *expected_d != h.d)
    throw FormatError(path + ": bag dimension " + std::to_string(h.d) + " does not match expected " +
                          std::to_string(*expected_d),
                      12);
  std::vector<float> values(static_cast<std::size_t>(h.n) * h.d);
  for (auto& v : values) v = r.f32("bag values");
  if (!r.at_end()) throw FormatError(path + ": trailing bytes after bag values", r.offset());
  return {patient_id, Matrix<float>(h.n, h.d, std::move(values))};
}

/// Random access to rows of a bag file without loading it entirely.
class BagReader {
 public:
  explicit BagReader(const std::string& path) : path_(path), in_(binary::open_input(path)) {
    binary::Reader r(in_, path);
    header_ = detail::read_bag_header(r);
    in_.seekg(0, std::ios::end);
    const auto size = static_cast<std::uint64_t>(in_.tellg());
    const std::uint64_t expected = kBagHeaderBytes + 4ULL * header_.n * header_.d;
    if (size < expected)
      throw FormatError(path + ": truncated bag (" + std::to_string(size) + " of " +
                            std::to_string(expected) + " bytes)",
                        size);
  }

  std::size_t n() const noexcept { return header_.n; }
  std::size_t d() const noexcept { return header_.d; }

  std::vector<float> row(std::size_t i) {
    if (i >= header_.n) throw DomainError("BagReader: row " + std::to_string(i) + " out of range");
    const std::uint64_t at = kBagHeaderBytes + 4ULL * i * header_.d;
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(at));
    binary::Reader r(in_, path_);
    std::vector<float> out(header_.d);
    for (auto& v : out) v = r.f32("bag row");
    return out;
  }

  Matrix<float> rows(const std::vector<std::size_t>& indices) {
    Matrix<float> out(indices.size(), header_.d);
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const auto r = row(indices[k]);
      std::copy(r.begin(), r.end(), out.row(k).begin());
    }
    return out;
  }

 private:
  std::string path_;
  std::ifstream in_;
  BagHeader header_;
};

// ---------------------------------------------------------------------------
// Manifest and labels

inline constexpr int kManifestVersion = 1;

struct ManifestEntry {
  std::string id;
  double time = 0.0;
  int event = 0;
  std::string bag;  // relative to the manifest directory
  std::size_t n_patches = 0;
};

struct DatasetManifest {
  std::string name;
  std::size_t dim = 0;
  int format_version = kManifestVersion;
  std::vector<ManifestEntry> patients;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["format_version"] = m.format_version;
  j["name"] = m.name;
  j["dim"] = m.dim;
  auto& arr = j["patients"] = nlohmann::json::array();
  for (const auto& p : m.patients)
    arr.push_back({{"id", p.id}, {"time", p.time}, {"event", p.event}, {"bag", p.bag},
                   {"n_patches", p.n_patches}});
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kManifestVersion)
      throw ConfigError("manifest: unsupported format_version " + std::to_string(m.format_version));
    m.name = j.at("name").get<std::string>();
    m.dim = j.at("dim").get<std::size_t>();
    for (const auto& p : j.at("patients")) {
      ManifestEntry e;
      e.id = p.at("id").get<std::string>();
      e.time = p.at("time").get<double>();
      e.event = p.at("event").get<int>();
      e.bag = p.at("bag").get<std::string>();
      e.n_patches = p.at("n_patches").get<std::size_t>();
      m.patients.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("manifest: ") + ex.what());
  }
  if (m.dim == 0) throw ConfigError("manifest: dim must be >= 1");
  for (const auto& p : m.patients) {
    if (!(p.time > 0.0)) throw ConfigError("manifest: patient " + p.id + " has non-positive time");
    if (p.event != 0 && p.event != 1) throw ConfigError("manifest: patient " + p.id + " event not 0/1");
  }
  return m;
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open manifest '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError("manifest '" + path + "': " + ex.what());
  }
  return manifest_from_json(j);
}

inline std::string format_real(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

inline void write_labels_csv(const std::vector<PatientRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw PathError("cannot open '" + path + "' for writing");
  out << "id,time,event\n";
  for (const auto& r : records) out << r.id << ',' << format_real(r.time) << ',' << r.event << '\n';
}

inline std::vector<PatientRecord> read_labels_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open labels '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line.rfind("id,time,event", 0) != 0) throw ConfigError(path + ": expected header 'id,time,event'");
  std::vector<PatientRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream s(line);
    PatientRecord r;
    std::string time, event;
    if (!std::getline(s, r.id, ',') || !std::getline(s, time, ',') || !std::getline(s, event))
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected 3 fields");
    try {
      r.time = std::stod(time);
      r.event = std::stoi(event);
    } catch (const std::exception&) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": malformed number");
    }
    r.validate();
    out.push_back(std::move(r));
  }
  return out;
}

/// Loads every bag named by the manifest and checks declared counts and d.
inline Dataset load_dataset(const std::string& manifest_path) {
  const auto manifest = read_manifest(manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();
  Dataset data;
  data.name = manifest.name;
  data.dim = manifest.dim;
  for (const auto& e : manifest.patients) {
    const auto bag_path = (root / e.bag).string();
    if (!fs::exists(bag_path)) throw PathError("bag file '" + bag_path + "' does not exist");
    auto bag = load_bag(bag_path, manifest.dim, e.id);
    if (bag.n() != e.n_patches)
      throw FormatError(bag_path + ": bag has " + std::to_string(bag.n()) +
                            " patches, manifest declares " + std::to_string(e.n_patches),
                        8);
    data.patients.push_back({e.id, e.time, e.event, bag_path});
    data.bags.push_back(std::move(bag));
  }
  data.validate();
  return data;
}

/// Writes bags/<id>.mhbg, manifest.json and labels.csv under `dir`.
inline void write_dataset(const Dataset& data, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "bags");
  DatasetManifest m;
  m.name = data.name;
  m.dim = data.dim;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& p = data.patients[i];
    const std::string rel = "bags/" + p.id + ".mhbg";
    write_bag(data.bags[i], (fs::path(dir) / rel).string());
    m.patients.push_back({p.id, p.time, p.event, rel, data.bags[i].n()});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << to_json(m).dump(2) << '\n';
  write_labels_csv(data.patients, (fs::path(dir) / "labels.csv").string());
}

// ---------------------------------------------------------------------------
// Background filter

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // RGB interleaved, row-major
};

/// Binary PPM (P6) with maxval 255.
inline RgbImage read_ppm(const std::string& path) {
  auto in = binary::open_input(path);
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t.push_back(c);
        break;
      }
    }
    while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    return t;
  };
  if (token() != "P6") throw FormatError(path + ": not a binary PPM (P6)", 0);
  RgbImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255)
      throw FormatError(path + ": only maxval 255 is supported", static_cast<std::uint64_t>(in.tellg()));
  } catch (const std::logic_error&) {
    throw FormatError(path + ": malformed PPM header", 0);
  }
  const auto start = static_cast<std::uint64_t>(in.tellg());
  img.pixels.resize(img.width * img.height * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size())
    throw FormatError(path + ": truncated pixel data", start + static_cast<std::uint64_t>(in.gcount()));
  return img;
}

inline void write_ppm(const RgbImage& img, const std::string& path) {
  auto out = binary::open_output(path);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

struct PurpleRule {
  int margin = 16;                  // R and B must exceed G by this much
  std::size_t min_purple = 100;     // keep iff count >= this
  std::size_t patch_size = 224;
};

struct FilterResult {
  bool keep = false;
  std::size_t purple_count = 0;
};

inline FilterResult filter_background_patch(const RgbImage& img, const PurpleRule& rule = {}) {
  if (img.width != rule.patch_size || img.height != rule.patch_size ||
      img.pixels.size() != img.width * img.height * 3)
    throw DomainError("filter_background_patch: expected a " + std::to_string(rule.patch_size) + "x" +
                      std::to_string(rule.patch_size) + " RGB raster, got " + std::to_string(img.width) +
                      "x" + std::to_string(img.height));
  FilterResult r;
  for (std::size_t p = 0; p < img.pixels.size(); p += 3) {
    const int red = img.pixels[p], green = img.pixels[p + 1], blue = img.pixels[p + 2];
    if (red >= green + rule.margin && blue >= green + rule.margin) ++r.purple_count;
  }
  r.keep = r.purple_count >= rule.min_purple;
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// Patches come from isotropic Gaussian components. The signal component
/// sits at `signal_shift` on axis 0. Background components sit at
/// `background_level` on axis 0 and, beyond the first, in +/- pairs at
/// `background_spread` on axes 1, 2, ... Each patient's background patches
/// share an extra axis-0 shift of -U(0, background_shift_range), pushing
/// them away from the signal component.
struct SyntheticConfig {
  std::string name = "synthetic";
  std::size_t patients = 400;
  std::size_t min_patches = 64;
  std::size_t max_patches = 64;
  std::size_t dim = 32;
  std::size_t components = 2;
  std::size_t signal_component = 0;
  double prevalence_low = 0.0;
  double prevalence_high = 0.3;
  double beta = 3.0;
  double baseline_hazard = 0.1;
  double censoring_rate = 0.03;
  double signal_shift = 1.0;
  double background_level = -1.0;
  double background_spread = 1.0;
  double background_shift_range = 8.0;
  double noise_sd = 0.2;
  std::uint64_t seed = 42;

  void validate() const {
    if (patients < 1) throw ConfigError("synthetic: patients must be >= 1");
    if (min_patches < 1 || max_patches < min_patches)
      throw ConfigError("synthetic: need 1 <= min_patches <= max_patches");
    if (dim < 1) throw ConfigError("synthetic: dim must be >= 1");
    if (components < 2) throw ConfigError("synthetic: need a signal and at least one background component");
    if (signal_component >= components) throw ConfigError("synthetic: signal_component out of range");
    if ((components - 1) / 2 + 1 > dim)
      throw ConfigError("synthetic: dim too small for the background component layout");
    if (!(prevalence_low >= 0.0 && prevalence_high <= 1.0 && prevalence_low <= prevalence_high))
      throw ConfigError("synthetic: prevalence range must lie in [0, 1]");
    if (!(baseline_hazard > 0.0)) throw ConfigError("synthetic: baseline_hazard must be > 0");
    if (!(censoring_rate >= 0.0)) throw ConfigError("synthetic: censoring_rate must be >= 0");
    if (!(noise_sd >= 0.0)) throw ConfigError("synthetic: noise_sd must be >= 0");
    if (!(background_shift_range >= 0.0)) throw ConfigError("synthetic: background_shift_range must be >= 0");
  }

  /// Component means, row g = component g.
  DenseMatrix component_means() const {
    DenseMatrix means(components, dim);
    std::size_t b = 0;
    for (std::size_t g = 0; g < components; ++g) {
      if (g == signal_component) {
        means(g, 0) = signal_shift;
        continue;
      }
      means(g, 0) = background_level;
      if (b > 0) means(g, 1 + (b - 1) / 2) = ((b - 1) % 2 == 0 ? 1.0 : -1.0) * background_spread;
      ++b;
    }
    return means;
  }
};

struct SyntheticDataset {
  Dataset data;
  std::vector<double> latent_risk;  // z_i = signal prevalence
  double oracle_cindex = std::nan("");
  std::vector<std::string> warnings;
};

inline SyntheticDataset generate_synthetic(const SyntheticConfig& config) {
  config.validate();
  SyntheticDataset out;
  out.data.name = config.name;
  out.data.dim = config.dim;
  const auto means = config.component_means();
  // Background components are taken in +/- pairs; an unpaired trailing one
  // would shift the background mean, so it sits at background_level only.
  std::vector<std::size_t> background;
  for (std::size_t g = 0; g < config.components; ++g)
    if (g != config.signal_component) background.push_back(g);
  if (config.signal_shift == config.background_level && config.components == 2)
    out.warnings.push_back("signal component coincides with the background component");

  const RngStream root(config.seed, "synth");
  const int width = static_cast<int>(std::to_string(config.patients - 1).size());
  for (std::size_t i = 0; i < config.patients; ++i) {
    auto rng = root.child("patient", i);
    const double prevalence = rng.uniform(config.prevalence_low, config.prevalence_high);
    const std::size_t n =
        config.min_patches + rng.uniform_index(config.max_patches - config.min_patches + 1);
    const double shift = -rng.uniform(0.0, config.background_shift_range);
    Matrix<float> x(n, config.dim);
    for (std::size_t j = 0; j < n; ++j) {
      const bool signal = rng.bernoulli(prevalence);
      const std::size_t g = signal ? config.signal_component : background[rng.uniform_index(background.size())];
      for (std::size_t m = 0; m < config.dim; ++m) {
        double v = means(g, m) + rng.normal(0.0, config.noise_sd);
        if (!signal && m == 0) v += shift;
        x(j, m) = static_cast<float>(v);
      }
    }
    const double hazard = config.baseline_hazard * std::exp(config.beta * prevalence);
    const double death = rng.exponential(hazard);
    const double censor = config.censoring_rate > 0.0 ? rng.exponential(config.censoring_rate)
                                                      : std::numeric_limits<double>::infinity();
    std::ostringstream id;
    id << "P" << std::setw(width) << std::setfill('0') << i;
    PatientRecord rec{id.str(), std::min(death, censor), death <= censor ? 1 : 0, {}};
    out.data.patients.push_back(rec);
    out.data.bags.push_back({rec.id, std::move(x)});
    out.latent_risk.push_back(prevalence);
  }
  const auto counts = concordance_counts(out.latent_risk, times_of(out.data.patients),
                                         events_of(out.data.patients));
  if (counts.comparable > 0) out.oracle_cindex = counts.value();
  return out;
}

}  // namespace mhattnsurv
