// mhattnsurv command-line tool.
//
//   mhattnsurv <synth|train|eval|cv|ablate|attnmap|filter-patches>
//              [--config FILE] [--seed N] [--threads N] [--out DIR]
//
// Errors are printed to stderr as one JSON line and the exit code is
// nonzero: 2 configuration, 3 path, 4 file format, 5 domain/numeric,
// 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mhattnsurv/attnmap.hpp"
#include "mhattnsurv/checkpoint.hpp"
#include "mhattnsurv/config.hpp"
#include "mhattnsurv/cv.hpp"
#include "mhattnsurv/data.hpp"
#include "mhattnsurv/eval.hpp"
#include "mhattnsurv/train.hpp"

namespace fs = std::filesystem;
using namespace mhattnsurv;
using nlohmann::json;

namespace {

struct Globals {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::optional<std::string> out;
};

struct Context {
  Globals g;
  json config = json::object();
  fs::path base;  // directory relative config paths resolve against
  std::uint64_t seed = 0;
  fs::path out;
};

std::string resolve(const Context& ctx, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : fs::absolute(ctx.base / path)).lexically_normal().string();
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw PathError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
}

/// Reads the top-level keys shared by every command. "command" lets an
/// effective_config.json be fed back in unchanged.
ConfigReader& common(Context& ctx, ConfigReader& r) {
  if (const auto cmd = r.optional<std::string>("command"); cmd && *cmd != ctx.g.command)
    throw ConfigError("config was written for '" + *cmd + "', not '" + ctx.g.command + "'");
  ctx.seed = ctx.g.seed ? *ctx.g.seed : r.get<std::uint64_t>("seed", 0);
  const auto out_key = r.optional<std::string>("out");
  if (ctx.g.out) ctx.out = fs::absolute(*ctx.g.out);
  else if (out_key) ctx.out = resolve(ctx, *out_key);
  else ctx.out = fs::absolute("mhattnsurv_out");
  return r;
}

void finish(Context& ctx, ConfigReader& r, json effective) {
  r.finish();
  effective["command"] = ctx.g.command;
  effective["seed"] = ctx.seed;
  fs::create_directories(ctx.out);
  write_json(ctx.out / "effective_config.json", effective);
}

// ---------------------------------------------------------------------------

int cmd_synth(Context& ctx, ConfigReader& r) {
  common(ctx, r);
  auto cfg = read_synthetic_config(r.child("synthetic"));
  cfg.seed = ctx.seed;
  finish(ctx, r, {{"synthetic", to_json(cfg)}});
  const auto syn = generate_synthetic(cfg);
  write_dataset(syn.data, ctx.out.string());
  std::ofstream z(ctx.out / "latent_risk.csv");
  z << "id,z\n";
  for (std::size_t i = 0; i < syn.data.size(); ++i)
    z << syn.data.patients[i].id << ',' << format_real(syn.latent_risk[i]) << '\n';
  write_json(ctx.out / "oracle.json",
             {{"oracle_cindex", json_real(syn.oracle_cindex)},
              {"patients", syn.data.size()},
              {"events", count_events(syn.data.patients)},
              {"warnings", syn.warnings}});
  for (const auto& w : syn.warnings) std::cerr << "{\"warning\":" << json(w).dump() << "}\n";
  return 0;
}

void write_history(const std::vector<HistoryRow>& history, const fs::path& path) {
  std::ofstream out(path);
  out << "epoch,step,lr,train_loss,val_cindex,skipped_batches\n";
  for (const auto& h : history)
    out << h.epoch << ',' << h.step << ',' << format_real(h.lr) << ',' << csv_real(h.train_loss) << ','
        << csv_real(h.val_cindex) << ',' << h.skipped_batches << '\n';
}

int cmd_train(Context& ctx, ConfigReader& r) {
  common(ctx, r);
  const auto dataset = resolve(ctx, r.require<std::string>("dataset"));
  const auto val_dataset = r.optional<std::string>("val_dataset");
  const auto val_folds = r.get<std::size_t>("val_folds", 5);
  const auto kind = parse_model_kind(r.get<std::string>("model", "mhattn"));
  auto train_cfg = read_train_config(r.child("train"));
  train_cfg.seed = ctx.seed;
  json effective{{"dataset", dataset}, {"model", to_string(kind)}, {"train", to_json(train_cfg)}};
  if (val_dataset) effective["val_dataset"] = resolve(ctx, *val_dataset);
  else effective["val_folds"] = val_folds;
  finish(ctx, r, effective);

  const auto data = load_dataset(dataset);
  Dataset train_set, val_set;
  if (val_dataset) {
    train_set = data;
    val_set = load_dataset(resolve(ctx, *val_dataset));
  } else if (val_folds == 0) {
    train_set = data;
    val_set = data.subset({});
  } else {
    const auto folds = stratified_kfold(data.patients, val_folds, RngStream(ctx.seed, "split").child("validation"));
    Fold train_idx;
    for (std::size_t k = 1; k < folds.size(); ++k) train_idx.insert(train_idx.end(), folds[k].begin(), folds[k].end());
    std::sort(train_idx.begin(), train_idx.end());
    train_set = data.subset(train_idx);
    val_set = data.subset(folds[0]);
  }
  json split{{"train", json::array()}, {"validation", json::array()}};
  for (const auto& p : train_set.patients) split["train"].push_back(p.id);
  for (const auto& p : val_set.patients) split["validation"].push_back(p.id);
  write_json(ctx.out / "split.json", split);

  const auto result = train_kind(kind, train_set, val_set, train_cfg);
  write_history(result.history, ctx.out / "history.csv");
  CheckpointMeta meta{ctx.seed, config_hash(effective), result.best_val_cindex, result.steps, to_string(kind),
                      result.best_epoch};
  save_checkpoint<double>((ctx.out / "checkpoint.mhck").string(), result.best, meta, &result.optimizer);
  return 0;
}

std::vector<double> read_predictions(const std::string& path, const std::vector<PatientRecord>& labels) {
  std::ifstream in(path);
  if (!in) throw PathError("cannot open predictions '" + path + "'");
  std::string line;
  std::getline(in, line);
  std::map<std::string, double> by_id;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ConfigError(path + ": expected id,risk rows");
    try {
      by_id[line.substr(0, comma)] = std::stod(line.substr(line.rfind(',') + 1));
    } catch (const std::exception&) {
      throw ConfigError(path + ": malformed risk for '" + line.substr(0, comma) + "'");
    }
  }
  std::vector<double> out;
  for (const auto& p : labels) {
    const auto it = by_id.find(p.id);
    if (it == by_id.end()) throw ConfigError(path + ": no prediction for patient '" + p.id + "'");
    out.push_back(it->second);
  }
  return out;
}

int cmd_eval(Context& ctx, ConfigReader& r) {
  common(ctx, r);
  const auto dataset = resolve(ctx, r.require<std::string>("dataset"));
  const auto checkpoint = r.optional<std::string>("checkpoint");
  const auto predictions = r.optional<std::string>("predictions");
  const auto test_patches = r.get<std::size_t>("test_patches", 1000);
  const auto horizons = r.get<std::vector<double>>("horizons", {1, 2, 3, 4, 5});
  const auto heads = r.get<bool>("head_analysis", true);
  json effective{{"dataset", dataset}, {"test_patches", test_patches}, {"horizons", horizons},
                 {"head_analysis", heads}};
  if (checkpoint) effective["checkpoint"] = resolve(ctx, *checkpoint);
  if (predictions) effective["predictions"] = resolve(ctx, *predictions);
  r.finish();
  if (checkpoint.has_value() == predictions.has_value())
    throw ConfigError("eval: exactly one of 'checkpoint' or 'predictions' is required");
  if (test_patches == 0) throw ConfigError("config key 'test_patches': must be >= 1");
  finish(ctx, r, effective);

  const auto data = load_dataset(dataset);
  std::vector<double> risk;
  std::optional<Checkpoint<double>> ck;
  if (checkpoint) {
    ck = load_checkpoint<double>(resolve(ctx, *checkpoint));
    if (model_dim(ck->model) != data.dim)
      throw DimensionError("checkpoint d=" + std::to_string(model_dim(ck->model)) + " but dataset d=" +
                           std::to_string(data.dim));
    risk = predict_sampled(ck->model, data, test_patches, ctx.seed, "test");
  } else {
    risk = read_predictions(resolve(ctx, *predictions), data.patients);
  }
  const auto report = evaluate_predictions(risk, data.patients, horizons);
  write_eval_report(report, ctx.out.string());
  {
    std::ofstream out(ctx.out / "predictions.csv");
    out << "id,risk,tertile\n";
    for (std::size_t i = 0; i < data.size(); ++i)
      out << data.patients[i].id << ',' << format_real(risk[i]) << ','
          << (report.groups.empty() ? "" : to_string(report.groups[i])) << '\n';
  }
  if (ck && heads)
    if (const auto* mh = std::get_if<ModelParams<double>>(&ck->model)) {
      const auto hw = headwise_cindex(*mh, data, test_patches, ctx.seed, "test");
      std::ofstream out(ctx.out / "headwise_cindex.csv");
      out << "head,cindex\n";
      for (std::size_t c = 0; c < hw.per_head.size(); ++c) out << 'H' << c + 1 << ',' << format_real(hw.per_head[c]) << '\n';
      out << "all," << format_real(hw.all_heads) << '\n';
      const auto corr = head_correlations(*mh, data);
      write_matrix_csv(corr.attention, (ctx.out / "head_corr_attention.csv").string());
      write_matrix_csv(corr.patch_risk, (ctx.out / "head_corr_patch_risk.csv").string());
    }
  return 0;
}

struct CVSetup {
  Dataset data;
  TrainConfig train;
  GridSpec grid;
  FoldPlan plan;
};

CVSetup read_cv_setup(Context& ctx, ConfigReader& r, json& effective, bool want_heads) {
  common(ctx, r);
  const auto dataset = resolve(ctx, r.require<std::string>("dataset"));
  const auto plan_path = r.optional<std::string>("fold_plan");
  auto& folds = r.child("folds");
  const auto outer = folds.get<std::size_t>("outer", 5);
  const auto inner = folds.get<std::size_t>("inner", 4);
  CVSetup s;
  s.train = read_train_config(r.child("train"));
  s.train.seed = ctx.seed;
  s.grid = read_grid(r.child("grid"));
  effective["dataset"] = dataset;
  effective["train"] = to_json(s.train);
  effective["grid"] = want_heads ? to_json(s.grid) : json{{"dropout_rates", s.grid.dropout_rates}};
  effective["folds"] = {{"outer", outer}, {"inner", inner}};
  if (plan_path) effective["fold_plan"] = resolve(ctx, *plan_path);
  finish(ctx, r, effective);
  s.data = load_dataset(dataset);
  if (plan_path) {
    std::ifstream in(resolve(ctx, *plan_path));
    if (!in) throw PathError("cannot open fold plan '" + resolve(ctx, *plan_path) + "'");
    json j;
    try {
      in >> j;
    } catch (const json::exception& ex) {
      throw ConfigError(std::string("fold plan: ") + ex.what());
    }
    s.plan = fold_plan_from_json(j, s.data.patients);
  } else {
    s.plan = make_fold_plan(s.data.patients, ctx.seed, outer, inner);
  }
  write_json(ctx.out / "fold_plan.json", to_json(s.plan));
  return s;
}

int cmd_cv(Context& ctx, ConfigReader& r) {
  const auto kind = parse_model_kind(r.get<std::string>("model", "mhattn"));
  json effective{{"model", to_string(kind)}};
  auto s = read_cv_setup(ctx, r, effective, false);
  const auto report = nested_cv(s.data, s.grid, s.train, kind, s.plan, ctx.g.threads);
  write_json(ctx.out / "cv_report.json", to_json(report));
  write_cv_folds_csv(report, (ctx.out / "cv_folds.csv").string());
  write_predictions_csv(report, (ctx.out / "predictions.csv").string());
  return 0;
}

int cmd_ablate(Context& ctx, ConfigReader& r) {
  json effective = json::object();
  auto s = read_cv_setup(ctx, r, effective, true);
  std::vector<CVReport> reports;
  const auto rows = ablation_runner(s.data, s.grid, s.train, s.plan, ctx.g.threads, &reports);
  write_ablation_csv(rows, (ctx.out / "ablation.csv").string());
  json j = json::array();
  for (const auto& rep : reports) j.push_back(to_json(rep));
  write_json(ctx.out / "ablation_reports.json", j);
  return 0;
}

int cmd_attnmap(Context& ctx, ConfigReader& r) {
  common(ctx, r);
  const auto checkpoint = resolve(ctx, r.require<std::string>("checkpoint"));
  const auto bag_path = resolve(ctx, r.require<std::string>("bag"));
  const auto coords_path = r.optional<std::string>("coordinates");
  const auto passes = r.get<std::size_t>("passes", 10);
  const auto group = r.get<std::size_t>("group_size", 32);
  const auto images = r.get<bool>("images", true);
  json effective{{"checkpoint", checkpoint}, {"bag", bag_path}, {"passes", passes}, {"group_size", group},
                 {"images", images}};
  if (coords_path) effective["coordinates"] = resolve(ctx, *coords_path);
  finish(ctx, r, effective);

  const auto ck = load_checkpoint<double>(checkpoint);
  const auto* model = std::get_if<ModelParams<double>>(&ck.model);
  if (!model) throw UsageError("attnmap: checkpoint holds a " + ck.meta.model + " model, not mhattn");
  const auto bag = load_bag(bag_path, model->dim());
  const auto map = attention_map(*model, bag.features, RngStream(ctx.seed, "sample").child("attnmap"), passes, group);
  std::optional<std::vector<GridCoord>> coords;
  if (coords_path) coords = read_coordinates(resolve(ctx, *coords_path), bag.n());
  write_attention_csv(map, coords ? &*coords : nullptr, (ctx.out / "attention.csv").string());
  if (images) {
    if (!coords) throw UsageError("attnmap: heatmap images need 'coordinates' (attention.csv was written)");
    for (std::size_t c = 0; c < map.heads; ++c)
      write_heatmap_pgm(map, c, *coords, (ctx.out / ("head_" + std::to_string(c + 1) + ".pgm")).string());
  }
  return 0;
}

int cmd_filter(Context& ctx, ConfigReader& r) {
  common(ctx, r);
  auto patches = r.get<std::vector<std::string>>("patches", {});
  const auto directory = r.optional<std::string>("directory");
  PurpleRule rule;
  rule.margin = r.get("margin", rule.margin);
  rule.min_purple = r.get("min_purple", rule.min_purple);
  rule.patch_size = r.get("patch_size", rule.patch_size);
  r.finish();
  for (auto& p : patches) p = resolve(ctx, p);
  if (directory) {
    const auto dir = resolve(ctx, *directory);
    if (!fs::is_directory(dir)) throw PathError("patch directory '" + dir + "' does not exist");
    std::vector<std::string> found;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".ppm") found.push_back(e.path().string());
    std::sort(found.begin(), found.end());
    patches.insert(patches.end(), found.begin(), found.end());
  }
  json effective{{"patches", patches}, {"margin", rule.margin}, {"min_purple", rule.min_purple},
                 {"patch_size", rule.patch_size}};
  if (patches.empty()) throw ConfigError("filter-patches: no 'patches' or 'directory' given");
  finish(ctx, r, effective);
  std::ofstream out(ctx.out / "filter.csv");
  out << "path,purple_count,keep\n";
  for (const auto& p : patches) {
    const auto res = filter_background_patch(read_ppm(p), rule);
    out << p << ',' << res.purple_count << ',' << (res.keep ? 1 : 0) << '\n';
  }
  return 0;
}

struct Failure {
  int code;
  const char* kind;
};

Failure classify(const std::exception& ex) {
  if (dynamic_cast<const SchemaError*>(&ex)) return {2, "schema"};
  if (dynamic_cast<const ConfigError*>(&ex)) return {2, "config"};
  if (dynamic_cast<const PathError*>(&ex)) return {3, "path"};
  if (dynamic_cast<const FormatError*>(&ex)) return {4, "format"};
  if (dynamic_cast<const DimensionError*>(&ex)) return {5, "dimension"};
  if (dynamic_cast<const DomainError*>(&ex)) return {5, "domain"};
  if (dynamic_cast<const NumericError*>(&ex)) return {5, "numeric"};
  if (dynamic_cast<const UsageError*>(&ex)) return {2, "usage"};
  if (dynamic_cast<const fs::filesystem_error*>(&ex)) return {3, "path"};
  return {1, "internal"};
}

int report_error(const std::string& kind, const std::string& message, int code,
                 const std::vector<std::string>& keys = {}) {
  json j{{"error", kind}, {"message", message}};
  if (!keys.empty()) j["keys"] = keys;
  std::cerr << j.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  Globals g;
  CLI::App app{"Multi-head attention MIL survival models"};
  app.require_subcommand(1, 1);
  app.option_defaults()->always_capture_default();
  const std::vector<std::string> commands{"synth", "train", "eval", "cv", "ablate", "attnmap", "filter-patches"};
  for (const auto& name : commands) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", g.config_path, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", g.seed, "Seed (overrides the config)");
    sub->add_option("--threads", g.threads, "Worker threads; 1 is bit-deterministic")->check(CLI::PositiveNumber);
    sub->add_option("--out", g.out, "Output directory (overrides the config)");
    sub->callback([&g, name] { g.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    return report_error(dynamic_cast<const CLI::ValidationError*>(&e) ? "path" : "usage", msg,
                        dynamic_cast<const CLI::ValidationError*>(&e) ? 3 : 2);
  }

  try {
    Context ctx;
    ctx.g = g;
    ctx.base = fs::current_path();
    if (!g.config_path.empty()) {
      std::ifstream in(g.config_path);
      if (!in) throw PathError("cannot open config '" + g.config_path + "'");
      try {
        in >> ctx.config;
      } catch (const json::exception& ex) {
        throw ConfigError("config '" + g.config_path + "': " + ex.what());
      }
      ctx.base = fs::absolute(g.config_path).parent_path();
    }
    ConfigReader reader(ctx.config);
    if (g.command == "synth") return cmd_synth(ctx, reader);
    if (g.command == "train") return cmd_train(ctx, reader);
    if (g.command == "eval") return cmd_eval(ctx, reader);
    if (g.command == "cv") return cmd_cv(ctx, reader);
    if (g.command == "ablate") return cmd_ablate(ctx, reader);
    if (g.command == "attnmap") return cmd_attnmap(ctx, reader);
    return cmd_filter(ctx, reader);
  } catch (const SchemaError& ex) {
    return report_error("schema", ex.what(), 2, ex.keys());
  } catch (const std::exception& ex) {
    const auto f = classify(ex);
    std::string msg = ex.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    return report_error(f.kind, msg, f.code);
  }
}
