#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <map>

#include <nlohmann/json.hpp>

#include "mhattnsurv/data.hpp"
#include "support.hpp"

using namespace mhattnsurv;
using namespace testing_support;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

Run run_cli(const TempDir& dir, const std::string& args) {
  const auto err_path = dir.path() / "stderr.txt";
  const std::string cmd = std::string("\"") + MHATTNSURV_CLI + "\" " + args + " 2>\"" + err_path.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_path);
  return r;
}

std::string write_config(const TempDir& dir, const std::string& name, const json& j) {
  std::ofstream(dir.path() / name) << j.dump(2);
  return dir.str(name);
}

/// Every file below `root`, relative path -> bytes.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

json small_synth() {
  return {{"synthetic", {{"patients", 40}, {"dim", 4}, {"min_patches", 8}, {"max_patches", 12}}}};
}

json parse_error_line(const std::string& err) {
  EXPECT_EQ(std::count(err.begin(), err.end(), '\n'), 1) << err;
  return json::parse(err);
}

}  // namespace

TEST(Cli, SynthIsDeterministic) {
  TempDir dir("cli");
  const auto cfg = write_config(dir, "synth.json", small_synth());
  ASSERT_EQ(run_cli(dir, "synth --config " + cfg + " --seed 42 --out " + dir.str("a")).code, 0);
  ASSERT_EQ(run_cli(dir, "synth --config " + cfg + " --seed 42 --out " + dir.str("b")).code, 0);
  const auto a = tree(dir.path() / "a");
  EXPECT_EQ(a, tree(dir.path() / "b"));
  EXPECT_TRUE(a.count("manifest.json"));
  EXPECT_TRUE(a.count("oracle.json"));
  EXPECT_TRUE(a.count("effective_config.json"));
  ASSERT_EQ(run_cli(dir, "synth --config " + cfg + " --seed 43 --out " + dir.str("c")).code, 0);
  EXPECT_NE(a.at("labels.csv"), tree(dir.path() / "c").at("labels.csv"));
}

TEST(Cli, EffectiveConfigRerunsIdentically) {
  TempDir dir("cli");
  const auto cfg = write_config(dir, "synth.json", small_synth());
  ASSERT_EQ(run_cli(dir, "synth --config " + cfg + " --seed 7 --out " + dir.str("a")).code, 0);
  ASSERT_EQ(run_cli(dir, "synth --config " + dir.str("a/effective_config.json") + " --out " + dir.str("b")).code, 0);
  EXPECT_EQ(tree(dir.path() / "a"), tree(dir.path() / "b"));
}

TEST(Cli, UnknownKeysAreSchemaErrors) {
  TempDir dir("cli");
  auto j = small_synth();
  j["synthetic"]["patinets"] = 3;
  j["extra"] = true;
  const auto r = run_cli(dir, "synth --config " + write_config(dir, "bad.json", j) + " --out " + dir.str("o"));
  EXPECT_EQ(r.code, 2);
  const auto e = parse_error_line(r.err);
  EXPECT_EQ(e["error"], "schema");
  EXPECT_EQ(e["keys"], json({"extra", "synthetic.patinets"}));
  EXPECT_FALSE(fs::exists(dir.path() / "o" / "manifest.json"));
}

TEST(Cli, ErrorsAreSingleLineJson) {
  TempDir dir("cli");
  const auto missing = run_cli(dir, "train --config " + write_config(dir, "t.json", json::object()));
  EXPECT_EQ(missing.code, 2);
  EXPECT_EQ(parse_error_line(missing.err)["error"], "config");

  const auto no_file = run_cli(dir, "synth --config " + dir.str("absent.json"));
  EXPECT_EQ(no_file.code, 3);
  EXPECT_EQ(parse_error_line(no_file.err)["error"], "path");

  const auto usage = run_cli(dir, "frobnicate");
  EXPECT_EQ(usage.code, 2);
  EXPECT_EQ(parse_error_line(usage.err)["error"], "usage");

  const auto bad_dataset =
      run_cli(dir, "train --config " + write_config(dir, "d.json", {{"dataset", "nowhere/manifest.json"}}) +
                       " --out " + dir.str("o"));
  EXPECT_EQ(bad_dataset.code, 3);
  EXPECT_EQ(parse_error_line(bad_dataset.err)["error"], "path");

  std::ofstream(dir.path() / "broken.json") << "{ not json";
  const auto broken = run_cli(dir, "synth --config " + dir.str("broken.json"));
  EXPECT_EQ(broken.code, 2);
  parse_error_line(broken.err);

  const auto wrong_type = run_cli(
      dir, "synth --config " + write_config(dir, "w.json", {{"synthetic", {{"patients", "many"}}}}) + " --out " +
               dir.str("o"));
  EXPECT_EQ(wrong_type.code, 2);
  parse_error_line(wrong_type.err);
}

TEST(Cli, EvalOnPerfectPredictions) {
  TempDir dir("cli");
  ASSERT_EQ(run_cli(dir, "synth --config " + write_config(dir, "s.json", small_synth()) + " --out " +
                             dir.str("data")).code,
            0);
  const auto labels = read_labels_csv(dir.str("data/labels.csv"));
  std::ofstream pred(dir.path() / "perfect.csv");
  pred << "id,risk\n";
  for (const auto& p : labels) pred << p.id << ',' << format_real(-p.time) << '\n';
  pred.close();
  const json cfg{{"dataset", dir.str("data/manifest.json")}, {"predictions", dir.str("perfect.csv")}};
  const auto r = run_cli(dir, "eval --config " + write_config(dir, "e.json", cfg) + " --out " + dir.str("eval"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = json::parse(slurp(dir.path() / "eval" / "metrics.json"));
  EXPECT_EQ(metrics["cindex"].get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(dir.path() / "eval" / "effective_config.json"));
}

TEST(Cli, TrainEvalAttnmapPipeline) {
  TempDir dir("cli");
  ASSERT_EQ(run_cli(dir, "synth --config " + write_config(dir, "s.json", small_synth()) + " --out " +
                             dir.str("data")).code,
            0);
  const json train{{"dataset", "data/manifest.json"},
                   {"train",
                    {{"heads", 2}, {"max_epochs", 6}, {"eval_every", 2}, {"patients_per_batch", 8},
                     {"patches_per_patient", 4}, {"val_patches", 4}, {"base_lr", 0.01}}}};
  auto r = run_cli(dir, "train --config " + write_config(dir, "t.json", train) + " --out " + dir.str("run"));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"checkpoint.mhck", "history.csv", "split.json", "effective_config.json"})
    EXPECT_TRUE(fs::exists(dir.path() / "run" / f)) << f;

  const json eval{{"dataset", "data/manifest.json"}, {"checkpoint", "run/checkpoint.mhck"}, {"test_patches", 8}};
  r = run_cli(dir, "eval --config " + write_config(dir, "e.json", eval) + " --out " + dir.str("eval"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir.path() / "eval" / "headwise_cindex.csv"));

  const json no_coords{{"checkpoint", "run/checkpoint.mhck"}, {"bag", "data/bags/P00.mhbg"}};
  r = run_cli(dir, "attnmap --config " + write_config(dir, "a.json", no_coords) + " --out " + dir.str("map"));
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(parse_error_line(r.err)["error"], "usage");
  const auto csv = slurp(dir.path() / "map" / "attention.csv");
  const auto n = load_bag(dir.str("data/bags/P00.mhbg")).n();
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), 1 + n * 2);

  std::ofstream coords(dir.path() / "coords.csv");
  coords << "patch,row,col\n";
  for (std::size_t j = 0; j < n; ++j) coords << j << ',' << j / 4 << ',' << j % 4 << '\n';
  coords.close();
  json with_coords = no_coords;
  with_coords["coordinates"] = "coords.csv";
  r = run_cli(dir, "attnmap --config " + write_config(dir, "b.json", with_coords) + " --out " + dir.str("map2"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir.path() / "map2" / "head_1.pgm"));
  EXPECT_TRUE(fs::exists(dir.path() / "map2" / "head_2.pgm"));
}

TEST(Cli, CvOnFortyPatients) {
  TempDir dir("cli");
  ASSERT_EQ(run_cli(dir, "synth --config " + write_config(dir, "s.json", small_synth()) + " --out " +
                             dir.str("data")).code,
            0);
  const json cv{{"dataset", "data/manifest.json"},
                {"grid", {{"dropout_rates", {0.0, 0.5}}}},
                {"train",
                 {{"heads", 2}, {"max_epochs", 4}, {"eval_every", 2}, {"patients_per_batch", 8},
                  {"patches_per_patient", 4}, {"val_patches", 4}, {"test_patches", 4}, {"base_lr", 0.01}}}};
  const auto cfg = write_config(dir, "cv.json", cv);
  auto r = run_cli(dir, "cv --config " + cfg + " --threads 1 --out " + dir.str("a"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto pred = slurp(dir.path() / "a" / "predictions.csv");
  EXPECT_EQ(std::count(pred.begin(), pred.end(), '\n'), 41);
  const auto labels = read_labels_csv(dir.str("data/labels.csv"));
  for (const auto& p : labels) EXPECT_NE(pred.find("\n" + p.id + ","), std::string::npos) << p.id;

  r = run_cli(dir, "cv --config " + cfg + " --threads 2 --out " + dir.str("b"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(tree(dir.path() / "a"), tree(dir.path() / "b"));
}

TEST(Cli, FilterPatches) {
  TempDir dir("cli");
  fs::create_directories(dir.path() / "patches");
  RgbImage img;
  img.width = img.height = 224;
  img.pixels.assign(224 * 224 * 3, 255);
  write_ppm(img, dir.str("patches/white.ppm"));
  for (std::size_t p = 0; p < img.pixels.size(); p += 3) img.pixels[p + 1] = 64;
  write_ppm(img, dir.str("patches/purple.ppm"));
  const auto r = run_cli(dir, "filter-patches --config " +
                                  write_config(dir, "f.json", {{"directory", "patches"}}) + " --out " +
                                  dir.str("out"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(dir.path() / "out" / "filter.csv");
  EXPECT_NE(csv.find("purple.ppm,50176,1\n"), std::string::npos) << csv;
  EXPECT_NE(csv.find("white.ppm,0,0\n"), std::string::npos) << csv;
}
