// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>

#include <nlohmann/json.hpp>

#include "mhattnsurv/attnmap.hpp"
#include "mhattnsurv/checkpoint.hpp"
#include "mhattnsurv/cv.hpp"
#include "mhattnsurv/data.hpp"
#include "support.hpp"

using namespace mhattnsurv;
using namespace testing_support;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t heads[] = {1, 2, 4};
  double worst_norm = 0.0, worst_entry = 0.0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto inst = make_grad_instance(1000 + i, 5, 8, heads[i % 3], 4);
    const auto a = analytic_gradient(inst);
    const auto f = numeric_gradient(inst, 1e-5);
    worst_norm = std::max(worst_norm, relative_error(a, f));
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double scale = std::max(std::abs(a[k]), std::abs(f[k]));
      if (scale > 1e-9) worst_entry = std::max(worst_entry, std::abs(a[k] - f[k]) / scale);
    }
  }
  const double secs = seconds_since(t0);
  return {worst_norm <= 1e-6 && secs < 10.0,
          "max rel err " + fmt("%.2e", worst_norm) + " (entrywise over entries above 1e-9: " + fmt("%.2e", worst_entry) +
              "), " + fmt("%.2f", secs) + " s"};
}

Outcome reduction_identity() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    RngStream rng(s, "accept-reduction");
    const std::size_t d = 8, h = std::size_t{1} << rng.uniform_index(4);
    auto p = init_params<double>(d, h, rng.child("init"));
    p.key_weight = Matrix<double>(d, d);
    const auto bag = random_bag(1 + rng.uniform_index(40), d, rng);
    const double mh = mh_forward(bag, p).risk;
    const double avg = avgpool_forward<double>(bag, p.fc.weight, p.fc.bias);
    worst = std::max(worst, std::abs(mh - avg));
  }
  return {worst <= 1e-10, "max |mh - avgpool| " + fmt("%.2e", worst)};
}

Outcome permutation_invariance() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    RngStream rng(s, "accept-perm");
    const std::size_t d = 8, h = std::size_t{1} << rng.uniform_index(4);
    const auto p = init_params<double>(d, h, rng.child("init"));
    auto bag = random_bag(2 + rng.uniform_index(40), d, rng);
    const double before = mh_forward(bag, p).risk;
    std::vector<std::size_t> order(bag.n());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    EmbeddingBag<double> permuted{bag.patient_id, Matrix<double>(bag.n(), d)};
    for (std::size_t j = 0; j < bag.n(); ++j)
      for (std::size_t m = 0; m < d; ++m) permuted.features(j, m) = bag.features(order[j], m);
    worst = std::max(worst, std::abs(mh_forward(permuted, p).risk - before));
  }
  return {worst <= 1e-10, "max |risk change| " + fmt("%.2e", worst)};
}

Outcome cox_properties() {
  double shift = 0.0, grad_sum = 0.0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    RngStream rng(s, "accept-cox");
    const auto labels = random_labels(2 + rng.uniform_index(30), rng, 0.4, 6);
    if (count_events(labels) == 0) continue;
    std::vector<double> r, shifted;
    const double c = rng.uniform(-50.0, 50.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      r.push_back(rng.normal(0.0, 2.0));
      shifted.push_back(r.back() + c);
    }
    const auto a = cox_loss<double>(r, times_of(labels), events_of(labels));
    const auto b = cox_loss<double>(shifted, times_of(labels), events_of(labels));
    shift = std::max(shift, std::abs(a->loss - b->loss));
    double sum = 0.0;
    for (double g : a->grad) sum += g;
    grad_sum = std::max(grad_sum, std::abs(sum));
  }
  const auto single = cox_loss<double>(std::vector<double>{0.7}, std::vector<double>{2.0}, std::vector<int>{1});
  const auto pair = cox_loss<double>(std::vector<double>{0.0, 0.0}, std::vector<double>{1.0, 2.0},
                                     std::vector<int>{1, 1});
  const double ln2_half = std::log(2.0) / 2.0;
  const bool ok = shift <= 1e-9 && grad_sum <= 1e-9 && single->loss == 0.0 &&
                  std::abs(pair->loss - ln2_half) <= 1e-12;
  return {ok, "shift " + fmt("%.2e", shift) + ", grad sum " + fmt("%.2e", grad_sum) + ", singleton " +
                  fmt("%g", single->loss) + ", pair err " + fmt("%.2e", std::abs(pair->loss - ln2_half))};
}

Outcome metric_oracles() {
  std::size_t cindex_mismatch = 0, auc_mismatch = 0, auc_checked = 0;
  double auc_diff = 0.0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    RngStream rng(s, "accept-metrics");
    const std::size_t n = 2 + rng.uniform_index(49);
    const auto labels = random_labels(n, rng, 0.35, 8);
    const auto risk = random_risks(n, rng, 7);
    const auto t = times_of(labels);
    const auto e = events_of(labels);
    const auto fast = concordance_counts(risk, t, e);
    const auto slow = brute_cindex_counts(risk, t, e);
    if (static_cast<double>(fast.comparable) != slow.comparable ||
        static_cast<double>(2 * fast.concordant + fast.tied) != 2.0 * slow.numer ||
        (fast.comparable > 0 && fast.value() != brute_cindex(risk, t, e)))
      ++cindex_mismatch;
    const double horizon = 2.0 + static_cast<double>(rng.uniform_index(5));
    double auc;
    try {
      auc = ipcw_auc(risk, t, e, horizon);
    } catch (const std::exception&) {
      continue;
    }
    ++auc_checked;
    const double brute = brute_ipcw_auc(risk, t, e, horizon);
    auc_diff = std::max(auc_diff, std::abs(auc - brute));
    if (std::abs(auc - brute) > 1e-12) ++auc_mismatch;
  }
  double plain = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    RngStream rng(s, "accept-plain");
    const auto labels = random_labels(30, rng, 0.0, 8);
    const auto risk = random_risks(30, rng, 9);
    const auto t = times_of(labels);
    const auto e = events_of(labels);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < 30; ++i)
      for (std::size_t j = 0; j < 30; ++j)
        if (t[i] <= 4.0 && t[j] > 4.0) {
          den += 1.0;
          num += risk[i] > risk[j] ? 1.0 : (risk[i] == risk[j] ? 0.5 : 0.0);
        }
    if (den > 0.0) plain = std::max(plain, std::abs(ipcw_auc(risk, t, e, 4.0) - num / den));
  }
  double copies = 0.0;
  for (std::uint64_t s = 0; s < 30; ++s) {
    RngStream rng(s, "accept-logrank");
    auto labels = random_labels(20, rng, 0.3, 6);
    labels[0].event = 1;
    const SurvivalGroup g{times_of(labels), events_of(labels)};
    copies = std::max(copies, logrank({g, g}).chi_square);
  }
  const bool ok = cindex_mismatch == 0 && auc_mismatch == 0 && plain <= 1e-12 && copies <= 1e-9;
  return {ok, "c-index mismatches " + std::to_string(cindex_mismatch) + "/200, ipcw max diff " +
                  fmt("%.2e", auc_diff) + " over " + std::to_string(auc_checked) + ", plain AUC diff " +
                  fmt("%.2e", plain) + ", duplicated log-rank " + fmt("%.2e", copies)};
}

/// Same-fold comparison of h=4 against mean pooling on the seed-42 set.
Outcome synthetic_benchmark() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto syn = generate_synthetic(SyntheticConfig{});
  // c_index(z, labels) of this generator configuration, frozen
  constexpr double kOracle = 0.55729930283354778;
  if (syn.oracle_cindex != kOracle)
    return {false, "generator drifted: oracle " + fmt("%.17g", syn.oracle_cindex)};
  TrainConfig cfg;
  cfg.base_lr = 3e-3;
  cfg.max_epochs = 100;
  cfg.eval_every = 10;
  cfg.patience = 5;
  cfg.heads = 4;
  cfg.seed = 42;
  const auto plan = make_fold_plan(syn.data.patients, 42);
  const GridSpec grid;
  const auto mh = nested_cv(syn.data, grid, cfg, ModelKind::mhattn, plan);
  const auto avg = nested_cv(syn.data, grid, cfg, ModelKind::avgpool, plan);
  const double gap_a = kOracle - mh.mean_cindex, gap_b = mh.mean_cindex - avg.mean_cindex;
  const bool ok = gap_a <= 0.05 && gap_b >= 0.03;
  return {ok, "oracle " + fmt("%.4f", kOracle) + ", h=4 " + fmt("%.4f", mh.mean_cindex) + ", avgpool " +
                  fmt("%.4f", avg.mean_cindex) + "; (a) gap " + fmt("%.4f", gap_a) + " <= 0.05 " +
                  (gap_a <= 0.05 ? "ok" : "FAILS") + "; (b) margin " + fmt("%.4f", gap_b) + " >= 0.03 " +
                  (gap_b >= 0.03 ? "ok" : "FAILS") + "; " + fmt("%.0f", seconds_since(t0)) + " s"};
}

Outcome cv_integrity() {
  std::size_t violations = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    RngStream rng(s, "accept-plan");
    const std::size_t n = 20 + rng.uniform_index(200);
    const auto labels = random_labels(n, rng, rng.uniform(0.05, 0.8), 40);
    try {
      const auto plan = make_fold_plan(labels, s);
      std::vector<int> tested(n, 0);
      const double global = static_cast<double>(count_events(labels)) / static_cast<double>(n);
      for (const auto& o : plan.outer) {
        for (auto i : o.test) ++tested[i];
        std::size_t ev = 0;
        for (auto i : o.test) ev += labels[i].event;
        const double m = static_cast<double>(o.test.size());
        if (std::abs(static_cast<double>(ev) / m - global) > 1.0 / m + 1e-12) ++violations;
        std::vector<int> inner_seen(n, 0);
        for (const auto& f : o.inner)
          for (auto i : f) ++inner_seen[i];
        for (auto i : o.test)
          if (inner_seen[i]) ++violations;
        std::size_t covered = 0;
        for (int c : inner_seen) {
          if (c > 1) ++violations;
          covered += c == 1;
        }
        if (covered + o.test.size() != n) ++violations;
      }
      for (int t : tested)
        if (t != 1) ++violations;
    } catch (const std::exception&) {
      ++violations;
    }
  }

  SyntheticConfig sc;
  sc.patients = 40;
  sc.dim = 4;
  sc.min_patches = sc.max_patches = 8;
  const auto syn = generate_synthetic(sc);
  TrainConfig cfg;
  cfg.heads = 2;
  cfg.max_epochs = 4;
  cfg.eval_every = 2;
  cfg.patients_per_batch = 8;
  cfg.patches_per_patient = 4;
  cfg.val_patches = 4;
  cfg.test_patches = 4;
  cfg.base_lr = 1e-2;
  GridSpec grid;
  grid.dropout_rates = {0.0, 0.5};
  const auto report = nested_cv(syn.data, grid, cfg, ModelKind::mhattn, make_fold_plan(syn.data.patients, 1));
  std::map<std::string, int> seen;
  for (const auto& o : report.outer)
    for (const auto& p : o.test_predictions) ++seen[p.id];
  bool coverage = seen.size() == syn.data.size();
  for (const auto& [id, c] : seen) coverage = coverage && c == 1;
  return {violations == 0 && coverage, std::to_string(violations) + " invariant violations over 100 seeds, " +
                                           "one test prediction per patient: " + (coverage ? "yes" : "no")};
}

int run_cli(const std::string& args, const TempDir& dir) {
  const std::string cmd = std::string("\"") + MHATTNSURV_CLI + "\" " + args + " 2>>\"" + dir.str("stderr.txt") + "\"";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

Outcome determinism() {
  TempDir dir("accept-det");
  auto write = [&](const std::string& name, const json& j) {
    std::ofstream(dir.path() / name) << j.dump(2);
    return dir.str(name);
  };
  if (run_cli("synth --config " + write("synth.json", json::object()) + " --seed 42 --out " + dir.str("data"), dir))
    return {false, "synth failed: " + slurp(dir.path() / "stderr.txt")};
  const json cv{{"dataset", "data/manifest.json"},
                {"grid", {{"dropout_rates", {0.0, 0.5}}}},
                {"train",
                 {{"heads", 4}, {"max_epochs", 10}, {"eval_every", 5}, {"val_patches", 20},
                  {"test_patches", 50}, {"base_lr", 3e-3}}}};
  const auto cfg = write("cv.json", cv);
  if (run_cli("cv --config " + cfg + " --seed 42 --threads 1 --out " + dir.str("a"), dir) ||
      run_cli("cv --config " + cfg + " --seed 42 --threads 1 --out " + dir.str("b"), dir))
    return {false, "cv failed: " + slurp(dir.path() / "stderr.txt")};
  const auto a = tree(dir.path() / "a");
  const bool reports_equal = a == tree(dir.path() / "b") && a.count("cv_report.json");

  // checkpoint bit-exactness: values survive a roundtrip and re-saving
  // reproduces the file byte for byte
  const json train{{"dataset", "data/manifest.json"},
                   {"train", {{"heads", 4}, {"max_epochs", 3}, {"eval_every", 1}, {"val_patches", 10}}}};
  if (run_cli("train --config " + write("train.json", train) + " --out " + dir.str("run"), dir))
    return {false, "train failed: " + slurp(dir.path() / "stderr.txt")};
  const auto path = dir.str("run/checkpoint.mhck");
  const auto ck = load_checkpoint<double>(path);
  save_checkpoint(dir.str("resaved.mhck"), ck.model, ck.meta, ck.optimizer ? &*ck.optimizer : nullptr);
  const bool ck_equal = slurp(path) == slurp(dir.path() / "resaved.mhck");
  const auto f32 = load_checkpoint<float>(path);
  save_checkpoint(dir.str("resaved32.mhck"), f32.model, f32.meta);
  auto again = load_checkpoint<float>(dir.str("resaved32.mhck"));
  const auto& m1 = std::get<ModelParams<float>>(f32.model);
  const auto& m2 = std::get<ModelParams<float>>(again.model);
  const bool values_equal = vec(m1.key_weight.values()) == vec(m2.key_weight.values()) && m1.query == m2.query &&
                            m1.fc.weight == m2.fc.weight && m1.fc.bias == m2.fc.bias;
  return {reports_equal && ck_equal && values_equal,
          std::string("cv outputs identical: ") + (reports_equal ? "yes" : "no") + ", checkpoint re-save identical: " +
              (ck_equal ? "yes" : "no") + ", f32 values bit-equal: " + (values_equal ? "yes" : "no")};
}

Outcome attention_contract() {
  bool sampled = true, uniform = true, rows = true;
  for (std::size_t n : {1u, 20u, 32u, 75u, 200u}) {
    RngStream rng(n, "accept-attn");
    Matrix<float> bag(n, 8);
    for (auto& v : bag.values()) v = static_cast<float>(rng.normal(0.0, 1.0));
    const auto model = init_params<double>(8, 4, rng.child("init"));
    const auto map = attention_map(model, bag, rng.child("map"));
    for (auto s : map.samples) sampled = sampled && s == 10;
    auto flat = model;
    flat.key_weight = Matrix<double>(8, 8);
    const auto umap = attention_map(flat, bag, rng.child("map"));
    for (std::size_t j = 0; j < n; ++j)
      if (umap.full_groups_only[j])
        for (std::size_t c = 0; c < 4; ++c) uniform = uniform && umap.weight(c, j) == 1.0;
    TempDir dir("accept-attn");
    write_attention_csv(map, nullptr, dir.str("a.csv"));
    const auto csv = slurp(dir.path() / "a.csv");
    rows = rows && static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == 1 + n * 4;
  }
  const TrainConfig cfg;
  const double l0 = cosine_lr(0, cfg), l2 = cosine_lr(2000, cfg), l4 = cosine_lr(4000, cfg);
  const bool schedule = std::abs(l0 - 6e-5) <= 1e-15 && std::abs(l2 - 3e-5) <= 1e-15 && std::abs(l4 - 6e-5) <= 1e-15;
  return {sampled && uniform && rows && schedule,
          std::string("10 samples each: ") + (sampled ? "yes" : "no") + ", uniform = 1.0: " + (uniform ? "yes" : "no") +
              ", rows n*h: " + (rows ? "yes" : "no") + ", lr(0, 2000, 4000) = " + fmt("%.17g", l0) + ", " +
              fmt("%.17g", l2) + ", " + fmt("%.17g", l4)};
}

}  // namespace

int main() {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {2, gradient_oracle},     {3, reduction_identity}, {4, permutation_invariance},
      {5, cox_properties},      {6, metric_oracles},     {7, synthetic_benchmark},
      {8, cv_integrity},        {9, determinism},        {10, attention_contract}};
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& ex) {
      o = {false, std::string("threw: ") + ex.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
