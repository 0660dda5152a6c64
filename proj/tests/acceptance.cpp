// Acceptance suite: one line per criterion, non-zero exit if any fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "clbench/clbench.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace clbench;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;  // 0: no runtime bound
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// --------------------------------------------------------------------------

Outcome gradient_oracle() {
  double worst = 0.0;
  std::string where;
  bool pass = true;
  for (auto m : kAllMethods) {
    Rng rng(3);
    Model<double> model(oracle::tiny_model_config(16, 2, 16), rng);
    auto batch = oracle::tiny_batch(16);
    ObjectiveConfig cfg;
    cfg.method = m;
    auto r = oracle::check_objective_gradients(model, batch, cfg, 11);
    pass = pass && r.max_relative_error < 1e-4 && r.entries == model.parameter_count();
    if (r.max_relative_error >= worst) {
      worst = r.max_relative_error;
      where = std::string(method_name(m)) + " " + r.worst_parameter;
    }
  }
  return {pass, fmt("max rel err %.2e (%s) over all parameters of 6 objectives, limit 1e-4", worst, where.c_str())};
}

Outcome loss_oracles() {
  std::mt19937_64 gen(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(trial % 4);  // 2N in {2, 4, 6, 8}
    const std::size_t d = 2 + static_cast<std::size_t>(trial % 5);
    const int classes = 2 + trial % 2;
    const double tau = 0.1 + 0.05 * trial;
    auto reps = oracle::random_tensor(2 * n, d, gen, false);
    auto base = oracle::random_labels(n, classes, gen);
    std::vector<int> labels(base);
    labels.insert(labels.end(), base.begin(), base.end());
    auto w = oracle::random_weights(2 * n, static_cast<std::size_t>(classes), gen);
    const auto rows = oracle::rows_of(reps);
    worst = std::max(worst, std::abs(ntxent(reps, labels, tau).item() - oracle::ntxent(rows, labels, tau)));
    worst = std::max(worst, std::abs(infonce(reps, tau).item() - oracle::infonce(rows, tau, true)));
    worst = std::max(worst, std::abs(infonce(reps, tau, InfoNceDirection::Single).item() -
                                     oracle::infonce(rows, tau, false)));
    worst = std::max(worst, std::abs(lcl_loss(reps, labels, w, tau).item() -
                                     oracle::lcl(rows, labels, oracle::rows_of(w), tau)));
  }
  return {worst < 1e-6, fmt("20 random batches (2N <= 8), max |diff| %.2e vs triple-loop oracle, limit 1e-6", worst)};
}

Outcome closed_forms() {
  auto same = Tensor<double>::constant(4, 3, {0.3, -1.2, 0.5, 0.3, -1.2, 0.5, 0.3, -1.2, 0.5, 0.3, -1.2, 0.5});
  const std::vector<int> one_class{0, 0, 0, 0};
  const double log3 = std::log(3.0);
  const double ntx_anchor = ntxent(same, one_class, 0.3).item() / 4.0;
  const double nce_anchor = infonce(same, 0.3).item();
  bool pass = std::abs(ntx_anchor - log3) < 1e-6 && std::abs(nce_anchor - log3) < 1e-6;

  std::mt19937_64 gen(5);
  bool lcl_exact = true;
  for (std::size_t classes : {2u, 3u, 5u}) {
    auto reps = oracle::random_tensor(8, 6, gen, false);
    auto base = oracle::random_labels(4, static_cast<int>(classes), gen);
    std::vector<int> labels(base);
    labels.insert(labels.end(), base.begin(), base.end());
    auto uniform = Tensor<double>::constant(8, classes, std::vector<double>(8 * classes, 1.0 / double(classes)));
    lcl_exact = lcl_exact && lcl_loss(reps, labels, uniform, 0.3).item() == ntxent(reps, labels, 0.3).item();
  }

  Rng init(9);
  Model<double> model(oracle::tiny_model_config(16), init);
  auto batch = oracle::tiny_batch(16);
  ObjectiveConfig scl, ce;
  scl.method = Method::SCL;
  scl.lambda = 0.0;
  ce.method = Method::CE;
  Rng r1(4), r2(4);
  const double scl_total = objective_forward(model, batch, scl, r1).total.item();
  const double ce_total = objective_forward(model, batch, ce, r2).total.item();
  const bool lambda_zero = scl_total == ce_total;
  pass = pass && lcl_exact && lambda_zero;
  return {pass, fmt("per-anchor NTXent %.9f InfoNCE %.9f (log 3 = %.9f); uniform LCL == NTXent bitwise: %s; "
                    "lambda=0 SCL == CE bitwise: %s",
                    ntx_anchor, nce_anchor, log3, lcl_exact ? "yes" : "no", lambda_zero ? "yes" : "no")};
}

Outcome fgsm_contracts() {
  const std::vector<double> g{3.0, 4.0};
  auto r = fgsm_direction<double>(g, 0.01);
  const bool analytic = std::abs(r[0] + 0.006) < 1e-15 && std::abs(r[1] + 0.008) < 1e-15;

  double worst = 0.0;
  bool restored = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng init(seed);
    Model<double> model(oracle::tiny_model_config(16), init);
    auto batch = oracle::tiny_batch(16);
    for (auto sign : {FgsmSign::Printed, FgsmSign::Ascent}) {
      for (double eps : {0.001, 0.01, 0.5}) {
        Rng rng(seed + 100);
        auto h = stack_cls<double>(model.encoder().encode(std::span<const TokenIds>(batch.ids), true, rng));
        auto ce = cross_entropy_logits(model.classifier().logits(h), batch.labels);
        auto emb = embedding_perturbation(model.encoder(), ce, eps, sign);
        double sq = 0.0;
        for (double v : emb.r.values()) sq += v * v;
        worst = std::max(worst, std::abs(std::sqrt(sq) - eps) / eps);
        auto tok = token_perturbation(h, ce, eps, sign);
        for (std::size_t i = 0; i < tok.r.rows(); ++i) {
          double row = 0.0;
          for (std::size_t j = 0; j < tok.r.cols(); ++j) row += tok.r.at(i, j) * tok.r.at(i, j);
          worst = std::max(worst, std::abs(std::sqrt(row) - eps) / eps);
        }
      }
    }
    const std::vector<double> before(model.encoder().embedding().values().begin(),
                                     model.encoder().embedding().values().end());
    ObjectiveConfig cat;
    cat.method = Method::CAT;
    Rng rng(seed);
    auto step = objective_forward(model, batch, cat, rng);
    backward(step.total);
    const auto after = model.encoder().embedding().values();
    restored = restored && std::equal(before.begin(), before.end(), after.begin(), after.end(),
                                      [](double a, double b) { return std::bit_cast<std::uint64_t>(a) ==
                                                                      std::bit_cast<std::uint64_t>(b); });
  }
  const bool pass = analytic && worst < 1e-6 && restored;
  return {pass, fmt("r((3,4), 0.01) = (%.6g, %.6g); max | ||r|| - eps | / eps = %.2e (embedding and token, "
                    "both signs), limit 1e-6; embedding matrix bitwise unchanged after CAT pass: %s",
                    r[0], r[1], worst, restored ? "yes" : "no")};
}

TrainConfig overfit_config() {
  TrainConfig cfg;
  cfg.task = "overfit";
  cfg.hidden = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ffn = 32;
  cfg.projection_dim = 16;
  cfg.max_epochs = 25;
  cfg.patience = 25;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 4;
  cfg.max_seq_len = 16;
  cfg.seed = 1;
  cfg.track_train_accuracy = true;
  return cfg;
}

Dataset overfit_data() {
  SynthConfig sc;
  sc.classes = 2;
  sc.size = 20;
  sc.difficulty = 0.0;
  sc.seed = 7;
  return synth_corpus(sc);
}

Outcome overfit_sanity() {
  const auto data = overfit_data();
  auto cfg = overfit_config();
  bool pass = data.train.size() == 16;
  std::string detail = fmt("%zu train examples; first epoch at train accuracy 1.0:", data.train.size());
  for (auto m : kAllMethods) {
    cfg.method = m;
    const auto rec = train(cfg, data);
    int first = -1;
    for (const auto& e : rec.epochs)
      if (first < 0 && e.train_accuracy && *e.train_accuracy == 1.0) first = static_cast<int>(e.epoch);
    pass = pass && first > 0 && first <= 25;
    detail += fmt(" %s=%d", std::string(method_name(m)).c_str(), first);
  }
  return {pass, detail};
}

Dataset trend_data() {
  SynthConfig sc;
  sc.classes = 3;
  sc.size = 900;
  sc.difficulty = 0.6;
  sc.min_words = 4;
  sc.max_words = 8;
  sc.seed = 8;
  sc.name = "synthetic-3c";
  return synth_corpus(sc);
}

TrainConfig trend_config() {
  TrainConfig cfg;
  cfg.task = "synthetic-3c";
  cfg.hidden = 32;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ffn = 64;
  cfg.projection_dim = 32;
  cfg.max_seq_len = 16;
  cfg.learning_rate = 1e-3;
  cfg.seed = 8;
  return cfg;
}

Outcome trend_reproduction() {
  const auto data = trend_data();
  const auto cfg = trend_config();
  const std::vector<Method> pair{Method::CE, Method::SCL};
  const std::vector<double> fractions{0.5, 1.0};
  auto grid = data_efficiency_sweep(cfg, data, pair, fractions);
  const double ce50 = grid.at(Method::CE, 0.5).test_macro_f1;
  const double ce100 = grid.at(Method::CE, 1.0).test_macro_f1;
  const double scl50 = grid.at(Method::SCL, 0.5).test_macro_f1;
  const bool a = scl50 >= ce50;

  const std::vector<std::size_t> sizes{4, 8, 16};
  const std::vector<Method> all(kAllMethods.begin(), kAllMethods.end());
  auto bs = batch_size_sweep(cfg, data, all, sizes);
  int monotone = 0;
  std::string series;
  for (auto m : all) {
    const double f4 = bs.at(m, 4).best_dev_f1, f8 = bs.at(m, 8).best_dev_f1, f16 = bs.at(m, 16).best_dev_f1;
    const bool up = f4 <= f8 && f8 <= f16;
    monotone += up;
    series += fmt(" %s(%.3f,%.3f,%.3f)%s", std::string(method_name(m)).c_str(), f4, f8, f16, up ? "+" : "");
  }
  const bool b = monotone >= 4;
  return {a && b, fmt("(a) test F1 at 50%%: SCL %.4f vs CE %.4f [CE at 100%%: %.4f] -> %s; (b) dev F1 non-decreasing "
                      "over batch {4,8,16} for %d/6 methods -> %s;%s",
                      scl50, ce50, ce100, a ? "ok" : "FAIL", monotone, b ? "ok" : "FAIL", series.c_str())};
}

Outcome embedding_geometry() {
  const auto data = trend_data();
  auto cfg = trend_config();
  double sep[2];
  for (int i = 0; i < 2; ++i) {
    cfg.method = i ? Method::SCL : Method::CE;
    auto result = train_model<float>(cfg, data);
    auto reps = embed_cls(result.checkpoint.model, result.dev.ids);
    sep[i] = cluster_separation(std::span<const std::vector<double>>(reps), std::span<const int>(result.dev.labels));
  }
  return {sep[1] > sep[0], fmt("dev [CLS] intra-minus-inter cosine: SCL %.4f vs CE %.4f", sep[1], sep[0])};
}

Outcome protocol_fidelity() {
  SynthConfig sc;
  sc.classes = 3;
  sc.size = 150;
  sc.difficulty = 0.7;
  sc.min_words = 4;
  sc.max_words = 8;
  sc.seed = 3;
  const auto data = synth_corpus(sc);
  TrainConfig cfg = overfit_config();
  cfg.patience = 5;
  cfg.track_train_accuracy = false;

  // Frozen dev F1: a learning rate far below float resolution leaves predictions unchanged.
  TrainConfig frozen = cfg;
  frozen.learning_rate = 1e-20;
  const auto stalled = train(frozen, data);
  const bool stops = stalled.epochs.size() == 6 && stalled.stopped_early && stalled.best_epoch == 1;

  // Best-dev checkpoint: the saved model equals the model after best_epoch
  // epochs and reproduces the recorded test score.
  const auto dir = std::filesystem::temp_directory_path() / "clbench_acceptance_protocol";
  std::filesystem::remove_all(dir);
  TrainConfig live = cfg;
  live.method = Method::SCL;
  live.out_dir = dir.string();
  const auto full = train_model<float>(live, data);
  const auto loaded = load_checkpoint<float>((dir / "checkpoint.bin").string());
  const auto test_tok = tokenize_split(data.test, loaded.vocab, live.max_seq_len);
  const double reloaded_f1 = evaluate(loaded.model, test_tok, data.classes().size()).macro_f1;
  TrainConfig cut = cfg;
  cut.method = Method::SCL;
  cut.max_epochs = full.record.best_epoch;
  cut.patience = full.record.best_epoch;
  const auto truncated = train_model<float>(cut, data);
  const bool same_params = truncated.checkpoint.model.snapshot() == full.checkpoint.model.snapshot();
  double best_seen = 0.0;
  for (const auto& e : full.record.epochs) best_seen = std::max(best_seen, e.dev_macro_f1);
  const bool best_ok = full.record.best_dev_f1 == best_seen &&
                       full.record.epochs[full.record.best_epoch - 1].dev_macro_f1 == best_seen;
  const bool checkpoint_ok = same_params && reloaded_f1 == full.record.test_macro_f1 && best_ok &&
                             full.record.best_epoch < full.record.epochs.size();
  std::filesystem::remove_all(dir);

  // Reruns.
  live.out_dir.clear();
  const auto again = train(live, data);
  double drift = std::abs(again.test_macro_f1 - full.record.test_macro_f1);
  bool same_shape = again.epochs.size() == full.record.epochs.size() && again.best_epoch == full.record.best_epoch;
  for (std::size_t e = 0; same_shape && e < again.epochs.size(); ++e) {
    drift = std::max(drift, std::abs(again.epochs[e].dev_macro_f1 - full.record.epochs[e].dev_macro_f1));
    for (const auto& [k, v] : full.record.epochs[e].losses) drift = std::max(drift, std::abs(again.epochs[e].losses.at(k) - v));
  }
  const bool rerun_ok = same_shape && drift <= 1e-6;
  return {stops && checkpoint_ok && rerun_ok,
          fmt("frozen dev F1 stops after %zu epochs (best %zu); best-dev checkpoint (epoch %zu of %zu) matches "
              "truncated run: %s, reloaded test F1 %.4f == recorded %.4f; rerun max drift %.1e",
              stalled.epochs.size(), stalled.best_epoch, full.record.best_epoch, full.record.epochs.size(),
              same_params ? "yes" : "no", reloaded_f1, full.record.test_macro_f1, drift)};
}

Outcome macro_f1_oracle() {
  bool pass = true;
  const std::vector<int> g1{1, 1, 0, 0}, p1{1, 0, 0, 0};
  const auto binary = macro_f1(g1, p1, 2);
  pass = pass && std::abs(binary.f1[1] - 2.0 / 3.0) < 1e-9 && std::abs(binary.f1[0] - 0.8) < 1e-9 &&
         std::abs(binary.macro_f1 - 11.0 / 15.0) < 1e-9;
  const std::vector<int> g2{0, 1, 2, 2, 1, 0}, all_right = g2;
  pass = pass && std::abs(macro_f1(g2, all_right, 3).macro_f1 - 1.0) < 1e-9;
  const std::vector<int> g3{0, 1, 2, 0}, p3{0, 0, 0, 0};
  const auto degenerate = macro_f1(g3, p3, 3);
  pass = pass && std::abs(degenerate.f1[0] - 2.0 / 3.0) < 1e-9 && degenerate.f1[1] == 0.0 && degenerate.f1[2] == 0.0 &&
         std::abs(degenerate.macro_f1 - 2.0 / 9.0) < 1e-9;
  // 3-class: confusion [[2,1,0],[0,1,1],[1,0,2]]; P = (2/3, 1/2, 2/3), R = (2/3, 1/2, 2/3).
  const std::vector<int> g4{0, 0, 0, 1, 1, 2, 2, 2}, p4{0, 0, 1, 1, 2, 0, 2, 2};
  pass = pass && std::abs(macro_f1(g4, p4, 3).macro_f1 - (2.0 / 3.0 + 0.5 + 2.0 / 3.0) / 3.0) < 1e-9;

  std::mt19937_64 gen(77);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int classes = 2 + trial % 5;
    const std::size_t n = 5 + static_cast<std::size_t>(trial);
    auto gold = oracle::random_labels(n, classes, gen);
    auto pred = oracle::random_labels(n, classes, gen);
    const double base = macro_f1(gold, pred, static_cast<std::size_t>(classes)).macro_f1;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), gen);
    std::vector<int> gp(n), pp(n);
    for (std::size_t i = 0; i < n; ++i) {
      gp[i] = gold[order[i]];
      pp[i] = pred[order[i]];
    }
    std::vector<int> relabel(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) relabel[static_cast<std::size_t>(c)] = c;
    std::shuffle(relabel.begin(), relabel.end(), gen);
    std::vector<int> gr(n), pr(n);
    for (std::size_t i = 0; i < n; ++i) {
      gr[i] = relabel[static_cast<std::size_t>(gold[i])];
      pr[i] = relabel[static_cast<std::size_t>(pred[i])];
    }
    worst = std::max(worst, std::abs(macro_f1(gp, pp, static_cast<std::size_t>(classes)).macro_f1 - base));
    worst = std::max(worst, std::abs(macro_f1(gr, pr, static_cast<std::size_t>(classes)).macro_f1 - base));
  }
  pass = pass && worst < 1e-9;
  return {pass, fmt("binary case macro %.10f (11/15); permutation/relabel max drift %.1e over 100 random cases",
                    binary.macro_f1, worst)};
}

}  // namespace

int main() {
  diag::ScopedSink quiet([](std::string_view) {});
  const std::vector<Criterion> criteria{
      {1, "gradient oracle", 60.0, gradient_oracle},
      {2, "loss oracles", 10.0, loss_oracles},
      {3, "closed-form anchors", 0.0, closed_forms},
      {4, "FGSM contracts", 0.0, fgsm_contracts},
      {5, "overfit sanity", 120.0, overfit_sanity},
      {6, "trend reproduction", 900.0, trend_reproduction},
      {7, "embedding geometry", 0.0, embedding_geometry},
      {8, "protocol fidelity", 0.0, protocol_fidelity},
      {9, "macro-F1 oracle", 0.0, macro_f1_oracle},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = c.budget_seconds == 0.0 || secs < c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::string timing = fmt("%.1fs", secs);
    if (c.budget_seconds > 0.0) timing += fmt(" of %.0fs", c.budget_seconds);
    std::printf("[%s] %d %s (%s): %s\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(), timing.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
