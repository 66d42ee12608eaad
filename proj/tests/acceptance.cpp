// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "crowdloss/crowdloss.hpp"
#include "oracles.hpp"

using namespace crowdloss;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& run) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = run();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  failures += o.pass ? 0 : 1;
  std::printf("criterion %d %s: %s (%s; %.1fs)\n", id, name.c_str(), o.pass ? "PASS" : "FAIL",
              o.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << std::fixed << v;
  return os.str();
}

// 1 ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  int cases = 0;
  const Arm arms[] = {Arm::baseline, Arm::baseline_lc, Arm::multitask, Arm::multitask_lc};
  const double psis[] = {0.0, 0.5, 1.0};
  for (int k = 0; k < 20; ++k) {
    const Arm arm = arms[k % 4];
    ModelDims d;
    d.input = 2 + rng() % 4;
    d.hidden = 3 + rng() % 6;
    d.classes = 2 + rng() % 2;
    d.annotators = is_multitask(arm) ? 2 + rng() % 4 : 1;
    d.layers = 1 + rng() % 2;
    const auto model = init_model(d, 1000 + static_cast<std::uint64_t>(k));
    const bool mix = (k / 4) % 2 == 1;
    const auto batch = oracle::random_batch(rng, d, 3 + rng() % 4, mix);
    LossSpec spec;
    spec.mode = arm;
    spec.psi = psis[k % 3];
    spec.entropy_penalty_coeff = 0.1 * static_cast<double>(k % 3);
    spec.class_balance_coeff = 0.5 * static_cast<double>(k % 2);
    const auto analytic = compute_gradients(model, batch, spec);
    const auto numeric = oracle::finite_difference(
        model, [&](const ModelParams& m) { return oracle::batch_objective(m, batch, spec); });
    worst = std::max(worst, oracle::max_relative_error(analytic.grads.values(), numeric));
    ++cases;
  }
  return {worst < 1e-4, std::to_string(cases) + " cases, max relative error " + sci(worst)};
}

// 2 ---------------------------------------------------------------------------

Row random_simplex(std::mt19937_64& rng, std::size_t m) {
  std::gamma_distribution<double> g(1.0, 1.0);
  Row p(m);
  double s = 0.0;
  for (auto& v : p) s += (v = g(rng) + 1e-3);
  for (auto& v : p) v /= s;
  return p;
}

Outcome loss_identities() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double e_single = 0.0, e_zero = 0.0, e_guess = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t M = 2 + t % 3, A = 1 + t % 6;
    const Row p1 = random_simplex(rng, M);
    const int y1 = static_cast<int>(rng() % M);
    e_single = std::max(e_single, std::abs(loss_mt({p1}, {y1}) - loss_ce(p1, y1)));

    Rows p, z;
    std::vector<std::optional<int>> y(A);
    for (std::size_t a = 0; a < A; ++a) {
      p.push_back(random_simplex(rng, M));
      z.push_back(random_simplex(rng, M));
      if (a == 0 || unit(rng) < 0.6) y[a] = static_cast<int>(rng() % M);
    }
    const auto zd = detach_guess(z);
    e_zero = std::max(e_zero, std::abs(loss_mlc(p, y, zd, std::vector<double>(A, 0.0), unit(rng)) -
                                       loss_mt(p, y)));
    double guess = 0.0;
    std::size_t n = 0;
    for (std::size_t a = 0; a < A; ++a)
      if (y[a]) {
        for (std::size_t m = 0; m < M; ++m) guess -= z[a][m] * std::log(p[a][m]);
        ++n;
      }
    guess /= static_cast<double>(n);
    e_guess = std::max(e_guess,
                       std::abs(loss_mlc(p, y, zd, std::vector<double>(A, 1.0), 1.0) - guess));
  }
  const bool ok = e_single <= 1e-12 && e_zero <= 1e-12 && e_guess <= 1e-12;
  return {ok, "100 instances, max errors MT(A=1) " + sci(e_single) + ", MLC(w=0) " +
                  sci(e_zero) + ", MLC(w=1,psi=1) " + sci(e_guess)};
}

// 3 ---------------------------------------------------------------------------

Outcome em_recovery() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_mean = 0.0, worst_pi = 0.0;
  bool monotone = true;
  for (int k = 0; k < 10; ++k) {
    const double mu0 = 0.1 + 0.15 * u(rng);
    const double mu1 = std::min(0.9, mu0 + 0.4 + 0.3 * u(rng));
    const double k0 = 8.0 + 12.0 * u(rng), k1 = 8.0 + 12.0 * u(rng);
    const double pi = 0.2 + 0.5 * u(rng);
    const auto x = oracle::sample_beta_mixture(rng, 2000, mu0 * k0, (1 - mu0) * k0, mu1 * k1,
                                               (1 - mu1) * k1, pi);
    const auto p = fit_beta_mixture_em(x);
    worst_mean = std::max({worst_mean, std::abs(p.component_low.mean(p.family) - mu0),
                           std::abs(p.component_high.mean(p.family) - mu1)});
    worst_pi = std::max(worst_pi, std::abs(p.mixing_pi - pi));
    for (std::size_t i = 1; i < p.log_likelihood_trace.size(); ++i)
      monotone = monotone && p.log_likelihood_trace[i] >= p.log_likelihood_trace[i - 1] - 1e-9;
  }
  return {worst_mean <= 0.05 && worst_pi <= 0.05 && monotone,
          "10 mixtures, max mean error " + fmt(worst_mean) + ", max pi error " + fmt(worst_pi) +
              ", log-likelihood " + (monotone ? "monotone" : "decreased")};
}

// 4-6 -------------------------------------------------------------------------
//
// Two-faction data: 2000 training samples with 20% of samples fully flipped,
// plus 1000 held-out clean samples from the same draw for evaluation.

struct NoisyTask {
  Dataset train, test;
  NoiseRecord noise;
};

NoisyTask noisy_task(std::uint64_t seed) {
  SynthConfig c;
  c.num_samples = 3000;
  c.num_annotators = 8;
  c.feature_dim = 8;
  c.num_factions = 2;
  c.faction_boundary_angle = 0.3;
  c.per_annotator_flip_rate = 0.02;
  c.annotations_per_sample = 3;
  c.seed = seed;
  const auto full = generate_synthetic(c);
  auto [noisy, record] = inject_noise(slice_rows(full, 0, 2000), 0.2, seed + 100);
  return {std::move(noisy), slice_rows(full, 2000, 3000), std::move(record)};
}

TrainConfig noisy_config(Arm arm, double psi, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.loss.mode = arm;
  cfg.loss.psi = psi;
  cfg.epochs = 5;
  cfg.warmup_epochs = 2;
  cfg.learning_rate = 0.2;
  cfg.seed = seed;
  return cfg;
}

struct SeedRuns {
  double f1_mt = 0.0, f1_lc = 0.0;
  double auc_hard = 0.0, auc_soft = 0.0;
  double pv_low = 0.0, pv_high = 0.0;
};

std::vector<SeedRuns> noisy_runs;

void run_noisy_experiments() {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto task = noisy_task(seed);
    SeedRuns s;
    s.f1_mt = train(noisy_config(Arm::multitask, 0.0, seed), task.train, &task.test)
                  .history.epochs.back().metrics.f1;
    const auto lc = train(noisy_config(Arm::multitask_lc, 0.5, seed), task.train, &task.test);
    s.f1_lc = lc.history.epochs.back().metrics.f1;

    std::set<std::pair<std::size_t, std::size_t>> flipped(task.noise.flipped.begin(),
                                                          task.noise.flipped.end());
    std::vector<double> hard, soft;
    std::vector<int> label;
    for (std::size_t k = 0; k < lc.final_ledger.cells.size(); ++k) {
      const auto& cell = lc.final_ledger.cells[k];
      const double w = lc.final_fit.cell_weights[k];
      hard.push_back(w >= 0.5 ? 1.0 : 0.0);
      soft.push_back(w);
      label.push_back(flipped.count({cell.sample, cell.annotator}) ? 1 : 0);
    }
    s.auc_hard = oracle::pairwise_auc(hard, label);
    s.auc_soft = oracle::pairwise_auc(soft, label);

    s.pv_low = train(noisy_config(Arm::multitask_lc, 0.25, seed), task.train, &task.test)
                   .history.epochs.back().metrics.prediction_variance;
    s.pv_high = train(noisy_config(Arm::multitask_lc, 1.0, seed), task.train, &task.test)
                    .history.epochs.back().metrics.prediction_variance;
    noisy_runs.push_back(s);
  }
}

Outcome noise_detection() {
  if (noisy_runs.empty()) run_noisy_experiments();
  double hard = 0.0, soft = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    hard += noisy_runs[k].auc_hard / 3.0;
    soft += noisy_runs[k].auc_soft / 3.0;
  }
  return {hard >= 0.8, "mean AUC of w >= 0.5 over 3 seeds " + fmt(hard) +
                           " (AUC of continuous w " + fmt(soft) + ")"};
}

Outcome directional_f1() {
  if (noisy_runs.empty()) run_noisy_experiments();
  int wins = 0;
  std::string per_seed;
  for (const auto& s : noisy_runs) {
    wins += s.f1_lc > s.f1_mt ? 1 : 0;
    per_seed += " " + fmt(100 * s.f1_lc, 2) + "/" + fmt(100 * s.f1_mt, 2);
  }
  return {wins >= 4, "MT+LC beats MT in " + std::to_string(wins) +
                         " of 5 seeds; F1 LC/MT:" + per_seed};
}

Outcome psi_variance() {
  if (noisy_runs.empty()) run_noisy_experiments();
  double low = 0.0, high = 0.0;
  for (const auto& s : noisy_runs) {
    low += s.pv_low / 5.0;
    high += s.pv_high / 5.0;
  }
  return {low > high, "mean prediction variance psi=0.25 " + fmt(low) + ", psi=1 " + fmt(high)};
}

// 7 ---------------------------------------------------------------------------

Outcome involution_and_determinism() {
  SynthConfig c;
  c.num_samples = 400;
  c.num_annotators = 6;
  c.feature_dim = 4;
  c.num_factions = 2;
  c.seed = 7;
  const auto d = generate_synthetic(c);
  bool restored = true;
  for (const auto mode : {NoiseMode::sample, NoiseMode::cell}) {
    const auto once = inject_noise(d, 0.3, 11, mode).first;
    const auto twice = inject_noise(once, 0.3, 11, mode).first;
    restored = restored && twice.annotations == d.annotations && !(once.annotations == d.annotations);
  }
  TrainConfig cfg;
  cfg.seed = 5;
  cfg.hidden = 16;
  const auto a = train(cfg, d);
  cfg.threads = 4;
  const auto b = train(cfg, d);
  const bool identical = a.history.identical(b.history) && a.params == b.params &&
                         history_csv(a.history) == history_csv(b.history);
  return {restored && identical, std::string("double injection ") +
                                     (restored ? "restores" : "does not restore") +
                                     " annotations; 1 vs 4 threads " +
                                     (identical ? "bit-identical" : "differ")};
}

// 8 ---------------------------------------------------------------------------

Outcome metric_hand_checks() {
  int bad = 0;
  auto near = [&](double got, double want) { bad += std::abs(got - want) <= 1e-9 ? 0 : 1; };

  const std::vector<int> y{0, 1, 1, 0, 1};
  const auto perfect = precision_recall_f1(y, y);
  near(perfect.precision, 1.0);
  near(perfect.recall, 1.0);
  near(perfect.f1, 1.0);

  const std::vector<int> pred{1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
  const std::vector<int> ref{1, 1, 0, 1, 0, 0, 0, 0, 0, 0};
  const auto r = precision_recall_f1(pred, ref);
  near(r.per_class[1].precision, 2.0 / 3.0);
  near(r.per_class[1].recall, 2.0 / 3.0);
  near(r.per_class[1].f1, 2.0 / 3.0);

  const auto skew = precision_recall_f1({1, 1, 1, 1}, {0, 1, 0, 1});
  near(skew.per_class[0].f1, 0.0);
  bad += skew.per_class[0].zero_division ? 0 : 1;

  AnnotationMatrix m(4, 3, 2);
  for (std::size_t i = 0; i < 4; ++i) m.set(i, 0, 1);
  m.set(0, 1, 0);
  m.set(1, 1, 1);
  near(annotator_accuracy({{1, 0, 0}, {1, 0, 0}, {1, 0, 0}, {0, 0, 0}}, m), 0.625);

  near(annotation_variance(std::vector<int>{1, 1, 1}), 0.0);
  near(annotation_variance(std::vector<int>{1, 0}), 0.25);
  near(annotation_variance(std::vector<int>{1, 1, 0}), 2.0 / 9.0);

  near(prediction_variance({{1, 1, 1}, {0, 0, 0}}), 0.0);
  near(prediction_variance({{1, 0}, {0, 1}, {1, 0}}), 25.0);
  return {bad == 0, std::to_string(bad) + " mismatches over 17 hand values"};
}

// 9 ---------------------------------------------------------------------------

Outcome smoke_convergence() {
  SynthConfig c;
  c.num_samples = 500;
  c.num_annotators = 3;
  c.feature_dim = 4;
  c.num_factions = 1;
  c.per_annotator_flip_rate = 0.0;
  c.annotations_per_sample = 3;
  c.seed = 9;
  const auto d = generate_synthetic(c);
  TrainConfig cfg;
  cfg.seed = 9;
  const auto r = train(cfg, d);
  if (r.history.abort) return {false, "training aborted: " + r.history.abort->message};
  const double acc = r.history.epochs.back().metrics.majority_accuracy;
  return {acc >= 0.95 && r.history.epochs.size() == 5,
          "majority accuracy " + fmt(acc) + " after " +
              std::to_string(r.history.epochs.size()) + " epochs"};
}

}  // namespace

int main() {
  report(1, "gradient oracle", gradient_oracle);
  report(2, "loss identities", loss_identities);
  report(3, "EM recovery", em_recovery);
  report(4, "noise-detection separation", noise_detection);
  report(5, "multitask+LC beats multitask under noise", directional_f1);
  report(6, "prediction variance falls with psi", psi_variance);
  report(7, "noise involution and determinism", involution_and_determinism);
  report(8, "metric hand checks", metric_hand_checks);
  report(9, "smoke convergence", smoke_convergence);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
