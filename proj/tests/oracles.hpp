#pragma once

// Test-only reference computations. Nothing here calls into the code path it
// is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "crowdloss/annotation.hpp"
#include "crowdloss/model.hpp"

namespace oracle {

/// Central finite differences of f over every coordinate of params.
template <typename F>
std::vector<double> finite_difference(crowdloss::ModelParams params, F&& f,
                                      double step = 1e-5) {
  std::vector<double> out(params.size());
  auto v = params.values();
  for (std::size_t k = 0; k < v.size(); ++k) {
    const double orig = v[k];
    v[k] = orig + step;
    const double up = f(params);
    v[k] = orig - step;
    const double down = f(params);
    v[k] = orig;
    out[k] = (up - down) / (2.0 * step);
  }
  return out;
}

/// max_k |a_k - b_k| / max(|a_k|, |b_k|, floor).
inline double max_relative_error(std::span<const double> a, std::span<const double> b,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double denom = std::max({std::abs(a[k]), std::abs(b[k]), floor});
    worst = std::max(worst, std::abs(a[k] - b[k]) / denom);
  }
  return worst;
}

/// ROC AUC by counting all (positive, negative) pairs; ties count 1/2.
inline double pairwise_auc(const std::vector<double>& score, const std::vector<int>& label) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < score.size(); ++i) (label[i] ? pos : neg).push_back(score[i]);
  if (pos.empty() || neg.empty()) return 0.5;
  std::sort(neg.begin(), neg.end());
  double acc = 0.0;
  for (double p : pos) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(neg.begin(), neg.end(), p);
    acc += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return acc / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

/// Random valid dataset: every sample has at least one annotation and every
/// annotator appears at least once.
inline crowdloss::Dataset random_dataset(std::mt19937_64& rng, std::size_t n,
                                         std::size_t annotators, std::size_t dim,
                                         int classes, bool with_truth) {
  std::normal_distribution<double> normal(0.0, 3.0);
  std::uniform_int_distribution<int> label(0, classes - 1);
  std::bernoulli_distribution present(0.5);
  crowdloss::Dataset d;
  d.annotations = crowdloss::AnnotationMatrix(n, annotators, classes);
  if (with_truth) d.ground_truth.emplace();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> x(dim);
    for (auto& v : x) v = normal(rng);
    d.features.push_back(x);
    d.sample_ids.push_back("sample-" + std::to_string(i) + (i % 3 == 0 ? " \"q\"" : ""));
    bool any = false;
    for (std::size_t a = 0; a < annotators; ++a)
      if (present(rng) || (i == a % n) || (a + 1 == annotators && !any)) {
        d.annotations.set(i, a, label(rng));
        any = true;
      }
    if (with_truth) d.ground_truth->push_back(label(rng));
  }
  for (std::size_t a = 0; a < annotators; ++a)
    d.annotator_ids.push_back("ann/" + std::to_string(a * 7 % 13) + "-" + std::to_string(a));
  return d;
}

/// Draws from pi_high * Beta(a1, b1) + (1 - pi_high) * Beta(a0, b0).
inline std::vector<double> sample_beta_mixture(std::mt19937_64& rng, std::size_t n,
                                               double a0, double b0, double a1,
                                               double b1, double pi_high) {
  auto beta = [&](double a, double b) {
    std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
    const double x = ga(rng), y = gb(rng);
    return x / (x + y);
  };
  std::bernoulli_distribution high(pi_high);
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = high(rng) ? beta(a1, b1) : beta(a0, b0);
    out.push_back(std::clamp(v, 1e-4, 1.0 - 1e-4));
  }
  return out;
}

/// Total batch objective recomputed from forward passes and the loss-suite
/// functions, for finite-difference checks of compute_gradients.
inline double batch_objective(const crowdloss::ModelParams& model,
                              const crowdloss::Batch& batch,
                              const crowdloss::LossSpec& spec) {
  using namespace crowdloss;
  const std::size_t B = batch.examples.size();
  const std::size_t A = model.dims().annotators;
  const std::size_t M = model.dims().classes;
  auto term = [&](const Rows& p, const Example& ex) {
    if (!uses_correction(spec.mode)) return loss_mt(p, ex.labels, spec.mt_norm);
    const Rows guess = ex.guess.empty() ? Rows(A, Row(M, 1.0 / static_cast<double>(M)))
                                        : ex.guess;
    return loss_mlc(p, ex.labels, detach_guess(guess), ex.weights, spec.psi, spec.mt_norm);
  };
  double data = 0.0;
  Rows all_rows;
  Rows mean_p(A, Row(M, 0.0));
  for (std::size_t b = 0; b < B; ++b) {
    const auto& ex = batch.examples[b];
    Rows p;
    if (batch.mix) {
      const auto& mx = *batch.mix;
      const auto& partner = batch.examples[mx.partner[b]];
      p = forward_mixup(model, ex.x, partner.x, mx.lambda, mx.layer).probs;
      data += mx.lambda * term(p, ex) + (1.0 - mx.lambda) * term(p, partner);
    } else {
      p = forward(model, ex.x).probs;
      data += term(p, ex);
    }
    for (std::size_t a = 0; a < A; ++a) {
      all_rows.push_back(p[a]);
      for (std::size_t m = 0; m < M; ++m) mean_p[a][m] += p[a][m] / static_cast<double>(B);
    }
  }
  return data / static_cast<double>(B) +
         spec.entropy_penalty_coeff * entropy_penalty(all_rows) +
         spec.class_balance_coeff * class_balance_reg(mean_p);
}

/// Random batch for model dims `d`: Gaussian inputs, random missingness
/// (at least one present label), weights in [0, 1] and a random self-guess.
inline crowdloss::Batch random_batch(std::mt19937_64& rng, const crowdloss::ModelDims& d,
                                     std::size_t size, bool mix) {
  using namespace crowdloss;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::gamma_distribution<double> gamma(1.0, 1.0);
  Batch batch;
  for (std::size_t b = 0; b < size; ++b) {
    Example ex;
    ex.x.resize(d.input);
    for (auto& v : ex.x) v = normal(rng);
    ex.labels.resize(d.annotators);
    ex.weights.resize(d.annotators);
    for (std::size_t a = 0; a < d.annotators; ++a) {
      if (a == b % d.annotators || unit(rng) < 0.6)
        ex.labels[a] = static_cast<int>(rng() % d.classes);
      ex.weights[a] = unit(rng);
      Row z(d.classes);
      double s = 0.0;
      for (auto& v : z) s += (v = gamma(rng) + 1e-2);
      for (auto& v : z) v /= s;
      ex.guess.push_back(z);
    }
    batch.examples.push_back(std::move(ex));
  }
  if (mix) {
    MixPlan plan;
    plan.lambda = 0.1 + 0.8 * unit(rng);
    plan.layer = static_cast<std::size_t>(rng() % (d.layers + 1));
    for (std::size_t b = 0; b < size; ++b) plan.partner.push_back((b + 1 + rng() % size) % size);
    batch.mix = plan;
  }
  return batch;
}

}  // namespace oracle
