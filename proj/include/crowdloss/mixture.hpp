#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <json.hpp>

#include "crowdloss/annotation.hpp"
#include "crowdloss/common.hpp"
#include "crowdloss/loss.hpp"

namespace crowdloss {

/// Raw per-cell CE losses gathered over one full pass of the training data.
struct LossLedger {
  struct Cell {
    std::size_t sample = 0;
    std::size_t annotator = 0;
    double loss = 0.0;
  };
  std::size_t epoch = 0;
  std::vector<Cell> cells;

  std::vector<double> losses() const {
    std::vector<double> out;
    out.reserve(cells.size());
    for (const auto& c : cells) out.push_back(c.loss);
    return out;
  }
};

inline constexpr double kLossEps = 1e-4;

/// Min-max scaling to [0, 1], then clamped to [kLossEps, 1 - kLossEps].
/// Output order follows input order.
inline std::vector<double> normalize_losses(const std::vector<double>& losses) {
  require(!losses.empty(), "normalize_losses: empty ledger");
  const auto [lo_it, hi_it] = std::minmax_element(losses.begin(), losses.end());
  const double lo = *lo_it, hi = *hi_it;
  require(std::isfinite(lo) && std::isfinite(hi), "normalize_losses: non-finite loss");
  if (!(hi > lo)) throw Error("degenerate ledger");
  std::vector<double> out;
  out.reserve(losses.size());
  for (double v : losses)
    out.push_back(std::clamp((v - lo) / (hi - lo), kLossEps, 1.0 - kLossEps));
  return out;
}

inline std::vector<double> normalize_losses(const LossLedger& ledger) {
  return normalize_losses(ledger.losses());
}

enum class MixtureFamily { beta, gaussian };

inline MixtureFamily parse_mixture_family(const std::string& s) {
  if (s == "beta") return MixtureFamily::beta;
  if (s == "gaussian") return MixtureFamily::gaussian;
  throw Error("unknown mixture family '" + s + "' (expected beta|gaussian)");
}

/// Beta(a, b), or Normal(mean = a, variance = b) for the gaussian family.
struct MixtureComponent {
  double a = 1.0;
  double b = 1.0;

  double mean(MixtureFamily f) const {
    return f == MixtureFamily::beta ? a / (a + b) : a;
  }
  double variance(MixtureFamily f) const {
    if (f == MixtureFamily::gaussian) return b;
    const double s = a + b;
    return a * b / (s * s * (s + 1.0));
  }
  double log_pdf(MixtureFamily f, double x) const {
    if (f == MixtureFamily::gaussian) {
      const double d = x - a;
      return -0.5 * (std::log(2.0 * M_PI * b) + d * d / b);
    }
    return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) -
           (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
  }
};

struct MixtureParams {
  MixtureFamily family = MixtureFamily::beta;
  MixtureComponent component_low;   // low-loss (agreeing / clean) mode
  MixtureComponent component_high;  // high-loss (disagreeing / noisy) mode
  double mixing_pi = 0.5;           // weight of component_high
  std::size_t iterations = 0;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  bool converged = false;           // false: hit max_iter, best-so-far kept
  bool weak_separation = false;
  std::vector<double> log_likelihood_trace;  // after every EM iteration
};

struct EmOptions {
  std::size_t max_iter = 100;
  double tol = 1e-6;
  MixtureFamily family = MixtureFamily::beta;
};

/// Below this many observations no mixture is fitted (w = 0).
inline constexpr std::size_t kMinMixtureObservations = 50;

namespace detail {

inline constexpr double kShapeMin = 1e-2;
inline constexpr double kShapeMax = 1e4;
inline constexpr double kVarMin = 1e-6;

inline double mixture_log_likelihood(const MixtureParams& p,
                                     const std::vector<double>& x) {
  double ll = 0.0;
  const double lpl = std::log(1.0 - p.mixing_pi), lph = std::log(p.mixing_pi);
  for (double v : x) {
    const double l0 = lpl + p.component_low.log_pdf(p.family, v);
    const double l1 = lph + p.component_high.log_pdf(p.family, v);
    const double mx = std::max(l0, l1);
    ll += mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
  }
  return ll;
}

/// Expected complete-data log-likelihood of one component under weights r.
inline double component_q(MixtureFamily f, const MixtureComponent& c,
                          const std::vector<double>& x,
                          const std::vector<double>& r) {
  double q = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (r[i] > 0.0) q += r[i] * c.log_pdf(f, x[i]);
  return q;
}

inline bool weighted_moments(const std::vector<double>& x,
                             const std::vector<double>& r, double& mean,
                             double& var) {
  double w = 0.0, s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    w += r[i];
    s += r[i] * x[i];
  }
  if (!(w > 1e-12)) return false;
  mean = s / w;
  double ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) ss += r[i] * (x[i] - mean) * (x[i] - mean);
  var = ss / w;
  return true;
}

inline MixtureComponent beta_from_moments(double mean, double var) {
  mean = std::clamp(mean, 1e-6, 1.0 - 1e-6);
  var = std::clamp(var, kVarMin, mean * (1.0 - mean) * (1.0 - 1e-6));
  const double common = mean * (1.0 - mean) / var - 1.0;
  return {std::clamp(mean * common, kShapeMin, kShapeMax),
          std::clamp((1.0 - mean) * common, kShapeMin, kShapeMax)};
}

/// Newton ascent on the weighted Beta log-likelihood, started at `start`.
inline MixtureComponent beta_weighted_mle(const std::vector<double>& x,
                                          const std::vector<double>& r,
                                          MixtureComponent start) {
  double w = 0.0, s1 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    w += r[i];
    s1 += r[i] * std::log(x[i]);
    s2 += r[i] * std::log1p(-x[i]);
  }
  auto objective = [&](double a, double b) {
    return (a - 1.0) * s1 + (b - 1.0) * s2 -
           w * (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
  };
  double a = start.a, b = start.b;
  double f = objective(a, b);
  for (int it = 0; it < 50; ++it) {
    using boost::math::digamma;
    using boost::math::trigamma;
    const double dab = digamma(a + b), tab = trigamma(a + b);
    const double ga = s1 - w * (digamma(a) - dab);
    const double gb = s2 - w * (digamma(b) - dab);
    // Negative Hessian (positive definite).
    const double haa = w * (trigamma(a) - tab);
    const double hbb = w * (trigamma(b) - tab);
    const double hab = -w * tab;
    const double det = haa * hbb - hab * hab;
    if (!(det > 0.0)) break;
    double da = (hbb * ga - hab * gb) / det;
    double db = (haa * gb - hab * ga) / det;
    double step = 1.0;
    bool moved = false;
    for (int k = 0; k < 40; ++k, step *= 0.5) {
      const double na = a + step * da, nb = b + step * db;
      if (!(na > kShapeMin && nb > kShapeMin && na < kShapeMax && nb < kShapeMax))
        continue;
      const double nf = objective(na, nb);
      if (nf >= f) {
        moved = nf - f > 1e-13 * std::abs(f);
        a = na;
        b = nb;
        f = nf;
        break;
      }
    }
    if (!moved) break;
  }
  return {a, b};
}

/// M-step for one component. Beta: weighted MLE by Newton ascent from the
/// method-of-moments estimate, kept only if it does not lower the expected
/// complete-data log-likelihood, so EM stays monotone.
inline MixtureComponent m_step(MixtureFamily f, const MixtureComponent& old,
                               const std::vector<double>& x,
                               const std::vector<double>& r, bool have_old) {
  double mean = 0.0, var = 0.0;
  if (!weighted_moments(x, r, mean, var)) return old;
  if (f == MixtureFamily::gaussian) return {mean, std::max(var, kVarMin)};
  const MixtureComponent mom = beta_from_moments(mean, var);
  const MixtureComponent mle = beta_weighted_mle(x, r, mom);
  if (!have_old) return mle;
  return component_q(f, mle, x, r) >= component_q(f, old, x, r) ? mle : old;
}

inline void order_components(MixtureParams& p) {
  if (p.component_low.mean(p.family) > p.component_high.mean(p.family)) {
    std::swap(p.component_low, p.component_high);
    p.mixing_pi = 1.0 - p.mixing_pi;
  }
}

/// Weak when the component means are within 0.1 or Ashman's D < 2.
inline bool is_weakly_separated(const MixtureParams& p) {
  const double m0 = p.component_low.mean(p.family);
  const double m1 = p.component_high.mean(p.family);
  const double v = p.component_low.variance(p.family) +
                   p.component_high.variance(p.family);
  const double ashman_d = std::sqrt(2.0) * std::abs(m1 - m0) / std::sqrt(v);
  return std::abs(m1 - m0) < 0.1 || ashman_d < 2.0;
}

}  // namespace detail

/// Two-component EM on values in (0, 1). Responsibilities start from a split
/// at the median. Stops when the relative log-likelihood change drops below
/// `tol` or after `max_iter` iterations (converged = false then).
inline MixtureParams fit_mixture_em(const std::vector<double>& x,
                                    const EmOptions& opt = {}) {
  require(x.size() >= 2, "fit_mixture_em: need at least two values");
  for (double v : x)
    require(v > 0.0 && v < 1.0, "fit_mixture_em: values must lie in (0, 1)");
  const std::size_t n = x.size();
  MixtureParams p;
  p.family = opt.family;

  std::vector<double> sorted = x;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n / 2),
                   sorted.end());
  const double median = sorted[n / 2];
  std::vector<double> r_high(n), r_low(n);
  std::size_t above = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r_high[i] = x[i] > median ? 1.0 : 0.0;
    above += x[i] > median ? 1 : 0;
  }
  if (above == 0 || above == n)  // heavy ties at the median
    for (std::size_t i = 0; i < n; ++i) r_high[i] = i % 2 == 0 ? 1.0 : 0.0;
  for (std::size_t i = 0; i < n; ++i) r_low[i] = 1.0 - r_high[i];

  auto m_step_all = [&](bool have_old) {
    p.mixing_pi = std::clamp(
        std::accumulate(r_high.begin(), r_high.end(), 0.0) / static_cast<double>(n),
        1e-6, 1.0 - 1e-6);
    p.component_low = detail::m_step(p.family, p.component_low, x, r_low, have_old);
    p.component_high = detail::m_step(p.family, p.component_high, x, r_high, have_old);
  };
  m_step_all(false);
  double ll_prev = detail::mixture_log_likelihood(p, x);

  for (std::size_t it = 1; it <= opt.max_iter; ++it) {
    const double lpl = std::log(1.0 - p.mixing_pi), lph = std::log(p.mixing_pi);
    for (std::size_t i = 0; i < n; ++i) {
      const double l0 = lpl + p.component_low.log_pdf(p.family, x[i]);
      const double l1 = lph + p.component_high.log_pdf(p.family, x[i]);
      r_high[i] = 1.0 / (1.0 + std::exp(l0 - l1));
      r_low[i] = 1.0 - r_high[i];
    }
    m_step_all(true);
    const double ll = detail::mixture_log_likelihood(p, x);
    p.log_likelihood_trace.push_back(ll);
    p.iterations = it;
    p.log_likelihood = ll;
    if (std::abs(ll - ll_prev) < opt.tol * std::max(1.0, std::abs(ll_prev))) {
      p.converged = true;
      break;
    }
    ll_prev = ll;
  }
  detail::order_components(p);
  p.weak_separation = detail::is_weakly_separated(p);
  return p;
}

inline MixtureParams fit_beta_mixture_em(const std::vector<double>& x,
                                         std::size_t max_iter = 100,
                                         double tol = 1e-6) {
  return fit_mixture_em(x, EmOptions{max_iter, tol, MixtureFamily::beta});
}

namespace detail {

/// log P(high | ell) - log P(low | ell).
inline double high_log_odds(const MixtureParams& p, double ell) {
  return std::log(p.mixing_pi) + p.component_high.log_pdf(p.family, ell) -
         std::log(1.0 - p.mixing_pi) - p.component_low.log_pdf(p.family, ell);
}

/// The log-odds has at most one stationary point in (0, 1) for both
/// families; returns it if it exists.
inline std::optional<double> log_odds_stationary_point(const MixtureParams& p) {
  const auto& lo = p.component_low;
  const auto& hi = p.component_high;
  double s = 0.0;
  if (p.family == MixtureFamily::beta) {
    // d/dl [alpha log l + beta log(1 - l)] = 0 at l = alpha / (alpha + beta).
    const double alpha = hi.a - lo.a, beta = hi.b - lo.b;
    if (alpha == 0.0 || beta == 0.0 || (alpha > 0.0) != (beta > 0.0)) return std::nullopt;
    s = alpha / (alpha + beta);
  } else {
    const double curv = 1.0 / lo.b - 1.0 / hi.b;
    if (curv == 0.0) return std::nullopt;
    s = (lo.a / lo.b - hi.a / hi.b) / curv;
  }
  if (!(s > 0.0 && s < 1.0)) return std::nullopt;
  return s;
}

}  // namespace detail

/// Weight of the high-loss component at normalized loss ell: the posterior
/// minimized over [ell, 1 - eps], so w never decreases with loss. Without
/// this, a high-loss component with an integrable spike at 0 would claim
/// the lowest-loss cells.
inline double posterior_weight(const MixtureParams& p, double ell) {
  const double top = 1.0 - kLossEps;
  ell = std::clamp(ell, kLossEps, top);
  double g = std::min(detail::high_log_odds(p, ell), detail::high_log_odds(p, top));
  if (const auto s = detail::log_odds_stationary_point(p); s && *s > ell && *s < top)
    g = std::min(g, detail::high_log_odds(p, *s));
  return 1.0 / (1.0 + std::exp(-g));
}

/// Complement of posterior_weight.
inline double posterior_low(const MixtureParams& p, double ell) {
  return 1.0 - posterior_weight(p, ell);
}

// Correction weights from a ledger -------------------------------------------

enum class MixtureScope { per_annotator, global };

inline MixtureScope parse_mixture_scope(const std::string& s) {
  if (s == "per_annotator") return MixtureScope::per_annotator;
  if (s == "global") return MixtureScope::global;
  throw Error("unknown mixture scope '" + s + "' (expected per_annotator|global)");
}

struct MixtureFitInfo {
  std::size_t annotator = 0;  // unused in global scope
  std::size_t observations = 0;
  bool fitted = false;        // false: fallback to w = 0
  std::string fallback_reason;
  MixtureParams params;
};

struct WeightFit {
  CorrectionWeights weights;
  std::vector<MixtureFitInfo> fits;
  std::vector<double> cell_weights;     // aligned with ledger.cells
  std::vector<double> cell_normalized;  // aligned with ledger.cells; -1 if unfitted
};

/// Fits one mixture per annotator (or one over per-sample mean losses in
/// global scope) and maps every ledger cell to its posterior w.
inline WeightFit fit_correction_weights(const LossLedger& ledger,
                                        std::size_t num_samples,
                                        std::size_t num_annotators,
                                        MixtureScope scope,
                                        const EmOptions& opt = {}) {
  WeightFit out;
  out.weights = CorrectionWeights(
      num_samples, num_annotators,
      scope == MixtureScope::global ? CorrectionWeights::Scope::global
                                    : CorrectionWeights::Scope::per_annotator);
  out.cell_weights.assign(ledger.cells.size(), 0.0);
  out.cell_normalized.assign(ledger.cells.size(), -1.0);

  auto fit_group = [&](const std::vector<double>& raw, MixtureFitInfo& info,
                       std::vector<double>& w_out, std::vector<double>& norm_out) {
    info.observations = raw.size();
    w_out.assign(raw.size(), 0.0);
    norm_out.assign(raw.size(), -1.0);
    if (raw.size() < kMinMixtureObservations) {
      info.fallback_reason = "too few observations";
      return;
    }
    std::vector<double> norm;
    try {
      norm = normalize_losses(raw);
    } catch (const Error&) {
      info.fallback_reason = "degenerate ledger";
      return;
    }
    info.params = fit_mixture_em(norm, opt);
    info.fitted = true;
    for (std::size_t k = 0; k < norm.size(); ++k)
      w_out[k] = posterior_weight(info.params, norm[k]);
    norm_out = std::move(norm);
  };

  if (scope == MixtureScope::per_annotator) {
    std::vector<std::vector<std::size_t>> by_annotator(num_annotators);
    for (std::size_t c = 0; c < ledger.cells.size(); ++c)
      by_annotator.at(ledger.cells[c].annotator).push_back(c);
    for (std::size_t a = 0; a < num_annotators; ++a) {
      std::vector<double> raw;
      for (std::size_t c : by_annotator[a]) raw.push_back(ledger.cells[c].loss);
      MixtureFitInfo info;
      info.annotator = a;
      std::vector<double> w, norm;
      fit_group(raw, info, w, norm);
      for (std::size_t k = 0; k < by_annotator[a].size(); ++k) {
        const std::size_t c = by_annotator[a][k];
        out.cell_weights[c] = w[k];
        out.cell_normalized[c] = norm[k];
        out.weights.at(ledger.cells[c].sample, a) = w[k];
      }
      out.fits.push_back(std::move(info));
    }
  } else {
    std::vector<double> sum(num_samples, 0.0);
    std::vector<std::size_t> count(num_samples, 0);
    for (const auto& c : ledger.cells) {
      sum.at(c.sample) += c.loss;
      ++count[c.sample];
    }
    std::vector<std::size_t> samples;
    std::vector<double> raw;
    for (std::size_t i = 0; i < num_samples; ++i)
      if (count[i] > 0) {
        samples.push_back(i);
        raw.push_back(sum[i] / static_cast<double>(count[i]));
      }
    MixtureFitInfo info;
    std::vector<double> w, norm;
    fit_group(raw, info, w, norm);
    std::vector<double> w_sample(num_samples, 0.0), n_sample(num_samples, -1.0);
    for (std::size_t k = 0; k < samples.size(); ++k) {
      w_sample[samples[k]] = w[k];
      n_sample[samples[k]] = norm[k];
    }
    for (std::size_t c = 0; c < ledger.cells.size(); ++c) {
      const auto& cell = ledger.cells[c];
      out.cell_weights[c] = w_sample[cell.sample];
      out.cell_normalized[c] = n_sample[cell.sample];
      out.weights.at(cell.sample, cell.annotator) = w_sample[cell.sample];
    }
    out.fits.push_back(std::move(info));
  }
  return out;
}

// Agree / disagree statistics ------------------------------------------------

struct SplitReport {
  std::size_t agree_count = 0;
  std::size_t disagree_count = 0;
  double agree_fraction = 0.0;
  double disagree_fraction = 0.0;
  double agree_majority_fraction = 0.0;     // of Agree cells matching majority
  double disagree_majority_fraction = 0.0;  // of Disagree cells matching majority
};

/// Cells with w < 0.5 are Agree, the rest Disagree. `cell_weights` aligns
/// with ledger.cells.
inline SplitReport agree_disagree_split(const LossLedger& ledger,
                                        const std::vector<double>& cell_weights,
                                        const AnnotationMatrix& annotations,
                                        const std::vector<Majority>& majorities) {
  require(cell_weights.size() == ledger.cells.size(),
          "agree_disagree_split: weight count != ledger size");
  SplitReport r;
  std::size_t agree_major = 0, disagree_major = 0;
  for (std::size_t c = 0; c < ledger.cells.size(); ++c) {
    const auto& cell = ledger.cells[c];
    const auto label = annotations.get(cell.sample, cell.annotator);
    require(label.has_value(), "agree_disagree_split: ledger cell not annotated");
    const bool matches = *label == majorities.at(cell.sample).label;
    if (cell_weights[c] < 0.5) {
      ++r.agree_count;
      agree_major += matches ? 1 : 0;
    } else {
      ++r.disagree_count;
      disagree_major += matches ? 1 : 0;
    }
  }
  const double total = static_cast<double>(r.agree_count + r.disagree_count);
  if (total > 0) {
    r.agree_fraction = static_cast<double>(r.agree_count) / total;
    r.disagree_fraction = static_cast<double>(r.disagree_count) / total;
  }
  if (r.agree_count > 0)
    r.agree_majority_fraction =
        static_cast<double>(agree_major) / static_cast<double>(r.agree_count);
  if (r.disagree_count > 0)
    r.disagree_majority_fraction =
        static_cast<double>(disagree_major) / static_cast<double>(r.disagree_count);
  return r;
}

/// Single-mixture variant: w from `mixture` on the globally normalized ledger.
inline SplitReport agree_disagree_split(const LossLedger& ledger,
                                        const MixtureParams& mixture,
                                        const AnnotationMatrix& annotations,
                                        const std::vector<Majority>& majorities) {
  const auto norm = normalize_losses(ledger);
  std::vector<double> w;
  w.reserve(norm.size());
  for (double v : norm) w.push_back(posterior_weight(mixture, v));
  return agree_disagree_split(ledger, w, annotations, majorities);
}

inline nlohmann::ordered_json to_json(const SplitReport& r) {
  return {{"agree_count", r.agree_count},
          {"disagree_count", r.disagree_count},
          {"agree_fraction", r.agree_fraction},
          {"disagree_fraction", r.disagree_fraction},
          {"agree_majority_fraction", r.agree_majority_fraction},
          {"disagree_majority_fraction", r.disagree_majority_fraction}};
}

inline nlohmann::ordered_json to_json(const MixtureParams& p) {
  const bool beta = p.family == MixtureFamily::beta;
  auto comp = [&](const MixtureComponent& c) {
    nlohmann::ordered_json j;
    if (beta) {
      j["alpha"] = c.a;
      j["beta"] = c.b;
    } else {
      j["mean"] = c.a;
      j["variance"] = c.b;
    }
    j["component_mean"] = c.mean(p.family);
    return j;
  };
  return {{"family", beta ? "beta" : "gaussian"},
          {"component_low", comp(p.component_low)},
          {"component_high", comp(p.component_high)},
          {"mixing_pi", p.mixing_pi},
          {"iterations", p.iterations},
          {"log_likelihood", p.log_likelihood},
          {"converged", p.converged},
          {"weak_separation", p.weak_separation}};
}

// Histogram export --------------------------------------------------------

struct HistogramBin {
  double lo = 0.0, hi = 0.0;
  std::size_t majority = 0;  // cells whose label equals the sample's majority
  std::size_t minority = 0;
};

/// 50 equal-width bins over [0, 1] of normalized loss, split by majority
/// agreement. Cells with a negative normalized value (unfitted) are skipped.
inline std::vector<HistogramBin> loss_histogram(
    const LossLedger& ledger, const std::vector<double>& normalized,
    const AnnotationMatrix& annotations, const std::vector<Majority>& majorities,
    std::size_t bins = 50) {
  require(normalized.size() == ledger.cells.size(), "loss_histogram: size mismatch");
  std::vector<HistogramBin> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = static_cast<double>(b) / static_cast<double>(bins);
    out[b].hi = static_cast<double>(b + 1) / static_cast<double>(bins);
  }
  for (std::size_t c = 0; c < ledger.cells.size(); ++c) {
    const double v = normalized[c];
    if (v < 0.0) continue;
    const auto b = std::min(bins - 1, static_cast<std::size_t>(v * static_cast<double>(bins)));
    const auto& cell = ledger.cells[c];
    const bool matches =
        annotations.get(cell.sample, cell.annotator) == majorities.at(cell.sample).label;
    ++(matches ? out[b].majority : out[b].minority);
  }
  return out;
}

}  // namespace crowdloss
