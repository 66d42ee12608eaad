#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crowdloss/common.hpp"

namespace crowdloss {

using Row = std::vector<double>;
using Rows = std::vector<Row>;

/// Floor applied to probabilities before taking logs.
inline constexpr double kProbFloor = 1e-12;

/// The four training arms.
enum class Arm {
  baseline,      // single head on the majority label, plain CE
  baseline_lc,   // single head on the majority label, loss correction
  multitask,     // one head per annotator, L_MT
  multitask_lc,  // one head per annotator, L_MLC
};

inline bool uses_correction(Arm a) {
  return a == Arm::baseline_lc || a == Arm::multitask_lc;
}
inline bool is_multitask(Arm a) {
  return a == Arm::multitask || a == Arm::multitask_lc;
}

inline Arm parse_arm(const std::string& s) {
  if (s == "baseline" || s == "ce_majority") return Arm::baseline;
  if (s == "baseline_lc" || s == "ce_majority+lc" || s == "ce_majority_lc")
    return Arm::baseline_lc;
  if (s == "multitask" || s == "mt") return Arm::multitask;
  if (s == "multitask_lc" || s == "mt+lc" || s == "mt_lc")
    return Arm::multitask_lc;
  throw Error("unknown mode '" + s +
              "' (expected baseline|baseline_lc|multitask|multitask_lc)");
}

inline std::string to_string(Arm a) {
  switch (a) {
    case Arm::baseline: return "baseline";
    case Arm::baseline_lc: return "baseline_lc";
    case Arm::multitask: return "multitask";
    case Arm::multitask_lc: return "multitask_lc";
  }
  return "?";
}

/// How the per-sample multitask sum is normalized.
enum class MtNorm { present, total };

/// Where correction weights come from during the correction phase.
enum class WeightSource { mixture, fixed };

struct LossSpec {
  Arm mode = Arm::multitask_lc;
  double psi = 0.5;
  double entropy_penalty_coeff = 0.1;
  double class_balance_coeff = 1.0;
  MtNorm mt_norm = MtNorm::present;
  WeightSource weight_source = WeightSource::mixture;
  double fixed_weight = 0.0;  // used when weight_source == fixed

  void validate() const {
    require(std::isfinite(psi) && psi >= 0.0, "psi must be >= 0");
    require(std::isfinite(entropy_penalty_coeff) && entropy_penalty_coeff >= 0,
            "entropy_penalty_coeff must be finite and >= 0");
    require(std::isfinite(class_balance_coeff) && class_balance_coeff >= 0,
            "class_balance_coeff must be finite and >= 0");
    require(fixed_weight >= 0.0 && fixed_weight <= 1.0,
            "fixed_weight must be in [0, 1]");
  }
};

/// Correction weight per (sample, annotator). In global scope every
/// annotator of a sample shares one value.
struct CorrectionWeights {
  enum class Scope { per_annotator, global };
  Scope scope = Scope::per_annotator;
  std::size_t num_annotators = 0;
  std::vector<double> values;  // row-major N x A

  CorrectionWeights() = default;
  CorrectionWeights(std::size_t n, std::size_t a, Scope s = Scope::per_annotator)
      : scope(s), num_annotators(a), values(n * a, 0.0) {}

  double at(std::size_t sample, std::size_t annotator) const {
    return values[sample * num_annotators + annotator];
  }
  double& at(std::size_t sample, std::size_t annotator) {
    return values[sample * num_annotators + annotator];
  }
  bool all_zero() const {
    for (double v : values)
      if (v != 0.0) return false;
    return true;
  }
};

/// A model's own prediction, frozen. Holding this type is the contract that
/// no gradient flows through it.
struct DetachedGuess {
  Rows rows;
};

inline DetachedGuess detach_guess(const Rows& p_all) { return {p_all}; }

inline double clamped_log(double p) {
  return std::log(std::clamp(p, kProbFloor, 1.0));
}

/// -sum_m t_m log p_m for an arbitrary target weighting t.
inline double cross_entropy(std::span<const double> p,
                            std::span<const double> t) {
  require(p.size() == t.size(), "cross_entropy: size mismatch");
  double s = 0.0;
  for (std::size_t m = 0; m < p.size(); ++m)
    if (t[m] != 0.0) s -= t[m] * clamped_log(p[m]);
  return s;
}

inline double loss_ce(std::span<const double> p, std::span<const double> y) {
  return cross_entropy(p, y);
}

inline double loss_ce(std::span<const double> p, int label) {
  require(label >= 0 && static_cast<std::size_t>(label) < p.size(),
          "label out of range");
  return -clamped_log(p[static_cast<std::size_t>(label)]);
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// Mean CE over present annotators (or divided by A with MtNorm::total).
inline double loss_mt(const Rows& p_all,
                      const std::vector<std::optional<int>>& y_all,
                      MtNorm norm = MtNorm::present) {
  require(p_all.size() == y_all.size(), "loss_mt: head/label count mismatch");
  double s = 0.0;
  std::size_t present = 0;
  for (std::size_t a = 0; a < y_all.size(); ++a)
    if (y_all[a]) {
      s += loss_ce(p_all[a], *y_all[a]);
      ++present;
    }
  if (present == 0) throw Error("loss_mt: no annotator present");
  const double denom = norm == MtNorm::present
                           ? static_cast<double>(present)
                           : static_cast<double>(y_all.size());
  return s / denom;
}

/// (1 - w) CE(p, y) + w * CE(p, z).
inline double loss_lc(std::span<const double> p, std::span<const double> y,
                      std::span<const double> z, double w) {
  if (!(w >= 0.0 && w <= 1.0)) throw Error("loss_lc: w must be in [0, 1]");
  return (1.0 - w) * cross_entropy(p, y) + w * cross_entropy(p, z);
}

/// Mean over present annotators of (1 - w_a) CE(p_a, y_a) + psi w_a CE(p_a, z_a).
inline double loss_mlc(const Rows& p_all,
                       const std::vector<std::optional<int>>& y_all,
                       const DetachedGuess& z, std::span<const double> weights,
                       double psi, MtNorm norm = MtNorm::present) {
  if (!(psi >= 0.0)) throw Error("loss_mlc: psi must be >= 0");
  require(p_all.size() == y_all.size() && z.rows.size() == p_all.size() &&
              weights.size() == p_all.size(),
          "loss_mlc: head count mismatch");
  double s = 0.0;
  std::size_t present = 0;
  for (std::size_t a = 0; a < y_all.size(); ++a) {
    if (!y_all[a]) continue;
    const double w = weights[a];
    if (!(w >= 0.0 && w <= 1.0)) throw Error("loss_mlc: w must be in [0, 1]");
    s += (1.0 - w) * loss_ce(p_all[a], *y_all[a]) +
         psi * w * cross_entropy(p_all[a], z.rows[a]);
    ++present;
  }
  if (present == 0) throw Error("loss_mlc: no annotator present");
  const double denom = norm == MtNorm::present
                           ? static_cast<double>(present)
                           : static_cast<double>(y_all.size());
  return s / denom;
}

/// -mean_a H(p_a). Adding coeff * this to a minimized loss raises entropy.
inline double entropy_penalty(const Rows& p_all) {
  require(!p_all.empty(), "entropy_penalty: no rows");
  double s = 0.0;
  for (const auto& p : p_all) s += entropy(p);
  return -s / static_cast<double>(p_all.size());
}

/// Mean over heads of KL(uniform || batch-mean prediction).
inline double class_balance_reg(const Rows& batch_mean_p) {
  require(!batch_mean_p.empty(), "class_balance_reg: no heads");
  double s = 0.0;
  for (const auto& p : batch_mean_p) {
    const double u = 1.0 / static_cast<double>(p.size());
    for (double v : p) s += u * (std::log(u) - clamped_log(v));
  }
  return s / static_cast<double>(batch_mean_p.size());
}

}  // namespace crowdloss
