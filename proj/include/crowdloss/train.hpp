#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdloss/annotation.hpp"
#include "crowdloss/common.hpp"
#include "crowdloss/loss.hpp"
#include "crowdloss/metrics.hpp"
#include "crowdloss/mixture.hpp"
#include "crowdloss/model.hpp"

namespace crowdloss {

enum class MixupMode { off, input, manifold };

inline MixupMode parse_mixup_mode(const std::string& s) {
  if (s == "off") return MixupMode::off;
  if (s == "input") return MixupMode::input;
  if (s == "manifold") return MixupMode::manifold;
  throw Error("unknown mixup mode '" + s + "' (expected off|input|manifold)");
}

inline std::string to_string(MixupMode m) {
  switch (m) {
    case MixupMode::off: return "off";
    case MixupMode::input: return "input";
    case MixupMode::manifold: return "manifold";
  }
  return "?";
}

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t warmup_epochs = 2;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.01;
  std::size_t batch_size = 64;
  bool lr_warmup_ramp = false;  // linear LR ramp across the warm-up epochs

  LossSpec loss;  // mode, psi, penalty coefficients, mt_norm, weight source

  MixupMode mixup = MixupMode::manifold;
  double mixup_alpha = 1.0;
  bool mixup_all_arms = false;  // default: only the loss-correction arms mix

  MixtureScope mixture_scope = MixtureScope::per_annotator;
  EmOptions em;

  std::size_t hidden = 32;
  std::size_t layers = 2;

  PrfAverage prf_average = PrfAverage::macro;
  bool variance_present_heads_only = false;

  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;  // sweep seeds; empty = {seed}
  std::vector<double> psi_values;    // sweep grid
  unsigned threads = 1;              // 0 = all cores

  void validate() const {
    require(epochs > 0, "epochs must be positive");
    require(warmup_epochs <= epochs, "warmup_epochs must not exceed epochs");
    require(std::isfinite(learning_rate) && learning_rate >= 0.0,
            "learning_rate must be finite and >= 0");
    require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
    require(std::isfinite(weight_decay) && weight_decay >= 0.0,
            "weight_decay must be finite and >= 0");
    require(batch_size > 0, "batch_size must be positive");
    require(std::isfinite(mixup_alpha) && mixup_alpha > 0.0,
            "mixup_alpha must be positive");
    require(hidden > 0 && layers > 0, "hidden and layers must be positive");
    loss.validate();
  }

  ReportOptions report_options() const {
    ReportOptions r;
    r.mode = loss.mode;
    r.mixture_scope = mixture_scope;
    r.em = em;
    r.prf_average = prf_average;
    r.variance_present_heads_only = variance_present_heads_only;
    return r;
  }
};

/// Momentum SGD with coupled weight decay:
///   v <- momentum v + (g + weight_decay p);  p <- p - lr v
inline void sgd_step(std::span<double> params, std::span<const double> grads,
                     std::span<double> velocity, double lr, double momentum,
                     double weight_decay) {
  require(params.size() == grads.size() && params.size() == velocity.size(),
          "sgd_step: shape mismatch");
  for (double g : grads)
    if (!std::isfinite(g)) throw Error("sgd_step: non-finite gradient");
  for (std::size_t k = 0; k < params.size(); ++k) {
    velocity[k] = momentum * velocity[k] + (grads[k] + weight_decay * params[k]);
    params[k] -= lr * velocity[k];
  }
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean batch loss
  bool warmup = false;
  MetricsReport metrics;
  // Weights produced at the end of this epoch (applied in the next one).
  double mean_weight = 0.0;
  std::size_t mixtures_fitted = 0;
  std::size_t mixtures_weak = 0;
  double wall_seconds = 0.0;  // excluded from equality
};

inline bool same_record(const EpochRecord& a, const EpochRecord& b) {
  auto j = [](const EpochRecord& r) {
    return std::make_tuple(r.epoch, r.loss, r.warmup, r.mean_weight,
                           r.mixtures_fitted, r.mixtures_weak);
  };
  return j(a) == j(b) && to_json(a.metrics) == to_json(b.metrics);
}

struct TrainAbort {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  std::string message;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::optional<TrainAbort> abort;
  std::vector<double> applied_weights_max;  // max w applied, per epoch

  bool identical(const TrainHistory& o) const {
    if (epochs.size() != o.epochs.size()) return false;
    for (std::size_t k = 0; k < epochs.size(); ++k)
      if (!same_record(epochs[k], o.epochs[k])) return false;
    return applied_weights_max == o.applied_weights_max &&
           abort.has_value() == o.abort.has_value();
  }
};

struct TrainResult {
  ModelParams params;
  TrainHistory history;
  LossLedger final_ledger;  // CE ledger of the last completed epoch
  WeightFit final_fit;      // mixture fit on final_ledger
  Dataset train_data;       // as trained (majority view for baseline arms)
};

namespace detail {

/// Deterministic permutation of [0, n) for (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                            std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, 0x73687566ULL, epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace detail

/// Trains one arm. Epochs 1..warmup_epochs run with w = 0 and the entropy
/// penalty. From the last warm-up epoch on, one eval pass with the
/// end-of-epoch parameters yields the CE ledger and the self-guess z; the
/// ledger's mixture weights and z stay fixed through the next epoch. Metrics are evaluated on `eval` if given,
/// otherwise on the training data (before any majority conversion).
inline TrainResult train(const TrainConfig& cfg, const Dataset& dataset,
                         const Dataset* eval = nullptr) {
  cfg.validate();
  {
    const auto problems = validate(dataset);
    if (!problems.empty()) throw Error("invalid dataset: " + problems.front());
  }
  const Arm arm = cfg.loss.mode;
  TrainResult out;
  out.train_data = is_multitask(arm) ? dataset : majority_dataset(dataset);
  const Dataset& data = out.train_data;
  const Dataset& eval_data = eval ? *eval : dataset;
  const auto& ann = data.annotations;
  const std::size_t N = data.num_samples();
  const std::size_t A = ann.num_annotators();
  const auto M = static_cast<std::size_t>(ann.num_classes());

  ModelDims dims{data.feature_dim(), cfg.hidden, M, A, cfg.layers};
  out.params = init_model(dims, stream_seed(cfg.seed, 0x6d6f64656cULL));
  std::vector<double> velocity(out.params.size(), 0.0);
  CorrectionWeights weights(N, A);
  std::vector<Rows> guesses;  // self-guess per sample from the last eval pass
  const bool lc = uses_correction(arm);
  const bool mix_enabled =
      cfg.mixup != MixupMode::off && (lc || cfg.mixup_all_arms);
  const ReportOptions report_opt = cfg.report_options();

  const std::size_t batches_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t ramp_steps = cfg.warmup_epochs * batches_per_epoch;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool warm = epoch <= cfg.warmup_epochs;
    LossSpec spec = cfg.loss;
    if (!warm) spec.entropy_penalty_coeff = 0.0;
    const bool apply_w = lc && !warm;
    double applied_max = 0.0;

    const auto order = detail::epoch_order(N, cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b, ++step) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(N, lo + cfg.batch_size);
      Batch batch;
      batch.examples.reserve(hi - lo);
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t i = order[k];
        Example ex;
        ex.x = data.features[i];
        ex.labels = ann.dense_row(i);
        ex.weights.assign(A, 0.0);
        if (apply_w) {
          bool any = false;
          for (std::size_t a = 0; a < A; ++a)
            if (ex.labels[a]) {
              ex.weights[a] = weights.at(i, a);
              applied_max = std::max(applied_max, ex.weights[a]);
              any = any || ex.weights[a] != 0.0;
            }
          if (any) ex.guess = guesses[i];
        }
        batch.examples.push_back(std::move(ex));
      }
      if (mix_enabled && !warm && batch.examples.size() > 1) {
        Rng rng = make_rng(cfg.seed, 0x6d6978ULL, epoch, b);
        MixPlan plan;
        plan.lambda = sample_beta(rng, cfg.mixup_alpha, cfg.mixup_alpha);
        if (cfg.mixup == MixupMode::manifold) {
          std::uniform_int_distribution<std::size_t> pick(0, cfg.layers);
          plan.layer = pick(rng);
        }
        plan.partner.resize(batch.examples.size());
        std::iota(plan.partner.begin(), plan.partner.end(), std::size_t{0});
        std::shuffle(plan.partner.begin(), plan.partner.end(), rng);
        batch.mix = std::move(plan);
      }

      GradientResult g;
      try {
        g = compute_gradients(out.params, batch, spec, resolve_threads(cfg.threads));
        if (!std::isfinite(g.loss)) throw Error("non-finite loss");
        double lr = cfg.learning_rate;
        if (cfg.lr_warmup_ramp && step < ramp_steps)
          lr *= static_cast<double>(step + 1) / static_cast<double>(ramp_steps);
        sgd_step(out.params.values(), g.grads.values(), velocity, lr,
                 cfg.momentum, cfg.weight_decay);
      } catch (const Error& e) {
        out.history.abort = TrainAbort{epoch, b, e.what()};
        return out;
      }
      loss_sum += g.loss * static_cast<double>(hi - lo);
      loss_count += hi - lo;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.warmup = warm;
    rec.loss = loss_sum / static_cast<double>(loss_count);

    out.final_ledger = compute_ledger(out.params, data, epoch);
    out.final_fit = fit_correction_weights(out.final_ledger, N, A,
                                           cfg.mixture_scope, cfg.em);
    if (lc && epoch >= cfg.warmup_epochs) {
      guesses.assign(N, Rows{});
      for (std::size_t i = 0; i < N; ++i) guesses[i] = forward(out.params, data.features[i]).probs;
      if (cfg.loss.weight_source == WeightSource::fixed) {
        weights = CorrectionWeights(N, A);
        for (const auto& c : out.final_ledger.cells)
          weights.at(c.sample, c.annotator) = cfg.loss.fixed_weight;
      } else {
        weights = out.final_fit.weights;
      }
    }
    for (const auto& f : out.final_fit.fits) {
      rec.mixtures_fitted += f.fitted ? 1 : 0;
      rec.mixtures_weak += f.fitted && f.params.weak_separation ? 1 : 0;
    }
    if (!out.final_fit.cell_weights.empty())
      rec.mean_weight = std::accumulate(out.final_fit.cell_weights.begin(),
                                        out.final_fit.cell_weights.end(), 0.0) /
                        static_cast<double>(out.final_fit.cell_weights.size());
    rec.metrics = assemble_report(out.params, eval_data, report_opt);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.history.epochs.push_back(std::move(rec));
    out.history.applied_weights_max.push_back(applied_max);
  }
  return out;
}

// psi sweep -------------------------------------------------------------------

struct SweepRow {
  double psi = 0.0;
  std::size_t runs = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double f1_std = 0.0;
  double majority_accuracy = 0.0;
  double annotator_accuracy = 0.0;
  double prediction_variance = 0.0;
  double agree_fraction = 0.0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<std::vector<MetricsReport>> per_seed;  // [psi][seed]
};

/// One training run per (psi, seed); metrics are the final-epoch snapshot,
/// averaged over seeds. Runs are independent and may execute in parallel.
inline SweepReport run_psi_sweep(const TrainConfig& cfg, const Dataset& dataset,
                                 const std::vector<double>& psi_values,
                                 const Dataset* eval = nullptr) {
  require(!psi_values.empty(), "run_psi_sweep: psi_values must be non-empty");
  const std::vector<std::uint64_t> seeds =
      cfg.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.seeds;
  const std::size_t S = seeds.size();
  std::vector<MetricsReport> results(psi_values.size() * S);
  std::vector<std::string> errors(results.size());
  parallel_for(results.size(), resolve_threads(cfg.threads), [&](std::size_t k) {
    TrainConfig run = cfg;
    run.loss.psi = psi_values[k / S];
    run.seed = seeds[k % S];
    run.threads = 1;
    auto r = train(run, dataset, eval);
    if (r.history.abort) {
      errors[k] = "psi=" + std::to_string(run.loss.psi) + " seed=" +
                  std::to_string(run.seed) + ": " + r.history.abort->message;
      return;
    }
    results[k] = r.history.epochs.back().metrics;
  });
  for (const auto& e : errors)
    if (!e.empty()) throw Error("sweep run aborted: " + e);

  SweepReport rep;
  for (std::size_t p = 0; p < psi_values.size(); ++p) {
    SweepRow row;
    row.psi = psi_values[p];
    row.runs = S;
    std::vector<MetricsReport> runs(results.begin() + static_cast<std::ptrdiff_t>(p * S),
                                    results.begin() + static_cast<std::ptrdiff_t>((p + 1) * S));
    for (const auto& m : runs) {
      row.precision += m.precision;
      row.recall += m.recall;
      row.f1 += m.f1;
      row.majority_accuracy += m.majority_accuracy;
      row.annotator_accuracy += m.annotator_accuracy;
      row.prediction_variance += m.prediction_variance;
      row.agree_fraction += m.split ? m.split->agree_fraction : 0.0;
    }
    const double s = static_cast<double>(S);
    row.precision /= s;
    row.recall /= s;
    row.f1 /= s;
    row.majority_accuracy /= s;
    row.annotator_accuracy /= s;
    row.prediction_variance /= s;
    row.agree_fraction /= s;
    double var = 0.0;
    for (const auto& m : runs) var += (m.f1 - row.f1) * (m.f1 - row.f1);
    row.f1_std = S > 1 ? std::sqrt(var / (s - 1.0)) : 0.0;
    rep.rows.push_back(row);
    rep.per_seed.push_back(std::move(runs));
  }
  return rep;
}

// CSV -------------------------------------------------------------------------
//
// Rates are percentages. Doubles use round-trip precision so equal runs
// produce byte-identical files.

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline constexpr const char* kMetricsCsvHeader =
    "precision,recall,f1_majority,majority_acc,annotator_acc,pred_variance,"
    "agree_frac,disagree_frac,agree_majority_frac,disagree_majority_frac,ties";

inline std::string metrics_csv_fields(const MetricsReport& m) {
  const SplitReport s = m.split.value_or(SplitReport{});
  std::ostringstream os;
  os << fmt_double(100 * m.precision) << ',' << fmt_double(100 * m.recall) << ','
     << fmt_double(100 * m.f1) << ',' << fmt_double(100 * m.majority_accuracy) << ','
     << fmt_double(100 * m.annotator_accuracy) << ','
     << fmt_double(m.prediction_variance) << ',' << fmt_double(100 * s.agree_fraction)
     << ',' << fmt_double(100 * s.disagree_fraction) << ','
     << fmt_double(100 * s.agree_majority_fraction) << ','
     << fmt_double(100 * s.disagree_majority_fraction) << ',' << m.ties;
  return os.str();
}

inline std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << "epoch,loss," << kMetricsCsvHeader << ",warmup,mean_w,mixtures_fitted,mixtures_weak\n";
  for (const auto& r : h.epochs)
    os << r.epoch << ',' << fmt_double(r.loss) << ',' << metrics_csv_fields(r.metrics)
       << ',' << (r.warmup ? 1 : 0) << ',' << fmt_double(r.mean_weight) << ','
       << r.mixtures_fitted << ',' << r.mixtures_weak << '\n';
  return os.str();
}

inline std::string sweep_csv(const SweepReport& s) {
  std::ostringstream os;
  os << "psi,runs,precision,recall,f1_majority,f1_std,majority_acc,annotator_acc,"
        "pred_variance,agree_frac\n";
  for (const auto& r : s.rows)
    os << fmt_double(r.psi) << ',' << r.runs << ',' << fmt_double(100 * r.precision)
       << ',' << fmt_double(100 * r.recall) << ',' << fmt_double(100 * r.f1) << ','
       << fmt_double(100 * r.f1_std) << ',' << fmt_double(100 * r.majority_accuracy)
       << ',' << fmt_double(100 * r.annotator_accuracy) << ','
       << fmt_double(r.prediction_variance) << ',' << fmt_double(100 * r.agree_fraction)
       << '\n';
  return os.str();
}

}  // namespace crowdloss
