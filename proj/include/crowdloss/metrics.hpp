#pragma once

#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdloss/annotation.hpp"
#include "crowdloss/loss.hpp"
#include "crowdloss/mixture.hpp"
#include "crowdloss/model.hpp"

namespace crowdloss {

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;      // reference count
  std::size_t predicted = 0;    // prediction count
  bool zero_division = false;   // some ratio had a zero denominator
};

enum class PrfAverage { macro, positive };

inline PrfAverage parse_prf_average(const std::string& s) {
  if (s == "macro") return PrfAverage::macro;
  if (s == "positive") return PrfAverage::positive;
  throw Error("unknown prf_average '" + s + "' (expected macro|positive)");
}

struct PrfResult {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool zero_division = false;
  std::vector<ClassScores> per_class;
};

/// Per-class precision / recall / F1, averaged over classes (macro) or taken
/// from class 1 (positive). Zero denominators give 0 and set the flag.
inline PrfResult precision_recall_f1(const std::vector<int>& predicted,
                                     const std::vector<int>& reference,
                                     int num_classes = 2,
                                     PrfAverage average = PrfAverage::macro) {
  if (predicted.size() != reference.size())
    throw Error("precision_recall_f1: length mismatch");
  require(num_classes > 0, "num_classes must be positive");
  const auto M = static_cast<std::size_t>(num_classes);
  std::vector<std::size_t> tp(M, 0), pred(M, 0), ref(M, 0);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int p = predicted[i], r = reference[i];
    require(p >= 0 && p < num_classes && r >= 0 && r < num_classes,
            "precision_recall_f1: label out of range");
    ++pred[static_cast<std::size_t>(p)];
    ++ref[static_cast<std::size_t>(r)];
    if (p == r) ++tp[static_cast<std::size_t>(p)];
  }
  PrfResult out;
  out.per_class.resize(M);
  for (std::size_t c = 0; c < M; ++c) {
    auto& s = out.per_class[c];
    s.support = ref[c];
    s.predicted = pred[c];
    const double t = static_cast<double>(tp[c]);
    if (pred[c] > 0) s.precision = t / static_cast<double>(pred[c]);
    else s.zero_division = true;
    if (ref[c] > 0) s.recall = t / static_cast<double>(ref[c]);
    else s.zero_division = true;
    if (s.precision + s.recall > 0.0)
      s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  }
  if (average == PrfAverage::positive) {
    require(M == 2, "positive-class averaging needs binary labels");
    const auto& s = out.per_class[1];
    out.precision = s.precision;
    out.recall = s.recall;
    out.f1 = s.f1;
    out.zero_division = s.zero_division;
    return out;
  }
  for (const auto& s : out.per_class) {
    out.precision += s.precision;
    out.recall += s.recall;
    out.f1 += s.f1;
    out.zero_division = out.zero_division || s.zero_division;
  }
  out.precision /= static_cast<double>(M);
  out.recall /= static_cast<double>(M);
  out.f1 /= static_cast<double>(M);
  return out;
}

/// head_predictions[i][a] is head a's argmax on sample i. Mean over
/// annotators with at least one annotation of head accuracy on their cells.
inline double annotator_accuracy(const std::vector<std::vector<int>>& head_predictions,
                                 const AnnotationMatrix& annotations) {
  require(head_predictions.size() == annotations.num_samples(),
          "annotator_accuracy: sample count mismatch");
  const std::size_t A = annotations.num_annotators();
  std::vector<std::size_t> hit(A, 0), seen(A, 0);
  for (std::size_t i = 0; i < annotations.num_samples(); ++i) {
    require(head_predictions[i].size() == A, "annotator_accuracy: head count != A");
    for (const auto& a : annotations.row(i)) {
      ++seen[a.annotator];
      if (head_predictions[i][a.annotator] == a.label) ++hit[a.annotator];
    }
  }
  double s = 0.0;
  std::size_t counted = 0;
  for (std::size_t a = 0; a < A; ++a)
    if (seen[a] > 0) {
      s += static_cast<double>(hit[a]) / static_cast<double>(seen[a]);
      ++counted;
    }
  return counted == 0 ? 0.0 : s / static_cast<double>(counted);
}

/// Mean over samples of count(1) count(0) / n^2 applied to the head votes,
/// as a percentage.
inline double prediction_variance(const std::vector<std::vector<int>>& votes,
                                  int num_classes = 2) {
  if (num_classes != 2) throw Error("prediction_variance requires binary labels");
  require(!votes.empty(), "prediction_variance: no samples");
  double s = 0.0;
  for (const auto& v : votes) s += annotation_variance(v, 2);
  return 100.0 * s / static_cast<double>(votes.size());
}

// Model-side evaluation ------------------------------------------------------

inline int argmax(const Row& p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

/// Per-sample head argmaxes. A single-head model is broadcast to
/// `num_annotators` columns.
inline std::vector<std::vector<int>> head_predictions(const ModelParams& model,
                                                      const Dataset& d,
                                                      std::size_t num_annotators) {
  const std::size_t heads = model.dims().annotators;
  require(heads == num_annotators || heads == 1,
          "model head count does not match dataset annotators");
  std::vector<std::vector<int>> out(d.num_samples());
  for (std::size_t i = 0; i < d.num_samples(); ++i) {
    const auto t = forward(model, d.features[i]);
    out[i].resize(num_annotators);
    for (std::size_t a = 0; a < num_annotators; ++a)
      out[i][a] = argmax(t.probs[heads == 1 ? 0 : a]);
  }
  return out;
}

/// CE of every annotated cell under the current model (one eval pass).
inline LossLedger compute_ledger(const ModelParams& model, const Dataset& d,
                                 std::size_t epoch = 0) {
  require(model.dims().annotators == d.annotations.num_annotators(),
          "compute_ledger: model heads != dataset annotators");
  LossLedger ledger;
  ledger.epoch = epoch;
  ledger.cells.reserve(d.annotations.num_entries());
  for (std::size_t i = 0; i < d.num_samples(); ++i) {
    const auto t = forward(model, d.features[i]);
    for (const auto& a : d.annotations.row(i))
      ledger.cells.push_back({i, a.annotator, loss_ce(t.probs[a.annotator], a.label)});
  }
  return ledger;
}

struct ReportOptions {
  Arm mode = Arm::multitask_lc;
  MixtureScope mixture_scope = MixtureScope::per_annotator;
  EmOptions em;
  PrfAverage prf_average = PrfAverage::macro;
  bool variance_present_heads_only = false;
};

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool zero_division = false;
  std::vector<ClassScores> per_class;
  double majority_accuracy = 0.0;
  double annotator_accuracy = 0.0;
  double prediction_variance = 0.0;  // percentage
  std::size_t num_samples = 0;
  std::size_t num_annotators = 0;
  std::size_t ties = 0;  // reference majorities decided by tie-break
  std::optional<SplitReport> split;
};

/// Majority of head argmaxes with the annotation tie-break, or the single
/// head's argmax.
inline std::vector<int> model_majority(const std::vector<std::vector<int>>& heads,
                                       int num_classes) {
  std::vector<int> out;
  out.reserve(heads.size());
  for (const auto& h : heads) out.push_back(compute_majority(h, num_classes).label);
  return out;
}

inline MetricsReport assemble_report(const ModelParams& model, const Dataset& d,
                                     const ReportOptions& opt) {
  const auto& m = d.annotations;
  const int M = m.num_classes();
  MetricsReport r;
  r.num_samples = d.num_samples();
  r.num_annotators = m.num_annotators();

  const auto majorities = compute_majorities(m);
  std::vector<int> reference;
  for (const auto& mj : majorities) {
    reference.push_back(mj.label);
    r.ties += mj.tie ? 1 : 0;
  }
  const auto heads = head_predictions(model, d, m.num_annotators());
  std::vector<int> predicted;
  if (model.dims().annotators == 1) {
    for (const auto& h : heads) predicted.push_back(h[0]);
  } else {
    predicted = model_majority(heads, M);
  }
  const auto prf = precision_recall_f1(predicted, reference, M, opt.prf_average);
  r.precision = prf.precision;
  r.recall = prf.recall;
  r.f1 = prf.f1;
  r.zero_division = prf.zero_division;
  r.per_class = prf.per_class;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == reference[i];
  r.majority_accuracy = static_cast<double>(correct) / static_cast<double>(predicted.size());
  r.annotator_accuracy = annotator_accuracy(heads, m);

  if (M == 2) {
    std::vector<std::vector<int>> votes;
    votes.reserve(heads.size());
    for (std::size_t i = 0; i < heads.size(); ++i) {
      if (!opt.variance_present_heads_only || model.dims().annotators == 1) {
        votes.push_back(heads[i]);
      } else {
        std::vector<int> v;
        for (const auto& a : m.row(i)) v.push_back(heads[i][a.annotator]);
        votes.push_back(std::move(v));
      }
    }
    r.prediction_variance = prediction_variance(votes, 2);
  }

  // Loss split on the final model; single-head models use the majority labels.
  const Dataset single = model.dims().annotators == 1 && m.num_annotators() != 1
                             ? majority_dataset(d)
                             : Dataset{};
  const Dataset& ledger_data = single.features.empty() ? d : single;
  const auto ledger = compute_ledger(model, ledger_data);
  const auto fit = fit_correction_weights(ledger, ledger_data.num_samples(),
                                          ledger_data.annotations.num_annotators(),
                                          opt.mixture_scope, opt.em);
  r.split = agree_disagree_split(ledger, fit.cell_weights, ledger_data.annotations,
                                 compute_majorities(ledger_data.annotations));
  return r;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["precision"] = 100.0 * r.precision;
  j["recall"] = 100.0 * r.recall;
  j["f1"] = 100.0 * r.f1;
  j["zero_division"] = r.zero_division;
  j["majority_accuracy"] = 100.0 * r.majority_accuracy;
  j["annotator_accuracy"] = 100.0 * r.annotator_accuracy;
  j["prediction_variance"] = r.prediction_variance;
  j["num_samples"] = r.num_samples;
  j["num_annotators"] = r.num_annotators;
  j["ties"] = r.ties;
  j["per_class"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& s = r.per_class[c];
    j["per_class"].push_back({{"class", c},
                              {"precision", 100.0 * s.precision},
                              {"recall", 100.0 * s.recall},
                              {"f1", 100.0 * s.f1},
                              {"support", s.support},
                              {"predicted", s.predicted},
                              {"zero_division", s.zero_division}});
  }
  if (r.split) j["split"] = to_json(*r.split);
  return j;
}

}  // namespace crowdloss
