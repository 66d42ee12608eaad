#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crowdloss/annotation.hpp"
#include "crowdloss/common.hpp"

namespace crowdloss {

// Synthetic annotator populations -------------------------------------------

struct SynthConfig {
  std::size_t num_samples = 1000;
  std::size_t num_annotators = 5;
  std::size_t feature_dim = 4;
  std::size_t num_factions = 1;
  double faction_boundary_angle = 0.0;  // radians between adjacent factions
  double per_annotator_flip_rate = 0.0;
  std::size_t annotations_per_sample = 3;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_samples > 0, "num_samples must be positive");
    require(num_annotators > 0, "num_annotators must be positive");
    require(feature_dim >= 2, "feature_dim must be at least 2");
    require(num_factions > 0 && num_factions <= num_annotators,
            "num_factions must be in [1, num_annotators]");
    require(std::isfinite(faction_boundary_angle),
            "faction_boundary_angle must be finite");
    require(per_annotator_flip_rate >= 0.0 && per_annotator_flip_rate < 0.5,
            "per_annotator_flip_rate must be in [0, 0.5)");
    require(annotations_per_sample > 0 &&
                annotations_per_sample <= num_annotators,
            "annotations_per_sample must be in [1, num_annotators]");
  }
};

/// Annotator a belongs to faction a % num_factions.
inline std::size_t faction_of(const SynthConfig& c, std::size_t annotator) {
  return annotator % c.num_factions;
}

/// Annotator id as emitted by generate_synthetic: "f<faction>_a<index>".
inline std::string synth_annotator_id(const SynthConfig& c,
                                      std::size_t annotator) {
  return "f" + std::to_string(faction_of(c, annotator)) + "_a" +
         std::to_string(annotator);
}

/// Features ~ N(0, I). A random teacher hyperplane through the origin gives
/// the ground truth (class 1 on its positive side). Faction f uses the
/// teacher normal rotated by angle * (f - (F-1)/2) within one fixed plane, so
/// adjacent factions differ by exactly `faction_boundary_angle`. Each sample
/// is labelled by `annotations_per_sample` distinct annotators chosen
/// uniformly; every label then flips with `per_annotator_flip_rate`.
/// Annotators are renumbered in first-appearance order on output.
inline Dataset generate_synthetic(const SynthConfig& c) {
  c.validate();
  const std::size_t dim = c.feature_dim;
  Rng geo = make_rng(c.seed, 1);
  std::normal_distribution<double> normal(0.0, 1.0);

  auto random_unit = [&](Rng& rng) {
    std::vector<double> v(dim);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& x : v) {
        x = normal(rng);
        norm += x * x;
      }
    } while (norm < 1e-12);
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
  };
  const std::vector<double> teacher = random_unit(geo);
  // Gram-Schmidt a second direction to span the rotation plane.
  std::vector<double> ortho = random_unit(geo);
  {
    double dot = 0.0;
    for (std::size_t k = 0; k < dim; ++k) dot += ortho[k] * teacher[k];
    double norm = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      ortho[k] -= dot * teacher[k];
      norm += ortho[k] * ortho[k];
    }
    norm = std::sqrt(norm);
    for (auto& x : ortho) x /= norm;
  }
  std::vector<std::vector<double>> faction_normals(c.num_factions);
  for (std::size_t f = 0; f < c.num_factions; ++f) {
    const double theta =
        c.faction_boundary_angle *
        (static_cast<double>(f) - (static_cast<double>(c.num_factions) - 1) / 2);
    faction_normals[f].resize(dim);
    for (std::size_t k = 0; k < dim; ++k)
      faction_normals[f][k] =
          std::cos(theta) * teacher[k] + std::sin(theta) * ortho[k];
  }
  auto side = [&](const std::vector<double>& normal_vec,
                  const std::vector<double>& x) {
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) s += normal_vec[k] * x[k];
    return s > 0.0 ? 1 : 0;
  };

  Dataset d;
  d.annotations =
      AnnotationMatrix(c.num_samples, c.num_annotators, /*num_classes=*/2);
  d.ground_truth.emplace();
  Rng feat_rng = make_rng(c.seed, 2);
  Rng pick_rng = make_rng(c.seed, 3);
  Rng flip_rng = make_rng(c.seed, 4);
  std::bernoulli_distribution flip(c.per_annotator_flip_rate);
  std::vector<std::size_t> annotators(c.num_annotators);

  for (std::size_t i = 0; i < c.num_samples; ++i) {
    std::vector<double> x(dim);
    for (auto& v : x) v = normal(feat_rng);
    d.ground_truth->push_back(side(teacher, x));
    std::iota(annotators.begin(), annotators.end(), std::size_t{0});
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    for (std::size_t k = 0; k < c.annotations_per_sample; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, c.num_annotators - 1);
      std::swap(annotators[k], annotators[pick(pick_rng)]);
    }
    for (std::size_t k = 0; k < c.annotations_per_sample; ++k) {
      const std::size_t a = annotators[k];
      int label = side(faction_normals[faction_of(c, a)], x);
      if (flip(flip_rng)) label = 1 - label;
      d.annotations.set(i, a, label);
    }
    d.features.push_back(std::move(x));
    d.sample_ids.push_back("s" + std::to_string(i));
  }
  for (std::size_t a = 0; a < c.num_annotators; ++a)
    d.annotator_ids.push_back(synth_annotator_id(c, a));
  return canonicalize_annotators(d);
}

inline nlohmann::ordered_json to_json(const SynthConfig& c) {
  return {{"num_samples", c.num_samples},
          {"num_annotators", c.num_annotators},
          {"feature_dim", c.feature_dim},
          {"num_factions", c.num_factions},
          {"faction_boundary_angle", c.faction_boundary_angle},
          {"per_annotator_flip_rate", c.per_annotator_flip_rate},
          {"annotations_per_sample", c.annotations_per_sample},
          {"seed", c.seed}};
}

// Label-flip noise -----------------------------------------------------------

enum class NoiseMode {
  sample,  // flip every present annotation on round(rate * N) samples
  cell,    // flip round(rate * #cells) individual annotations
};

struct NoiseRecord {
  double rate = 0.0;
  std::uint64_t seed = 0;
  NoiseMode mode = NoiseMode::sample;
  std::vector<std::size_t> samples;  // chosen samples (sample mode), sorted
  std::vector<std::pair<std::size_t, std::size_t>> flipped;  // (i, a), sorted

  friend bool operator==(const NoiseRecord&, const NoiseRecord&) = default;
};

/// Flips binary labels; see NoiseMode. Missing annotations are never touched,
/// so the missingness pattern, features and ground truth are preserved. The
/// selection depends only on (N, missingness, rate, seed), which makes a
/// second application with the same arguments restore the input.
inline std::pair<Dataset, NoiseRecord> inject_noise(
    const Dataset& d, double rate, std::uint64_t seed,
    NoiseMode mode = NoiseMode::sample) {
  if (d.annotations.num_classes() != 2)
    throw Error("label flip noise requires binary labels");
  require(rate >= 0.0 && rate <= 1.0, "noise rate must be in [0, 1]");
  NoiseRecord rec{rate, seed, mode, {}, {}};
  Dataset out = d;
  Rng rng = make_rng(seed, 0x6e6f697365ULL);
  const auto& m = d.annotations;

  if (mode == NoiseMode::sample) {
    const std::size_t n = d.num_samples();
    const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t j = 0; j < k; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, n - 1);
      std::swap(idx[j], idx[pick(rng)]);
    }
    rec.samples.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(rec.samples.begin(), rec.samples.end());
    for (std::size_t i : rec.samples)
      for (const auto& a : m.row(i)) rec.flipped.emplace_back(i, a.annotator);
  } else {
    std::vector<std::pair<std::size_t, std::size_t>> cells;
    for (std::size_t i = 0; i < m.num_samples(); ++i)
      for (const auto& a : m.row(i)) cells.emplace_back(i, a.annotator);
    const std::size_t n = cells.size();
    const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
    for (std::size_t j = 0; j < k; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, n - 1);
      std::swap(cells[j], cells[pick(rng)]);
    }
    rec.flipped.assign(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(rec.flipped.begin(), rec.flipped.end());
  }
  for (const auto& [i, a] : rec.flipped)
    out.annotations.relabel(i, a, 1 - *m.get(i, a));
  return {std::move(out), std::move(rec)};
}

inline nlohmann::ordered_json to_json(const NoiseRecord& r) {
  nlohmann::ordered_json j;
  j["rate"] = r.rate;
  j["seed"] = r.seed;
  j["mode"] = r.mode == NoiseMode::sample ? "sample" : "cell";
  j["flipped"] = nlohmann::ordered_json::array();
  for (const auto& [i, a] : r.flipped) j["flipped"].push_back({i, a});
  if (r.mode == NoiseMode::sample) j["samples"] = r.samples;
  return j;
}

inline NoiseRecord noise_record_from_json(const nlohmann::json& j) {
  NoiseRecord r;
  r.rate = j.at("rate").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.mode = j.value("mode", std::string("sample")) == "cell" ? NoiseMode::cell
                                                            : NoiseMode::sample;
  for (const auto& p : j.at("flipped"))
    r.flipped.emplace_back(p.at(0).get<std::size_t>(),
                           p.at(1).get<std::size_t>());
  if (j.contains("samples"))
    r.samples = j["samples"].get<std::vector<std::size_t>>();
  return r;
}

inline NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "sample") return NoiseMode::sample;
  if (s == "cell") return NoiseMode::cell;
  throw Error("unknown noise mode '" + s + "' (expected sample|cell)");
}

}  // namespace crowdloss
