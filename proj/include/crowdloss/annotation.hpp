#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "crowdloss/common.hpp"

namespace crowdloss {

struct Annotation {
  std::size_t annotator = 0;
  int label = 0;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Sparse per-sample, per-annotator class labels. A missing (sample,
/// annotator) entry means "not annotated"; it is never read as class 0.
class AnnotationMatrix {
 public:
  AnnotationMatrix() = default;
  AnnotationMatrix(std::size_t num_samples, std::size_t num_annotators,
                   int num_classes)
      : num_annotators_(num_annotators),
        num_classes_(num_classes),
        rows_(num_samples) {
    require(num_annotators > 0, "num_annotators must be positive");
    require(num_classes > 0, "num_classes must be positive");
  }

  std::size_t num_samples() const { return rows_.size(); }
  std::size_t num_annotators() const { return num_annotators_; }
  int num_classes() const { return num_classes_; }

  /// Adds one entry. Duplicate (sample, annotator) pairs are rejected.
  void set(std::size_t sample, std::size_t annotator, int label) {
    require(sample < rows_.size(), "sample index out of range");
    require(annotator < num_annotators_, "annotator index out of range");
    require(label >= 0 && label < num_classes_, "class label out of range");
    auto& row = rows_[sample];
    auto it = std::lower_bound(
        row.begin(), row.end(), annotator,
        [](const Annotation& a, std::size_t k) { return a.annotator < k; });
    if (it != row.end() && it->annotator == annotator)
      throw Error("duplicate annotation for sample " + std::to_string(sample) +
                  ", annotator " + std::to_string(annotator));
    row.insert(it, Annotation{annotator, label});
  }

  /// Overwrites an existing entry; the missingness pattern cannot change.
  void relabel(std::size_t sample, std::size_t annotator, int label) {
    require(label >= 0 && label < num_classes_, "class label out of range");
    for (auto& a : rows_.at(sample))
      if (a.annotator == annotator) {
        a.label = label;
        return;
      }
    throw Error("relabel of a missing annotation");
  }

  std::optional<int> get(std::size_t sample, std::size_t annotator) const {
    for (const auto& a : rows_.at(sample))
      if (a.annotator == annotator) return a.label;
    return std::nullopt;
  }

  /// Present annotations of one sample, sorted by annotator index.
  const std::vector<Annotation>& row(std::size_t sample) const {
    return rows_.at(sample);
  }

  /// Dense view of one sample: one optional label per annotator.
  std::vector<std::optional<int>> dense_row(std::size_t sample) const {
    std::vector<std::optional<int>> out(num_annotators_);
    for (const auto& a : rows_.at(sample)) out[a.annotator] = a.label;
    return out;
  }

  std::size_t num_entries() const {
    std::size_t n = 0;
    for (const auto& r : rows_) n += r.size();
    return n;
  }

  friend bool operator==(const AnnotationMatrix&,
                         const AnnotationMatrix&) = default;

 private:
  std::size_t num_annotators_ = 0;
  int num_classes_ = 0;
  std::vector<std::vector<Annotation>> rows_;
};

struct Dataset {
  std::vector<std::vector<double>> features;
  AnnotationMatrix annotations;
  std::vector<std::string> sample_ids;
  std::vector<std::string> annotator_ids;
  std::optional<std::vector<int>> ground_truth;

  std::size_t num_samples() const { return features.size(); }
  std::size_t feature_dim() const {
    return features.empty() ? 0 : features.front().size();
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct Majority {
  int label = 0;
  double vote_fraction = 0.0;
  bool tie = false;
};

/// Modal class over the present labels; ties go to the lowest class index.
inline Majority compute_majority(const std::vector<int>& labels,
                                 int num_classes) {
  if (labels.empty()) throw Error("no annotations");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int l : labels) {
    require(l >= 0 && l < num_classes, "class label out of range");
    ++counts[static_cast<std::size_t>(l)];
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < counts.size(); ++c)
    if (counts[c] > counts[best]) best = c;
  const auto ties = std::count(counts.begin(), counts.end(), counts[best]);
  return Majority{static_cast<int>(best),
                  static_cast<double>(counts[best]) /
                      static_cast<double>(labels.size()),
                  ties > 1};
}

inline Majority compute_majority(const std::vector<std::optional<int>>& row,
                                 int num_classes) {
  std::vector<int> present;
  for (const auto& l : row)
    if (l) present.push_back(*l);
  return compute_majority(present, num_classes);
}

inline Majority compute_majority(const AnnotationMatrix& m,
                                 std::size_t sample) {
  std::vector<int> present;
  for (const auto& a : m.row(sample)) present.push_back(a.label);
  return compute_majority(present, m.num_classes());
}

inline std::vector<Majority> compute_majorities(const AnnotationMatrix& m) {
  std::vector<Majority> out;
  out.reserve(m.num_samples());
  for (std::size_t i = 0; i < m.num_samples(); ++i)
    out.push_back(compute_majority(m, i));
  return out;
}

/// count(1) * count(0) / total^2 over the present binary labels.
inline double annotation_variance(const std::vector<int>& labels,
                                  int num_classes = 2) {
  if (num_classes != 2)
    throw Error("variance formula defined for binary labels");
  if (labels.empty()) throw Error("no annotations");
  double ones = 0, zeros = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, "variance formula defined for binary labels");
    (l == 1 ? ones : zeros) += 1.0;
  }
  const double total = ones + zeros;
  return ones * zeros / (total * total);
}

inline double annotation_variance(const std::vector<std::optional<int>>& row,
                                  int num_classes = 2) {
  std::vector<int> present;
  for (const auto& l : row)
    if (l) present.push_back(*l);
  return annotation_variance(present, num_classes);
}

/// Every invariant violation in the dataset, in sample order.
inline std::vector<std::string> validate(const Dataset& d) {
  std::vector<std::string> out;
  const auto& m = d.annotations;
  const std::size_t n = d.features.size();
  if (m.num_samples() != n)
    out.push_back("feature rows (" + std::to_string(n) +
                  ") != annotation samples (" +
                  std::to_string(m.num_samples()) + ")");
  if (d.sample_ids.size() != n)
    out.push_back("sample_ids count (" + std::to_string(d.sample_ids.size()) +
                  ") != feature rows (" + std::to_string(n) + ")");
  if (!d.annotator_ids.empty() && d.annotator_ids.size() != m.num_annotators())
    out.push_back("annotator_ids count != num_annotators");
  if (d.ground_truth && d.ground_truth->size() != n)
    out.push_back("ground_truth count != feature rows");
  if (m.num_annotators() == 0) out.push_back("num_annotators must be positive");
  if (m.num_classes() <= 0) out.push_back("num_classes must be positive");

  auto name = [&](std::size_t i) {
    return i < d.sample_ids.size() ? "sample '" + d.sample_ids[i] + "'"
                                   : "sample #" + std::to_string(i);
  };
  const std::size_t dim = d.feature_dim();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = d.features[i];
    if (row.size() != dim)
      out.push_back("feature row " + std::to_string(i) + " (" + name(i) +
                    ") has dimension " + std::to_string(row.size()) +
                    ", expected " + std::to_string(dim));
    for (double v : row)
      if (!std::isfinite(v)) {
        out.push_back("non-finite feature in row " + std::to_string(i) + " (" +
                      name(i) + ")");
        break;
      }
  }
  for (std::size_t i = 0; i < m.num_samples(); ++i) {
    if (m.row(i).empty()) out.push_back(name(i) + " has no annotations");
    for (const auto& a : m.row(i)) {
      if (a.annotator >= m.num_annotators())
        out.push_back(name(i) + " annotator index out of range");
      if (a.label < 0 || a.label >= m.num_classes())
        out.push_back(name(i) + " class label out of range");
    }
  }
  if (d.ground_truth)
    for (std::size_t i = 0; i < d.ground_truth->size(); ++i) {
      const int t = (*d.ground_truth)[i];
      if (t < 0 || t >= m.num_classes())
        out.push_back(name(i) + " ground truth out of range");
    }
  return out;
}

/// Renumbers annotators in first-appearance order (the order load_dataset
/// assigns). Annotators that never appear keep their relative order at the end.
inline Dataset canonicalize_annotators(const Dataset& d) {
  const auto& m = d.annotations;
  const std::size_t na = m.num_annotators();
  std::vector<std::size_t> remap(na, na);
  std::size_t next = 0;
  for (std::size_t i = 0; i < m.num_samples(); ++i)
    for (const auto& a : m.row(i))
      if (remap[a.annotator] == na) remap[a.annotator] = next++;
  for (std::size_t a = 0; a < na; ++a)
    if (remap[a] == na) remap[a] = next++;

  Dataset out = d;
  out.annotations = AnnotationMatrix(m.num_samples(), na, m.num_classes());
  for (std::size_t i = 0; i < m.num_samples(); ++i)
    for (const auto& a : m.row(i))
      out.annotations.set(i, remap[a.annotator], a.label);
  if (!d.annotator_ids.empty()) {
    out.annotator_ids.assign(na, "");
    for (std::size_t a = 0; a < na; ++a)
      out.annotator_ids[remap[a]] = d.annotator_ids[a];
  }
  return out;
}

/// Rows [begin, end) as a new dataset; the annotator set is preserved.
inline Dataset slice_rows(const Dataset& d, std::size_t begin,
                          std::size_t end) {
  require(begin <= end && end <= d.num_samples(), "slice out of range");
  const auto& m = d.annotations;
  Dataset out;
  out.annotator_ids = d.annotator_ids;
  out.annotations =
      AnnotationMatrix(end - begin, m.num_annotators(), m.num_classes());
  for (std::size_t i = begin; i < end; ++i) {
    out.features.push_back(d.features[i]);
    out.sample_ids.push_back(d.sample_ids[i]);
    for (const auto& a : m.row(i))
      out.annotations.set(i - begin, a.annotator, a.label);
  }
  if (d.ground_truth)
    out.ground_truth = std::vector<int>(d.ground_truth->begin() + begin,
                                        d.ground_truth->begin() + end);
  return out;
}

/// Replaces the annotator population by a single virtual annotator holding
/// the majority label of each sample.
inline Dataset majority_dataset(const Dataset& d) {
  const auto& m = d.annotations;
  Dataset out;
  out.features = d.features;
  out.sample_ids = d.sample_ids;
  out.ground_truth = d.ground_truth;
  out.annotator_ids = {"majority"};
  out.annotations = AnnotationMatrix(m.num_samples(), 1, m.num_classes());
  for (std::size_t i = 0; i < m.num_samples(); ++i)
    out.annotations.set(i, 0, compute_majority(m, i).label);
  return out;
}

// JSONL interchange ----------------------------------------------------------
//
// One sample per line:
//   {"id": "...", "features": [..], "annotations": {"<annotator>": k, ..},
//    "truth": k}
// "truth" is optional but must be present on all lines or none.

inline void write_jsonl(std::ostream& os, const Dataset& d) {
  const auto& m = d.annotations;
  for (std::size_t i = 0; i < d.num_samples(); ++i) {
    nlohmann::ordered_json line;
    line["id"] = d.sample_ids[i];
    line["features"] = d.features[i];
    nlohmann::ordered_json ann = nlohmann::ordered_json::object();
    for (const auto& a : m.row(i)) {
      const std::string key = d.annotator_ids.empty()
                                  ? std::to_string(a.annotator)
                                  : d.annotator_ids[a.annotator];
      ann[key] = a.label;
    }
    line["annotations"] = std::move(ann);
    if (d.ground_truth) line["truth"] = (*d.ground_truth)[i];
    os << line.dump() << '\n';
  }
}

inline std::string to_jsonl(const Dataset& d) {
  std::ostringstream os;
  write_jsonl(os, d);
  return os.str();
}

/// Parses the JSONL format. Labels must lie in [0, num_classes).
inline Dataset read_jsonl(std::istream& is, int num_classes = 2) {
  require(num_classes > 0, "num_classes must be positive");
  struct Pending {
    std::vector<std::pair<std::size_t, int>> cells;
  };
  Dataset d;
  std::vector<Pending> pending;
  std::unordered_map<std::string, std::size_t> annotator_index;
  std::vector<int> truth;
  std::optional<bool> has_truth;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) -> Error {
    return Error("line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    // The parser keeps the last of repeated keys, so repeats are caught here.
    std::vector<std::set<std::string>> open_objects;
    std::string repeated;
    auto track = [&](int, nlohmann::ordered_json::parse_event_t ev,
                     nlohmann::ordered_json& parsed) {
      using E = nlohmann::ordered_json::parse_event_t;
      if (ev == E::object_start) open_objects.emplace_back();
      if (ev == E::object_end && !open_objects.empty()) open_objects.pop_back();
      if (ev == E::key && !open_objects.empty() &&
          !open_objects.back().insert(parsed.get<std::string>()).second && repeated.empty())
        repeated = parsed.get<std::string>();
      return true;
    };
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line, track);
    } catch (const nlohmann::json::exception& e) {
      throw fail(std::string("malformed JSON: ") + e.what());
    }
    if (!repeated.empty()) throw fail("duplicate key '" + repeated + "'");
    if (!j.is_object()) throw fail("expected a JSON object");
    if (!j.contains("id") || !j["id"].is_string())
      throw fail("missing string field 'id'");
    if (!j.contains("features") || !j["features"].is_array())
      throw fail("missing array field 'features'");
    if (!j.contains("annotations") || !j["annotations"].is_object())
      throw fail("missing object field 'annotations'");

    std::vector<double> feats;
    for (const auto& v : j["features"]) {
      if (!v.is_number()) throw fail("non-numeric feature");
      feats.push_back(v.get<double>());
    }
    if (!d.features.empty() && feats.size() != d.features.front().size())
      throw fail("feature dimension " + std::to_string(feats.size()) +
                 " differs from " + std::to_string(d.features.front().size()));

    Pending p;
    for (const auto& [key, value] : j["annotations"].items()) {
      if (!value.is_number_integer())
        throw fail("unknown class label for annotator '" + key + "'");
      const auto label = value.get<long long>();
      if (label < 0 || label >= num_classes)
        throw fail("unknown class label " + std::to_string(label) +
                   " for annotator '" + key + "'");
      auto [it, inserted] =
          annotator_index.try_emplace(key, d.annotator_ids.size());
      if (inserted) d.annotator_ids.push_back(key);
      for (const auto& c : p.cells)
        if (c.first == it->second)
          throw fail("duplicate annotation for annotator '" + key + "'");
      p.cells.emplace_back(it->second, static_cast<int>(label));
    }

    const bool t = j.contains("truth") && !j["truth"].is_null();
    if (has_truth && *has_truth != t)
      throw fail("'truth' must be present on all lines or none");
    has_truth = t;
    if (t) {
      if (!j["truth"].is_number_integer()) throw fail("non-integer 'truth'");
      const auto v = j["truth"].get<long long>();
      if (v < 0 || v >= num_classes) throw fail("unknown truth label");
      truth.push_back(static_cast<int>(v));
    }
    d.sample_ids.push_back(j["id"].get<std::string>());
    d.features.push_back(std::move(feats));
    pending.push_back(std::move(p));
  }
  require(!d.features.empty(), "dataset is empty");
  require(!d.annotator_ids.empty(), "dataset has no annotations");
  d.annotations = AnnotationMatrix(d.features.size(), d.annotator_ids.size(),
                                   num_classes);
  for (std::size_t i = 0; i < pending.size(); ++i)
    for (const auto& [a, l] : pending[i].cells) d.annotations.set(i, a, l);
  if (has_truth.value_or(false)) d.ground_truth = std::move(truth);

  const auto problems = validate(d);
  if (!problems.empty()) throw Error("invalid dataset: " + problems.front());
  return d;
}

inline Dataset parse_jsonl(const std::string& text, int num_classes = 2) {
  std::istringstream is(text);
  return read_jsonl(is, num_classes);
}

inline Dataset load_dataset(const std::string& path, int num_classes = 2) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  return read_jsonl(in, num_classes);
}

}  // namespace crowdloss
