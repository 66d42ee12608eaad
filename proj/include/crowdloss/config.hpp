#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crowdloss/common.hpp"
#include "crowdloss/synth.hpp"
#include "crowdloss/train.hpp"

namespace crowdloss {

/// Flat `key = value` configuration, one key per line, `#` comments.
/// Later assignments (including --set overrides) replace earlier ones.
class Config {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;  // 0 = command-line override
  };

  static Config parse(std::istream& is) {
    Config c;
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(is, raw)) {
      ++lineno;
      const auto hash = raw.find('#');
      std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw Error("config line " + std::to_string(lineno) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty())
        throw Error("config line " + std::to_string(lineno) + ": empty key");
      c.entries_[key] = Entry{trim(line.substr(eq + 1)), lineno};
    }
    return c;
  }

  static Config parse_string(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }

  /// Applies "key=value".
  void set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
      throw Error("--set expects key=value, got '" + assignment + "'");
    const std::string key = trim(assignment.substr(0, eq));
    if (key.empty()) throw Error("--set with empty key");
    entries_[key] = Entry{trim(assignment.substr(eq + 1)), 0};
  }

  void set(const std::string& key, const std::string& value) {
    entries_[key] = Entry{value, 0};
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto* e = find(key);
    return e ? e->value : fallback;
  }

  std::string require_string(const std::string& key) const {
    const auto* e = find(key);
    if (!e || e->value.empty()) throw Error("missing required config key '" + key + "'");
    return e->value;
  }

  double get_double(const std::string& key, double fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(e->value, &pos);
      if (pos != e->value.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw bad(key, *e, "a real number");
    }
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    try {
      if (e->value.empty() || e->value[0] == '-') throw std::invalid_argument("neg");
      std::size_t pos = 0;
      const auto v = std::stoull(e->value, &pos);
      if (pos != e->value.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw bad(key, *e, "a non-negative integer");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
    if (e->value == "false" || e->value == "0" || e->value == "no") return false;
    throw bad(key, *e, "a boolean");
  }

  std::vector<double> get_doubles(const std::string& key,
                                  const std::vector<double>& fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    std::vector<double> out;
    for (const auto& item : split_list(e->value)) {
      try {
        std::size_t pos = 0;
        out.push_back(std::stod(item, &pos));
        if (pos != item.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw bad(key, *e, "a comma-separated list of reals");
      }
    }
    return out;
  }

  std::vector<std::uint64_t> get_uints(const std::string& key,
                                       const std::vector<std::uint64_t>& fallback) const {
    const auto* e = find(key);
    if (!e) return fallback;
    std::vector<std::uint64_t> out;
    for (const auto& item : split_list(e->value)) {
      try {
        std::size_t pos = 0;
        if (item.empty() || item[0] == '-') throw std::invalid_argument("neg");
        out.push_back(std::stoull(item, &pos));
        if (pos != item.size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw bad(key, *e, "a comma-separated list of non-negative integers");
      }
    }
    return out;
  }

  /// Wraps a parse of `key` so that enum errors name the key and line.
  template <typename F>
  auto get_enum(const std::string& key, const std::string& fallback, F parse_fn) const {
    const auto* e = find(key);
    try {
      return parse_fn(e ? e->value : fallback);
    } catch (const Error& err) {
      if (!e) throw;
      throw Error(where(key, *e) + ": " + err.what());
    }
  }

  /// Keys present in the config that nothing has read.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, e] : entries_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  /// "key=value" lines in key order.
  std::string canonical() const {
    std::string s;
    for (const auto& [k, e] : entries_) s += k + "=" + e.value + "\n";
    return s;
  }

  std::string hash() const { return hex64(fnv1a64(canonical())); }

  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ','))
      if (!trim(item).empty()) out.push_back(trim(item));
    return out;
  }

  static std::string where(const std::string& key, const Entry& e) {
    return "config key '" + key + "'" +
           (e.line ? " (line " + std::to_string(e.line) + ")" : " (--set)");
  }

  static Error bad(const std::string& key, const Entry& e, const std::string& what) {
    return Error(where(key, e) + ": expected " + what + ", got '" + e.value + "'");
  }

  const Entry* find(const std::string& key) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }

  std::map<std::string, Entry> entries_;
  mutable std::set<std::string> used_;
};

inline SynthConfig synth_config_from(const Config& c) {
  SynthConfig s;
  s.num_samples = c.get_uint("num_samples", s.num_samples);
  s.num_annotators = c.get_uint("num_annotators", s.num_annotators);
  s.feature_dim = c.get_uint("feature_dim", s.feature_dim);
  s.num_factions = c.get_uint("num_factions", s.num_factions);
  s.faction_boundary_angle = c.get_double("faction_boundary_angle", s.faction_boundary_angle);
  s.per_annotator_flip_rate =
      c.get_double("per_annotator_flip_rate", s.per_annotator_flip_rate);
  s.annotations_per_sample = c.get_uint("annotations_per_sample", s.annotations_per_sample);
  s.seed = c.get_uint("seed", s.seed);
  s.validate();
  return s;
}

inline TrainConfig train_config_from(const Config& c) {
  TrainConfig t;
  t.epochs = c.get_uint("epochs", t.epochs);
  t.warmup_epochs = c.get_uint("warmup_epochs", t.warmup_epochs);
  t.learning_rate = c.get_double("learning_rate", t.learning_rate);
  t.momentum = c.get_double("momentum", t.momentum);
  t.weight_decay = c.get_double("weight_decay", t.weight_decay);
  t.batch_size = c.get_uint("batch_size", t.batch_size);
  t.lr_warmup_ramp = c.get_bool("lr_warmup_ramp", t.lr_warmup_ramp);

  t.loss.mode = c.get_enum("mode", "multitask_lc", parse_arm);
  t.loss.psi = c.get_double("psi", t.loss.psi);
  t.loss.entropy_penalty_coeff =
      c.get_double("entropy_penalty_coeff", t.loss.entropy_penalty_coeff);
  t.loss.class_balance_coeff = c.get_double("class_balance_coeff", t.loss.class_balance_coeff);
  t.loss.mt_norm = c.get_enum("mt_norm", "present", [](const std::string& s) {
    if (s == "present") return MtNorm::present;
    if (s == "total") return MtNorm::total;
    throw Error("unknown mt_norm '" + s + "' (expected present|total)");
  });
  t.loss.weight_source = c.get_enum("weight_source", "mixture", [](const std::string& s) {
    if (s == "mixture") return WeightSource::mixture;
    if (s == "fixed") return WeightSource::fixed;
    throw Error("unknown weight_source '" + s + "' (expected mixture|fixed)");
  });
  t.loss.fixed_weight = c.get_double("fixed_weight", t.loss.fixed_weight);

  t.mixup = c.get_enum("mixup", "manifold", parse_mixup_mode);
  t.mixup_alpha = c.get_double("mixup_alpha", t.mixup_alpha);
  t.mixup_all_arms = c.get_bool("mixup_all_arms", t.mixup_all_arms);

  t.mixture_scope = c.get_enum("mixture_scope", "per_annotator", parse_mixture_scope);
  t.em.family = c.get_enum("mixture_family", "beta", parse_mixture_family);
  t.em.max_iter = c.get_uint("em_max_iter", t.em.max_iter);
  t.em.tol = c.get_double("em_tol", t.em.tol);

  t.hidden = c.get_uint("hidden", t.hidden);
  t.layers = c.get_uint("layers", t.layers);
  t.prf_average = c.get_enum("prf_average", "macro", parse_prf_average);
  t.variance_present_heads_only = c.get_enum(
      "variance_heads", "all", [](const std::string& s) {
        if (s == "all") return false;
        if (s == "present") return true;
        throw Error("unknown variance_heads '" + s + "' (expected all|present)");
      });

  t.seed = c.get_uint("seed", t.seed);
  t.seeds = c.get_uints("seeds", {});
  t.psi_values = c.get_doubles("psi_values", {});
  t.threads = static_cast<unsigned>(c.get_uint("threads", t.threads));
  t.validate();
  return t;
}

}  // namespace crowdloss
