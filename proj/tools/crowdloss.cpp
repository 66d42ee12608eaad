#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "crowdloss/crowdloss.hpp"

namespace fs = std::filesystem;
using namespace crowdloss;
using json = nlohmann::ordered_json;

namespace {

// Exit codes.
constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

struct CliError : Error {
  CliError(std::string kind, const std::string& msg) : Error(msg), kind(std::move(kind)) {}
  std::string kind;
};

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      // data generation
      "num_samples", "num_annotators", "feature_dim", "num_factions",
      "faction_boundary_angle", "per_annotator_flip_rate", "annotations_per_sample",
      // noise
      "noise_rate", "noise_seed", "noise_mode",
      // training
      "epochs", "warmup_epochs", "learning_rate", "momentum", "weight_decay",
      "batch_size", "lr_warmup_ramp", "mode", "psi", "entropy_penalty_coeff",
      "class_balance_coeff", "mt_norm", "weight_source", "fixed_weight", "mixup",
      "mixup_alpha", "mixup_all_arms", "mixture_scope", "mixture_family",
      "em_max_iter", "em_tol", "hidden", "layers", "prf_average", "variance_heads",
      "seed", "seeds", "psi_values", "threads",
      // inputs
      "data", "eval_data", "checkpoint", "num_classes", "histogram_bins"};
  return keys;
}

struct Invocation {
  std::string subcommand;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  bool force = false;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CliError("io", "cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Config load_config(const Invocation& inv) {
  std::ifstream in(inv.config_path);
  if (!in) throw CliError("io", "cannot read config '" + inv.config_path + "'");
  Config c = Config::parse(in);
  for (const auto& o : inv.overrides) c.set_override(o);
  for (const auto& [key, e] : c.entries())
    if (!known_keys().count(key))
      throw CliError("config", "unknown config key '" + key + "'" +
                                   (e.line ? " (line " + std::to_string(e.line) + ")"
                                           : " (--set)"));
  return c;
}

unsigned effective_threads(const Config& c) {
  unsigned t = resolve_threads(static_cast<unsigned>(c.get_uint("threads", 0)));
  if (const char* env = std::getenv("CROWDLOSS_THREADS")) {
    char* end = nullptr;
    const unsigned long cap = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || cap == 0)
      throw CliError("config", "CROWDLOSS_THREADS must be a positive integer, got '" +
                                   std::string(env) + "'");
    t = std::min<unsigned>(t, static_cast<unsigned>(cap));
  }
  return t;
}

/// Config hash, seed and the full effective configuration.
class Provenance {
 public:
  Provenance(const std::string& subcommand, const Config& c)
      : subcommand_(subcommand), hash_(c.hash()), canonical_(c.canonical()),
        seed_(c.get_string("seed", "0")) {}

  void add_input(const std::string& role, const std::string& path) {
    inputs_.push_back({role, path, hex64(fnv1a64(read_file(path)))});
  }

  json to_json() const {
    json j;
    j["tool"] = "crowdloss";
    j["subcommand"] = subcommand_;
    j["config_hash"] = hash_;
    j["seed"] = seed_;
    j["config"] = canonical_;
    j["inputs"] = json::array();
    for (const auto& in : inputs_)
      j["inputs"].push_back({{"role", in.role}, {"path", in.path}, {"hash", in.hash}});
    return j;
  }

  /// Comment lines prepended to CSV artifacts.
  std::string csv_header() const {
    std::string s = "# crowdloss " + subcommand_ + " config_hash=" + hash_ + " seed=" + seed_ + "\n";
    std::istringstream is(canonical_);
    for (std::string line; std::getline(is, line);) s += "# config: " + line + "\n";
    for (const auto& in : inputs_) s += "# input: " + in.role + "=" + in.path + " hash=" + in.hash + "\n";
    return s;
  }

 private:
  struct Input {
    std::string role, path, hash;
  };
  std::string subcommand_, hash_, canonical_, seed_;
  std::vector<Input> inputs_;
};

/// Collects artifacts in memory, then writes them after the overwrite check.
class Output {
 public:
  Output(const Invocation& inv, const Provenance& prov) : inv_(inv), prov_(prov) {}

  void csv(const std::string& name, const std::string& body) {
    files_.emplace_back(name, prov_.csv_header() + body);
  }
  void json_file(const std::string& name, json body) {
    json j;
    j["provenance"] = prov_.to_json();
    for (auto& [k, v] : body.items()) j[k] = v;
    files_.emplace_back(name, j.dump(2) + "\n");
  }
  void raw(const std::string& name, const std::string& body) { files_.emplace_back(name, body); }

  void commit() const {
    const fs::path dir(inv_.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir))
      throw CliError("io", "cannot create output directory '" + inv_.out_dir + "'");
    if (!inv_.force)
      for (const auto& [name, body] : files_)
        if (fs::exists(dir / name))
          throw CliError("io", "refusing to overwrite '" + (dir / name).string() +
                                   "' (pass --force)");
    for (const auto& [name, body] : files_) {
      std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
      if (!out) throw CliError("io", "cannot write '" + (dir / name).string() + "'");
      out << body;
      if (!out.flush()) throw CliError("io", "write failed for '" + (dir / name).string() + "'");
    }
  }

 private:
  const Invocation& inv_;
  const Provenance& prov_;
  std::vector<std::pair<std::string, std::string>> files_;
};

int num_classes(const Config& c) {
  const auto m = c.get_uint("num_classes", 2);
  if (m < 2) throw CliError("config", "config key 'num_classes': expected at least 2");
  return static_cast<int>(m);
}

Dataset load_input(const Config& c, const std::string& key, Provenance& prov) {
  const std::string path = c.require_string(key);
  prov.add_input(key, path);
  return load_dataset(path, num_classes(c));
}

TrainConfig train_config(const Config& c) {
  TrainConfig t = train_config_from(c);
  t.threads = effective_threads(c);
  return t;
}

/// Loss ledger, mixture fits, split and histogram for a model on a dataset.
void write_diagnostics(Output& out, const ModelParams& model, const Dataset& d,
                       const TrainConfig& cfg, std::size_t bins) {
  const Dataset data = model.dims().annotators == 1 && d.annotations.num_annotators() != 1
                           ? majority_dataset(d)
                           : d;
  const auto ledger = compute_ledger(model, data);
  const auto fit = fit_correction_weights(ledger, data.num_samples(),
                                          data.annotations.num_annotators(),
                                          cfg.mixture_scope, cfg.em);
  const auto majorities = compute_majorities(data.annotations);

  json fits = json::array();
  for (const auto& f : fit.fits) {
    json j;
    if (cfg.mixture_scope == MixtureScope::per_annotator) {
      j["annotator"] = f.annotator;
      j["annotator_id"] = data.annotator_ids.at(f.annotator);
    }
    j["observations"] = f.observations;
    j["fitted"] = f.fitted;
    if (!f.fitted) j["fallback_reason"] = f.fallback_reason;
    else j["mixture"] = to_json(f.params);
    fits.push_back(std::move(j));
  }
  out.json_file("mixture.json", {{"scope", cfg.mixture_scope == MixtureScope::global
                                                ? "global"
                                                : "per_annotator"},
                                 {"fits", std::move(fits)}});
  out.json_file("split.json",
                {{"split", to_json(agree_disagree_split(ledger, fit.cell_weights,
                                                        data.annotations, majorities))}});

  std::ostringstream hist;
  hist << "bin_lo,bin_hi,majority,minority\n";
  for (const auto& b : loss_histogram(ledger, fit.cell_normalized, data.annotations,
                                      majorities, bins))
    hist << fmt_double(b.lo) << ',' << fmt_double(b.hi) << ',' << b.majority << ','
         << b.minority << '\n';
  out.csv("loss_histogram.csv", hist.str());
}

std::size_t histogram_bins(const Config& c) {
  const auto b = c.get_uint("histogram_bins", 50);
  if (b == 0) throw CliError("config", "config key 'histogram_bins': expected a positive integer");
  return b;
}

int cmd_gen(const Invocation& inv, const Config& c) {
  const SynthConfig s = synth_config_from(c);
  Provenance prov("gen", c);
  const Dataset d = generate_synthetic(s);
  Output out(inv, prov);
  out.raw("dataset.jsonl", to_jsonl(d));
  out.json_file("provenance.json", {{"synth", to_json(s)}, {"num_samples", d.num_samples()}});
  out.commit();
  return 0;
}

int cmd_noise(const Invocation& inv, const Config& c) {
  Provenance prov("noise", c);
  const Dataset d = load_input(c, "data", prov);
  if (d.annotations.num_classes() != 2)
    throw CliError("config", "noise injection requires num_classes = 2");
  const double rate = c.get_double("noise_rate", 0.2);
  const std::uint64_t seed = c.get_uint("noise_seed", c.get_uint("seed", 0));
  const NoiseMode mode = c.get_enum("noise_mode", "sample", parse_noise_mode);
  const auto [noisy, record] = inject_noise(d, rate, seed, mode);
  Output out(inv, prov);
  out.raw("dataset.jsonl", to_jsonl(noisy));
  out.json_file("noise.json", {{"noise", to_json(record)}, {"num_flipped", record.flipped.size()},
                               {"num_samples_flipped", record.samples.size()}});
  out.json_file("provenance.json", {});
  out.commit();
  return 0;
}

std::string metrics_csv(const MetricsReport& m) {
  return std::string(kMetricsCsvHeader) + "\n" + metrics_csv_fields(m) + "\n";
}

int cmd_train(const Invocation& inv, const Config& c) {
  const TrainConfig cfg = train_config(c);
  Provenance prov("train", c);
  const Dataset d = load_input(c, "data", prov);
  std::optional<Dataset> ev;
  if (c.has("eval_data")) ev = load_input(c, "eval_data", prov);
  const auto bins = histogram_bins(c);

  const auto r = train(cfg, d, ev ? &*ev : nullptr);
  Output out(inv, prov);
  out.csv("history.csv", history_csv(r.history));
  out.json_file("checkpoint.json", checkpoint_json(r.params));
  if (!r.history.epochs.empty()) {
    const auto& last = r.history.epochs.back().metrics;
    out.json_file("metrics.json", {{"epoch", r.history.epochs.back().epoch},
                                   {"metrics", to_json(last)}});
    out.csv("metrics.csv", metrics_csv(last));
    write_diagnostics(out, r.params, r.train_data, cfg, bins);
  }
  if (r.history.abort) {
    out.json_file("abort.json", {{"epoch", r.history.abort->epoch},
                                 {"batch", r.history.abort->batch},
                                 {"message", r.history.abort->message}});
    out.commit();
    throw CliError("diverged", "training aborted in epoch " +
                                   std::to_string(r.history.abort->epoch) + ": " +
                                   r.history.abort->message);
  }
  out.commit();
  return 0;
}

int cmd_sweep(const Invocation& inv, const Config& c) {
  const TrainConfig cfg = train_config(c);
  if (cfg.psi_values.empty())
    throw CliError("config", "missing required config key 'psi_values'");
  Provenance prov("sweep", c);
  const Dataset d = load_input(c, "data", prov);
  std::optional<Dataset> ev;
  if (c.has("eval_data")) ev = load_input(c, "eval_data", prov);

  const auto rep = run_psi_sweep(cfg, d, cfg.psi_values, ev ? &*ev : nullptr);
  const auto seeds = cfg.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : cfg.seeds;
  json runs = json::array();
  for (std::size_t p = 0; p < rep.rows.size(); ++p)
    for (std::size_t s = 0; s < seeds.size(); ++s)
      runs.push_back({{"psi", rep.rows[p].psi},
                      {"seed", seeds[s]},
                      {"metrics", to_json(rep.per_seed[p][s])}});
  Output out(inv, prov);
  out.csv("sweep.csv", sweep_csv(rep));
  out.json_file("sweep.json", {{"runs", std::move(runs)}});
  out.commit();
  return 0;
}

ModelParams load_checkpoint(const Config& c, Provenance& prov) {
  const std::string path = c.require_string("checkpoint");
  prov.add_input("checkpoint", path);
  try {
    return checkpoint_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw CliError("io", "checkpoint '" + path + "': " + e.what());
  }
}

int cmd_eval(const Invocation& inv, const Config& c) {
  const TrainConfig cfg = train_config(c);
  Provenance prov("eval", c);
  const ModelParams model = load_checkpoint(c, prov);
  const Dataset d = load_input(c, c.has("eval_data") ? "eval_data" : "data", prov);
  const auto m = assemble_report(model, d, cfg.report_options());
  Output out(inv, prov);
  out.json_file("metrics.json", {{"metrics", to_json(m)}});
  out.csv("metrics.csv", metrics_csv(m));
  out.commit();
  return 0;
}

int cmd_report(const Invocation& inv, const Config& c) {
  const TrainConfig cfg = train_config(c);
  Provenance prov("report", c);
  const ModelParams model = load_checkpoint(c, prov);
  const Dataset d = load_input(c, "data", prov);
  Output out(inv, prov);
  write_diagnostics(out, model, d, cfg, histogram_bins(c));
  out.commit();
  return 0;
}

void print_error(const std::string& subcommand, const std::string& kind,
                 const std::string& message) {
  json j;
  j["error"] = {{"kind", kind}, {"subcommand", subcommand}, {"message", message}};
  std::cerr << j.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Crowd-annotation training with loss-based label correction"};
  app.require_subcommand(1);
  Invocation inv;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen", "Generate a synthetic annotated dataset"},
      {"noise", "Inject label-flip noise into a dataset"},
      {"train", "Train one experimental arm"},
      {"sweep", "Train over a grid of psi values and seeds"},
      {"eval", "Evaluate a saved checkpoint"},
      {"report", "Export loss histogram, mixture fits and split for a checkpoint"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", inv.config_path, "Configuration file")->required();
    sub->add_option("--set", inv.overrides, "Override a config key (key=value)");
    sub->add_option("--out", inv.out_dir, "Output directory")->required();
    sub->add_flag("--force", inv.force, "Overwrite existing artifacts");
    sub->callback([&inv, n = name] { inv.subcommand = n; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error(inv.subcommand, "usage", e.what());
    return kExitUsage;
  }

  try {
    const Config c = load_config(inv);
    if (inv.subcommand == "gen") return cmd_gen(inv, c);
    if (inv.subcommand == "noise") return cmd_noise(inv, c);
    if (inv.subcommand == "train") return cmd_train(inv, c);
    if (inv.subcommand == "sweep") return cmd_sweep(inv, c);
    if (inv.subcommand == "eval") return cmd_eval(inv, c);
    return cmd_report(inv, c);
  } catch (const CliError& e) {
    print_error(inv.subcommand, e.kind, e.what());
    return e.kind == "diverged" ? kExitDiverged : kExitError;
  } catch (const Error& e) {
    const std::string msg = e.what();
    print_error(inv.subcommand, msg.find("config") != std::string::npos ? "config" : "invalid",
                msg);
    return kExitError;
  } catch (const std::exception& e) {
    print_error(inv.subcommand, "internal", e.what());
    return kExitError;
  }
}
