#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdloss/common.hpp"
#include "crowdloss/loss.hpp"

namespace crowdloss {

struct ModelDims {
  std::size_t input = 0;       // D
  std::size_t hidden = 32;     // H
  std::size_t classes = 2;     // M
  std::size_t annotators = 1;  // A, one head each
  std::size_t layers = 2;      // L tanh layers: D->H, then H->H

  void validate() const {
    require(input > 0 && hidden > 0 && classes > 0 && annotators > 0 &&
                layers > 0,
            "model dims must be positive");
  }
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Shared tanh encoder plus one softmax head per annotator, stored as one
/// flat vector. Layer weights are row-major (out x in); head a is M x H.
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(const ModelDims& dims) : dims_(dims) {
    dims_.validate();
    values_.assign(compute_size(dims_), 0.0);
  }

  const ModelDims& dims() const { return dims_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::size_t layer_in(std::size_t l) const {
    return l == 0 ? dims_.input : dims_.hidden;
  }
  std::size_t layer_weight_offset(std::size_t l) const {
    std::size_t off = 0;
    for (std::size_t k = 0; k < l; ++k)
      off += dims_.hidden * layer_in(k) + dims_.hidden;
    return off;
  }
  std::size_t layer_bias_offset(std::size_t l) const {
    return layer_weight_offset(l) + dims_.hidden * layer_in(l);
  }
  std::size_t head_weight_offset(std::size_t a) const {
    return layer_weight_offset(dims_.layers) +
           a * (dims_.classes * dims_.hidden + dims_.classes);
  }
  std::size_t head_bias_offset(std::size_t a) const {
    return head_weight_offset(a) + dims_.classes * dims_.hidden;
  }

  std::span<double> layer_weights(std::size_t l) {
    return {values_.data() + layer_weight_offset(l), dims_.hidden * layer_in(l)};
  }
  std::span<const double> layer_weights(std::size_t l) const {
    return {values_.data() + layer_weight_offset(l), dims_.hidden * layer_in(l)};
  }
  std::span<double> layer_bias(std::size_t l) {
    return {values_.data() + layer_bias_offset(l), dims_.hidden};
  }
  std::span<const double> layer_bias(std::size_t l) const {
    return {values_.data() + layer_bias_offset(l), dims_.hidden};
  }
  std::span<double> head_weights(std::size_t a) {
    return {values_.data() + head_weight_offset(a), dims_.classes * dims_.hidden};
  }
  std::span<const double> head_weights(std::size_t a) const {
    return {values_.data() + head_weight_offset(a), dims_.classes * dims_.hidden};
  }
  std::span<double> head_bias(std::size_t a) {
    return {values_.data() + head_bias_offset(a), dims_.classes};
  }
  std::span<const double> head_bias(std::size_t a) const {
    return {values_.data() + head_bias_offset(a), dims_.classes};
  }

  /// Parameters of head a (weights then bias), contiguous.
  std::span<const double> head_block(std::size_t a) const {
    return {values_.data() + head_weight_offset(a),
            dims_.classes * dims_.hidden + dims_.classes};
  }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static std::size_t compute_size(const ModelDims& d) {
    std::size_t n = d.hidden * d.input + d.hidden;
    n += (d.layers - 1) * (d.hidden * d.hidden + d.hidden);
    n += d.annotators * (d.classes * d.hidden + d.classes);
    return n;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;

 private:
  ModelDims dims_;
  std::vector<double> values_;
};

using Gradients = ModelParams;

/// Weights ~ N(0, 1/fan_in), biases zero.
inline ModelParams init_model(const ModelDims& dims, std::uint64_t seed) {
  ModelParams m(dims);
  Rng rng = make_rng(seed, 0x696e6974ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t l = 0; l < dims.layers; ++l) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(m.layer_in(l)));
    for (auto& w : m.layer_weights(l)) w = normal(rng) * scale;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
  for (std::size_t a = 0; a < dims.annotators; ++a)
    for (auto& w : m.head_weights(a)) w = normal(rng) * scale;
  return m;
}

// Forward ---------------------------------------------------------------------

struct MixInfo {
  double lambda = 1.0;
  std::size_t layer = 0;
  Rows branch_i;  // activations 0..layer of the first input
  Rows branch_j;  // activations 0..layer of the second input
};

struct ForwardTrace {
  Rows activations;  // [0] input (or mix), [k] hidden layer k after tanh
  Rows logits;       // A x M
  Rows probs;        // A x M, softmax of logits
  std::optional<MixInfo> mix;

  /// log-softmax, exact (no clamping).
  Rows log_probs() const {
    Rows out(logits.size());
    for (std::size_t a = 0; a < logits.size(); ++a) {
      const auto& z = logits[a];
      const double mx = *std::max_element(z.begin(), z.end());
      double s = 0.0;
      for (double v : z) s += std::exp(v - mx);
      const double lse = mx + std::log(s);
      out[a].resize(z.size());
      for (std::size_t m = 0; m < z.size(); ++m) out[a][m] = z[m] - lse;
    }
    return out;
  }
};

namespace detail {

inline Row dense_tanh(std::span<const double> w, std::span<const double> b,
                      const Row& in) {
  const std::size_t out_dim = b.size();
  const std::size_t in_dim = in.size();
  Row out(out_dim);
  for (std::size_t o = 0; o < out_dim; ++o) {
    double s = b[o];
    const double* wr = w.data() + o * in_dim;
    for (std::size_t k = 0; k < in_dim; ++k) s += wr[k] * in[k];
    out[o] = std::tanh(s);
  }
  return out;
}

inline Row softmax(const Row& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  Row p(z.size());
  double s = 0.0;
  for (std::size_t m = 0; m < z.size(); ++m) {
    p[m] = std::exp(z[m] - mx);
    s += p[m];
  }
  for (auto& v : p) v /= s;
  return p;
}

/// Runs encoder layers [from, L) starting from acts.back().
inline void encode_from(const ModelParams& model, std::size_t from, Rows& acts) {
  for (std::size_t l = from; l < model.dims().layers; ++l)
    acts.push_back(
        dense_tanh(model.layer_weights(l), model.layer_bias(l), acts.back()));
}

inline void apply_heads(const ModelParams& model, ForwardTrace& t) {
  const auto& d = model.dims();
  const Row& h = t.activations.back();
  t.logits.assign(d.annotators, Row(d.classes));
  t.probs.resize(d.annotators);
  for (std::size_t a = 0; a < d.annotators; ++a) {
    const auto w = model.head_weights(a);
    const auto b = model.head_bias(a);
    for (std::size_t m = 0; m < d.classes; ++m) {
      double s = b[m];
      for (std::size_t k = 0; k < d.hidden; ++k) s += w[m * d.hidden + k] * h[k];
      t.logits[a][m] = s;
    }
    t.probs[a] = softmax(t.logits[a]);
  }
}

}  // namespace detail

inline ForwardTrace forward(const ModelParams& model, std::span<const double> x) {
  require(x.size() == model.dims().input, "forward: input dimension mismatch");
  ForwardTrace t;
  t.activations.emplace_back(x.begin(), x.end());
  detail::encode_from(model, 0, t.activations);
  detail::apply_heads(model, t);
  return t;
}

/// Runs both inputs to `layer` (0 = raw input, k = k-th hidden activation),
/// forms lambda * h_i + (1 - lambda) * h_j there, and continues once.
inline ForwardTrace forward_mixup(const ModelParams& model,
                                  std::span<const double> x_i,
                                  std::span<const double> x_j, double lambda,
                                  std::size_t layer) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw Error("forward_mixup: lambda must be in [0, 1]");
  require(layer <= model.dims().layers, "forward_mixup: layer out of range");
  require(x_i.size() == model.dims().input && x_j.size() == model.dims().input,
          "forward_mixup: input dimension mismatch");
  MixInfo mix;
  mix.lambda = lambda;
  mix.layer = layer;
  mix.branch_i.emplace_back(x_i.begin(), x_i.end());
  mix.branch_j.emplace_back(x_j.begin(), x_j.end());
  for (std::size_t l = 0; l < layer; ++l) {
    mix.branch_i.push_back(detail::dense_tanh(
        model.layer_weights(l), model.layer_bias(l), mix.branch_i.back()));
    mix.branch_j.push_back(detail::dense_tanh(
        model.layer_weights(l), model.layer_bias(l), mix.branch_j.back()));
  }
  ForwardTrace t;
  t.activations = Rows(mix.branch_i.begin(), mix.branch_i.end() - 1);
  const Row& hi = mix.branch_i.back();
  const Row& hj = mix.branch_j.back();
  Row mixed(hi.size());
  for (std::size_t k = 0; k < hi.size(); ++k)
    mixed[k] = lambda * hi[k] + (1.0 - lambda) * hj[k];
  t.activations.push_back(std::move(mixed));
  detail::encode_from(model, layer, t.activations);
  detail::apply_heads(model, t);
  t.mix = std::move(mix);
  return t;
}

// Backward --------------------------------------------------------------------

namespace detail {

/// Backprop g = dL/dh_top through encoder layers top..stop+1, where acts[k]
/// is the activation at layer k. Returns dL/dh_stop.
inline Row backprop_encoder(const ModelParams& model, const Rows& acts,
                            std::size_t top, std::size_t stop, Row g,
                            Gradients& grads) {
  for (std::size_t k = top; k > stop; --k) {
    const std::size_t l = k - 1;  // parameter index of the layer producing acts[k]
    const Row& h = acts[k];
    const Row& in = acts[k - 1];
    const std::size_t in_dim = in.size();
    Row dz(h.size());
    for (std::size_t o = 0; o < h.size(); ++o) dz[o] = g[o] * (1.0 - h[o] * h[o]);
    auto gw = grads.layer_weights(l);
    auto gb = grads.layer_bias(l);
    const auto w = model.layer_weights(l);
    Row g_in(in_dim, 0.0);
    for (std::size_t o = 0; o < h.size(); ++o) {
      gb[o] += dz[o];
      double* gwr = gw.data() + o * in_dim;
      const double* wr = w.data() + o * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) {
        gwr[i] += dz[o] * in[i];
        g_in[i] += wr[i] * dz[o];
      }
    }
    g = std::move(g_in);
  }
  return g;
}

}  // namespace detail

/// Accumulates dL/dparams into `grads` given dL/dlogits (A x M).
inline void backward(const ModelParams& model, const ForwardTrace& t,
                     const Rows& dlogits, Gradients& grads) {
  const auto& d = model.dims();
  const Row& h = t.activations.back();
  Row g(d.hidden, 0.0);
  for (std::size_t a = 0; a < d.annotators; ++a) {
    const Row& dz = dlogits[a];
    bool any = false;
    for (double v : dz) any = any || v != 0.0;
    if (!any) continue;
    auto gw = grads.head_weights(a);
    auto gb = grads.head_bias(a);
    const auto w = model.head_weights(a);
    for (std::size_t m = 0; m < d.classes; ++m) {
      gb[m] += dz[m];
      for (std::size_t k = 0; k < d.hidden; ++k) {
        gw[m * d.hidden + k] += dz[m] * h[k];
        g[k] += w[m * d.hidden + k] * dz[m];
      }
    }
  }
  const std::size_t top = d.layers;
  if (!t.mix) {
    detail::backprop_encoder(model, t.activations, top, 0, std::move(g), grads);
    return;
  }
  const auto& mix = *t.mix;
  Row g_mix =
      detail::backprop_encoder(model, t.activations, top, mix.layer, std::move(g), grads);
  if (mix.layer == 0) return;
  Row gi(g_mix.size()), gj(g_mix.size());
  for (std::size_t k = 0; k < g_mix.size(); ++k) {
    gi[k] = mix.lambda * g_mix[k];
    gj[k] = (1.0 - mix.lambda) * g_mix[k];
  }
  detail::backprop_encoder(model, mix.branch_i, mix.layer, 0, std::move(gi), grads);
  detail::backprop_encoder(model, mix.branch_j, mix.layer, 0, std::move(gj), grads);
}

// Batch objective ----------------------------------------------------------

/// One training example with its per-annotator targets.
struct Example {
  std::vector<double> x;
  std::vector<std::optional<int>> labels;  // size A; nullopt = not annotated
  std::vector<double> weights;             // size A; correction weight w
  Rows guess;  // A x M detached self-guess z; may be empty when unused
};

/// Mixup pairing for a batch: example b is mixed with example partner[b].
struct MixPlan {
  double lambda = 1.0;
  std::size_t layer = 0;
  std::vector<std::size_t> partner;
};

struct Batch {
  std::vector<Example> examples;
  std::optional<MixPlan> mix;
};

struct GradientResult {
  Gradients grads;
  double loss = 0.0;
};

namespace detail {

/// Adds scale * d/dlogits [ sum over present a of c (1-w) CE(p_a, y_a)
/// + c psi w CE(p_a, z_a) ] to dlogits and returns the value, with c the
/// normalization from `norm`.
inline double data_term(const ForwardTrace& t, const Rows& log_p,
                        const Example& ex, const LossSpec& spec, double scale,
                        Rows& dlogits) {
  const bool lc = uses_correction(spec.mode);
  const std::size_t A = ex.labels.size();
  std::size_t present = 0;
  for (const auto& l : ex.labels) present += l ? 1 : 0;
  if (present == 0) throw Error("example has no present annotation");
  const double c = 1.0 / static_cast<double>(
                             spec.mt_norm == MtNorm::present ? present : A);
  const double log_floor = std::log(kProbFloor);
  double value = 0.0;
  for (std::size_t a = 0; a < A; ++a) {
    if (!ex.labels[a]) continue;
    const auto& p = t.probs[a];
    const std::size_t M = p.size();
    const double w = lc ? ex.weights[a] : 0.0;
    Row target(M, 0.0);
    target[static_cast<std::size_t>(*ex.labels[a])] += 1.0 - w;
    if (lc && w != 0.0 && spec.psi != 0.0)
      for (std::size_t m = 0; m < M; ++m) target[m] += spec.psi * w * ex.guess[a][m];
    double tsum = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      tsum += target[m];
      if (target[m] != 0.0) value -= c * target[m] * std::max(log_p[a][m], log_floor);
    }
    for (std::size_t m = 0; m < M; ++m)
      dlogits[a][m] += scale * c * (p[m] * tsum - target[m]);
  }
  return scale * value;
}

}  // namespace detail

/// Total batch loss and its exact gradient:
///   mean_b [lambda T(p_b; targets_b) + (1-lambda) T(p_b; targets_partner(b))]
///   + entropy_coeff * mean_b (-mean_a H(p_{b,a}))
///   + balance_coeff * mean_a KL(uniform || mean_b p_{b,a})
/// where T is the per-sample L_MT / L_MLC term for spec.mode. Per-example
/// contributions are reduced in index order regardless of `threads`.
inline GradientResult compute_gradients(const ModelParams& model,
                                        const Batch& batch,
                                        const LossSpec& spec,
                                        unsigned threads = 1) {
  const std::size_t B = batch.examples.size();
  require(B > 0, "compute_gradients: empty batch");
  const auto& d = model.dims();
  const std::size_t A = d.annotators;
  const std::size_t M = d.classes;
  for (const auto& ex : batch.examples)
    require(ex.labels.size() == A && ex.weights.size() == A,
            "compute_gradients: example annotator count != model heads");
  if (uses_correction(spec.mode))
    for (const auto& ex : batch.examples)
      for (std::size_t a = 0; a < A; ++a)
        if (ex.labels[a] && ex.weights[a] != 0.0)
          require(ex.guess.size() == A && ex.guess[a].size() == M,
                  "compute_gradients: missing self-guess");

  std::vector<ForwardTrace> traces(B);
  parallel_for(B, threads, [&](std::size_t b) {
    const auto& ex = batch.examples[b];
    if (batch.mix) {
      const auto& mx = *batch.mix;
      traces[b] = forward_mixup(model, ex.x, batch.examples[mx.partner.at(b)].x,
                                mx.lambda, mx.layer);
    } else {
      traces[b] = forward(model, ex.x);
    }
  });

  const double inv_b = 1.0 / static_cast<double>(B);
  Rows mean_p(A, Row(M, 0.0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t m = 0; m < M; ++m) mean_p[a][m] += traces[b].probs[a][m] * inv_b;

  double loss = 0.0;
  std::vector<Rows> dlogits(B, Rows(A, Row(M, 0.0)));
  const double log_floor = std::log(kProbFloor);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& t = traces[b];
    const Rows log_p = t.log_probs();
    if (batch.mix) {
      const double lam = batch.mix->lambda;
      const auto& partner = batch.examples[batch.mix->partner[b]];
      if (lam != 0.0)
        loss += detail::data_term(t, log_p, batch.examples[b], spec, lam * inv_b, dlogits[b]);
      if (lam != 1.0)
        loss += detail::data_term(t, log_p, partner, spec, (1.0 - lam) * inv_b, dlogits[b]);
    } else {
      loss += detail::data_term(t, log_p, batch.examples[b], spec, inv_b, dlogits[b]);
    }
    if (spec.entropy_penalty_coeff != 0.0) {
      // d/dz_k sum_m p_m log p_m = p_k (log p_k - sum_m p_m log p_m)
      const double s = spec.entropy_penalty_coeff * inv_b / static_cast<double>(A);
      for (std::size_t a = 0; a < A; ++a) {
        double neg_h = 0.0;
        for (std::size_t m = 0; m < M; ++m) neg_h += t.probs[a][m] * log_p[a][m];
        loss += s * neg_h;
        for (std::size_t m = 0; m < M; ++m)
          dlogits[b][a][m] += s * t.probs[a][m] * (log_p[a][m] - neg_h);
      }
    }
  }
  if (spec.class_balance_coeff != 0.0) {
    const double u = 1.0 / static_cast<double>(M);
    const double s = spec.class_balance_coeff / static_cast<double>(A);
    for (std::size_t a = 0; a < A; ++a)
      for (std::size_t m = 0; m < M; ++m)
        loss += s * u * (std::log(u) - std::max(std::log(mean_p[a][m]), log_floor));
    // dR/dp_{b,a,m} = -s u / (B mean_p[a][m]), pushed through the softmax.
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t a = 0; a < A; ++a) {
        const auto& p = traces[b].probs[a];
        Row g(M);
        double pg = 0.0;
        for (std::size_t m = 0; m < M; ++m) {
          g[m] = -s * u * inv_b / mean_p[a][m];
          pg += p[m] * g[m];
        }
        for (std::size_t m = 0; m < M; ++m) dlogits[b][a][m] += p[m] * (g[m] - pg);
      }
  }

  std::vector<Gradients> parts(B, Gradients(d));
  parallel_for(B, threads, [&](std::size_t b) {
    backward(model, traces[b], dlogits[b], parts[b]);
  });
  GradientResult out{Gradients(d), loss};
  auto acc = out.grads.values();
  for (const auto& part : parts) {
    const auto v = part.values();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += v[k];
  }
  return out;
}

// Checkpoint ------------------------------------------------------------------
//
// {"format": "crowdloss-checkpoint", "version": 1,
//  "dims": {"input": D, "hidden": H, "classes": M, "annotators": A, "layers": L},
//  "params": [...]}
// Parameter order: for each encoder layer, weights (row-major, out x in) then
// bias; then for each head, weights (row-major, M x H) then bias. Doubles are
// printed with round-trip precision.

inline nlohmann::ordered_json to_json(const ModelDims& d) {
  return {{"input", d.input},
          {"hidden", d.hidden},
          {"classes", d.classes},
          {"annotators", d.annotators},
          {"layers", d.layers}};
}

inline nlohmann::ordered_json checkpoint_json(const ModelParams& m) {
  nlohmann::ordered_json j;
  j["format"] = "crowdloss-checkpoint";
  j["version"] = 1;
  j["dims"] = to_json(m.dims());
  j["params"] = std::vector<double>(m.values().begin(), m.values().end());
  return j;
}

inline ModelParams checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "crowdloss-checkpoint")
    throw Error("not a crowdloss checkpoint");
  if (j.value("version", 0) != 1) throw Error("unsupported checkpoint version");
  const auto& jd = j.at("dims");
  ModelDims d;
  d.input = jd.at("input").get<std::size_t>();
  d.hidden = jd.at("hidden").get<std::size_t>();
  d.classes = jd.at("classes").get<std::size_t>();
  d.annotators = jd.at("annotators").get<std::size_t>();
  d.layers = jd.at("layers").get<std::size_t>();
  ModelParams m(d);
  const auto params = j.at("params").get<std::vector<double>>();
  if (params.size() != m.size())
    throw Error("checkpoint has " + std::to_string(params.size()) +
                " parameters, dims imply " + std::to_string(m.size()));
  std::copy(params.begin(), params.end(), m.values().begin());
  return m;
}

}  // namespace crowdloss
