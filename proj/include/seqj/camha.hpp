// Channel-adaptive multi-head attention (CAMHA).
//
// A CAMHA block is a pre-norm transformer block with two SNR-conditioned
// additions:
//   * SNR embedding: a learned vector g(snr) added to every input token;
//   * channel-adaptive query (CAQ): the self-attention query is replaced by
//     a(snr) * q + b(snr) before the per-head projections, with a >= 0.
// The (a, b) pair used by a forward pass is handed back to the caller so the
// training loss can penalize its correlation with the SNR.

#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqj/autodiff.hpp"
#include "seqj/rng.hpp"
#include "seqj/tensor.hpp"

namespace seqj {

using ad::Tape;
using ad::Var;

/// Width of the hidden layer in every SNR-conditioning network.
inline constexpr std::size_t kSnrHidden = 16;

/// Maps the [-10, 20] dB training range onto [-1, 1].
inline double normalize_snr_db(double mu_db) { return (mu_db - 5.0) / 15.0; }

// ---------------------------------------------------------------------------
// Initialization helpers

inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Prng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (double& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

/// x * W + b for x [n x in], W [in x out], b [out].
inline Var linear(const Var& x, const Var& w, const Var& b) { return ad::add(ad::matmul(x, w), b); }

// ---------------------------------------------------------------------------
// Types

/// Per-head projections (right-multiplied: q_j = q * wq[j]) and the output map.
struct MhaWeights {
  std::vector<Parameter> wq, wk, wv;
  Parameter wout;

  MhaWeights() = default;
  MhaWeights(const std::string& prefix, std::size_t d_model, std::size_t heads, Prng& rng) {
    if (heads == 0 || d_model % heads != 0) {
      throw std::invalid_argument("MhaWeights: d_model " + std::to_string(d_model) +
                                  " not divisible by heads " + std::to_string(heads));
    }
    const std::size_t dh = d_model / heads;
    for (std::size_t j = 0; j < heads; ++j) {
      const std::string h = "." + std::to_string(j);
      wq.emplace_back(prefix + ".wq" + h, xavier_uniform(d_model, dh, rng));
      wk.emplace_back(prefix + ".wk" + h, xavier_uniform(d_model, dh, rng));
      wv.emplace_back(prefix + ".wv" + h, xavier_uniform(d_model, dh, rng));
    }
    wout = Parameter(prefix + ".wout", xavier_uniform(heads * dh, d_model, rng));
  }

  std::size_t heads() const noexcept { return wq.size(); }

  void collect(std::vector<Parameter*>& out) {
    for (std::size_t j = 0; j < heads(); ++j) {
      out.push_back(&wq[j]);
      out.push_back(&wk[j]);
      out.push_back(&wv[j]);
    }
    out.push_back(&wout);
  }
};

/// 1 -> kSnrHidden (ReLU) -> out network over the normalized SNR.
struct SnrMlp {
  Parameter w1, b1, w2, b2;
  bool relu_output = false;

  SnrMlp() = default;
  /// Hidden layer random; output layer zero weights and a constant bias, so a
  /// fresh network outputs `output_bias` for every SNR.
  SnrMlp(const std::string& prefix, std::size_t out, double output_bias, bool relu_out, Prng& rng)
      : relu_output(relu_out) {
    w1 = Parameter(prefix + ".w1", xavier_uniform(1, kSnrHidden, rng), true);
    Tensor hb({kSnrHidden});
    for (double& v : hb.data()) v = rng.uniform(-1.0, 1.0);
    b1 = Parameter(prefix + ".b1", std::move(hb), true);
    w2 = Parameter(prefix + ".w2", Tensor({kSnrHidden, out}), true);
    b2 = Parameter(prefix + ".b2", Tensor({out}, output_bias), true);
  }

  Var forward(Tape& tape, double mu_db) {
    Var s = tape.constant(Tensor({1, 1}, std::vector<double>{normalize_snr_db(mu_db)}));
    Var h = ad::relu(linear(s, tape.param(w1), tape.param(b1)));
    Var o = linear(h, tape.param(w2), tape.param(b2));
    if (relu_output) o = ad::relu(o);
    return ad::reshape(o, Shape{o.size()});
  }

  std::size_t parameter_count() const { return w1.value.size() + b1.value.size() + w2.value.size() + b2.value.size(); }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
  }
};

/// The two scalar gate networks: a (ReLU output, bias 1) and b (bias 0).
struct SnrGate {
  SnrMlp scale;
  SnrMlp shift;

  SnrGate() = default;
  SnrGate(const std::string& prefix, Prng& rng)
      : scale(prefix + ".a", 1, 1.0, true, rng), shift(prefix + ".b", 1, 0.0, false, rng) {}

  std::size_t parameter_count() const { return scale.parameter_count() + shift.parameter_count(); }

  void collect(std::vector<Parameter*>& out) {
    scale.collect(out);
    shift.collect(out);
  }
};

struct SnrEmbedder {
  SnrMlp net;

  SnrEmbedder() = default;
  SnrEmbedder(const std::string& prefix, std::size_t d_model, Prng& rng) : net(prefix, d_model, 0.0, false, rng) {}

  std::size_t parameter_count() const { return net.parameter_count(); }
  void collect(std::vector<Parameter*>& out) { net.collect(out); }
};

struct CamhaParams {
  MhaWeights attn;
  Parameter ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Parameter ff_w1, ff_b1, ff_w2, ff_b2;
  SnrGate gate;
  SnrEmbedder embed;
  bool enable_caq = true;
  bool enable_embed = true;

  CamhaParams() = default;
  /// Backbone weights are drawn from `rng`, channel-adaptive networks from
  /// `ca_rng`, so enabling or disabling CA never shifts the backbone init.
  CamhaParams(const std::string& prefix, std::size_t d_model, std::size_t heads, Prng& rng, Prng& ca_rng)
      : attn(prefix + ".attn", d_model, heads, rng),
        ln1_gamma(prefix + ".ln1.gamma", Tensor({d_model}, 1.0)),
        ln1_beta(prefix + ".ln1.beta", Tensor({d_model})),
        ln2_gamma(prefix + ".ln2.gamma", Tensor({d_model}, 1.0)),
        ln2_beta(prefix + ".ln2.beta", Tensor({d_model})),
        ff_w1(prefix + ".ff.w1", xavier_uniform(d_model, 4 * d_model, rng)),
        ff_b1(prefix + ".ff.b1", Tensor({4 * d_model})),
        ff_w2(prefix + ".ff.w2", xavier_uniform(4 * d_model, d_model, rng)),
        ff_b2(prefix + ".ff.b2", Tensor({d_model})),
        gate(prefix + ".gate", ca_rng),
        embed(prefix + ".embed", d_model, ca_rng) {}

  std::size_t d_model() const { return ln1_gamma.value.size(); }

  /// Active parameters: backbone first, then enabled CA networks.
  void collect(std::vector<Parameter*>& out) {
    attn.collect(out);
    for (Parameter* p : {&ln1_gamma, &ln1_beta, &ln2_gamma, &ln2_beta, &ff_w1, &ff_b1, &ff_w2, &ff_b2}) out.push_back(p);
    if (enable_caq) gate.collect(out);
    if (enable_embed) embed.collect(out);
  }

  std::size_t ca_parameter_count() const {
    return (enable_caq ? gate.parameter_count() : 0) + (enable_embed ? embed.parameter_count() : 0);
  }
};

// ---------------------------------------------------------------------------
// Operations

struct AttentionResult {
  Var output;
  Var scores;
};

/// softmax(q k^T / sqrt(d_q)) v with row-wise softmax.
inline AttentionResult scaled_dot_attention(const Var& q, const Var& k, const Var& v) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  const Shape& vs = v.shape();
  if (qs.size() != 2 || ks.size() != 2 || vs.size() != 2 || qs != ks || vs[0] != qs[0]) {
    throw ShapeError("scaled_dot_attention: q " + shape_str(qs) + ", k " + shape_str(ks) + ", v " + shape_str(vs));
  }
  const double inv_sqrt_dq = 1.0 / std::sqrt(static_cast<double>(qs[1]));
  Var logits = ad::scalar_affine(ad::matmul(q, ad::transpose_2d(k)), inv_sqrt_dq, 0.0);
  Var scores = ad::softmax_lastdim(logits);
  return {ad::matmul(scores, v), scores};
}

/// concat_j Atten(q wq_j, k wk_j, v wv_j) * wout.
inline Var mha(const Var& q, const Var& k, const Var& v, MhaWeights& w, std::vector<Var>* scores = nullptr) {
  Tape& tape = *q.tape();
  std::vector<Var> heads;
  heads.reserve(w.heads());
  for (std::size_t j = 0; j < w.heads(); ++j) {
    AttentionResult r = scaled_dot_attention(ad::matmul(q, tape.param(w.wq[j])), ad::matmul(k, tape.param(w.wk[j])),
                                             ad::matmul(v, tape.param(w.wv[j])));
    heads.push_back(r.output);
    if (scores) scores->push_back(r.scores);
  }
  Var cat = heads.size() == 1 ? heads.front() : ad::concat_lastdim(heads);
  return ad::matmul(cat, tape.param(w.wout));
}

struct GateValues {
  Var a;
  Var b;
};

inline GateValues snr_gate(Tape& tape, double mu_db, SnrGate& gate) {
  return {gate.scale.forward(tape, mu_db), gate.shift.forward(tape, mu_db)};
}

/// q' = a q + b. `a` and `b` are single-element tensors; a must be >= 0.
inline Var caq(const Var& q, const Var& a, const Var& b) {
  if (a.size() != 1 || b.size() != 1) throw ShapeError("caq: a and b must be scalars");
  if (!(a.item() >= 0.0)) throw std::domain_error("caq: query scale a must be non-negative, got " + std::to_string(a.item()));
  return ad::add(ad::mul(q, a), b);
}

inline Var caq(const Var& q, double a, double b) {
  Tape& t = *q.tape();
  return caq(q, t.constant(Tensor::scalar(a)), t.constant(Tensor::scalar(b)));
}

/// Adds the embedding vector to every token row.
inline Var snr_embedding(const Var& x, const Var& embedding) {
  if (x.shape().back() != embedding.size()) {
    throw ShapeError("snr_embedding: tokens " + shape_str(x.shape()) + " vs embedding " + shape_str(embedding.shape()));
  }
  return ad::add(x, embedding);
}

inline Var snr_embedding(const Var& x, double mu_db, SnrEmbedder& emb) {
  return snr_embedding(x, emb.net.forward(*x.tape(), mu_db));
}

struct CamhaOutput {
  Var output;
  /// Gate values used by CAQ; invalid Vars when CAQ is disabled.
  GateValues gate;
};

inline CamhaOutput camha_forward(const Var& x, double mu_db, CamhaParams& p) {
  Tape& tape = *x.tape();
  const Shape& xs = x.shape();
  if (xs.size() != 2 || xs[1] != p.d_model()) {
    throw ShapeError("camha_forward: input " + shape_str(xs) + " for d_model " + std::to_string(p.d_model()));
  }
  Var stream = p.enable_embed ? snr_embedding(x, mu_db, p.embed) : x;
  Var h = ad::layer_norm(stream, tape.param(p.ln1_gamma), tape.param(p.ln1_beta));
  CamhaOutput out;
  Var q = h;
  if (p.enable_caq) {
    out.gate = snr_gate(tape, mu_db, p.gate);
    q = caq(h, out.gate.a, out.gate.b);
  }
  stream = ad::add(stream, mha(q, h, h, p.attn));
  Var f = ad::layer_norm(stream, tape.param(p.ln2_gamma), tape.param(p.ln2_beta));
  f = ad::relu(linear(f, tape.param(p.ff_w1), tape.param(p.ff_b1)));
  f = linear(f, tape.param(p.ff_w2), tape.param(p.ff_b2));
  out.output = ad::add(stream, f);
  return out;
}

// ---------------------------------------------------------------------------
// Gate bookkeeping for the correlation penalty

struct GateRecord {
  /// Conditioning SNR (dB) the gate was evaluated at.
  double snr_db = 0.0;
  Var a;
  Var b;
};

/// gates[block] holds one record per gate evaluation of that CAMHA block.
struct GateTrace {
  std::vector<std::vector<GateRecord>> gates;

  void add(std::size_t block, double snr_db, const GateValues& g) {
    if (!g.a.valid()) return;
    if (gates.size() <= block) gates.resize(block + 1);
    gates[block].push_back({snr_db, g.a, g.b});
  }
};

}  // namespace seqj
