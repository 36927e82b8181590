// End-to-end JSCC codec.
//
//   x --patchify/embed--> n_enc global CAMHA blocks (mu_bar)  = z
//   z --split into M contiguous token runs--> z_1..z_M
//   z_j --head CAMHA (mu_j) + linear d_model->c--> y_j --power norm--> channel
//   y_hat_j --linear c->d_model + head CAMHA (mu_j)--> z_hat_j
//   z_hat --n_dec global CAMHA blocks (mu_bar) + un-patch + sigmoid--> x_hat

#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqj/autodiff.hpp"
#include "seqj/camha.hpp"
#include "seqj/channel.hpp"
#include "seqj/rng.hpp"
#include "seqj/tensor.hpp"

namespace seqj {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CodecConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t patch = 8;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t n_enc = 2;
  std::size_t n_dec = 2;
  std::size_t d_y = 96;
  std::size_t blocks = 4;

  static constexpr std::size_t kChannels = 3;

  std::size_t tokens() const { return (height / patch) * (width / patch); }
  std::size_t patch_dim() const { return kChannels * patch * patch; }
  std::size_t symbols_per_token() const { return d_y / tokens(); }
  std::size_t tokens_per_block() const { return tokens() / blocks; }
  std::size_t symbols_per_block() const { return d_y / blocks; }
  /// Total CAMHA blocks; indices follow the forward order (enc, enc head, dec head, dec).
  std::size_t camha_blocks() const { return n_enc + n_dec + 2; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("codec config: " + m); };
    if (patch == 0 || height == 0 || width == 0) fail("image and patch sizes must be positive");
    if (height % patch || width % patch) fail("image size must be a multiple of the patch size");
    if (heads == 0 || d_model % heads) fail("d_model must be divisible by heads");
    if (blocks == 0 || tokens() % blocks) fail("token count " + std::to_string(tokens()) + " not divisible by M");
    if (d_y == 0 || d_y % blocks) fail("d_y not divisible by M");
    if (d_y % tokens()) fail("d_y " + std::to_string(d_y) + " is not a multiple of token count " + std::to_string(tokens()));
  }

  bool operator==(const CodecConfig&) const = default;
};

/// r = d_y / (3 U W).
inline double compression_rate(std::size_t d_y, std::size_t height, std::size_t width) {
  return static_cast<double>(d_y) / static_cast<double>(3 * height * width);
}

struct ParamCount {
  std::size_t backbone = 0;
  std::size_t ca_module = 0;
  std::size_t total() const { return backbone + ca_module; }
};

struct ModelParams {
  CodecConfig config;
  Parameter patch_w, patch_b;
  std::vector<CamhaParams> encoder;
  CamhaParams enc_head;
  Parameter enc_proj_w, enc_proj_b;
  Parameter dec_lift_w, dec_lift_b;
  CamhaParams dec_head;
  std::vector<CamhaParams> decoder;
  Parameter unpatch_w, unpatch_b;

  ModelParams() = default;
  ModelParams(const CodecConfig& cfg, std::uint64_t seed) : config(cfg) {
    cfg.validate();
    Prng rng(derive_seed(seed, "init"));
    Prng ca(derive_seed(seed, "ca-init"));
    const std::size_t d = cfg.d_model, c = cfg.symbols_per_token(), pd = cfg.patch_dim();
    patch_w = Parameter("patch.w", xavier_uniform(pd, d, rng));
    patch_b = Parameter("patch.b", Tensor({d}));
    for (std::size_t i = 0; i < cfg.n_enc; ++i) encoder.emplace_back("enc." + std::to_string(i), d, cfg.heads, rng, ca);
    enc_head = CamhaParams("enc_head", d, cfg.heads, rng, ca);
    enc_proj_w = Parameter("enc_head.proj.w", xavier_uniform(d, c, rng));
    enc_proj_b = Parameter("enc_head.proj.b", Tensor({c}));
    dec_lift_w = Parameter("dec_head.lift.w", xavier_uniform(c, d, rng));
    dec_lift_b = Parameter("dec_head.lift.b", Tensor({d}));
    dec_head = CamhaParams("dec_head", d, cfg.heads, rng, ca);
    for (std::size_t i = 0; i < cfg.n_dec; ++i) decoder.emplace_back("dec." + std::to_string(i), d, cfg.heads, rng, ca);
    unpatch_w = Parameter("unpatch.w", xavier_uniform(d, pd, rng));
    unpatch_b = Parameter("unpatch.b", Tensor({pd}));
  }

  /// Visits CAMHA blocks in forward order (matches GateTrace block indices).
  template <class F>
  void for_each_block(F&& f) {
    std::size_t idx = 0;
    for (auto& b : encoder) f(idx++, b);
    f(idx++, enc_head);
    f(idx++, dec_head);
    for (auto& b : decoder) f(idx++, b);
  }

  void set_channel_adaptation(bool caq, bool embed) {
    for_each_block([&](std::size_t, CamhaParams& b) {
      b.enable_caq = caq;
      b.enable_embed = embed;
    });
  }

  /// Active parameters in a fixed, config-determined order.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&patch_w, &patch_b};
    for (auto& b : encoder) b.collect(out);
    enc_head.collect(out);
    for (Parameter* p : {&enc_proj_w, &enc_proj_b, &dec_lift_w, &dec_lift_b}) out.push_back(p);
    dec_head.collect(out);
    for (auto& b : decoder) b.collect(out);
    out.push_back(&unpatch_w);
    out.push_back(&unpatch_b);
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }
};

/// Backbone vs channel-adaptation parameter split over the active parameters.
inline ParamCount count_params(ModelParams& m) {
  ParamCount c;
  for (Parameter* p : m.parameters()) (p->channel_adaptive ? c.ca_module : c.backbone) += p->value.size();
  return c;
}

// ---------------------------------------------------------------------------
// Patch geometry

/// Index map from the [3 x U x W] image to [T x 3p^2] tokens in raster order;
/// features within a token are ordered (channel, row, col).
inline std::vector<std::size_t> patch_index(const CodecConfig& cfg) {
  const std::size_t p = cfg.patch, gw = cfg.width / p, gh = cfg.height / p;
  std::vector<std::size_t> idx;
  idx.reserve(cfg.kChannels * cfg.height * cfg.width);
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t c = 0; c < gw; ++c)
      for (std::size_t ch = 0; ch < cfg.kChannels; ++ch)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            idx.push_back(ch * cfg.height * cfg.width + (r * p + dy) * cfg.width + (c * p + dx));
  return idx;
}

/// Inverse of patch_index.
inline std::vector<std::size_t> unpatch_index(const CodecConfig& cfg) {
  const std::vector<std::size_t> fwd = patch_index(cfg);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return inv;
}

// ---------------------------------------------------------------------------
// Encoder / decoder stages

inline Var encode_global(const Var& x, double mu_bar_db, ModelParams& m, GateTrace* trace = nullptr) {
  const CodecConfig& cfg = m.config;
  const Shape want{CodecConfig::kChannels, cfg.height, cfg.width};
  if (x.shape() != want) throw ShapeError("encode_global: image " + shape_str(x.shape()) + ", expected " + shape_str(want));
  Tape& tape = *x.tape();
  Var tokens = ad::gather(x, patch_index(cfg), {cfg.tokens(), cfg.patch_dim()});
  Var z = linear(tokens, tape.param(m.patch_w), tape.param(m.patch_b));
  for (std::size_t i = 0; i < m.encoder.size(); ++i) {
    CamhaOutput o = camha_forward(z, mu_bar_db, m.encoder[i]);
    if (trace) trace->add(i, mu_bar_db, o.gate);
    z = o.output;
  }
  return z;
}

/// M contiguous equal token runs in raster order.
inline std::vector<Var> segment(const Var& z, std::size_t blocks) {
  const std::size_t t = z.shape().at(0);
  if (blocks == 0 || t % blocks) {
    throw ConfigError("segment: " + std::to_string(t) + " tokens not divisible by M=" + std::to_string(blocks));
  }
  if (blocks == 1) return {z};
  std::vector<Var> out;
  const std::size_t n = t / blocks;
  for (std::size_t j = 0; j < blocks; ++j) out.push_back(ad::slice_rows(z, j * n, n));
  return out;
}

inline Var encode_block(const Var& z_j, double mu_j_db, ModelParams& m, GateTrace* trace = nullptr) {
  Tape& tape = *z_j.tape();
  CamhaOutput o = camha_forward(z_j, mu_j_db, m.enc_head);
  if (trace) trace->add(m.config.n_enc, mu_j_db, o.gate);
  Var s = linear(o.output, tape.param(m.enc_proj_w), tape.param(m.enc_proj_b));
  return ad::reshape(s, Shape{s.size()});
}

/// y * sqrt(L) / ||y||, so the mean square per symbol is exactly 1. A zero
/// input is returned unchanged and reported through `degenerate`.
inline Var power_normalize(const Var& y, bool* degenerate = nullptr) {
  const Tensor& yv = y.value();
  double ss = 0.0;
  for (double v : yv.data()) ss += v * v;
  if (degenerate) *degenerate = ss == 0.0;
  if (ss == 0.0) return ad::scalar_affine(y, 1.0, 0.0);
  const double norm = std::sqrt(ss);
  const double k = std::sqrt(static_cast<double>(yv.size())) / norm;
  Tensor out(yv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = k * yv[i];
  return y.tape()->record("power_normalize", std::move(out), {y}, [y, k, norm](Tape& t, const Tensor& g) {
    const Tensor& yv = y.value();
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * yv[i];
    dot /= norm * norm;
    Tensor& gy = t.grad_buffer(y);
    for (std::size_t i = 0; i < g.size(); ++i) gy[i] += k * (g[i] - yv[i] * dot);
  });
}

inline Var decode_block(const Var& y_hat_j, double mu_j_db, ModelParams& m, GateTrace* trace = nullptr) {
  const CodecConfig& cfg = m.config;
  if (y_hat_j.size() != cfg.symbols_per_block()) {
    throw ShapeError("decode_block: got " + std::to_string(y_hat_j.size()) + " symbols, expected " +
                     std::to_string(cfg.symbols_per_block()));
  }
  Tape& tape = *y_hat_j.tape();
  Var s = ad::reshape(y_hat_j, {cfg.tokens_per_block(), cfg.symbols_per_token()});
  Var z = linear(s, tape.param(m.dec_lift_w), tape.param(m.dec_lift_b));
  CamhaOutput o = camha_forward(z, mu_j_db, m.dec_head);
  if (trace) trace->add(cfg.n_enc + 1, mu_j_db, o.gate);
  return o.output;
}

inline Var decode_global(const std::vector<Var>& segments, double mu_bar_db, ModelParams& m, GateTrace* trace = nullptr) {
  const CodecConfig& cfg = m.config;
  if (segments.size() != cfg.blocks) {
    throw ShapeError("decode_global: got " + std::to_string(segments.size()) + " segments, expected " +
                     std::to_string(cfg.blocks));
  }
  Tape& tape = *segments.front().tape();
  Var z = segments.size() == 1 ? segments.front() : ad::concat_rows(segments);
  for (std::size_t i = 0; i < m.decoder.size(); ++i) {
    CamhaOutput o = camha_forward(z, mu_bar_db, m.decoder[i]);
    if (trace) trace->add(cfg.n_enc + 2 + i, mu_bar_db, o.gate);
    z = o.output;
  }
  Var pix = ad::sigmoid(linear(z, tape.param(m.unpatch_w), tape.param(m.unpatch_b)));
  return ad::gather(pix, unpatch_index(cfg), {CodecConfig::kChannels, cfg.height, cfg.width});
}

// ---------------------------------------------------------------------------
// Whole link

/// Everything random about one image's trip through the channel, drawn ahead
/// of the forward pass so the pass itself is a deterministic function.
struct LinkDraw {
  double mu_bar_db = 0.0;
  ChannelRealization channel;
  /// Conditioning SNRs (dB) seen by the transmitter heads and receiver heads.
  std::vector<double> tx_snr_db;
  std::vector<double> rx_snr_db;
  std::vector<Tensor> noise;
};

/// Encodes, transmits and decodes one image on the tape.
inline Var run_link(const Var& x, const LinkDraw& d, ModelParams& m, GateTrace* trace = nullptr,
                    std::size_t* degenerate_power = nullptr) {
  Tape& tape = *x.tape();
  Var z = encode_global(x, d.mu_bar_db, m, trace);
  std::vector<Var> segs = segment(z, m.config.blocks);
  std::vector<Var> rx;
  rx.reserve(segs.size());
  for (std::size_t j = 0; j < segs.size(); ++j) {
    bool degenerate = false;
    Var y = power_normalize(encode_block(segs[j], d.tx_snr_db.at(j), m, trace), &degenerate);
    if (degenerate && degenerate_power) ++*degenerate_power;
    Var y_hat = ad::add(ad::scalar_affine(y, d.channel.h.at(j), 0.0), tape.constant(d.noise.at(j)));
    rx.push_back(decode_block(y_hat, d.rx_snr_db.at(j), m, trace));
  }
  return decode_global(rx, d.mu_bar_db, m, trace);
}

}  // namespace seqj
