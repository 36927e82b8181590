// Self-checks shared by the CLI and the test suites: the finite-difference
// gradient suite and Monte Carlo channel moments.

#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <bit>
#include <numbers>
#include <string>
#include <vector>

#include "seqj/autodiff.hpp"
#include "seqj/camha.hpp"
#include "seqj/channel.hpp"
#include "seqj/codec.hpp"
#include "seqj/metrics.hpp"
#include "seqj/rng.hpp"
#include "seqj/train.hpp"

namespace seqj {

// ---------------------------------------------------------------------------
// Gradient suite

inline constexpr double kPrimitiveGradTol = 1e-6;
inline constexpr double kLossGradTol = 1e-4;

struct GradCase {
  std::string name;
  double tolerance = 0.0;
  ad::GradCheckResult result;
  bool passed() const { return result.max_rel_error < tolerance; }
};

/// The smallest configuration that still exercises every stage.
inline CodecConfig micro_codec_config() {
  CodecConfig c;
  c.height = 8;
  c.width = 8;
  c.patch = 4;
  c.d_model = 8;
  c.heads = 2;
  c.n_enc = 1;
  c.n_dec = 1;
  c.d_y = 8;
  c.blocks = 2;
  return c;
}

inline Tensor random_tensor(const Shape& s, Prng& rng, double scale = 1.0) {
  Tensor t(s);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

/// Overwrites every channel-adaptive weight with random values so gate
/// outputs vary with the SNR (at init they are constant).
inline void randomize_ca(ModelParams& m, Prng& rng, double scale = 0.5) {
  m.for_each_block([&](std::size_t, CamhaParams& b) {
    std::vector<Parameter*> ps;
    b.gate.collect(ps);
    b.embed.collect(ps);
    for (Parameter* p : ps) {
      for (double& v : p->value.data()) v += scale * rng.normal();
    }
  });
}

namespace detail {

/// Contracts y with fixed random weights so every output coordinate matters.
inline ad::Var probe(ad::Tape& tape, const ad::Var& y, std::uint64_t seed) {
  Prng rng(seed);
  return ad::sum(ad::mul(y, tape.constant(random_tensor(y.shape(), rng))));
}

}  // namespace detail

/// Micro-config batch: 4 images at distinct average SNRs, fixed channel
/// draws, randomized gates so both penalties are active.
struct MicroProblem {
  ModelParams model;
  std::vector<Tensor> images;
  std::vector<LinkDraw> draws;
  double lambda = 0.05;

  explicit MicroProblem(std::uint64_t seed) : model(micro_codec_config(), seed) {
    Prng rng(derive_seed(seed, "micro-problem"));
    randomize_ca(model, rng);
    SynthSpec spec{8, 8, 4, 2.0};
    const double mus[] = {-6.0, 1.0, 8.0, 15.0};
    for (double mu : mus) {
      images.push_back(synth_image(spec, rng));
      draws.push_back(draw_link(model.config, mu, LinkOptions{}, rng, rng));
    }
  }

  Loss loss(ad::Tape& tape) { return batch_loss(tape, model, images, draws, lambda).loss; }
};

inline std::vector<GradCase> run_gradcheck_suite(std::uint64_t seed = 7) {
  using ad::Tape;
  using ad::Var;
  std::vector<GradCase> out;
  Prng rng(derive_seed(seed, "gradcheck"));
  std::uint64_t probe_seed = derive_seed(seed, "probe");
  auto prim = [&](const std::string& name, const Tensor& x, std::function<Var(Tape&, Var)> f) {
    const std::uint64_t ps = ++probe_seed;
    out.push_back({name, kPrimitiveGradTol,
                   ad::grad_check([&](Tape& t, Var v) { return detail::probe(t, f(t, v), ps); }, x)});
  };

  const Tensor a34 = random_tensor({3, 4}, rng);
  const Tensor b34 = random_tensor({3, 4}, rng);
  const Tensor b4 = random_tensor({4}, rng);
  const Tensor w45 = random_tensor({4, 5}, rng);
  Tensor away_from_kink = random_tensor({3, 4}, rng);
  for (double& v : away_from_kink.data()) v += v >= 0 ? 0.1 : -0.1;

  prim("add", a34, [&](Tape& t, Var x) { return ad::add(x, t.constant(b34)); });
  prim("add_broadcast", b4, [&](Tape& t, Var x) { return ad::add(t.constant(a34), x); });
  prim("sub", a34, [&](Tape& t, Var x) { return ad::sub(t.constant(b34), x); });
  prim("mul", a34, [&](Tape& t, Var x) { return ad::mul(x, t.constant(b34)); });
  prim("mul_broadcast", b4, [&](Tape& t, Var x) { return ad::mul(t.constant(a34), x); });
  prim("mul_self", a34, [&](Tape&, Var x) { return ad::mul(x, x); });
  prim("scalar_affine", a34, [&](Tape&, Var x) { return ad::scalar_affine(x, -1.7, 0.3); });
  prim("relu", away_from_kink, [&](Tape&, Var x) { return ad::relu(x); });
  prim("sigmoid", a34, [&](Tape&, Var x) { return ad::sigmoid(x); });
  prim("square", a34, [&](Tape&, Var x) { return ad::square(x); });
  prim("sum", a34, [&](Tape&, Var x) { return ad::sum(x); });
  prim("mean", a34, [&](Tape&, Var x) { return ad::mean(x); });
  prim("matmul_left", a34, [&](Tape& t, Var x) { return ad::matmul(x, t.constant(w45)); });
  prim("matmul_right", w45, [&](Tape& t, Var x) { return ad::matmul(t.constant(a34), x); });
  prim("softmax", a34, [&](Tape&, Var x) { return ad::softmax_lastdim(x); });
  const Tensor beta4 = random_tensor({4}, rng);
  prim("layer_norm", a34, [&](Tape& t, Var x) { return ad::layer_norm(x, t.constant(b4), t.constant(beta4)); });
  prim("reshape", a34, [&](Tape&, Var x) { return ad::reshape(x, {2, 6}); });
  prim("transpose", a34, [&](Tape&, Var x) { return ad::transpose_2d(x); });
  prim("gather", a34, [&](Tape&, Var x) { return ad::gather(x, {11, 0, 5, 5, 3, 7}, {2, 3}); });
  prim("concat_lastdim", a34, [&](Tape& t, Var x) { return ad::concat_lastdim({x, t.constant(b34), x}); });
  prim("slice_lastdim", a34, [&](Tape&, Var x) { return ad::slice_lastdim(x, 1, 2); });
  prim("slice_rows", a34, [&](Tape&, Var x) { return ad::slice_rows(x, 1, 2); });
  prim("concat_rows", a34, [&](Tape& t, Var x) { return ad::concat_rows({t.constant(b34), x}); });
  prim("power_normalize", random_tensor({12}, rng), [&](Tape&, Var x) { return power_normalize(x); });
  prim("pearson", random_tensor({6}, rng), [&](Tape&, Var x) {
    return pearson_corr({-3.0, 0.5, 1.0, 4.0, 9.0, 12.0}, x);
  });
  prim("mse", a34, [&](Tape& t, Var x) { return mse(t.constant(b34), x); });
  prim("caq", a34, [&](Tape& t, Var x) { return caq(x, t.constant(Tensor::scalar(0.7)), t.constant(Tensor::scalar(-0.2))); });
  prim("attention_q", a34, [&](Tape& t, Var x) { return scaled_dot_attention(x, t.constant(b34), t.constant(a34)).output; });
  prim("attention_k", a34, [&](Tape& t, Var x) { return scaled_dot_attention(t.constant(b34), x, t.constant(a34)).output; });
  prim("attention_v", a34, [&](Tape& t, Var x) { return scaled_dot_attention(t.constant(b34), t.constant(a34), x).output; });

  // Parameterized layers, checked against every weight they own.
  {
    Prng ca_rng(derive_seed(seed, "gradcheck-ca"));
    CamhaParams block("check", 8, 2, rng, ca_rng);
    for (Parameter* p : [&] {
           std::vector<Parameter*> ps;
           block.gate.collect(ps);
           block.embed.collect(ps);
           return ps;
         }()) {
      for (double& v : p->value.data()) v += 0.5 * rng.normal();
    }
    const Tensor x = random_tensor({5, 8}, rng);
    std::vector<Parameter*> ps;
    block.collect(ps);
    const std::uint64_t s1 = ++probe_seed;
    out.push_back({"mha", kPrimitiveGradTol, ad::grad_check_params([&](Tape& t) {
                     Var xv = t.constant(x);
                     return detail::probe(t, mha(xv, xv, xv, block.attn), s1);
                   }, [&] {
                     std::vector<Parameter*> w;
                     block.attn.collect(w);
                     return w;
                   }())});
    const std::uint64_t s2 = ++probe_seed;
    out.push_back({"camha_block", kPrimitiveGradTol, ad::grad_check_params([&](Tape& t) {
                     return detail::probe(t, camha_forward(t.constant(x), 3.0, block).output, s2);
                   }, ps)});
    const std::uint64_t s3 = ++probe_seed;
    out.push_back({"camha_block_input", kPrimitiveGradTol, ad::grad_check([&](Tape& t, Var xv) {
                     return detail::probe(t, camha_forward(xv, -2.0, block).output, s3);
                   }, x)});
  }

  // Full objective (MSE + both correlation penalties) on the micro config.
  {
    MicroProblem problem(seed);
    out.push_back({"full_loss", kLossGradTol,
                   ad::grad_check_params([&](Tape& t) { return problem.loss(t).total; }, problem.model.parameters())});
  }
  return out;
}

inline bool all_passed(const std::vector<GradCase>& cases) {
  for (const auto& c : cases) {
    if (!c.passed()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Channel moments

struct MomentRow {
  std::string quantity;
  double estimate = 0.0;
  double expected = 0.0;
  double rel_error() const { return std::abs(estimate - expected) / std::abs(expected); }
};

/// Monte Carlo moments of the fading, AWGN and feedback models.
inline std::vector<MomentRow> channel_moments(std::size_t draws, std::uint64_t seed, double mu_bar_db,
                                              const std::vector<double>& sigmas) {
  std::vector<MomentRow> rows;
  {
    Prng rng(derive_seed(seed, "moments-fading"));
    const ChannelRealization c = sample_fading(draws, rng);
    double s1 = 0.0, s2 = 0.0;
    for (double h : c.h) {
      s1 += h;
      s2 += h * h;
    }
    const double n = static_cast<double>(draws);
    rows.push_back({"E[h^2]", s2 / n, 1.0});
    rows.push_back({"E[h]", s1 / n, std::sqrt(std::numbers::pi / 4.0)});
  }
  {
    Prng rng(derive_seed(seed, "moments-awgn"));
    const double sigma_n = noise_std_from_snr(db_to_linear(mu_bar_db));
    const double h = 0.8;
    const Tensor y = random_tensor({draws}, rng);
    const Tensor r = transmit(y, h, sigma_n, rng);
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
      const double e = r[i] - h * y[i];
      s += e;
      ss += e * e;
    }
    const double n = static_cast<double>(draws);
    rows.push_back({"Var[y_hat - h y]", ss / n - (s / n) * (s / n), sigma_n * sigma_n});
  }
  for (double sigma : sigmas) {
    Prng rng(derive_seed(seed, "moments-feedback", {std::bit_cast<std::uint64_t>(sigma)}));
    const FeedbackModel fb = NoisyFeedback{sigma};
    double lhs = 0.0, g2 = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
      const std::complex<double> g = standard_complex_normal(rng);
      lhs += feedback_snr(g, 1.0, fb, rng);
      g2 += std::norm(g);
    }
    const double n = static_cast<double>(draws);
    rows.push_back({"E|g+e|^2 (sigma_h=" + std::to_string(sigma).substr(0, 4) + ")", lhs / n, g2 / n + sigma * sigma});
  }
  return rows;
}

}  // namespace seqj
