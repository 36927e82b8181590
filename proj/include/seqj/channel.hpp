// Rayleigh block-fading channel with real AWGN.
//
// Each fading block j draws a standard complex Gaussian g_j; the real gain is
// h_j = |g_j|, so E[h^2] = 1 and the instantaneous SNR is mu_j = mu_bar h_j^2.
// Transmit symbols are unit power, hence the noise std follows mu_bar alone.

#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "seqj/rng.hpp"
#include "seqj/tensor.hpp"

namespace seqj {

inline double db_to_linear(double x_db) { return std::pow(10.0, x_db / 10.0); }

inline double linear_to_db(double x) {
  if (!(x > 0.0)) throw std::domain_error("linear_to_db: argument must be positive, got " + std::to_string(x));
  return 10.0 * std::log10(x);
}

inline double noise_std_from_snr(double mu_linear) {
  if (!(mu_linear > 0.0)) throw std::domain_error("noise_std_from_snr: SNR must be positive");
  return std::sqrt(1.0 / mu_linear);
}

/// Conditioning networks see SNRs in dB; deep fades are floored here so that
/// h -> 0 stays finite.
inline constexpr double kMinConditioningDb = -40.0;

inline double conditioning_db(double mu_linear) {
  const double floor_lin = db_to_linear(kMinConditioningDb);
  return linear_to_db(mu_linear > floor_lin ? mu_linear : floor_lin);
}

inline std::complex<double> standard_complex_normal(Prng& rng) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double re = rng.normal();
  const double im = rng.normal();
  return {re * inv_sqrt2, im * inv_sqrt2};
}

struct ChannelRealization {
  std::vector<std::complex<double>> g;
  std::vector<double> h;
  double mu_bar = 1.0;
  double noise_std = 1.0;

  std::size_t blocks() const noexcept { return h.size(); }
  double instantaneous_snr(std::size_t j) const { return mu_bar * h.at(j) * h.at(j); }
};

/// M independent fading draws. mu_bar/noise_std are filled by realize().
inline ChannelRealization sample_fading(std::size_t blocks, Prng& rng) {
  if (blocks == 0) throw std::invalid_argument("sample_fading: need at least one block");
  ChannelRealization c;
  c.g.reserve(blocks);
  c.h.reserve(blocks);
  for (std::size_t j = 0; j < blocks; ++j) {
    c.g.push_back(standard_complex_normal(rng));
    c.h.push_back(std::abs(c.g.back()));
  }
  return c;
}

inline ChannelRealization realize_channel(std::size_t blocks, double mu_bar_db, Prng& rng) {
  ChannelRealization c = sample_fading(blocks, rng);
  c.mu_bar = db_to_linear(mu_bar_db);
  c.noise_std = noise_std_from_snr(c.mu_bar);
  return c;
}

/// y_hat = h y + n, n ~ N(0, noise_std^2) i.i.d. per real symbol.
inline Tensor sample_noise(const Shape& shape, double noise_std, Prng& rng) {
  Tensor n(shape);
  for (double& v : n.data()) v = noise_std * rng.normal();
  return n;
}

inline Tensor transmit(const Tensor& y, double h, double noise_std, Prng& rng) {
  Tensor out = sample_noise(y.shape(), noise_std, rng);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += h * y[i];
  return out;
}

// ---------------------------------------------------------------------------
// SNR feedback

struct PerfectFeedback {};
struct NoisyFeedback {
  double sigma_h = 0.0;
};
struct AverageOnlyFeedback {};

using FeedbackModel = std::variant<PerfectFeedback, NoisyFeedback, AverageOnlyFeedback>;

inline double feedback_sigma(const FeedbackModel& m) {
  if (const auto* n = std::get_if<NoisyFeedback>(&m)) return n->sigma_h;
  return 0.0;
}

inline std::string feedback_name(const FeedbackModel& m) {
  if (std::holds_alternative<PerfectFeedback>(m)) return "perfect";
  if (std::holds_alternative<NoisyFeedback>(m)) return "noisy";
  return "average";
}

/// SNR (linear) reported to the transmitter for one fading block.
/// Noisy feedback perturbs the complex coefficient: mu_hat = mu_bar |g + e|^2
/// with e complex Gaussian of total variance sigma_h^2. The draw is consumed
/// from `rng` only for the noisy model.
inline double feedback_snr(std::complex<double> g, double mu_bar_linear, const FeedbackModel& model, Prng& rng) {
  if (std::holds_alternative<PerfectFeedback>(model)) return mu_bar_linear * std::norm(g);
  if (const auto* n = std::get_if<NoisyFeedback>(&model)) {
    const std::complex<double> e = standard_complex_normal(rng) * n->sigma_h;
    return mu_bar_linear * std::norm(g + e);
  }
  return mu_bar_linear;
}

}  // namespace seqj
