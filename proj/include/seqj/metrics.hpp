// Training objective and evaluation metrics.
//
// Loss: MSE(x, x_hat) + lambda * (L_a + L_b), where L_a (L_b) is the ReLU of
// the Pearson correlation between conditioning SNR and the CAQ scale a (shift
// b), computed per CAMHA block over the gate evaluations of one batch and
// averaged over blocks.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqj/autodiff.hpp"
#include "seqj/camha.hpp"
#include "seqj/tensor.hpp"

namespace seqj {

// ---------------------------------------------------------------------------
// MSE

inline double mse(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("mse: shapes " + shape_str(x.shape()) + " and " + shape_str(x_hat.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - x_hat[i];
    s += d * d;
  }
  return s / static_cast<double>(x.size());
}

inline Var mse(const Var& x, const Var& x_hat) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("mse: shapes " + shape_str(x.shape()) + " and " + shape_str(x_hat.shape()));
  }
  return ad::mean(ad::square(ad::sub(x_hat, x)));
}

// ---------------------------------------------------------------------------
// Pearson correlation

/// Variances below this are treated as zero and the correlation defined as 0.
inline constexpr double kDegenerateVariance = 1e-12;

struct Correlation {
  double value = 0.0;
  bool degenerate = false;
};

inline Correlation pearson_corr(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) {
    throw std::invalid_argument("pearson_corr: lengths " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  }
  if (u.size() < 2) throw std::invalid_argument("pearson_corr: need at least two samples");
  const double n = static_cast<double>(u.size());
  double mu = 0.0, mv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    mu += u[i];
    mv += v[i];
  }
  mu /= n;
  mv /= n;
  double suu = 0.0, svv = 0.0, suv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    suu += (u[i] - mu) * (u[i] - mu);
    svv += (v[i] - mv) * (v[i] - mv);
    suv += (u[i] - mu) * (v[i] - mv);
  }
  if (suu / n < kDegenerateVariance || svv / n < kDegenerateVariance) return {0.0, true};
  return {std::clamp(suv / std::sqrt(suu * svv), -1.0, 1.0), false};
}

/// Differentiable correlation between constant samples u and a [n] tensor v.
inline Var pearson_corr(const std::vector<double>& u, const Var& v, bool* degenerate = nullptr) {
  const Correlation c = pearson_corr(u, v.value().values());
  if (degenerate) *degenerate = c.degenerate;
  Tape& tape = *v.tape();
  if (c.degenerate) return ad::scalar_affine(ad::sum(v), 0.0, 0.0);
  const std::size_t n = u.size();
  const Tensor& vv = v.value();
  double mu = 0.0, mv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mu += u[i];
    mv += vv[i];
  }
  mu /= static_cast<double>(n);
  mv /= static_cast<double>(n);
  std::vector<double> du(n), dv(n);
  double suu = 0.0, svv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    du[i] = u[i] - mu;
    dv[i] = vv[i] - mv;
    suu += du[i] * du[i];
    svv += dv[i] * dv[i];
  }
  const double r = c.value;
  // dr/dv_i = du_i / sqrt(suu svv) - r dv_i / svv (centering terms vanish).
  const double inv = 1.0 / std::sqrt(suu * svv);
  std::vector<double> dr(n);
  for (std::size_t i = 0; i < n; ++i) dr[i] = du[i] * inv - r * dv[i] / svv;
  return tape.record("pearson", Tensor::scalar(r), {v}, [v, dr = std::move(dr)](Tape& t, const Tensor& g) {
    Tensor& gv = t.grad_buffer(v);
    for (std::size_t i = 0; i < dr.size(); ++i) gv[i] += g[0] * dr[i];
  });
}

// ---------------------------------------------------------------------------
// Gate penalties

enum class GateSide { Scale, Shift };

struct Penalty {
  Var value;
  /// Blocks whose SNR or gate population had (near) zero variance.
  std::size_t degenerate_blocks = 0;
  std::size_t blocks = 0;
  bool degenerate() const { return degenerate_blocks > 0; }
};

/// Mean over blocks of ReLU(Corr(snr, gate)). Blocks with fewer than two
/// distinct SNRs or a constant gate contribute 0 and are flagged.
inline Penalty gate_penalty(Tape& tape, const GateTrace& trace, GateSide side) {
  Penalty p;
  std::vector<Var> terms;
  for (const auto& records : trace.gates) {
    if (records.empty()) continue;
    ++p.blocks;
    std::vector<double> snr;
    std::vector<Var> vals;
    std::set<double> distinct;
    for (const GateRecord& r : records) {
      snr.push_back(r.snr_db);
      distinct.insert(r.snr_db);
      vals.push_back(side == GateSide::Scale ? r.a : r.b);
    }
    if (distinct.size() < 2) {
      ++p.degenerate_blocks;
      continue;
    }
    bool deg = false;
    Var corr = pearson_corr(snr, ad::concat_lastdim(vals), &deg);
    if (deg) {
      ++p.degenerate_blocks;
      continue;
    }
    terms.push_back(ad::relu(corr));
  }
  if (terms.empty()) {
    p.value = tape.constant(Tensor::scalar(0.0));
    return p;
  }
  Var s = terms.size() == 1 ? terms.front() : ad::sum(ad::concat_lastdim(terms));
  p.value = ad::scalar_affine(s, 1.0 / static_cast<double>(p.blocks), 0.0);
  return p;
}

inline Penalty penalty_a(Tape& tape, const GateTrace& trace) { return gate_penalty(tape, trace, GateSide::Scale); }
inline Penalty penalty_b(Tape& tape, const GateTrace& trace) { return gate_penalty(tape, trace, GateSide::Shift); }

struct LossBreakdown {
  double mse = 0.0;
  double penalty_a = 0.0;
  double penalty_b = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  bool degenerate_a = false;
  bool degenerate_b = false;
};

struct Loss {
  Var total;
  LossBreakdown breakdown;
};

/// total = mse + lambda * (penalty_a + penalty_b), recorded on the tape.
inline Loss total_loss(const Var& mse_value, const GateTrace& trace, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be non-negative");
  Tape& tape = *mse_value.tape();
  Penalty pa = penalty_a(tape, trace);
  Penalty pb = penalty_b(tape, trace);
  Loss l;
  l.total = ad::add(mse_value, ad::scalar_affine(ad::add(pa.value, pb.value), lambda, 0.0));
  l.breakdown.mse = mse_value.item();
  l.breakdown.penalty_a = pa.value.item();
  l.breakdown.penalty_b = pb.value.item();
  l.breakdown.lambda = lambda;
  l.breakdown.total = l.total.item();
  l.breakdown.degenerate_a = pa.degenerate();
  l.breakdown.degenerate_b = pb.degenerate();
  return l;
}

inline Loss total_loss(const Var& x, const Var& x_hat, const GateTrace& trace, double lambda) {
  return total_loss(mse(x, x_hat), trace, lambda);
}

// ---------------------------------------------------------------------------
// PSNR

/// Zero (or vanishing) MSE is reported as this value.
inline constexpr double kPsnrCapDb = 100.0;

inline double psnr_from_mse(double mse_value, double max_val = 1.0) {
  if (mse_value <= 0.0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(max_val * max_val / mse_value));
}

inline double psnr(const Tensor& x, const Tensor& x_hat, double max_val = 1.0) {
  return psnr_from_mse(mse(x, x_hat), max_val);
}

// ---------------------------------------------------------------------------
// MS-SSIM

struct MsSsimConfig {
  std::array<double, 5> weights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 1.0;
};

struct MsSsimResult {
  double value = 0.0;
  std::size_t scales = 0;
  /// Fewer than five scales fit the image.
  bool truncated = false;
};

namespace detail {

struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double at(std::size_t r, std::size_t c) const { return v[r * w + c]; }
};

inline Plane luminance(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("ms_ssim: expected [3 x H x W], got " + shape_str(img.shape()));
  Plane p{img.dim(1), img.dim(2), {}};
  p.v.resize(p.h * p.w);
  const std::size_t n = p.h * p.w;
  for (std::size_t i = 0; i < n; ++i) p.v[i] = (img[i] + img[n + i] + img[2 * n + i]) / 3.0;
  return p;
}

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = static_cast<double>(size / 2);
  double s = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-(d * d) / (2.0 * sigma * sigma));
    s += g[i];
  }
  for (double& x : g) x /= s;
  return g;
}

/// Separable 'valid' filtering.
inline Plane filter_valid(const Plane& in, const std::vector<double>& g) {
  const std::size_t k = g.size();
  Plane tmp{in.h, in.w - k + 1, {}};
  tmp.v.assign(tmp.h * tmp.w, 0.0);
  for (std::size_t r = 0; r < tmp.h; ++r)
    for (std::size_t c = 0; c < tmp.w; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * in.at(r, c + i);
      tmp.v[r * tmp.w + c] = s;
    }
  Plane out{in.h - k + 1, tmp.w, {}};
  out.v.assign(out.h * out.w, 0.0);
  for (std::size_t r = 0; r < out.h; ++r)
    for (std::size_t c = 0; c < out.w; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * tmp.at(r + i, c);
      out.v[r * out.w + c] = s;
    }
  return out;
}

inline Plane pointwise(const Plane& a, const Plane& b, double (*f)(double, double)) {
  Plane o{a.h, a.w, std::vector<double>(a.v.size())};
  for (std::size_t i = 0; i < a.v.size(); ++i) o.v[i] = f(a.v[i], b.v[i]);
  return o;
}

/// 2x2 mean pooling; an odd trailing row/column is dropped.
inline Plane downsample(const Plane& in) {
  Plane o{in.h / 2, in.w / 2, {}};
  o.v.resize(o.h * o.w);
  for (std::size_t r = 0; r < o.h; ++r)
    for (std::size_t c = 0; c < o.w; ++c)
      o.v[r * o.w + c] = 0.25 * (in.at(2 * r, 2 * c) + in.at(2 * r, 2 * c + 1) + in.at(2 * r + 1, 2 * c) +
                                 in.at(2 * r + 1, 2 * c + 1));
  return o;
}

struct SsimTerms {
  double ssim = 0.0;
  double cs = 0.0;
};

inline SsimTerms ssim_terms(const Plane& x, const Plane& y, const std::vector<double>& g, const MsSsimConfig& cfg) {
  const double c1 = (cfg.k1 * cfg.data_range) * (cfg.k1 * cfg.data_range);
  const double c2 = (cfg.k2 * cfg.data_range) * (cfg.k2 * cfg.data_range);
  const Plane mx = filter_valid(x, g);
  const Plane my = filter_valid(y, g);
  const Plane exx = filter_valid(pointwise(x, x, [](double a, double b) { return a * b; }), g);
  const Plane eyy = filter_valid(pointwise(y, y, [](double a, double b) { return a * b; }), g);
  const Plane exy = filter_valid(pointwise(x, y, [](double a, double b) { return a * b; }), g);
  double ssim = 0.0, cs = 0.0;
  for (std::size_t i = 0; i < mx.v.size(); ++i) {
    const double mux = mx.v[i], muy = my.v[i];
    const double sxx = exx.v[i] - mux * mux;
    const double syy = eyy.v[i] - muy * muy;
    const double sxy = exy.v[i] - mux * muy;
    const double csi = (2.0 * sxy + c2) / (sxx + syy + c2);
    cs += csi;
    ssim += csi * (2.0 * mux * muy + c1) / (mux * mux + muy * muy + c1);
  }
  const double n = static_cast<double>(mx.v.size());
  return {ssim / n, cs / n};
}

}  // namespace detail

/// Multi-scale SSIM on the RGB-mean luminance. Contrast-structure terms of
/// the finer scales and the full SSIM of the coarsest scale are clamped at 0
/// and combined as a weighted geometric product. Scales that do not fit the
/// image are dropped and the remaining weights renormalized.
inline MsSsimResult ms_ssim(const Tensor& x, const Tensor& y, const MsSsimConfig& cfg = {}) {
  if (x.shape() != y.shape()) throw ShapeError("ms_ssim: shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
  detail::Plane px = detail::luminance(x);
  detail::Plane py = detail::luminance(y);
  std::size_t side = std::min(px.h, px.w);
  std::size_t window = cfg.window;
  if (side < window) window = side % 2 ? side : side - 1;
  if (window == 0) throw ShapeError("ms_ssim: image too small");

  std::size_t scales = 0;
  for (std::size_t s = side; scales < cfg.weights.size() && s >= window; s /= 2) ++scales;
  MsSsimResult res;
  res.scales = scales;
  res.truncated = scales < cfg.weights.size();

  std::vector<double> w(cfg.weights.begin(), cfg.weights.begin() + static_cast<std::ptrdiff_t>(scales));
  if (res.truncated) {
    double s = 0.0;
    for (double v : w) s += v;
    for (double& v : w) v /= s;
  }
  const std::vector<double> g = detail::gaussian_window(window, cfg.sigma);
  double value = 1.0;
  for (std::size_t s = 0; s < scales; ++s) {
    const detail::SsimTerms t = detail::ssim_terms(px, py, g, cfg);
    if (s + 1 < scales) {
      value *= std::pow(std::max(t.cs, 0.0), w[s]);
      px = detail::downsample(px);
      py = detail::downsample(py);
    } else {
      value *= std::pow(std::max(t.ssim, 0.0), w[s]);
    }
  }
  res.value = value;
  return res;
}

}  // namespace seqj
