// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
// if any fails. Trains five toy models (about ten minutes on one core).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqj/checkpoint.hpp"
#include "seqj/diagnostics.hpp"
#include "seqj/train.hpp"

using namespace seqj;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const std::string& title, bool ok, const std::string& detail) {
  std::printf("[%s] C%-2d %s: %s\n", ok ? "PASS" : "FAIL", id, title.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean_psnr(const std::vector<EvalRecord>& rs) {
  double s = 0.0;
  for (const auto& r : rs) s += r.psnr_db;
  return s / static_cast<double>(rs.size());
}

bool all_finite(const std::vector<EvalRecord>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const EvalRecord& r) {
    return std::isfinite(r.psnr_db) && std::isfinite(r.ms_ssim) && std::isfinite(r.psnr_se);
  });
}

Tensor randn(const Shape& s, Prng& rng) {
  Tensor t(s);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

// ---------------------------------------------------------------------------

void gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_gradcheck_suite();
  const double secs = seconds_since(t0);
  double worst_prim = 0.0, worst_loss = 0.0;
  for (const auto& c : cases) {
    double& w = c.tolerance == kLossGradTol ? worst_loss : worst_prim;
    w = std::max(w, c.result.max_rel_error);
  }
  const bool ok = all_passed(cases) && worst_prim < 1e-6 && worst_loss < 1e-4 && secs < 60.0;
  report(1, "gradient correctness", ok,
         std::to_string(cases.size()) + " cases, primitives " + fmt("%.2e, loss %.2e, %.1f s", worst_prim, worst_loss, secs));
}

double brute_mha_error(std::uint64_t seed) {
  Prng rng(seed);
  const std::size_t heads = 1 + rng.below(4);
  const std::size_t d = heads * (1 + rng.below(3));
  const std::size_t n = 2 + rng.below(6);
  MhaWeights w("m", d, heads, rng);
  const Tensor x = randn({n, d}, rng);
  Tape tape;
  Var xv = tape.constant(x);
  const Tensor got = mha(xv, xv, xv, w).value();
  const std::size_t dh = d / heads;
  std::vector<double> cat(n * d, 0.0);
  for (std::size_t j = 0; j < heads; ++j) {
    auto proj = [&](const Tensor& wm) {
      std::vector<double> o(n * dh, 0.0);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t e = 0; e < dh; ++e)
          for (std::size_t k = 0; k < d; ++k) o[r * dh + e] += x.at(r, k) * wm.at(k, e);
      return o;
    };
    const auto q = proj(w.wq[j].value), k = proj(w.wk[j].value), v = proj(w.wv[j].value);
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<double> p(n);
      for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t e = 0; e < dh; ++e) p[c] += q[r * dh + e] * k[c * dh + e];
        p[c] /= std::sqrt(static_cast<double>(dh));
      }
      const double mx = *std::max_element(p.begin(), p.end());
      double z = 0.0;
      for (double& s : p) z += (s = std::exp(s - mx));
      for (std::size_t e = 0; e < dh; ++e)
        for (std::size_t c = 0; c < n; ++c) cat[r * d + j * dh + e] += p[c] / z * v[c * dh + e];
    }
  }
  double err = 0.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      double want = 0.0;
      for (std::size_t k = 0; k < d; ++k) want += cat[r * d + k] * w.wout.value.at(k, c);
      err = std::max(err, std::abs(got.at(r, c) - want));
    }
  return err;
}

void attention() {
  double row_err = 0.0;
  bool identity = true, ranking = true;
  double mha_err = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Prng rng(derive_seed(2, "attention", {seed}));
    const std::size_t n = 2 + rng.below(8), d = 1 + rng.below(8);
    Tape tape;
    Var q = tape.constant(randn({n, d}, rng)), k = tape.constant(randn({n, d}, rng));
    const Tensor base = scaled_dot_attention(q, k, k).scores.value();
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += base.at(r, c);
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
    if (!(caq(q, 1.0, 0.0).value() == q.value())) identity = false;
    const double a = 0.01 + 10.0 * rng.uniform();
    const Tensor scaled = scaled_dot_attention(caq(q, a, 0.0), k, k).scores.value();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c1 = 0; c1 < n; ++c1)
        for (std::size_t c2 = 0; c2 < n; ++c2)
          if (base.at(r, c1) > base.at(r, c2) && !(scaled.at(r, c1) >= scaled.at(r, c2))) ranking = false;
    mha_err = std::max(mha_err, brute_mha_error(seed));
  }
  const bool ok = row_err <= 1e-12 && identity && ranking && mha_err < 1e-12;
  report(2, "attention and CAQ invariants", ok,
         fmt("softmax row-sum err %.1e, MHA oracle err %.1e", row_err, mha_err) + ", caq identity " +
             (identity ? "exact" : "broken") + ", ranking " + (ranking ? "kept" : "broken") + " (100 instances)");
}

void power() {
  Prng rng(3);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.below(64);
    Tensor y(Shape{n});
    const double scale = std::exp(rng.uniform(-6.0, 6.0));
    for (double& v : y.data()) v = scale * rng.normal();
    Tape tape(false);
    const Tensor out = power_normalize(tape.constant(y)).value();
    double ms = 0.0;
    for (double v : out.data()) ms += v * v / static_cast<double>(n);
    worst = std::max(worst, std::abs(ms - 1.0));
  }
  report(3, "power constraint", worst <= 1e-12, fmt("max |mean square - 1| = %.1e over 1000 segments", worst));
}

void channel() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = channel_moments(1000000, 4, 5.0, {0.1, 0.2, 0.3});
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0;
  std::string detail;
  for (const auto& r : rows) {
    bool good;
    if (r.quantity == "E[h^2]") {
      good = r.estimate >= 0.99 && r.estimate <= 1.01;
    } else {
      good = r.rel_error() < 0.01;
    }
    ok = ok && good;
    detail += r.quantity + fmt(" %.4f/%.4f; ", r.estimate, r.expected);
  }
  report(4, "channel statistics", ok, detail + fmt("%.1f s", secs));
}

double brute_corr(const std::vector<double>& u, const std::vector<double>& v) {
  const double n = static_cast<double>(u.size());
  const double mu = std::accumulate(u.begin(), u.end(), 0.0) / n, mv = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double c = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    c += (u[i] - mu) * (v[i] - mv);
    a += (u[i] - mu) * (u[i] - mu);
    b += (v[i] - mv) * (v[i] - mv);
  }
  return c / std::sqrt(a * b);
}

void penalty() {
  Prng rng(5);
  double oracle_err = 0.0;
  bool in_range = true, decreasing_zero = true;
  for (int trial = 0; trial < 200; ++trial) {
    Tape tape;
    GateTrace t;
    const std::size_t blocks = 1 + rng.below(4);
    double want = 0.0;
    for (std::size_t b = 0; b < blocks; ++b) {
      std::vector<double> snr, a;
      for (std::size_t i = 0; i < 3 + rng.below(30); ++i) {
        snr.push_back(rng.uniform(-10, 20));
        a.push_back(rng.uniform(0, 2) + 0.03 * (trial % 3) * snr.back());
        t.add(b, snr.back(), GateValues{tape.variable(Tensor::scalar(a.back())), tape.variable(Tensor::scalar(0.0))});
      }
      want += std::max(0.0, brute_corr(snr, a)) / static_cast<double>(blocks);
    }
    const double got = penalty_a(tape, t).value.item();
    oracle_err = std::max(oracle_err, std::abs(got - want));
    in_range = in_range && got >= 0.0 && got <= 1.0;

    GateTrace dec;
    double a = 3.0;
    for (int i = 0; i < 10; ++i) {
      a -= rng.uniform(0.01, 0.2);
      dec.add(0, -10.0 + 3.0 * i, GateValues{tape.variable(Tensor::scalar(a)), tape.variable(Tensor::scalar(a - 3.0))});
    }
    decreasing_zero = decreasing_zero && penalty_a(tape, dec).value.item() == 0.0 && penalty_b(tape, dec).value.item() == 0.0;
  }
  Tape tape;
  GateTrace flat;
  for (int i = 0; i < 5; ++i)
    flat.add(0, i, GateValues{tape.variable(Tensor::scalar(1.0)), tape.variable(Tensor::scalar(0.0))});
  const Penalty p = penalty_a(tape, flat);
  const bool degenerate = p.value.item() == 0.0 && p.degenerate();
  const bool ok = oracle_err < 1e-10 && in_range && decreasing_zero && degenerate;
  report(5, "penalty correctness", ok,
         fmt("oracle err %.1e", oracle_err) + ", range " + (in_range ? "ok" : "violated") + ", decreasing traces " +
             (decreasing_zero ? "0" : "nonzero") + ", constant trace " + (degenerate ? "degenerate" : "not flagged"));
}

// ---------------------------------------------------------------------------
// Trained-model criteria

struct Trained {
  std::string label;
  std::unique_ptr<Trainer> trainer;
  bool finite = true;
  double seconds = 0.0;
};

Trained train(const TrainConfig& cfg, const std::string& label) {
  Trained t{label, std::make_unique<Trainer>(cfg)};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    double tail = 0.0;
    for (std::size_t s = 0; s < cfg.steps; ++s) {
      const double loss = t.trainer->step().total;
      if (s + 100 >= cfg.steps) tail += loss / 100.0;
    }
    std::printf("       trained %-8s %zu steps in %.0f s, final loss %.5f, streams %016llx\n", label.c_str(), cfg.steps,
                seconds_since(t0), tail, static_cast<unsigned long long>(t.trainer->stream_checksum()));
  } catch (const NonFiniteLossError& e) {
    t.finite = false;
    std::printf("       trained %-8s aborted: %s\n", label.c_str(), e.what());
  }
  std::fflush(stdout);
  t.seconds = seconds_since(t0);
  return t;
}

void print_rows(const std::vector<EvalRecord>& rs) {
  for (const auto& r : rs)
    std::printf("       %-8s mu=%5.1f sigma_h=%.1f psnr %.3f +- %.3f ms-ssim %.4f\n", r.variant.c_str(), r.mu_bar_db,
                r.sigma_h, r.psnr_db, r.psnr_se, r.ms_ssim);
}

/// Pearson correlation of the trained scale gate a against its conditioning
/// SNR over [-10, 20] dB, maximised over CAMHA blocks.
double worst_gate_correlation(ModelParams& m) {
  std::vector<double> grid;
  for (double mu = -10.0; mu <= 20.0; mu += 1.0) grid.push_back(mu);
  double worst = -1.0;
  m.for_each_block([&](std::size_t, CamhaParams& b) {
    Tape tape(false);
    std::vector<double> a;
    for (double mu : grid) a.push_back(snr_gate(tape, mu, b.gate).a.item());
    const Correlation c = pearson_corr(grid, a);
    worst = std::max(worst, c.degenerate ? 0.0 : c.value);
  });
  return worst;
}

void trained_criteria() {
  const TrainConfig base;
  const std::vector<double> mus{-5.0, 0.0, 5.0, 10.0, 15.0};
  const std::uint64_t eval_seed = 2024;
  const auto images = make_test_set(base, 500, eval_seed);
  const unsigned threads = default_threads();

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Trained> models;
  for (Variant v : {Variant::Full, Variant::NoCaq, Variant::NoEm, Variant::NoCa}) {
    TrainConfig c = base;
    c.variant = v;
    models.push_back(train(c, variant_name(v)));
  }
  const double ablate_secs = seconds_since(t0);

  std::vector<std::vector<EvalRecord>> evals;
  for (auto& m : models) {
    evals.push_back(m.finite ? evaluate_variant(m.trainer->model(), m.trainer->config().variant, mus, PerfectFeedback{},
                                                images, eval_seed, threads)
                             : std::vector<EvalRecord>{});
    print_rows(evals.back());
  }
  const bool ablate_finite = std::all_of(models.begin(), models.end(), [](const Trained& t) { return t.finite; }) &&
                             std::all_of(evals.begin(), evals.end(), all_finite);
  {
    bool ok = ablate_finite && ablate_secs < 3600.0;
    std::string detail;
    if (ablate_finite) {
      const double full = mean_psnr(evals[0]), no_ca = mean_psnr(evals[3]);
      ok = ok && full > no_ca;
      for (std::size_t i = 1; i <= 2; ++i) ok = ok && mean_psnr(evals[i]) > no_ca;
      detail = fmt("mean PSNR full %.3f, no_caq %.3f, no_em %.3f", full, mean_psnr(evals[1]), mean_psnr(evals[2])) +
               fmt(", no_ca %.3f dB; training %.0f s", no_ca, ablate_secs);
    } else {
      detail = "a variant produced non-finite values";
    }
    report(6, "ablation ordering", ok, detail);
  }

  {
    TrainConfig c = base;
    c.lambda = 0.0;
    Trained zero = train(c, "lambda0");
    bool ok = zero.finite && models[0].finite;
    std::string detail = "non-finite training";
    if (ok) {
      const auto r_pen = evaluate(models[0].trainer->model(), "full", {10.0}, PerfectFeedback{}, false, images, eval_seed, threads);
      const auto r_zero = evaluate(zero.trainer->model(), "full", {10.0}, PerfectFeedback{}, false, images, eval_seed, threads);
      ok = all_finite(r_pen) && all_finite(r_zero) && r_pen[0].ms_ssim >= r_zero[0].ms_ssim - 0.005;
      detail = fmt("MS-SSIM at 10 dB: lambda=1e5 %.4f, lambda=0 %.4f", r_pen[0].ms_ssim, r_zero[0].ms_ssim) +
               fmt(" (PSNR %.3f vs %.3f dB)", r_pen[0].psnr_db, r_zero[0].psnr_db);
    }
    report(7, "penalty does not degrade quality", ok, detail);
  }

  {
    bool ok = models[0].finite && models[3].finite;
    std::string detail = "non-finite training";
    if (ok) {
      ModelParams& full = models[0].trainer->model();
      std::vector<double> sweep;
      for (double s : {0.0, 0.1, 0.2, 0.3}) {
        const auto r = evaluate(full, "full", {0.0}, NoisyFeedback{s}, false, images, eval_seed, threads);
        print_rows(r);
        sweep.push_back(r[0].psnr_db);
      }
      for (std::size_t i = 1; i < sweep.size(); ++i) ok = ok && sweep[i] <= sweep[i - 1] + 0.05;
      const auto avg = evaluate_variant(full, Variant::AvgOnly, mus, PerfectFeedback{}, images, eval_seed, threads);
      print_rows(avg);
      bool avg_wins = true;
      for (std::size_t i = 0; i < mus.size(); ++i) avg_wins = avg_wins && avg[i].psnr_db > evals[3][i].psnr_db;
      ok = ok && avg_wins;
      detail = fmt("sigma_h sweep at 0 dB: %.3f, %.3f, %.3f", sweep[0], sweep[1], sweep[2]) + fmt(", %.3f dB", sweep[3]) +
               "; avg_only " + (avg_wins ? "beats" : "does not beat") + " no_ca at every test SNR";
    }
    report(8, "imperfect feedback trend", ok, detail);
  }

  if (models[0].finite) {
    std::printf("[INFO] trained gate a vs conditioning SNR: max Pearson over blocks %.3f (target <= 0)\n",
                worst_gate_correlation(models[0].trainer->model()));
  }
}

// ---------------------------------------------------------------------------

void lightweight() {
  ModelParams m(CodecConfig{}, 1);
  const ParamCount p = count_params(m);
  const double frac = static_cast<double>(p.ca_module) / static_cast<double>(p.total());
  std::vector<Parameter*> gate, embed;
  m.enc_head.gate.collect(gate);
  m.enc_head.embed.collect(embed);
  auto size_of = [](const std::vector<Parameter*>& ps) {
    std::size_t n = 0;
    for (const Parameter* q : ps) n += q->value.size();
    return n;
  };
  const std::size_t g = size_of(gate), e = size_of(embed);
  const bool ok = frac < 0.05 && g == 98 && e == 576;
  report(9, "lightweight CA accounting", ok,
         "backbone " + std::to_string(p.backbone) + ", CA " + std::to_string(p.ca_module) + fmt(" (%.2f%%)", 100.0 * frac) +
             ", gate pair " + std::to_string(g) + ", embedder " + std::to_string(e));
}

std::string run_csv_pipeline() {
  TrainConfig c;
  c.steps = 20;
  Trainer tr(c);
  std::ostringstream os;
  os << kLossCsvHeader << '\n';
  for (std::size_t s = 0; s < c.steps; ++s) write_loss_row(os, s + 1, tr.step());
  const auto images = make_test_set(c, 50, 77);
  write_eval_csv(os, evaluate(tr.model(), "full", {-5.0, 10.0}, NoisyFeedback{0.2}, false, images, 77, default_threads()));
  return os.str();
}

void reproducibility() {
  const bool csv_same = run_csv_pipeline() == run_csv_pipeline();

  const fs::path dir = fs::temp_directory_path() / ("seqj_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const TrainConfig c;
  Trainer straight(c), first(c);
  for (int i = 0; i < 5; ++i) {
    straight.step();
    first.step();
  }
  save_checkpoint(dir / "mid.seqj", first);
  auto resumed = load_checkpoint(dir / "mid.seqj");
  save_checkpoint(dir / "again.seqj", *resumed);
  std::ifstream a(dir / "mid.seqj", std::ios::binary), b(dir / "again.seqj", std::ios::binary);
  const std::string ba((std::istreambuf_iterator<char>(a)), {}), bb((std::istreambuf_iterator<char>(b)), {});
  const bool roundtrip = ba == bb && !ba.empty();
  bool resume = true;
  for (int i = 0; i < 5; ++i) resume = resume && straight.step().total == resumed->step().total;
  resume = resume && encode_checkpoint(make_checkpoint(straight)) == encode_checkpoint(make_checkpoint(*resumed));
  fs::remove_all(dir);
  report(10, "reproducibility and persistence", csv_same && roundtrip && resume,
         std::string("CSV reruns ") + (csv_same ? "byte-identical" : "differ") + ", save/load/save " +
             (roundtrip ? "byte-identical" : "differs") + ", resume " + (resume ? "bit-exact" : "diverges"));
}

void metric_oracles() {
  const std::string dir = SEQJ_FIXTURE_DIR;
  std::ifstream in(dir + "/ms_ssim_reference.json");
  double worst = in ? 0.0 : 1.0;
  std::size_t pairs = 0;
  if (in) {
    nlohmann::json j;
    in >> j;
    for (const auto& rec : j) {
      const Tensor x = load_image_ppm(dir + "/" + rec["reference"].get<std::string>());
      const Tensor y = load_image_ppm(dir + "/" + rec["distorted"].get<std::string>());
      worst = std::max(worst, std::abs(ms_ssim(x, y).value - rec["ms_ssim"].get<double>()));
      ++pairs;
    }
  }
  Prng rng(11);
  double psnr_err = 0.0;
  for (int i = 0; i < 100; ++i) {
    Tensor x({3, 8, 8}), y({3, 8, 8});
    for (double& v : x.data()) v = rng.uniform();
    for (double& v : y.data()) v = rng.uniform();
    psnr_err = std::max(psnr_err, std::abs(psnr(x, y) + 10.0 * std::log10(mse(x, y))));
  }
  report(11, "metric oracles", pairs == 5 && worst < 1e-3 && psnr_err < 1e-12,
         std::to_string(pairs) + fmt(" MS-SSIM fixtures, max err %.1e; PSNR identity err %.1e", worst, psnr_err));
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  gradients();
  attention();
  power();
  channel();
  penalty();
  trained_criteria();
  lightweight();
  reproducibility();
  metric_oracles();
  std::printf("%s: %d criteria failed, %.0f s total\n", failures ? "FAILED" : "ALL PASSED", failures, seconds_since(t0));
  return failures ? 1 : 0;
}
