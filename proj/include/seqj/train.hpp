// Training loop, evaluation sweeps and the configuration they share.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "seqj/autodiff.hpp"
#include "seqj/channel.hpp"
#include "seqj/codec.hpp"
#include "seqj/image.hpp"
#include "seqj/metrics.hpp"
#include "seqj/optim.hpp"
#include "seqj/rng.hpp"

namespace seqj {

// ---------------------------------------------------------------------------
// Variants

enum class Variant { Full, NoCaq, NoEm, NoCa, AvgOnly };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoCaq: return "no_caq";
    case Variant::NoEm: return "no_em";
    case Variant::NoCa: return "no_ca";
    case Variant::AvgOnly: return "avg_only";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::Full, Variant::NoCaq, Variant::NoEm, Variant::NoCa, Variant::AvgOnly}) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown variant '" + s + "' (expected full, no_caq, no_em, no_ca or avg_only)");
}

inline bool variant_uses_caq(Variant v) { return v == Variant::Full || v == Variant::NoEm || v == Variant::AvgOnly; }
inline bool variant_uses_embed(Variant v) { return v == Variant::Full || v == Variant::NoCaq || v == Variant::AvgOnly; }

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  CodecConfig codec;
  Variant variant = Variant::Full;
  double lambda = 1e5;
  /// 1e-3 rather than the optimizer's 1e-4: 3000 toy steps at 1e-4 leave
  /// every variant far from converged.
  AdamConfig adam{.lr = 1e-3};
  std::size_t batch = 8;
  std::size_t steps = 3000;
  double snr_lo_db = -10.0;
  double snr_hi_db = 20.0;
  std::uint64_t seed = 1;
  /// "synthetic" or a directory of P6 images.
  std::string dataset = "synthetic";
  std::size_t synth_components = 6;
  double synth_max_frequency = 4.0;
  /// Also feed the receiver heads the fed-back (possibly noisy) SNR.
  bool corrupt_receiver_snr = false;

  void validate() const {
    codec.validate();
    if (!(snr_lo_db < snr_hi_db)) throw ConfigError("snr_lo_db must be below snr_hi_db");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
    if (lambda > 0.0 && batch < 2) throw ConfigError("batch must be at least 2 when lambda > 0");
    if (!(adam.lr > 0.0)) throw ConfigError("lr must be positive");
  }

  SynthSpec synth_spec() const {
    return SynthSpec{codec.height, codec.width, synth_components, synth_max_frequency};
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["height"] = c.codec.height;
  j["width"] = c.codec.width;
  j["patch"] = c.codec.patch;
  j["d_model"] = c.codec.d_model;
  j["heads"] = c.codec.heads;
  j["n_enc"] = c.codec.n_enc;
  j["n_dec"] = c.codec.n_dec;
  j["d_y"] = c.codec.d_y;
  j["fading_blocks"] = c.codec.blocks;
  j["variant"] = variant_name(c.variant);
  j["lambda"] = c.lambda;
  j["lr"] = c.adam.lr;
  j["beta1"] = c.adam.beta1;
  j["beta2"] = c.adam.beta2;
  j["adam_eps"] = c.adam.eps;
  j["batch"] = c.batch;
  j["steps"] = c.steps;
  j["snr_lo_db"] = c.snr_lo_db;
  j["snr_hi_db"] = c.snr_hi_db;
  j["seed"] = c.seed;
  j["dataset"] = c.dataset;
  j["synth_components"] = c.synth_components;
  j["synth_max_frequency"] = c.synth_max_frequency;
  j["corrupt_receiver_snr"] = c.corrupt_receiver_snr;
  return j;
}

/// Reads a flat JSON object; absent keys keep their defaults, unknown keys
/// are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "height") c.codec.height = v.get<std::size_t>();
      else if (k == "width") c.codec.width = v.get<std::size_t>();
      else if (k == "patch") c.codec.patch = v.get<std::size_t>();
      else if (k == "d_model") c.codec.d_model = v.get<std::size_t>();
      else if (k == "heads") c.codec.heads = v.get<std::size_t>();
      else if (k == "n_enc") c.codec.n_enc = v.get<std::size_t>();
      else if (k == "n_dec") c.codec.n_dec = v.get<std::size_t>();
      else if (k == "d_y") c.codec.d_y = v.get<std::size_t>();
      else if (k == "fading_blocks") c.codec.blocks = v.get<std::size_t>();
      else if (k == "variant") c.variant = parse_variant(v.get<std::string>());
      else if (k == "lambda") c.lambda = v.get<double>();
      else if (k == "lr") c.adam.lr = v.get<double>();
      else if (k == "beta1") c.adam.beta1 = v.get<double>();
      else if (k == "beta2") c.adam.beta2 = v.get<double>();
      else if (k == "adam_eps") c.adam.eps = v.get<double>();
      else if (k == "batch") c.batch = v.get<std::size_t>();
      else if (k == "steps") c.steps = v.get<std::size_t>();
      else if (k == "snr_lo_db") c.snr_lo_db = v.get<double>();
      else if (k == "snr_hi_db") c.snr_hi_db = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "dataset") c.dataset = v.get<std::string>();
      else if (k == "synth_components") c.synth_components = v.get<std::size_t>();
      else if (k == "synth_max_frequency") c.synth_max_frequency = v.get<double>();
      else if (k == "corrupt_receiver_snr") c.corrupt_receiver_snr = v.get<bool>();
      else throw ConfigError("unknown config key '" + k + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + k + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Data

/// Training/evaluation image source: synthetic fields or random crops of a
/// directory of PPM files (loaded once, sorted by file name).
class Dataset {
 public:
  explicit Dataset(const TrainConfig& cfg) : spec_(cfg.synth_spec()) {
    if (cfg.dataset == "synthetic") return;
    namespace fs = std::filesystem;
    if (!fs::is_directory(cfg.dataset)) throw ConfigError("dataset directory not found: " + cfg.dataset);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cfg.dataset)) {
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("no .ppm files in " + cfg.dataset);
    for (const auto& f : files) images_.push_back(load_image_ppm(f));
  }

  Tensor sample(Prng& rng) const {
    if (images_.empty()) return synth_image(spec_, rng);
    const Tensor& src = images_[rng.below(images_.size())];
    return random_crop(src, spec_.height, spec_.width, rng);
  }

  bool synthetic() const noexcept { return images_.empty(); }

 private:
  SynthSpec spec_;
  std::vector<Tensor> images_;
};

inline double sample_train_snr(Prng& rng, double lo_db, double hi_db) {
  if (!(lo_db < hi_db)) throw std::invalid_argument("sample_train_snr: lo must be below hi");
  return rng.uniform(lo_db, hi_db);
}

struct LinkOptions {
  FeedbackModel feedback = PerfectFeedback{};
  /// Substitute the average SNR for every per-block SNR.
  bool average_only = false;
  bool corrupt_receiver = false;
};

/// Draws fading and noise from `channel_rng` (always the same amount,
/// whatever the options) and feedback errors from `feedback_rng`.
inline LinkDraw draw_link(const CodecConfig& cfg, double mu_bar_db, const LinkOptions& opt, Prng& channel_rng,
                          Prng& feedback_rng) {
  LinkDraw d;
  d.mu_bar_db = mu_bar_db;
  d.channel = realize_channel(cfg.blocks, mu_bar_db, channel_rng);
  for (std::size_t j = 0; j < cfg.blocks; ++j) {
    d.noise.push_back(sample_noise({cfg.symbols_per_block()}, d.channel.noise_std, channel_rng));
  }
  for (std::size_t j = 0; j < cfg.blocks; ++j) {
    const double fed_back = feedback_snr(d.channel.g[j], d.channel.mu_bar, opt.feedback, feedback_rng);
    if (opt.average_only) {
      d.tx_snr_db.push_back(mu_bar_db);
      d.rx_snr_db.push_back(mu_bar_db);
      continue;
    }
    d.tx_snr_db.push_back(conditioning_db(fed_back));
    d.rx_snr_db.push_back(conditioning_db(opt.corrupt_receiver ? fed_back : d.channel.instantaneous_snr(j)));
  }
  return d;
}

/// Running FNV-1a digest of every random quantity a trainer consumes.
class StreamChecksum {
 public:
  void add(double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h_ ^= (bits >> (8 * i)) & 0xFF;
      h_ *= 0x100000001B3ULL;
    }
  }
  void add(const Tensor& t) {
    for (double v : t.data()) add(v);
  }
  void add(const LinkDraw& d) {
    add(d.mu_bar_db);
    for (double h : d.channel.h) add(h);
    for (const Tensor& n : d.noise) add(n);
  }
  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

// ---------------------------------------------------------------------------
// Loss over a batch

struct BatchLoss {
  Loss loss;
  std::vector<Var> reconstructions;
  std::size_t degenerate_power = 0;
};

/// Runs every (image, draw) pair through the link on one tape and composes
/// the batch loss: mean per-image MSE plus the gate penalties.
inline BatchLoss batch_loss(Tape& tape, ModelParams& model, const std::vector<Tensor>& images,
                            const std::vector<LinkDraw>& draws, double lambda) {
  if (images.size() != draws.size() || images.empty()) throw std::invalid_argument("batch_loss: images/draws mismatch");
  GateTrace trace;
  BatchLoss out;
  std::vector<Var> mses;
  for (std::size_t b = 0; b < images.size(); ++b) {
    Var x = tape.constant(images[b]);
    Var x_hat = run_link(x, draws[b], model, &trace, &out.degenerate_power);
    out.reconstructions.push_back(x_hat);
    mses.push_back(mse(x, x_hat));
  }
  Var m = mses.size() == 1 ? mses.front() : ad::mean(ad::concat_lastdim(mses));
  out.loss = total_loss(m, trace, lambda);
  return out;
}

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Trainer

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : cfg_(std::move(cfg)),
        model_((cfg_.validate(), cfg_.codec), cfg_.seed),
        optimizer_((configure_model(), model_.parameters()), cfg_.adam),
        master_(derive_seed(cfg_.seed, "train")),
        data_(cfg_) {}

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// One optimizer update on a freshly drawn batch.
  LossBreakdown step() {
    Prng rng(master_.next());
    std::vector<Tensor> images;
    std::vector<LinkDraw> draws;
    LinkOptions opt;
    opt.average_only = cfg_.variant == Variant::AvgOnly;
    opt.corrupt_receiver = cfg_.corrupt_receiver_snr;
    for (std::size_t b = 0; b < cfg_.batch; ++b) {
      images.push_back(data_.sample(rng));
      const double mu_bar_db = sample_train_snr(rng, cfg_.snr_lo_db, cfg_.snr_hi_db);
      draws.push_back(draw_link(cfg_.codec, mu_bar_db, opt, rng, rng));
      checksum_.add(images.back());
      checksum_.add(draws.back());
    }
    model_.zero_grad();
    Tape tape;
    BatchLoss bl = batch_loss(tape, model_, images, draws, cfg_.lambda);
    if (!std::isfinite(bl.loss.breakdown.total)) {
      std::ostringstream os;
      os << "non-finite loss at step " << optimizer_.steps() << ": mse=" << bl.loss.breakdown.mse
         << " penalty_a=" << bl.loss.breakdown.penalty_a << " penalty_b=" << bl.loss.breakdown.penalty_b;
      throw NonFiniteLossError(os.str());
    }
    tape.backward(bl.loss.total);
    optimizer_.step();
    return bl.loss.breakdown;
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  ModelParams& model() noexcept { return model_; }
  Adam& optimizer() noexcept { return optimizer_; }
  SplitMix64& master_rng() noexcept { return master_; }
  std::uint64_t steps_done() const noexcept { return optimizer_.steps(); }
  std::uint64_t stream_checksum() const noexcept { return checksum_.value(); }

 private:
  int configure_model() {
    model_.set_channel_adaptation(variant_uses_caq(cfg_.variant), variant_uses_embed(cfg_.variant));
    return 0;
  }

  TrainConfig cfg_;
  ModelParams model_;
  Adam optimizer_;
  SplitMix64 master_;
  Dataset data_;
  StreamChecksum checksum_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRecord {
  std::string variant;
  double mu_bar_db = 0.0;
  double sigma_h = 0.0;
  std::size_t n = 0;
  double psnr_db = 0.0;
  double psnr_se = 0.0;
  double ms_ssim = 0.0;
  double ms_ssim_se = 0.0;
  std::uint64_t seed = 0;
};

/// Fixed evaluation images: image i is drawn from its own seed-derived stream.
inline std::vector<Tensor> make_test_set(const TrainConfig& cfg, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("test set must contain at least one image");
  Dataset data(cfg);
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Prng rng(derive_seed(seed, "test-image", {i}));
    out.push_back(data.sample(rng));
  }
  return out;
}

struct ImageScore {
  double psnr_db = 0.0;
  double ms_ssim = 0.0;
};

/// Inference for one image: channel and feedback streams depend only on the
/// seed, the test SNR and the image index, never on the variant.
inline ImageScore evaluate_image(ModelParams& model, const Tensor& image, double mu_bar_db, const LinkOptions& opt,
                                 std::uint64_t seed, std::size_t index) {
  const std::uint64_t key = std::bit_cast<std::uint64_t>(mu_bar_db);
  Prng channel_rng(derive_seed(seed, "eval-channel", {key, index}));
  Prng feedback_rng(derive_seed(seed, "eval-feedback", {key, index}));
  LinkDraw d = draw_link(model.config, mu_bar_db, opt, channel_rng, feedback_rng);
  Tape tape(false);
  Var x_hat = run_link(tape.constant(image), d, model);
  return {psnr(image, x_hat.value()), ms_ssim(image, x_hat.value()).value};
}

namespace detail {

inline void mean_se(const std::vector<double>& v, double& mean, double& se) {
  const double n = static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += x;
  mean = s / n;
  if (v.size() < 2) {
    se = 0.0;
    return;
  }
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
}

}  // namespace detail

/// Per-image scores at one test SNR, computed on `threads` workers and merged
/// by image index.
inline std::vector<ImageScore> score_images(ModelParams& model, const std::vector<Tensor>& images, double mu_bar_db,
                                            const LinkOptions& opt, std::uint64_t seed, unsigned threads) {
  std::vector<ImageScore> scores(images.size());
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(images.size())));
  auto work = [&](unsigned w) {
    for (std::size_t i = w; i < images.size(); i += threads) {
      scores[i] = evaluate_image(model, images[i], mu_bar_db, opt, seed, i);
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w) pool.emplace_back(work, w);
  }
  return scores;
}

inline unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

inline std::vector<EvalRecord> evaluate(ModelParams& model, const std::string& label,
                                        const std::vector<double>& mu_tests_db, const FeedbackModel& feedback,
                                        bool average_only, const std::vector<Tensor>& images, std::uint64_t seed,
                                        unsigned threads = default_threads()) {
  if (mu_tests_db.empty()) throw std::invalid_argument("evaluate: no test SNRs");
  if (images.empty()) throw std::invalid_argument("evaluate: empty test set");
  LinkOptions opt;
  opt.feedback = feedback;
  opt.average_only = average_only;
  std::vector<EvalRecord> out;
  for (double mu : mu_tests_db) {
    const std::vector<ImageScore> s = score_images(model, images, mu, opt, seed, threads);
    std::vector<double> p, m;
    for (const auto& x : s) {
      p.push_back(x.psnr_db);
      m.push_back(x.ms_ssim);
    }
    EvalRecord r;
    r.variant = label;
    r.mu_bar_db = mu;
    r.sigma_h = feedback_sigma(feedback);
    r.n = images.size();
    r.seed = seed;
    detail::mean_se(p, r.psnr_db, r.psnr_se);
    detail::mean_se(m, r.ms_ssim, r.ms_ssim_se);
    out.push_back(r);
  }
  return out;
}

/// Evaluates a model under the variant's SNR handling (avg_only substitutes
/// the average SNR; the others use the given feedback).
inline std::vector<EvalRecord> evaluate_variant(ModelParams& model, Variant v, const std::vector<double>& mu_tests_db,
                                                const FeedbackModel& feedback, const std::vector<Tensor>& images,
                                                std::uint64_t seed, unsigned threads = default_threads()) {
  const bool avg = v == Variant::AvgOnly;
  return evaluate(model, variant_name(v), mu_tests_db, avg ? FeedbackModel{AverageOnlyFeedback{}} : feedback, avg,
                  images, seed, threads);
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr const char* kEvalCsvHeader = "variant,mu_bar_db,sigma_h,n,psnr_db,psnr_se,ms_ssim,ms_ssim_se,seed";

inline void write_eval_csv(std::ostream& os, const std::vector<EvalRecord>& records) {
  os << kEvalCsvHeader << '\n';
  os << std::fixed;
  for (const auto& r : records) {
    os << r.variant << ',' << std::setprecision(2) << r.mu_bar_db << ',' << std::setprecision(3) << r.sigma_h << ','
       << r.n << ',' << std::setprecision(6) << r.psnr_db << ',' << r.psnr_se << ',' << r.ms_ssim << ','
       << r.ms_ssim_se << ',' << r.seed << '\n';
  }
  os.unsetf(std::ios::floatfield);
}

inline constexpr const char* kLossCsvHeader = "step,total,mse,penalty_a,penalty_b";

inline void write_loss_row(std::ostream& os, std::uint64_t step, const LossBreakdown& l) {
  os << step << ',' << std::setprecision(12) << l.total << ',' << l.mse << ',' << l.penalty_a << ',' << l.penalty_b
     << '\n';
}

}  // namespace seqj
