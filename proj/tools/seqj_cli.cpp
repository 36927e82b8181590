// seqj: train, evaluate and inspect SNR-conditioned image codecs.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "seqj/checkpoint.hpp"
#include "seqj/diagnostics.hpp"
#include "seqj/train.hpp"

namespace {

using namespace seqj;

constexpr int kUsageError = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

TrainConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

/// Writes to a file, or stdout for "-".
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path != "-") {
      file_ = std::make_unique<std::ofstream>(path);
      if (!*file_) throw std::runtime_error("cannot write " + path);
    }
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

FeedbackModel parse_feedback(const std::string& name, double sigma_h) {
  if (name == "perfect") return PerfectFeedback{};
  if (name == "noisy") return NoisyFeedback{sigma_h};
  if (name == "average") return AverageOnlyFeedback{};
  throw UsageError("unknown feedback model '" + name + "'");
}

struct EvalOptions {
  std::vector<double> snrs{-5.0, 0.0, 5.0, 10.0, 15.0};
  std::size_t n = 500;
  std::optional<std::uint64_t> seed;
  unsigned threads = default_threads();
  std::string out = "-";

  void attach(CLI::App* app) {
    app->add_option("--snrs", snrs, "Test average SNRs in dB, comma separated (use --snrs=-5,0)")->delimiter(',');
    app->add_option("--n", n, "Test images per SNR")->check(CLI::PositiveNumber);
    app->add_option("--seed", seed, "Evaluation seed (default: the config seed)");
    app->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
    app->add_option("--out", out, "CSV output path, - for stdout");
  }
};

int cmd_train(const std::string& config_path, const std::string& checkpoint, const std::string& log_path,
              const std::string& resume, std::size_t report_every) {
  std::unique_ptr<Trainer> tr;
  if (!resume.empty()) {
    tr = load_checkpoint(resume);
    std::cerr << "resumed at step " << tr->steps_done() << " from " << resume << '\n';
  } else {
    tr = std::make_unique<Trainer>(read_config(config_path));
  }
  const TrainConfig& cfg = tr->config();
  const bool append = !resume.empty() && std::filesystem::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  if (!append) log << kLossCsvHeader << '\n';
  const ParamCount pc = count_params(tr->model());
  std::cerr << "variant " << variant_name(cfg.variant) << ", " << pc.backbone << " backbone + " << pc.ca_module
            << " channel-adaptive parameters\n";
  while (tr->steps_done() < cfg.steps) {
    const LossBreakdown l = tr->step();
    write_loss_row(log, tr->steps_done(), l);
    if (report_every && tr->steps_done() % report_every == 0) {
      std::cerr << "step " << tr->steps_done() << "  loss " << l.total << "  mse " << l.mse << '\n';
    }
  }
  save_checkpoint(checkpoint, *tr);
  std::cerr << "stream checksum " << std::hex << tr->stream_checksum() << std::dec << "\nwrote " << checkpoint << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const EvalOptions& o, const std::string& feedback, double sigma_h) {
  auto tr = load_checkpoint(checkpoint);
  const TrainConfig& cfg = tr->config();
  const std::uint64_t seed = o.seed.value_or(cfg.seed);
  const FeedbackModel fb = parse_feedback(feedback, sigma_h);
  const bool avg = cfg.variant == Variant::AvgOnly || std::holds_alternative<AverageOnlyFeedback>(fb);
  const auto images = make_test_set(cfg, o.n, seed);
  Output out(o.out);
  write_eval_csv(out.stream(), evaluate(tr->model(), avg ? "avg_only" : variant_name(cfg.variant), o.snrs, fb, avg,
                                        images, seed, o.threads));
  return 0;
}

int cmd_sweep(const std::string& checkpoint, EvalOptions o, const std::vector<double>& sigmas) {
  auto tr = load_checkpoint(checkpoint);
  const TrainConfig& cfg = tr->config();
  const std::uint64_t seed = o.seed.value_or(cfg.seed);
  const auto images = make_test_set(cfg, o.n, seed);
  std::vector<EvalRecord> rows;
  for (double s : sigmas) {
    if (s < 0.0) throw UsageError("sigma_h must be non-negative");
    auto r = evaluate(tr->model(), variant_name(cfg.variant), o.snrs, NoisyFeedback{s}, false, images, seed, o.threads);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  Output out(o.out);
  write_eval_csv(out.stream(), rows);
  return 0;
}

int cmd_ablate(const std::string& config_path, const EvalOptions& o, const std::string& checkpoint_dir) {
  const TrainConfig base = read_config(config_path);
  const std::uint64_t seed = o.seed.value_or(base.seed);
  const auto images = make_test_set(base, o.n, seed);
  std::vector<EvalRecord> rows;
  for (Variant v : {Variant::Full, Variant::NoCaq, Variant::NoEm, Variant::NoCa}) {
    TrainConfig cfg = base;
    cfg.variant = v;
    Trainer tr(cfg);
    for (std::size_t s = 0; s < cfg.steps; ++s) tr.step();
    std::cerr << std::left << std::setw(8) << variant_name(v) << " stream checksum " << std::hex << tr.stream_checksum()
              << std::dec << '\n';
    if (!checkpoint_dir.empty()) {
      std::filesystem::create_directories(checkpoint_dir);
      save_checkpoint(std::filesystem::path(checkpoint_dir) / (variant_name(v) + ".seqj"), tr);
    }
    auto r = evaluate_variant(tr.model(), v, o.snrs, PerfectFeedback{}, images, seed, o.threads);
    rows.insert(rows.end(), r.begin(), r.end());
    // The average-SNR fallback reuses the full model as trained.
    if (v == Variant::Full) {
      auto a = evaluate_variant(tr.model(), Variant::AvgOnly, o.snrs, PerfectFeedback{}, images, seed, o.threads);
      rows.insert(rows.end(), a.begin(), a.end());
    }
  }
  Output out(o.out);
  write_eval_csv(out.stream(), rows);
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  const auto cases = run_gradcheck_suite(seed);
  std::cout << std::left << std::setw(20) << "case" << std::setw(14) << "max_rel_err" << std::setw(10) << "tol"
            << "result\n";
  for (const auto& c : cases) {
    std::cout << std::left << std::setw(20) << c.name << std::setw(14) << std::scientific << std::setprecision(3)
              << c.result.max_rel_error << std::setw(10) << c.tolerance << (c.passed() ? "ok" : "FAIL") << '\n';
  }
  const bool ok = all_passed(cases);
  std::cout << (ok ? "all gradients agree\n" : "gradient mismatch\n");
  return ok ? 0 : 1;
}

int cmd_channel_stats(std::size_t draws, std::uint64_t seed, double mu_bar_db, const std::vector<double>& sigmas) {
  std::cout << "quantity,estimate,expected,rel_error\n" << std::setprecision(6);
  for (const auto& r : channel_moments(draws, seed, mu_bar_db, sigmas)) {
    std::cout << '"' << r.quantity << "\"," << r.estimate << ',' << r.expected << ',' << r.rel_error() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate SNR-conditioned transformer image codecs over block-fading channels"};
  app.require_subcommand(1);

  std::string config_path, checkpoint = "checkpoint.seqj", log_path = "loss.csv", resume, checkpoint_dir;
  std::size_t report_every = 100;
  auto* train = app.add_subcommand("train", "Train one model from a JSON config");
  train->add_option("config", config_path, "JSON config file")->required();
  train->add_option("--checkpoint", checkpoint, "Checkpoint to write");
  train->add_option("--log", log_path, "Per-step loss CSV");
  train->add_option("--resume", resume, "Continue from this checkpoint (the config is taken from it)");
  train->add_option("--report-every", report_every, "Progress line interval, 0 for silence");

  EvalOptions eval_opts;
  std::string feedback = "perfect";
  double sigma_h = 0.0;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint over a set of average SNRs");
  eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--feedback", feedback, "perfect, noisy or average");
  eval->add_option("--sigma-h", sigma_h, "Std of the feedback error (noisy feedback)")->check(CLI::NonNegativeNumber);
  eval_opts.attach(eval);

  EvalOptions sweep_opts;
  sweep_opts.snrs = {0.0};
  std::vector<double> sigmas{0.0, 0.1, 0.2, 0.3};
  auto* sweep = app.add_subcommand("sweep", "Evaluate a checkpoint across feedback error levels");
  sweep->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  sweep->add_option("--sigmas", sigmas, "Feedback error stds, comma separated")->delimiter(',');
  sweep_opts.attach(sweep);

  EvalOptions ablate_opts;
  auto* ablate = app.add_subcommand("ablate", "Train every mechanism variant from one config and compare them");
  ablate->add_option("config", config_path, "JSON config file")->required();
  ablate->add_option("--checkpoint-dir", checkpoint_dir, "Also save each trained variant here");
  ablate_opts.attach(ablate);

  std::uint64_t gc_seed = 7;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare every gradient against central differences");
  gradcheck->add_option("--seed", gc_seed, "Seed for the random test problems");

  std::size_t draws = 1000000;
  std::uint64_t cs_seed = 1;
  double mu_bar_db = 5.0;
  std::vector<double> cs_sigmas{0.1, 0.2, 0.3};
  auto* stats = app.add_subcommand("channel-stats", "Monte Carlo moments of the channel and feedback models");
  stats->add_option("--draws", draws, "Samples per moment")->check(CLI::PositiveNumber);
  stats->add_option("--seed", cs_seed, "Seed");
  stats->add_option("--mu-bar-db", mu_bar_db, "Average SNR for the AWGN check");
  stats->add_option("--sigmas", cs_sigmas, "Feedback error stds, comma separated")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const CLI::App* s : app.get_subcommands()) sub = s;
    std::cerr << (sub ? sub->help() : app.help());
    return kUsageError;
  }

  try {
    if (*train) return cmd_train(config_path, checkpoint, log_path, resume, report_every);
    if (*eval) return cmd_eval(checkpoint, eval_opts, feedback, sigma_h);
    if (*sweep) return cmd_sweep(checkpoint, sweep_opts, sigmas);
    if (*ablate) return cmd_ablate(config_path, ablate_opts, checkpoint_dir);
    if (*gradcheck) return cmd_gradcheck(gc_seed);
    if (*stats) return cmd_channel_stats(draws, cs_seed, mu_bar_db, cs_sigmas);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    for (const CLI::App* s : app.get_subcommands()) std::cerr << s->help();
    return kUsageError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
