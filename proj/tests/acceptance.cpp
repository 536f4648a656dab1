// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any fails. Trained toy models are cached under
// --cache so repeated runs only pay for training once.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "rstereo/io.hpp"
#include "rstereo/metrics.hpp"
#include "rstereo/model.hpp"
#include "rstereo/suites.hpp"
#include "rstereo/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rstereo;

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kHeldOutSeed = 7919;
constexpr int kHeldOutCount = 50;

struct Options {
  std::string config = RSTEREO_TOY_CONFIG;
  std::string cache = "acceptance-cache";
  std::int64_t steps = 0;
  bool fresh = false;
  bool skip_training = false;
};

struct Run {
  std::unique_ptr<StereoModel<float>> model;
  double train_seconds = 0;
  bool cached = false;
  std::string checkpoint;
};

struct Reporter {
  int failures = 0;
  void line(const std::string& id, bool pass, const std::string& detail, double seconds) {
    if (!pass) ++failures;
    std::printf("%-4s %s  %s  [%.1fs]\n", id.c_str(), pass ? "PASS" : "FAIL", detail.c_str(), seconds);
    std::fflush(stdout);
  }
  void line(const std::string& id, const check::Outcome& o) { line(id, o.pass, o.detail, o.seconds); }
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> per_sample_epe(StereoModel<float>& model, const std::vector<StereoSample>& samples,
                                   int iterations) {
  std::vector<double> out;
  for (const auto& r : evaluate_samples(model, samples, iterations)) out.push_back(r.epe);
  return out;
}

struct ToySetup {
  ModelConfig model;
  TrainConfig train;
  std::string fingerprint;  // of the training section, keys cached models
};

ToySetup read_setup(const Options& opt) {
  std::ifstream in(opt.config);
  if (!in) throw IoError("cannot open " + opt.config);
  const json j = json::parse(in);
  json train = j.at("train");
  if (opt.steps > 0) train["steps"] = opt.steps;
  const std::string text = train.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) h = (h ^ c) * 1099511628211ull;
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return {ModelConfig::from_json(j.at("model").dump()), TrainConfig::from_json(text), hex};
}

// Trains `model_cfg` with the shared schedule, or reloads a finished run.
Run train_or_load(const std::string& tag, const ModelConfig& model_cfg, const ToySetup& setup, const Options& opt) {
  Run run;
  TrainConfig cfg = setup.train;
  const std::string stem = tag + "-" + std::to_string(cfg.steps) + "-" + setup.fingerprint.substr(0, 8);
  run.checkpoint = (fs::path(opt.cache) / (stem + ".ckpt")).string();
  if (!opt.fresh && fs::exists(run.checkpoint)) {
    const auto header = read_checkpoint_header(run.checkpoint);
    if (header.config.to_json() == model_cfg.to_json() && header.seed == cfg.seed) {
      run.model = load_model(run.checkpoint);
      run.cached = true;
      std::ifstream(run.checkpoint + ".seconds") >> run.train_seconds;
      return run;
    }
  }
  if (opt.skip_training) throw IoError("no cached model at " + run.checkpoint);
  cfg.checkpoint_path = run.checkpoint;
  cfg.checkpoint_every = 0;
  cfg.log_path = (fs::path(opt.cache) / (stem + ".jsonl")).string();
  run.model = std::make_unique<StereoModel<float>>(model_cfg, cfg.seed);
  const auto validation = validation_set(cfg.data, cfg.validation_samples, cfg.seed + 1);
  const auto t0 = Clock::now();
  train(*run.model, cfg, synthetic_source(cfg), validation);
  run.train_seconds = seconds_since(t0);
  std::ofstream(run.checkpoint + ".seconds") << run.train_seconds << "\n";
  run.model->set_training(false);
  return run;
}

std::size_t inference_peak(StereoModel<float>& model, const StereoSample& s, int iterations) {
  ImagePair<float> pair{s.left, s.right};
  RolloutOptions<float> o;
  o.iterations = iterations;
  const std::size_t base = MemoryStats::current_bytes();
  MemoryStats::reset_peak();
  run_inference(model, pair, o);
  return MemoryStats::peak_bytes() - base;
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  CLI::App app{"Acceptance run"};
  app.add_option("--config", opt.config, "Toy model and training configuration")->check(CLI::ExistingFile);
  app.add_option("--cache", opt.cache, "Directory for trained toy models");
  app.add_option("--steps", opt.steps, "Override the training step count");
  app.add_flag("--fresh", opt.fresh, "Ignore cached models");
  app.add_flag("--skip-training", opt.skip_training, "Fail instead of training when nothing is cached");
  CLI11_PARSE(app, argc, argv);

  Reporter rep;
  fs::create_directories(opt.cache);
  const std::string scratch = (fs::path(opt.cache) / "scratch").string();
  fs::create_directories(scratch);

  rep.line("A1", check::volume_oracle(100));
  rep.line("A2", check::pyramid_contract());
  rep.line("A3", check::lookup_contract());
  rep.line("A4", check::gradient_suite());
  rep.line("A5", check::convex_upsample_contract());

  ToySetup setup;
  try {
    setup = read_setup(opt);
  } catch (const std::exception& e) {
    rep.line("A6", false, std::string("config: ") + e.what(), 0);
    return 1;
  }
  const auto held_out = validation_set(setup.train.data, kHeldOutCount, kHeldOutSeed);

  // A6: learning on the synthetic scenes.
  Run full;
  {
    const auto t0 = Clock::now();
    try {
      full = train_or_load("toy3", setup.model, setup, opt);
      const auto report = merge(evaluate_samples(*full.model, held_out, setup.train.validation_iterations));
      const double bad3 = report.bad_at(3.0);
      const bool fast_enough = full.train_seconds <= 3600.0;
      std::string detail = "epe " + fmt(report.epe) + " (< 1.0), bad-3 " + fmt(bad3) + "% (< 5) over " +
                           std::to_string(held_out.size()) + " scenes, " + std::to_string(setup.train.steps) +
                           " steps";
      detail += ", trained in " + fmt(full.train_seconds, 5) + "s";
      if (full.cached) detail += " (cached)";
      rep.line("A6", report.epe < 1.0 && bad3 < 5.0 && fast_enough, detail, seconds_since(t0));
    } catch (const std::exception& e) {
      rep.line("A6", false, std::string("exception: ") + e.what(), seconds_since(t0));
    }
  }

  rep.line("A7", check::slow_fast_contract());

  // A8: more updates do not hurt, and memory does not grow with them.
  {
    const auto t0 = Clock::now();
    try {
      if (!full.model) throw ContractError("no trained model");
      const double m8 = median(per_sample_epe(*full.model, held_out, 8));
      const double m32 = median(per_sample_epe(*full.model, held_out, 32));
      const std::size_t p8 = inference_peak(*full.model, held_out.front(), 8);
      const std::size_t p32 = inference_peak(*full.model, held_out.front(), 32);
      const double growth = std::abs(double(p32) - double(p8)) / double(p8);
      rep.line("A8", m32 <= m8 && growth <= 0.05,
               "median epe N=8 " + fmt(m8) + ", N=32 " + fmt(m32) + "; peak bytes N=8 " + std::to_string(p8) +
                   ", N=32 " + std::to_string(p32) + " (" + fmt(100 * growth, 3) + "%)",
               seconds_since(t0));
    } catch (const std::exception& e) {
      rep.line("A8", false, std::string("exception: ") + e.what(), seconds_since(t0));
    }
  }

  rep.line("A9", check::io_round_trips(scratch));

  // A10: fewer levels and a shared trunk, same data and schedule.
  {
    const auto t0 = Clock::now();
    try {
      if (!full.model) throw ContractError("no trained model");
      const int iters = setup.train.validation_iterations;
      const double epe3 = merge(evaluate_samples(*full.model, held_out, iters)).epe;

      ModelConfig single = setup.model;
      single.update.levels = 1;
      Run one = train_or_load("toy1", single, setup, opt);
      const double epe1 = merge(evaluate_samples(*one.model, held_out, iters)).epe;

      ModelConfig shared_cfg = setup.model;
      shared_cfg.encoder.shared_backbone = true;
      Run shared = train_or_load("toy3-shared", shared_cfg, setup, opt);
      const double epe_shared = merge(evaluate_samples(*shared.model, held_out, iters)).epe;

      const Index params = full.model->parameter_count();
      const Index params_shared = shared.model->parameter_count();
      const bool levels_ok = epe3 <= 1.05 * epe1;
      const bool shared_ok = std::abs(epe_shared - epe3) <= 0.10 * epe3 && params_shared < params;
      rep.line("A10", levels_ok && shared_ok,
               "epe 3-level " + fmt(epe3) + ", 1-level " + fmt(epe1) + " (ratio " + fmt(epe3 / epe1, 3) +
                   ", <= 1.05); shared " + fmt(epe_shared) + " (" + fmt(100 * (epe_shared / epe3 - 1), 3) +
                   "%, within 10%), params " + std::to_string(params_shared) + " < " + std::to_string(params),
               seconds_since(t0));
    } catch (const std::exception& e) {
      rep.line("A10", false, std::string("exception: ") + e.what(), seconds_since(t0));
    }
  }

  std::printf("%d criteria failed\n", rep.failures);
  return rep.failures == 0 ? 0 : 1;
}
