#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <ostream>
#include <sstream>

#include "rstereo/flops.hpp"
#include "rstereo/io.hpp"
#include "rstereo/kernels.hpp"
#include "rstereo/suites.hpp"
#include "rstereo/training.hpp"

namespace rstereo::cli {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using nlohmann::json;

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw IoError("no such file: " + path);
}

std::vector<int> parse_counts(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ContractError("expected comma-separated integers, got '" + text + "'");
    }
  }
  return out;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string left, right, checkpoint, output = "disparity.pfm", png, slow_fast;
  int iters = 32;
};

int infer(const InferArgs& a, std::ostream& out) {
  require_file(a.left);
  require_file(a.right);
  require_file(a.checkpoint);
  auto model = load_model(a.checkpoint);
  const auto left = read_image(a.left), right = read_image(a.right);
  if (left.shape() != right.shape()) {
    throw DimensionError("left " + left.shape().str() + " and right " + right.shape().str() + " differ in size");
  }
  RolloutOptions<float> opts;
  opts.iterations = a.iters;
  int updates = a.iters;
  if (!a.slow_fast.empty()) {
    auto counts = parse_counts(a.slow_fast);
    counts.resize(static_cast<std::size_t>(model->config().update.levels), counts.empty() ? 1 : counts.back());
    opts.schedule = IterationSchedule::slow_fast(counts);
    updates = opts.schedule->finest_updates();
  }
  const auto t0 = Clock::now();
  const auto result = run_inference(*model, ImagePair<float>{left, right}, opts);
  const double elapsed = seconds_since(t0);
  if (!all_finite(result.disparity)) throw NumericError("inference produced non-finite disparities");
  write_pfm(result.disparity, a.output);
  if (!a.png.empty()) write_disparity_png(result.disparity, a.png);
  out << "size " << left.dim(1) << "x" << left.dim(2) << "\n"
      << "updates " << updates << "\n"
      << "seconds " << std::fixed << std::setprecision(3) << elapsed << "\n"
      << "output " << a.output << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, checkpoint, log;
  std::int64_t steps = 0;
};

int train_cmd(const TrainArgs& a, std::ostream& out) {
  require_file(a.config);
  json j;
  const std::string text = slurp(a.config);
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(a.config + ": " + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  if (!j.is_object()) throw ContractError(a.config + ": expected an object with 'model' and 'train'");
  for (const auto& [k, v] : j.items()) {
    if (k != "model" && k != "train") throw ContractError(a.config + ": unknown key '" + k + "'");
  }
  const auto model_cfg = ModelConfig::from_json(j.value("model", json::object()).dump());
  auto cfg = TrainConfig::from_json(j.value("train", json::object()).dump());
  if (a.steps > 0) cfg.steps = a.steps;
  if (!a.checkpoint.empty()) cfg.checkpoint_path = a.checkpoint;
  if (!a.log.empty()) cfg.log_path = a.log;
  if (cfg.checkpoint_path.empty()) cfg.checkpoint_path = "model.ckpt";
  cfg.validate();

  StereoModel<float> model(model_cfg, cfg.seed);
  SyntheticConfig val_data = cfg.data;
  const auto validation = validation_set(val_data, cfg.validation_samples, cfg.seed + 1);
  const auto t0 = Clock::now();
  const auto summary = train(model, cfg, synthetic_source(cfg), validation);
  out << "steps " << cfg.steps << "\n"
      << "parameters " << model.parameter_count() << "\n"
      << "final_loss " << summary.log.back().loss << "\n"
      << "val_epe " << summary.final_val_epe << "\n"
      << "seconds " << std::fixed << std::setprecision(1) << seconds_since(t0) << "\n"
      << "checkpoint " << cfg.checkpoint_path << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, mask;
  std::string thresholds = "0.5,1,2,3,4";
};

int eval(const EvalArgs& a, std::ostream& out) {
  for (const auto* dir : {&a.pred, &a.gt}) {
    if (!fs::is_directory(*dir)) throw IoError("no such directory: " + *dir);
  }
  if (!a.mask.empty() && !fs::is_directory(a.mask)) throw IoError("no such directory: " + a.mask);
  std::vector<double> thresholds;
  {
    std::stringstream ss(a.thresholds);
    std::string item;
    while (std::getline(ss, item, ',')) thresholds.push_back(std::stod(item));
    if (thresholds.empty()) throw ContractError("no thresholds given");
  }
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a.gt)) {
    if (e.is_regular_file() && e.path().extension() == ".pfm") names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError("no .pfm files in " + a.gt);
  for (const auto& n : names) require_file((fs::path(a.pred) / n).string());

  std::vector<MetricsReport> reports(names.size());
  std::vector<std::string> errors(names.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < names.size(); ++i) {
    try {
      const auto gt = read_pfm((fs::path(a.gt) / names[i]).string()).first;
      const auto pred = read_pfm((fs::path(a.pred) / names[i]).string()).first;
      auto mask = Tensor::full(gt.shape(), 1.f);
      if (!a.mask.empty()) mask = read_pfm((fs::path(a.mask) / names[i]).string()).first;
      reports[i] = compute_metrics(pred, gt, mask, thresholds);
    } catch (const std::exception& e) {
      errors[i] = names[i] + ": " + e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw IoError(e);
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!std::isfinite(reports[i].epe)) throw NumericError(names[i] + ": non-finite prediction");
  }
  json doc;
  doc["files"] = json::array();
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto r = json::parse(reports[i].to_json());
    r["file"] = names[i];
    doc["files"].push_back(r);
  }
  doc["total"] = json::parse(merge(reports).to_json());
  out << doc.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  int levels = 3;
  int resolution = 8;
  bool shared_backbone = false;
  bool on_the_fly = false;
  std::string slow_fast;
  bool slow_fast_set = false;
  int iters = 32;
  Index height = 128, width = 256;
  std::string config;
};

int bench(const BenchArgs& a, std::ostream& out) {
  ModelConfig cfg;
  if (!a.config.empty()) {
    require_file(a.config);
    cfg = ModelConfig::from_json(slurp(a.config));
  }
  cfg.update.levels = a.levels;
  cfg.encoder.downsample = a.resolution;
  cfg.encoder.shared_backbone = a.shared_backbone;
  cfg.correlation.on_the_fly = cfg.correlation.on_the_fly || a.on_the_fly;
  cfg.validate();
  if (a.height % cfg.divisor() || a.width % cfg.divisor()) {
    throw ContractError("input " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                        " must be a multiple of " + std::to_string(cfg.divisor()));
  }

  StereoModel<float> model(cfg, 1);
  model.set_training(false);
  std::mt19937_64 rng(2);
  const auto l = Tensor::uniform(Shape{1, 3, a.height, a.width}, 0.f, 1.f, rng);
  const auto r = Tensor::uniform(Shape{1, 3, a.height, a.width}, 0.f, 1.f, rng);
  RolloutOptions<float> opts;
  opts.iterations = a.iters;
  if (a.slow_fast_set) {
    auto counts = parse_counts(a.slow_fast);
    counts.resize(static_cast<std::size_t>(cfg.update.levels), counts.empty() ? 1 : counts.back());
    opts.schedule = IterationSchedule::slow_fast(counts);
  }
  NoGradGuard guard;
  model.forward(l, r, opts);  // warm-up

  auto t0 = Clock::now();
  auto enc = model.encoders()(l, r);
  const double t_enc = seconds_since(t0);
  t0 = Clock::now();
  { const CorrelationSampler<float> sampler(enc.left, enc.right, cfg.correlation); }
  const double t_corr = seconds_since(t0);
  flops::Counter counter;
  t0 = Clock::now();
  const auto result = model.forward(l, r, opts);
  const double t_total = seconds_since(t0);
  if (!all_finite(result.disparity)) throw NumericError("benchmark rollout produced non-finite values");

  std::map<std::string, std::uint64_t> stages;
  for (const auto& [label, macs] : counter.by_label()) {
    std::string stage = label.empty() ? "other" : label;
    stages[stage] += macs;
  }
  out << "config levels=" << cfg.update.levels << " resolution=1/" << cfg.encoder.downsample
      << " shared_backbone=" << (cfg.encoder.shared_backbone ? "yes" : "no")
      << " correlation=" << (cfg.correlation.on_the_fly ? "on-the-fly" : "precomputed") << " schedule=";
  if (opts.schedule) {
    for (int k = 0; k < opts.schedule->levels(); ++k) out << (k ? "," : "") << opts.schedule->count(k);
  } else {
    out << "regular x" << a.iters;
  }
  out << "\ninput " << a.height << "x" << a.width << "  threads " << kernels::max_threads() << "\n"
      << "parameters " << model.parameter_count() << "\n\n"
      << std::left << std::setw(20) << "stage" << std::right << std::setw(14) << "GMAC" << "\n";
  std::uint64_t total = 0;
  for (const auto& [stage, macs] : stages) {
    out << std::left << std::setw(20) << stage << std::right << std::setw(14) << std::fixed << std::setprecision(3)
        << double(macs) * 1e-9 << "\n";
    total += macs;
  }
  out << std::left << std::setw(20) << "total" << std::right << std::setw(14) << double(total) * 1e-9 << "\n\n"
      << std::left << std::setw(20) << "time" << std::right << std::setw(14) << "seconds" << "\n"
      << std::left << std::setw(20) << "encoders" << std::right << std::setw(14) << std::setprecision(4) << t_enc
      << "\n"
      << std::left << std::setw(20) << "correlation" << std::right << std::setw(14) << t_corr << "\n"
      << std::left << std::setw(20) << "updates+upsample" << std::right << std::setw(14)
      << std::max(0.0, t_total - t_enc - t_corr) << "\n"
      << std::left << std::setw(20) << "forward" << std::right << std::setw(14) << t_total << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

int selfcheck(const std::string& scratch, std::ostream& out) {
  const std::vector<std::pair<std::string, std::function<check::Outcome()>>> suites{
      {"volume-oracle", [] { return check::volume_oracle(); }},
      {"pyramid", [] { return check::pyramid_contract(); }},
      {"lookup", [] { return check::lookup_contract(); }},
      {"gradients", [] { return check::gradient_suite(); }},
      {"convex-upsample", [] { return check::convex_upsample_contract(); }},
      {"slow-fast", [] { return check::slow_fast_contract(); }},
      {"io", [&] { return check::io_round_trips(scratch); }},
  };
  bool ok = true;
  for (const auto& [name, fn] : suites) {
    const auto o = fn();
    ok = ok && o.pass;
    out << (o.pass ? "PASS " : "FAIL ") << std::left << std::setw(16) << name << " " << o.detail << " ("
        << std::fixed << std::setprecision(2) << o.seconds << " s)\n"
        << std::flush;
  }
  return ok ? kOk : kNumeric;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Recurrent stereo matching: inference, training, evaluation and diagnostics"};
  app.require_subcommand(1);

  InferArgs ia;
  auto* infer_cmd = app.add_subcommand("infer", "Estimate disparity for a rectified image pair");
  infer_cmd->add_option("--left", ia.left, "Left image (PNG or PPM)")->required();
  infer_cmd->add_option("--right", ia.right, "Right image (PNG or PPM)")->required();
  infer_cmd->add_option("--checkpoint", ia.checkpoint, "Model checkpoint")->required();
  infer_cmd->add_option("--iters", ia.iters, "Number of disparity updates")->check(CLI::PositiveNumber);
  infer_cmd->add_option("--slow-fast", ia.slow_fast, "Per-level update counts, finest first (e.g. 10,20,30)");
  infer_cmd->add_option("--output", ia.output, "Output PFM");
  infer_cmd->add_option("--png", ia.png, "Also write a colour-coded PNG");

  TrainArgs ta;
  auto* train_sub = app.add_subcommand("train", "Train on synthetic scenes");
  train_sub->add_option("--config", ta.config, "JSON with 'model' and 'train' objects")->required();
  train_sub->add_option("--steps", ta.steps, "Override the number of steps")->check(CLI::PositiveNumber);
  train_sub->add_option("--checkpoint", ta.checkpoint, "Checkpoint path");
  train_sub->add_option("--log", ta.log, "Line-delimited JSON training log");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Score predicted PFMs against ground truth");
  eval_cmd->add_option("--pred", ea.pred, "Directory of predicted .pfm files")->required();
  eval_cmd->add_option("--gt", ea.gt, "Directory of ground-truth .pfm files (same names)")->required();
  eval_cmd->add_option("--mask", ea.mask, "Optional directory of validity masks (.pfm, >0 valid)");
  eval_cmd->add_option("--thresholds", ea.thresholds, "Comma-separated bad-pixel thresholds");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "Per-stage multiply-accumulates and timing");
  bench_cmd->add_option("--levels", ba.levels, "GRU levels")->check(CLI::Range(1, 3));
  bench_cmd->add_option("--resolution", ba.resolution, "Feature downsampling factor")->check(CLI::IsMember({4, 8}));
  bench_cmd->add_flag("--shared-backbone", ba.shared_backbone, "Share the encoder trunk");
  bench_cmd->add_flag("--on-the-fly", ba.on_the_fly, "Compute correlations on demand");
  bench_cmd->add_option("--slow-fast", ba.slow_fast, "Per-level update counts, finest first")
      ->expected(0, 1)
      ->default_str("10,20,30");
  bench_cmd->add_option("--iters", ba.iters, "Regular-schedule updates")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--height", ba.height, "Input height")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--width", ba.width, "Input width")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--config", ba.config, "Model configuration JSON");

  std::string scratch = (fs::temp_directory_path() / "rstereo-selfcheck").string();
  auto* self_cmd = app.add_subcommand("selfcheck", "Run oracle and gradient checks");
  self_cmd->add_option("--scratch", scratch, "Directory for temporary files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*infer_cmd) return infer(ia, out);
    if (*train_sub) return train_cmd(ta, out);
    if (*eval_cmd) return eval(ea, out);
    if (*bench_cmd) {
      if (bench_cmd->count("--slow-fast")) {
        ba.slow_fast_set = true;
        if (ba.slow_fast.empty()) ba.slow_fast = "10,20,30";
      }
      return bench(ba, out);
    }
    if (*self_cmd) return selfcheck(scratch, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace rstereo::cli
