#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "rrca/data.hpp"
#include "rrca/losses.hpp"
#include "rrca/metrics.hpp"
#include "rrca/model.hpp"
#include "rrca/trainer.hpp"

namespace rrca::cli {

namespace {

namespace fs = std::filesystem;

// Every option of every command binds to a field here.
struct Options {
  std::vector<int> channels{8, 16, 32, 64};
  std::vector<int> blocks{3, 2, 2, 2};
  int iterations = 2;
  int attention_reduction = 4;
  std::string fusion = "diaam";
  std::string fsm = "stack";
  bool untied = false;
  std::uint64_t seed = 0;

  TrainConfig train;
  std::string loss = "dptk";

  std::string config;
  std::string data;
  std::string out;
  std::string resume;
  std::string checkpoint;
  std::string split = "test";
  int stop_after = -1;
  int snapshot_every = 0;
  bool quiet = false;
  int size = 256;
  int batch_size = 8;
  std::vector<double> thresholds;
  int points = 99;
  std::string suite;
  SynthConfig synth;
};

// Resolved configuration written next to a command's outputs, in the same
// key = value syntax that --config reads.
class Echo {
 public:
  void add(const std::string& key, const std::string& v) { lines_ << key << " = " << quote(v) << "\n"; }
  void add(const std::string& key, const char* v) { add(key, std::string(v)); }
  void add(const std::string& key, bool v) { lines_ << key << " = " << (v ? "true" : "false") << "\n"; }
  void add(const std::string& key, int v) { lines_ << key << " = " << v << "\n"; }
  void add(const std::string& key, std::uint64_t v) { lines_ << key << " = " << v << "\n"; }
  void add(const std::string& key, double v) { lines_ << key << " = " << num(v) << "\n"; }
  void add(const std::string& key, const std::vector<int>& v) { list(key, v, [](int x) { return std::to_string(x); }); }
  void add(const std::string& key, const std::vector<double>& v) { list(key, v, num); }

  void write(const fs::path& dir) const {
    fs::create_directories(dir);
    std::ofstream os(dir / "config.toml");
    os << "# resolved configuration; rerun with --config config.toml\n" << lines_.str();
    if (!os) throw std::runtime_error("cannot write " + (dir / "config.toml").string());
  }

 private:
  static std::string num(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  }
  static std::string quote(const std::string& s) {
    std::string q = "\"";
    for (char c : s) {
      if (c == '"' || c == '\\') q += '\\';
      q += c;
    }
    return q + "\"";
  }
  template <typename V, typename F>
  void list(const std::string& key, const std::vector<V>& v, F fmt) {
    lines_ << key << " = [";
    for (std::size_t i = 0; i < v.size(); ++i) lines_ << (i ? ", " : "") << fmt(v[i]);
    lines_ << "]\n";
  }

  std::ostringstream lines_;
};

// Applies a key = value file to the options of `cmd`. Keys use the long
// option names ("batch-size"; "batch_size" is accepted too). Options already
// given on the command line keep their command-line value.
void apply_config(CLI::App& cmd, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config file " + path);
  for (const auto& item : CLI::ConfigTOML().from_config(is)) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    std::string key = item.fullname();
    std::replace(key.begin(), key.end(), '_', '-');
    CLI::Option* opt = key == "config" ? nullptr : cmd.get_option_no_throw("--" + key);
    if (opt == nullptr) {
      throw std::invalid_argument("unknown key '" + item.fullname() + "' in config file " + path +
                                  " (not an option of '" + cmd.get_name() + "')");
    }
    if (opt->count() > 0) continue;
    opt->add_result(item.inputs);
    opt->run_callback();
  }
}

void add_network_options(CLI::App* c, Options& o) {
  c->add_option("--channels", o.channels, "Channels per depth")->delimiter(',')->capture_default_str();
  c->add_option("--blocks", o.blocks, "Residual blocks per depth")->delimiter(',')->capture_default_str();
  c->add_option("--iterations", o.iterations, "Recurrent re-entries N (N + 1 passes)")->capture_default_str();
  c->add_option("--attention-reduction", o.attention_reduction, "Channel-attention reduction ratio")
      ->capture_default_str();
  c->add_option("--fusion", o.fusion, "Decoder fusion")
      ->check(CLI::IsMember({"diaam", "concat", "sum", "diaam_no_ca"}))
      ->capture_default_str();
  c->add_option("--fsm", o.fsm, "Feature stacking mode")
      ->check(CLI::IsMember({"stack", "last_only", "deep_supervision"}))
      ->capture_default_str();
  c->add_flag("--untied", o.untied, "Give every iteration its own encoder kernels");
}

void add_seed_option(CLI::App* c, Options& o) {
  c->add_option("--seed", o.seed, "Seed for initialization, shuffling and augmentation")->capture_default_str();
}

void add_training_options(CLI::App* c, Options& o) {
  c->add_option("--lr0", o.train.lr0, "Initial learning rate")->capture_default_str();
  c->add_option("--batch-size", o.train.batch_size, "Batch size")->capture_default_str();
  c->add_option("--epochs", o.train.epochs, "Epochs of the cosine schedule")->capture_default_str();
  c->add_option("--loss", o.loss, "Loss")
      ->check(CLI::IsMember({"dice", "poly", "topk", "softiou", "ce", "dice_topk", "poly_topk", "dptk"}))
      ->capture_default_str();
  c->add_option("--alpha", o.train.loss.alpha, "Poly perturbation alpha")->capture_default_str();
  c->add_option("--k-percent", o.train.loss.k_percent, "Top-k percentage")->capture_default_str();
  c->add_option("--eval-every", o.train.eval_every, "Evaluate every this many epochs")->capture_default_str();
  c->add_option("--crop", o.train.crop, "Training crop side")->capture_default_str();
  c->add_option("--threshold", o.train.match.binarize_threshold, "Binarization threshold")
      ->capture_default_str();
  c->add_option("--d-thresh", o.train.match.d_thresh, "Centroid match distance (px)")->capture_default_str();
}

NetworkConfig network_config(const Options& o) {
  NetworkConfig n;
  n.channels = o.channels;
  n.blocks = o.blocks;
  n.iterations = o.iterations;
  n.attention_reduction = o.attention_reduction;
  n.fusion = parse_fusion_mode(o.fusion);
  n.fsm = parse_fsm_mode(o.fsm);
  n.tie_encoder = !o.untied;
  n.seed = o.seed;
  n.validate();
  return n;
}

TrainConfig train_config(const Options& o) {
  TrainConfig t = o.train;
  t.loss.kind = parse_loss_kind(o.loss);
  t.seed = o.seed;
  t.validate();
  return t;
}

void echo_network(Echo& e, const NetworkConfig& n) {
  e.add("channels", n.channels);
  e.add("blocks", n.blocks);
  e.add("iterations", n.iterations);
  e.add("attention-reduction", n.attention_reduction);
  e.add("fusion", to_string(n.fusion));
  e.add("fsm", to_string(n.fsm));
  e.add("untied", !n.tie_encoder);
}

void echo_training(Echo& e, const TrainConfig& t) {
  e.add("seed", t.seed);
  e.add("lr0", t.lr0);
  e.add("batch-size", t.batch_size);
  e.add("epochs", t.epochs);
  e.add("loss", to_string(t.loss.kind));
  e.add("alpha", t.loss.alpha);
  e.add("k-percent", t.loss.k_percent);
  e.add("eval-every", t.eval_every);
  e.add("crop", t.crop);
  e.add("threshold", t.match.binarize_threshold);
  e.add("d-thresh", t.match.d_thresh);
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw std::invalid_argument(std::string(flag) + " is required");
}

std::vector<Sample> load_split(const std::string& root, const std::string& split) {
  return load_dataset(root, read_split(root, split));
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

std::string metrics_text(const Metrics& m) {
  std::ostringstream os;
  write_metrics_csv(os, m);
  return os.str();
}

// ---------------------------------------------------------------------------

int cmd_train(const Options& o, std::ostream& out) {
  require(o.data, "--data");
  require(o.out, "--out");
  const auto train_set = load_split(o.data, "train");
  const auto test_set = load_split(o.data, "test");

  std::optional<RrcaNet<float>> model;
  TrainConfig cfg;
  TrainState state;
  if (!o.resume.empty()) {
    auto ck = load_checkpoint(o.resume);
    model.emplace(std::move(ck.model));
    cfg = ck.meta.train;
    state = std::move(ck.meta.state);
  } else {
    model.emplace(network_config(o));
    cfg = train_config(o);
    state = initial_state(cfg);
  }

  Echo echo;
  echo.add("data", o.data);
  echo.add("out", o.out);
  echo_network(echo, model->config());
  echo_training(echo, cfg);
  echo.add("stop-after", o.stop_after);
  echo.add("snapshot-every", o.snapshot_every);
  if (!o.resume.empty()) echo.add("resume", o.resume);
  echo.write(o.out);

  TrainRun run;
  run.out_dir = o.out;
  run.stop_after = o.stop_after;
  run.snapshot_every = o.snapshot_every;
  if (!o.quiet) {
    out << kLogHeader << "\n";
    run.on_epoch = [&](const std::string& row) { out << row << std::endl; };
  }
  const auto res = train(*model, train_set, test_set, cfg, std::move(state), run);
  if (!o.quiet && res.state.best_epoch >= 0) {
    out << "best iou " << format_number(res.state.best_iou) << " at epoch " << res.state.best_epoch << "\n";
  }
  return 0;
}

int cmd_eval(const Options& o, const CLI::App& cmd, std::ostream& out) {
  require(o.checkpoint, "--checkpoint");
  require(o.data, "--data");
  require(o.out, "--out");
  auto ck = load_checkpoint(o.checkpoint);
  MatchConfig match = ck.meta.train.match;
  if (cmd.count("--threshold")) match.binarize_threshold = o.train.match.binarize_threshold;
  if (cmd.count("--d-thresh")) match.d_thresh = o.train.match.d_thresh;
  match.validate();
  const int batch = cmd.count("--batch-size") ? o.batch_size : ck.meta.train.batch_size;
  const auto samples = load_split(o.data, o.split);

  const auto probs = predict(ck.model, samples, batch);
  MetricAccumulator acc;
  std::vector<Mask> gts;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    acc.add(binarize(probs[i], match.binarize_threshold), samples[i].mask, match);
    gts.push_back(samples[i].mask);
  }
  const Metrics m = compute_metrics(acc);

  Echo echo;
  echo.add("checkpoint", o.checkpoint);
  echo.add("data", o.data);
  echo.add("split", o.split);
  echo.add("out", o.out);
  echo.add("threshold", match.binarize_threshold);
  echo.add("d-thresh", match.d_thresh);
  echo.add("batch-size", batch);
  echo.add("thresholds", o.thresholds);
  echo.write(o.out);

  const fs::path dir = o.out;
  write_text(dir / "metrics.csv", metrics_text(m));
  if (!o.thresholds.empty()) {
    std::ostringstream os;
    write_roc_csv(os, roc_sweep(probs, gts, o.thresholds, match));
    write_text(dir / "roc.csv", os.str());
  }
  out << metrics_text(m);
  return 0;
}

int cmd_predict(const Options& o, const CLI::App& cmd, std::ostream& out) {
  require(o.checkpoint, "--checkpoint");
  require(o.data, "--data");
  require(o.out, "--out");
  auto ck = load_checkpoint(o.checkpoint);
  const double thr =
      cmd.count("--threshold") ? o.train.match.binarize_threshold : ck.meta.train.match.binarize_threshold;
  const auto samples = load_split(o.data, o.split);
  const auto probs = predict(ck.model, samples, o.batch_size);

  Echo echo;
  echo.add("checkpoint", o.checkpoint);
  echo.add("data", o.data);
  echo.add("split", o.split);
  echo.add("out", o.out);
  echo.add("threshold", thr);
  echo.add("batch-size", o.batch_size);
  echo.write(o.out);

  for (std::size_t i = 0; i < samples.size(); ++i) {
    Mask m = binarize(probs[i], thr);
    for (auto& v : m.px) v = v ? 255 : 0;
    write_pgm(fs::path(o.out) / (samples[i].id + ".pgm"), m);
  }
  out << "wrote " << samples.size() << " masks to " << o.out << "\n";
  return 0;
}

int cmd_count(const Options& o, std::ostream& out) {
  if (o.size < 1) throw std::invalid_argument("--size must be positive");
  RrcaNet<float> model(network_config(o));
  const auto params = model.count_params();
  const auto flops = model.count_flops(o.size, o.size);
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu,%llu,%.4f,%.4f\n", params, static_cast<unsigned long long>(flops),
                params / 1e6, flops / 1e9);
  out << "params,flops,params_m,flops_g\n" << buf;
  return 0;
}

struct Variant {
  std::string name;
  NetworkConfig net;
  TrainConfig train;
};

std::vector<Variant> ablation_variants(const std::string& suite, const NetworkConfig& base,
                                       const TrainConfig& tbase) {
  std::vector<Variant> v;
  auto add = [&](std::string name, auto&& edit) {
    Variant x{std::move(name), base, tbase};
    edit(x);
    x.net.validate();
    x.train.validate();
    v.push_back(std::move(x));
  };
  if (suite == "iterations") {
    for (int n = 0; n <= 3; ++n) add("n" + std::to_string(n), [&](Variant& x) { x.net.iterations = n; });
  } else if (suite == "channels") {
    const std::vector<std::pair<std::string, std::pair<std::vector<int>, std::vector<int>>>> rows{
        {"c4-l4", {{4, 8, 16, 32}, {3, 2, 2, 2}}},
        {"c16-l4", {{16, 32, 64, 128}, {3, 2, 2, 2}}},
        {"c8-l4", {{8, 16, 32, 64}, {3, 2, 2, 2}}},
        {"c8-l3", {{8, 16, 32}, {3, 3, 3}}},
        {"c8-l5", {{8, 16, 32, 64, 128}, {1, 2, 2, 2, 2}}},
        {"c4-l5", {{4, 8, 16, 32, 64}, {1, 2, 2, 2, 2}}},
        {"c16-l5", {{16, 32, 64, 128, 256}, {1, 2, 2, 2, 2}}}};
    for (const auto& [name, cb] : rows) {
      add(name, [&](Variant& x) {
        x.net.channels = cb.first;
        x.net.blocks = cb.second;
      });
    }
  } else if (suite == "fsm") {
    for (FsmMode m : {FsmMode::Stack, FsmMode::LastOnly, FsmMode::DeepSupervision}) {
      add(to_string(m), [&](Variant& x) { x.net.fsm = m; });
    }
  } else if (suite == "diaam") {
    for (FusionMode m : {FusionMode::Concat, FusionMode::Sum, FusionMode::DiaamNoCa, FusionMode::Diaam}) {
      add(to_string(m), [&](Variant& x) { x.net.fusion = m; });
    }
  } else if (suite == "loss_grid") {
    for (double a : {2.0, 2.5, 2.8, 2.9, 3.0, 3.1, 3.2, 3.5, 4.0}) {
      for (int k : {5, 10, 15}) {
        char name[32];
        std::snprintf(name, sizeof name, "a%.1f-k%d", a, k);
        add(name, [&](Variant& x) {
          x.train.loss.kind = LossKind::DpTk;
          x.train.loss.alpha = a;
          x.train.loss.k_percent = k;
        });
      }
    }
  } else {
    throw std::invalid_argument("unknown ablation suite '" + suite +
                                "' (expected iterations, channels, fsm, diaam or loss_grid)");
  }
  return v;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  const NetworkConfig base = network_config(o);
  const TrainConfig tbase = train_config(o);
  const auto variants = ablation_variants(o.suite, base, tbase);

  const fs::path dir = o.out;
  std::string data = o.data;
  if (data.empty()) {
    SynthConfig s;
    s.seed = o.seed;
    data = (dir / "data").string();
    synth_generate(s, data);
  }
  Echo echo;
  echo.add("suite", o.suite);
  echo.add("data", data);
  echo.add("out", o.out);
  echo_network(echo, base);
  echo_training(echo, tbase);
  echo.write(dir);

  const auto train_set = load_split(data, "train");
  const auto test_set = load_split(data, "test");
  std::string table = "variant,params,flops,iou,pd,fa\n";
  out << table << std::flush;
  for (const auto& v : variants) {
    RrcaNet<float> model(v.net);
    TrainRun run;
    run.out_dir = dir / v.name;
    const auto res = train(model, train_set, test_set, v.train, initial_state(v.train), run);
    const Metrics& m = res.last_metrics;
    const std::string row = v.name + "," + std::to_string(model.count_params()) + "," +
                            std::to_string(model.count_flops(256, 256)) + "," + format_number(m.iou) +
                            "," + format_number(m.pd) + "," + format_number(m.fa) + "\n";
    table += row;
    write_text(dir / (o.suite + ".csv"), table);
    out << row << std::flush;
  }
  return 0;
}

int cmd_losscurve(const Options& o, std::ostream& out) {
  if (o.points < 1) throw std::invalid_argument("--points must be positive");
  std::vector<double> grid;
  for (int i = 1; i <= o.points; ++i) grid.push_back(static_cast<double>(i) / (o.points + 1));
  const auto rows = emit_loss_curves(o.train.loss.alpha, o.train.loss.k_percent, grid);
  if (o.out.empty()) {
    write_loss_curves(out, rows);
  } else {
    std::ofstream os(o.out);
    write_loss_curves(os, rows);
    if (!os) throw std::runtime_error("cannot write " + o.out);
  }
  return 0;
}

int cmd_synth(const Options& o, std::ostream& out) {
  require(o.out, "--out");
  SynthConfig s = o.synth;
  s.seed = o.seed;
  synth_generate(s, o.out);
  Echo echo;
  echo.add("out", o.out);
  echo.add("count", s.count);
  echo.add("size", s.image_size);
  echo.add("targets-min", s.targets_min);
  echo.add("targets-max", s.targets_max);
  echo.add("sigma-min", s.sigma_min);
  echo.add("sigma-max", s.sigma_max);
  echo.add("peak-min", s.peak_min);
  echo.add("peak-max", s.peak_max);
  echo.add("clutter-smoothness", s.clutter_smoothness);
  echo.add("clutter-level", s.clutter_level);
  echo.add("noise", s.noise_sigma);
  echo.add("train-fraction", s.train_fraction);
  echo.add("seed", s.seed);
  echo.write(o.out);
  out << "wrote " << s.count << " samples to " << o.out << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Recurrent reusable-convolution attention network for infrared small targets"};
  app.name("rrca");
  app.require_subcommand(1);
  app.footer(
      "Every command accepts --config FILE with `key = value` lines named after its long options.\n"
      "Options given on the command line override the file.");

  auto with_config = [&](CLI::App* c) {
    c->add_option("--config", o.config, "key = value file with option defaults")->check(CLI::ExistingFile);
    return c;
  };

  auto* train = with_config(app.add_subcommand("train", "Train a network on a dataset directory"));
  train->add_option("--data", o.data, "Dataset root (images/, masks/, splits/)");
  train->add_option("--out", o.out, "Run directory");
  add_network_options(train, o);
  add_seed_option(train, o);
  add_training_options(train, o);
  train->add_option("--stop-after", o.stop_after, "Stop after this many epochs (schedule unchanged)");
  train->add_option("--snapshot-every", o.snapshot_every, "Also keep epoch_<k>.ckpt every k epochs");
  train->add_option("--resume", o.resume, "Continue from a checkpoint, with its stored configuration");
  train->add_flag("--quiet", o.quiet, "Do not print log rows");

  auto* eval = with_config(app.add_subcommand("eval", "Evaluate a checkpoint; writes metrics.csv and roc.csv"));
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  eval->add_option("--data", o.data, "Dataset root");
  eval->add_option("--split", o.split, "Split list to evaluate")->capture_default_str();
  eval->add_option("--out", o.out, "Output directory");
  eval->add_option("--threshold", o.train.match.binarize_threshold, "Binarization threshold (default: checkpoint)");
  eval->add_option("--d-thresh", o.train.match.d_thresh, "Centroid match distance (default: checkpoint)");
  eval->add_option("--batch-size", o.batch_size, "Inference batch size (default: checkpoint)");
  eval->add_option("--thresholds", o.thresholds, "Descending ROC thresholds; none skips roc.csv")
      ->delimiter(',');

  auto* pred = with_config(app.add_subcommand("predict", "Write binarized mask PGMs for a split"));
  pred->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
  pred->add_option("--data", o.data, "Dataset root");
  pred->add_option("--split", o.split, "Split list")->capture_default_str();
  pred->add_option("--out", o.out, "Output directory");
  pred->add_option("--threshold", o.train.match.binarize_threshold, "Binarization threshold (default: checkpoint)");
  pred->add_option("--batch-size", o.batch_size, "Inference batch size")->capture_default_str();

  auto* count = with_config(app.add_subcommand("count", "Print parameter and FLOP (MAC) counts"));
  add_network_options(count, o);
  count->add_option("--size", o.size, "Square input side for the FLOP count")->capture_default_str();

  auto* ablate = with_config(app.add_subcommand("ablate", "Train a grid of variants on one dataset"));
  ablate->add_option("suite", o.suite, "iterations | channels | fsm | diaam | loss_grid")->required();
  ablate->add_option("--data", o.data, "Dataset root (default: generate a synthetic set under --out)");
  ablate->add_option("--out", o.out, "Output directory");
  add_network_options(ablate, o);
  add_seed_option(ablate, o);
  add_training_options(ablate, o);

  auto* curve = with_config(app.add_subcommand("losscurve", "Loss value and gradient over p for a positive pixel"));
  curve->add_option("--alpha", o.train.loss.alpha, "Poly alpha")->capture_default_str();
  curve->add_option("--k-percent", o.train.loss.k_percent, "Top-k percentage")->capture_default_str();
  curve->add_option("--points", o.points, "Grid points in (0, 1)")->capture_default_str();
  curve->add_option("--out", o.out, "CSV file (default: stdout)");

  auto* synth = with_config(app.add_subcommand("synth", "Generate a synthetic small-target dataset"));
  synth->add_option("--out", o.out, "Dataset root to create");
  synth->add_option("--count", o.synth.count, "Number of images")->capture_default_str();
  synth->add_option("--size", o.synth.image_size, "Image side")->capture_default_str();
  synth->add_option("--targets-min", o.synth.targets_min)->capture_default_str();
  synth->add_option("--targets-max", o.synth.targets_max)->capture_default_str();
  synth->add_option("--sigma-min", o.synth.sigma_min, "Target Gaussian sigma range (px)")->capture_default_str();
  synth->add_option("--sigma-max", o.synth.sigma_max)->capture_default_str();
  synth->add_option("--peak-min", o.synth.peak_min, "Target peak intensity range")->capture_default_str();
  synth->add_option("--peak-max", o.synth.peak_max)->capture_default_str();
  synth->add_option("--clutter-smoothness", o.synth.clutter_smoothness)->capture_default_str();
  synth->add_option("--clutter-level", o.synth.clutter_level)->capture_default_str();
  synth->add_option("--noise", o.synth.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  synth->add_option("--train-fraction", o.synth.train_fraction)->capture_default_str();
  add_seed_option(synth, o);

  std::vector<const char*> argv{"rrca"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  CLI::App* cmd = app.get_subcommands().front();
  try {
    if (!o.config.empty()) apply_config(*cmd, o.config);
    if (cmd == train) return cmd_train(o, out);
    if (cmd == eval) return cmd_eval(o, *cmd, out);
    if (cmd == pred) return cmd_predict(o, *cmd, out);
    if (cmd == count) return cmd_count(o, out);
    if (cmd == ablate) return cmd_ablate(o, out);
    if (cmd == curve) return cmd_losscurve(o, out);
    if (cmd == synth) return cmd_synth(o, out);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace rrca::cli
