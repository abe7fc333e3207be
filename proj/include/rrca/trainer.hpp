#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rrca/data.hpp"
#include "rrca/losses.hpp"
#include "rrca/metrics.hpp"
#include "rrca/model.hpp"
#include "rrca/random.hpp"

namespace rrca {

struct TrainConfig {
  double lr0 = 0.05;
  int batch_size = 8;
  int epochs = 1500;
  LossConfig loss;
  /// Test-split evaluation period in epochs; the final epoch is always
  /// evaluated.
  int eval_every = 1;
  std::uint64_t seed = 0;
  /// Side of the square training crop.
  int crop = 256;
  MatchConfig match;

  void validate() const;
};

/// Per-parameter sums of squared gradients.
template <typename T>
struct AdaGradState {
  std::vector<std::vector<T>> acc;
  double eps = 1e-10;
};

/// acc += g^2; p -= lr * g / (sqrt(acc) + eps); grads are zeroed afterwards.
/// A non-finite gradient throws before anything is modified.
template <typename T>
void adagrad_step(std::span<Parameter<T>* const> params, AdaGradState<T>& state, double lr);

/// 0.5 * lr0 * (1 + cos(pi * epoch / total_epochs)), never negative.
double cosine_lr(int epoch, int total_epochs, double lr0);

/// Raised when the loss or a gradient stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything besides the model that a resumed run needs.
struct TrainState {
  int epochs_done = 0;
  Rng rng;
  AdaGradState<float> optimizer;
  double best_iou = -1;
  int best_epoch = -1;
  /// Log text written so far, header included.
  std::string log;
};

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkConfig network;
  TrainConfig train;
  TrainState state;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const RrcaNet<float>& model,
                     const TrainConfig& cfg, const TrainState& state);

struct LoadedCheckpoint {
  Checkpoint meta;
  RrcaNet<float> model;
};

/// Reads a checkpoint and rebuilds its model from the stored network
/// configuration. Throws CheckpointError on a bad magic, a different format
/// version, or records that do not fit the network.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

struct TrainRun {
  /// Receives log.csv, last.ckpt and best.ckpt; empty keeps everything in
  /// memory.
  std::filesystem::path out_dir;
  /// Stop once this many epochs are done (the schedule still spans
  /// cfg.epochs). Negative runs to the end.
  int stop_after = -1;
  /// Also keep `epoch_<k>.ckpt` after every k-th epoch; 0 disables.
  int snapshot_every = 0;
  /// Called after each epoch with the row just appended to the log.
  std::function<void(const std::string&)> on_epoch;
};

struct TrainResult {
  TrainState state;
  /// Metrics of the last evaluated epoch.
  Metrics last_metrics;
};

extern const char* const kLogHeader;

/// Runs epochs state.epochs_done .. cfg.epochs - 1. Pass a default TrainState
/// (seeded by `initial_state`) for a fresh run, or the state of a checkpoint
/// whose parameters are already in `model` to resume.
TrainResult train(RrcaNet<float>& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& test_set, const TrainConfig& cfg, TrainState state,
                  const TrainRun& run = {});

TrainState initial_state(const TrainConfig& cfg);

/// Probability maps of the model in inference mode, one per sample.
std::vector<ImageF> predict(RrcaNet<float>& model, const std::vector<Sample>& samples,
                            int batch_size = 8);

/// IoU / Pd / Fa of the model on `samples` at `match.binarize_threshold`.
Metrics evaluate(RrcaNet<float>& model, const std::vector<Sample>& samples,
                 const MatchConfig& match, int batch_size = 8);

}  // namespace rrca
