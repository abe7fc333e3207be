#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "rrca/image.hpp"

namespace rrca {

struct Centroid {
  double x = 0;  // column
  double y = 0;  // row
};

/// Eight-connected foreground components. Labels run 1..count() in the
/// raster order of each component's first pixel; 0 is background.
struct LabeledMask {
  int h = 0;
  int w = 0;
  std::vector<int> labels;
  std::vector<Centroid> centroids;  // index label - 1
  std::vector<int> areas;

  int count() const { return static_cast<int>(areas.size()); }
};

LabeledMask label_components(const Mask& mask);

struct MatchConfig {
  double d_thresh = 3.0;
  double binarize_threshold = 0.5;

  void validate() const;
};

struct MatchResult {
  int correct = 0;
  /// Labels of predicted components matched to no target.
  std::vector<int> false_components;
  std::uint64_t false_pixels = 0;
};

/// Pairs predicted and ground-truth centroids greedily by ascending distance
/// (strictly below d_thresh), one-to-one.
MatchResult match_targets(const LabeledMask& pred, const LabeledMask& gt,
                          const MatchConfig& cfg);

struct Metrics {
  double iou = 0;
  double pd = 0;
  double fa = 0;
};

struct MetricAccumulator {
  std::uint64_t inter_px = 0;
  std::uint64_t union_px = 0;
  std::uint64_t correct_targets = 0;
  std::uint64_t total_targets = 0;
  std::uint64_t false_pixels = 0;
  std::uint64_t total_pixels = 0;

  /// Adds one binarized prediction against its ground truth.
  void add(const Mask& pred, const Mask& gt, const MatchConfig& cfg = {});
  void merge(const MetricAccumulator& other);
  bool operator==(const MetricAccumulator&) const = default;
};

Metrics compute_metrics(const MetricAccumulator& acc);

/// 1 where prob > threshold.
Mask binarize(const ImageF& prob, double threshold);

struct RocPoint {
  double threshold = 0;
  double fa = 0;
  double pd = 0;
};

/// One (Fa, Pd) point per threshold; thresholds must be strictly descending
/// inside (0, 1).
std::vector<RocPoint> roc_sweep(std::span<const ImageF> probs, std::span<const Mask> gts,
                                std::span<const double> thresholds,
                                const MatchConfig& cfg = {});

/// Number formatting shared by every CSV writer (10 significant digits).
std::string format_number(double v);

/// `metric,value` rows for iou, pd, fa.
void write_metrics_csv(std::ostream& os, const Metrics& m);
/// `threshold,fa,pd` rows.
void write_roc_csv(std::ostream& os, const std::vector<RocPoint>& points);

}  // namespace rrca
