#include "rrca/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <tuple>

namespace rrca {

LabeledMask label_components(const Mask& mask) {
  LabeledMask out;
  out.h = mask.h;
  out.w = mask.w;
  out.labels.assign(mask.size(), 0);
  std::vector<int> queue;
  queue.reserve(64);
  for (int y0 = 0; y0 < mask.h; ++y0) {
    for (int x0 = 0; x0 < mask.w; ++x0) {
      const std::size_t start = static_cast<std::size_t>(y0) * mask.w + x0;
      if (!mask.px[start] || out.labels[start]) continue;
      const int label = out.count() + 1;
      double sx = 0, sy = 0;
      int area = 0;
      queue.assign(1, static_cast<int>(start));
      out.labels[start] = label;
      for (std::size_t head = 0; head < queue.size(); ++head) {
        const int idx = queue[head];
        const int y = idx / mask.w, x = idx % mask.w;
        sx += x;
        sy += y;
        ++area;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= mask.h || nx < 0 || nx >= mask.w) continue;
            const std::size_t n = static_cast<std::size_t>(ny) * mask.w + nx;
            if (mask.px[n] && !out.labels[n]) {
              out.labels[n] = label;
              queue.push_back(static_cast<int>(n));
            }
          }
        }
      }
      out.areas.push_back(area);
      out.centroids.push_back({sx / area, sy / area});
    }
  }
  return out;
}

void MatchConfig::validate() const {
  if (!(d_thresh > 0)) throw std::invalid_argument("d_thresh must be > 0");
  if (!(binarize_threshold > 0 && binarize_threshold < 1)) {
    throw std::invalid_argument("binarize_threshold must lie in (0, 1)");
  }
}

MatchResult match_targets(const LabeledMask& pred, const LabeledMask& gt,
                          const MatchConfig& cfg) {
  cfg.validate();
  if (pred.h != gt.h || pred.w != gt.w) {
    throw std::invalid_argument("match_targets: prediction " + std::to_string(pred.h) + "x" +
                                std::to_string(pred.w) + " vs ground truth " +
                                std::to_string(gt.h) + "x" + std::to_string(gt.w));
  }
  std::vector<std::tuple<double, int, int>> pairs;  // (distance, gt, pred)
  for (int g = 0; g < gt.count(); ++g) {
    for (int p = 0; p < pred.count(); ++p) {
      const double d = std::hypot(gt.centroids[g].x - pred.centroids[p].x,
                                  gt.centroids[g].y - pred.centroids[p].y);
      if (d < cfg.d_thresh) pairs.emplace_back(d, g, p);
    }
  }
  std::sort(pairs.begin(), pairs.end());
  std::vector<char> gt_used(gt.count(), 0), pred_used(pred.count(), 0);
  MatchResult r;
  for (const auto& [d, g, p] : pairs) {
    if (gt_used[g] || pred_used[p]) continue;
    gt_used[g] = pred_used[p] = 1;
    ++r.correct;
  }
  for (int p = 0; p < pred.count(); ++p) {
    if (pred_used[p]) continue;
    r.false_components.push_back(p + 1);
    r.false_pixels += pred.areas[p];
  }
  return r;
}

void MetricAccumulator::add(const Mask& pred, const Mask& gt, const MatchConfig& cfg) {
  if (!pred.same_size(gt.h, gt.w)) {
    throw std::invalid_argument("metrics: prediction and ground truth sizes differ");
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.px[i] != 0, g = gt.px[i] != 0;
    inter_px += p && g;
    union_px += p || g;
  }
  const LabeledMask lp = label_components(pred);
  const LabeledMask lg = label_components(gt);
  const MatchResult m = match_targets(lp, lg, cfg);
  correct_targets += m.correct;
  total_targets += lg.count();
  false_pixels += m.false_pixels;
  total_pixels += pred.size();
}

void MetricAccumulator::merge(const MetricAccumulator& o) {
  inter_px += o.inter_px;
  union_px += o.union_px;
  correct_targets += o.correct_targets;
  total_targets += o.total_targets;
  false_pixels += o.false_pixels;
  total_pixels += o.total_pixels;
}

Metrics compute_metrics(const MetricAccumulator& acc) {
  if (acc.total_pixels == 0) throw std::invalid_argument("compute_metrics: no pixels accumulated");
  Metrics m;
  m.iou = acc.union_px == 0 ? 1.0 : static_cast<double>(acc.inter_px) / acc.union_px;
  m.pd = acc.total_targets == 0 ? 1.0
                                : static_cast<double>(acc.correct_targets) / acc.total_targets;
  m.fa = static_cast<double>(acc.false_pixels) / acc.total_pixels;
  return m;
}

Mask binarize(const ImageF& prob, double threshold) {
  Mask m(prob.h, prob.w);
  for (std::size_t i = 0; i < prob.size(); ++i) m.px[i] = prob.px[i] > threshold ? 1 : 0;
  return m;
}

std::vector<RocPoint> roc_sweep(std::span<const ImageF> probs, std::span<const Mask> gts,
                                std::span<const double> thresholds, const MatchConfig& cfg) {
  if (probs.size() != gts.size()) {
    throw std::invalid_argument("roc_sweep: " + std::to_string(probs.size()) +
                                " predictions for " + std::to_string(gts.size()) + " masks");
  }
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0 && thresholds[i] < 1) ||
        (i > 0 && !(thresholds[i] < thresholds[i - 1]))) {
      throw std::invalid_argument("roc_sweep: thresholds must be strictly descending in (0, 1)");
    }
  }
  std::vector<RocPoint> out;
  for (double t : thresholds) {
    MetricAccumulator acc;
    for (std::size_t i = 0; i < probs.size(); ++i) acc.add(binarize(probs[i], t), gts[i], cfg);
    const Metrics m = compute_metrics(acc);
    out.push_back({t, m.fa, m.pd});
  }
  return out;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_metrics_csv(std::ostream& os, const Metrics& m) {
  os << "metric,value\n";
  os << "iou," << format_number(m.iou) << '\n';
  os << "pd," << format_number(m.pd) << '\n';
  os << "fa," << format_number(m.fa) << '\n';
}

void write_roc_csv(std::ostream& os, const std::vector<RocPoint>& points) {
  os << "threshold,fa,pd\n";
  for (const auto& p : points) {
    os << format_number(p.threshold) << ',' << format_number(p.fa) << ',' << format_number(p.pd)
       << '\n';
  }
}

}  // namespace rrca
