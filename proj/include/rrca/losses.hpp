#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rrca/tape.hpp"

namespace rrca {

enum class LossKind { Dice, Poly, TopK, SoftIou, Ce, DiceTopK, PolyTopK, DpTk };

std::string to_string(LossKind k);
LossKind parse_loss_kind(std::string_view s);

struct LossConfig {
  LossKind kind = LossKind::DpTk;
  double alpha = 3.1;
  double k_percent = 10.0;

  void validate() const;
};

/// Loss value with its gradient with respect to every probability.
template <typename T>
struct LossEval {
  double value = 0;
  std::vector<T> grad;
};

// All losses read one sigmoid channel as the two-class pair (p, 1 - p) with
// labels (g, 1 - g). `p` must be finite and inside [0, 1]; `g` must be 0/1.
// V is the element count of the whole batch.

template <typename T>
LossEval<T> ce_loss(std::span<const T> p, std::span<const T> g);

template <typename T>
LossEval<T> dice_loss(std::span<const T> p, std::span<const T> g);

template <typename T>
LossEval<T> poly_loss(std::span<const T> p, std::span<const T> g, double alpha);

/// Sum of per-pixel cross-entropy over the ceil(k% * V) worst pixels, divided
/// by V. Equal losses are ranked by pixel index.
template <typename T>
LossEval<T> topk_loss(std::span<const T> p, std::span<const T> g, double k_percent);

template <typename T>
LossEval<T> softiou_loss(std::span<const T> p, std::span<const T> g);

template <typename T>
LossEval<T> evaluate_loss(std::span<const T> p, std::span<const T> g, const LossConfig& cfg);

/// Records the configured loss of prediction `p` against labels `g` on the
/// tape and returns the (1, 1, 1, 1) scalar.
template <typename T>
Var<T> loss(Var<T> p, const Tensor<T>& g, const LossConfig& cfg);

/// Mean of the configured loss over several predictions of the same labels
/// (deep supervision).
template <typename T>
Var<T> mean_loss(std::span<const Var<T>> ps, const Tensor<T>& g, const LossConfig& cfg);

struct LossCurveRow {
  double p = 0;
  LossKind kind = LossKind::Ce;
  double value = 0;
  double grad = 0;
};

/// Loss and dloss/dp of a single positive pixel (g = 1) for every loss kind at
/// every p of `grid`.
std::vector<LossCurveRow> emit_loss_curves(double alpha, double k_percent,
                                           std::span<const double> grid);

/// CSV with header `p,kind,value,grad`.
void write_loss_curves(std::ostream& os, const std::vector<LossCurveRow>& rows);

}  // namespace rrca
