#include "rrca/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "rrca/ops.hpp"

namespace rrca {

namespace {

constexpr double kLogClamp = 1e-12;
constexpr double kOverlapEps = 1e-6;

template <typename T>
void check_pair(std::span<const T> p, std::span<const T> g) {
  if (p.size() != g.size()) {
    throw std::invalid_argument("loss: prediction has " + std::to_string(p.size()) +
                                " elements, labels have " + std::to_string(g.size()));
  }
  if (p.empty()) throw std::invalid_argument("loss: empty prediction");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!std::isfinite(static_cast<double>(p[i])) || p[i] < T(0) || p[i] > T(1)) {
      throw std::invalid_argument("loss: prediction " + std::to_string(p[i]) + " at index " +
                                  std::to_string(i) + " is not a probability");
    }
    if (g[i] != T(0) && g[i] != T(1)) {
      throw std::invalid_argument("loss: label at index " + std::to_string(i) +
                                  " is not binary");
    }
  }
}

// Two-class cross-entropy of one pixel and its derivative in p.
struct PixelCe {
  double value;
  double grad;
};

PixelCe pixel_ce(double p, double g) {
  PixelCe r{0, 0};
  if (g > 0.5) {
    r.value = -std::log(std::max(p, kLogClamp));
    r.grad = p > kLogClamp ? -1.0 / p : 0.0;
  } else {
    const double q = 1.0 - p;
    r.value = -std::log(std::max(q, kLogClamp));
    r.grad = q > kLogClamp ? 1.0 / q : 0.0;
  }
  return r;
}

template <typename T>
void accumulate(LossEval<T>& into, const LossEval<T>& part) {
  into.value += part.value;
  if (into.grad.empty()) into.grad.assign(part.grad.size(), T(0));
  for (std::size_t i = 0; i < part.grad.size(); ++i) into.grad[i] += part.grad[i];
}

}  // namespace

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::Dice: return "dice";
    case LossKind::Poly: return "poly";
    case LossKind::TopK: return "topk";
    case LossKind::SoftIou: return "softiou";
    case LossKind::Ce: return "ce";
    case LossKind::DiceTopK: return "dice_topk";
    case LossKind::PolyTopK: return "poly_topk";
    case LossKind::DpTk: return "dptk";
  }
  return "?";
}

LossKind parse_loss_kind(std::string_view s) {
  for (LossKind k : {LossKind::Dice, LossKind::Poly, LossKind::TopK, LossKind::SoftIou,
                     LossKind::Ce, LossKind::DiceTopK, LossKind::PolyTopK, LossKind::DpTk}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown loss kind '" + std::string(s) +
                              "' (expected dice, poly, topk, softiou, ce, dice_topk, "
                              "poly_topk, dptk)");
}

void LossConfig::validate() const {
  if (!(alpha >= 0)) throw std::invalid_argument("loss alpha must be >= 0");
  if (!(k_percent > 0 && k_percent <= 100)) {
    throw std::invalid_argument("loss k_percent must lie in (0, 100]");
  }
}

template <typename T>
LossEval<T> ce_loss(std::span<const T> p, std::span<const T> g) {
  check_pair(p, g);
  const double inv_v = 1.0 / static_cast<double>(p.size());
  LossEval<T> r;
  r.grad.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const PixelCe c = pixel_ce(p[i], g[i]);
    r.value += c.value;
    r.grad[i] = static_cast<T>(c.grad * inv_v);
  }
  r.value *= inv_v;
  return r;
}

template <typename T>
LossEval<T> dice_loss(std::span<const T> p, std::span<const T> g) {
  check_pair(p, g);
  // Summed over both classes, sum(p) + sum(1 - p) = V, same for g, so the
  // denominator is the constant 2V.
  double inter = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * g[i] + (1.0 - p[i]) * (1.0 - g[i]);
  }
  const double denom = 2.0 * static_cast<double>(p.size()) + kOverlapEps;
  LossEval<T> r;
  r.value = 1.0 - 2.0 * inter / denom;
  r.grad.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    r.grad[i] = static_cast<T>(-2.0 * (2.0 * g[i] - 1.0) / denom);
  }
  return r;
}

template <typename T>
LossEval<T> poly_loss(std::span<const T> p, std::span<const T> g, double alpha) {
  LossEval<T> r = ce_loss(p, g);
  const double inv_v = 1.0 / static_cast<double>(p.size());
  double agree = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    agree += static_cast<double>(g[i]) * p[i] + (1.0 - g[i]) * (1.0 - p[i]);
    r.grad[i] += static_cast<T>(-alpha * (2.0 * g[i] - 1.0) * inv_v);
  }
  r.value += alpha * (1.0 - agree * inv_v);
  return r;
}

template <typename T>
LossEval<T> topk_loss(std::span<const T> p, std::span<const T> g, double k_percent) {
  check_pair(p, g);
  if (!(k_percent > 0 && k_percent <= 100)) {
    throw std::invalid_argument("top-k: k_percent must lie in (0, 100]");
  }
  const std::size_t v = p.size();
  const double inv_v = 1.0 / static_cast<double>(v);
  std::vector<PixelCe> ce(v);
  for (std::size_t i = 0; i < v; ++i) ce[i] = pixel_ce(p[i], g[i]);

  std::size_t keep = static_cast<std::size_t>(std::ceil(k_percent / 100.0 * v - 1e-9));
  keep = std::clamp<std::size_t>(keep, 1, v);
  std::vector<std::size_t> order(v);
  std::iota(order.begin(), order.end(), 0);
  auto worse = [&](std::size_t a, std::size_t b) {
    return ce[a].value != ce[b].value ? ce[a].value > ce[b].value : a < b;
  };
  if (keep < v) std::nth_element(order.begin(), order.begin() + keep, order.end(), worse);

  LossEval<T> r;
  r.grad.assign(v, T(0));
  // Sum in index order so the value does not depend on the selection layout.
  std::vector<char> chosen(v, 0);
  for (std::size_t j = 0; j < keep; ++j) chosen[order[j]] = 1;
  for (std::size_t i = 0; i < v; ++i) {
    if (!chosen[i]) continue;
    r.value += ce[i].value;
    r.grad[i] = static_cast<T>(ce[i].grad * inv_v);
  }
  r.value *= inv_v;
  return r;
}

template <typename T>
LossEval<T> softiou_loss(std::span<const T> p, std::span<const T> g) {
  check_pair(p, g);
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * g[i];
    sp += p[i];
    sg += g[i];
  }
  const double uni = sp + sg - inter + kOverlapEps;
  LossEval<T> r;
  r.value = 1.0 - inter / uni;
  r.grad.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    // d(inter)/dp = g, d(uni)/dp = 1 - g
    const double d = -(g[i] * uni - inter * (1.0 - g[i])) / (uni * uni);
    r.grad[i] = static_cast<T>(d);
  }
  return r;
}

template <typename T>
LossEval<T> evaluate_loss(std::span<const T> p, std::span<const T> g, const LossConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case LossKind::Dice: return dice_loss(p, g);
    case LossKind::Poly: return poly_loss(p, g, cfg.alpha);
    case LossKind::TopK: return topk_loss(p, g, cfg.k_percent);
    case LossKind::SoftIou: return softiou_loss(p, g);
    case LossKind::Ce: return ce_loss(p, g);
    case LossKind::DiceTopK: {
      LossEval<T> r = dice_loss(p, g);
      accumulate(r, topk_loss(p, g, cfg.k_percent));
      return r;
    }
    case LossKind::PolyTopK: {
      LossEval<T> r = poly_loss(p, g, cfg.alpha);
      accumulate(r, topk_loss(p, g, cfg.k_percent));
      return r;
    }
    case LossKind::DpTk: {
      LossEval<T> r = dice_loss(p, g);
      accumulate(r, poly_loss(p, g, cfg.alpha));
      accumulate(r, topk_loss(p, g, cfg.k_percent));
      return r;
    }
  }
  throw std::logic_error("unreachable loss kind");
}

template <typename T>
Var<T> loss(Var<T> p, const Tensor<T>& g, const LossConfig& cfg) {
  if (!(p.shape() == g.shape())) {
    throw std::invalid_argument("loss: prediction " + p.shape().str() + " vs labels " +
                                g.shape().str());
  }
  Tape<T>& tape = *p.tape;
  LossEval<T> ev = evaluate_loss<T>(p.value().data(), g.data(), cfg);
  Tensor<T> out(Shape{}, static_cast<T>(ev.value));
  const int pid = p.id;
  const int yid = static_cast<int>(tape.size());
  return tape.record(OpKind::Loss, {pid}, std::move(out),
                     [pid, yid, grad = std::move(ev.grad)](Tape<T>& tp) {
                       const T up = tp.grad(yid)[0];
                       auto dp = tp.grad(pid);
                       for (std::size_t i = 0; i < grad.size(); ++i) dp[i] += up * grad[i];
                     });
}

template <typename T>
Var<T> mean_loss(std::span<const Var<T>> ps, const Tensor<T>& g, const LossConfig& cfg) {
  if (ps.empty()) throw std::invalid_argument("mean_loss: no predictions");
  Var<T> total = loss(ps[0], g, cfg);
  for (std::size_t i = 1; i < ps.size(); ++i) total = add(total, loss(ps[i], g, cfg));
  if (ps.size() == 1) return total;
  return scale(total, static_cast<T>(1.0 / static_cast<double>(ps.size())));
}

std::vector<LossCurveRow> emit_loss_curves(double alpha, double k_percent,
                                           std::span<const double> grid) {
  const LossKind kinds[] = {LossKind::Dice, LossKind::Poly, LossKind::TopK,
                            LossKind::SoftIou, LossKind::Ce, LossKind::DiceTopK,
                            LossKind::PolyTopK, LossKind::DpTk};
  std::vector<LossCurveRow> rows;
  const double one = 1.0;
  for (double p : grid) {
    if (!(p > 0 && p < 1)) throw std::invalid_argument("loss curve p must lie in (0, 1)");
    for (LossKind k : kinds) {
      LossConfig cfg{k, alpha, k_percent};
      LossEval<double> ev = evaluate_loss<double>(std::span(&p, 1), std::span(&one, 1), cfg);
      rows.push_back({p, k, ev.value, ev.grad[0]});
    }
  }
  return rows;
}

void write_loss_curves(std::ostream& os, const std::vector<LossCurveRow>& rows) {
  os << "p,kind,value,grad\n";
  const auto old = os.precision(10);
  for (const auto& r : rows) {
    os << r.p << ',' << to_string(r.kind) << ',' << r.value << ',' << r.grad << '\n';
  }
  os.precision(old);
}

#define RRCA_INSTANTIATE_LOSSES(T)                                                       \
  template LossEval<T> ce_loss<T>(std::span<const T>, std::span<const T>);               \
  template LossEval<T> dice_loss<T>(std::span<const T>, std::span<const T>);             \
  template LossEval<T> poly_loss<T>(std::span<const T>, std::span<const T>, double);     \
  template LossEval<T> topk_loss<T>(std::span<const T>, std::span<const T>, double);     \
  template LossEval<T> softiou_loss<T>(std::span<const T>, std::span<const T>);          \
  template LossEval<T> evaluate_loss<T>(std::span<const T>, std::span<const T>,          \
                                        const LossConfig&);                              \
  template Var<T> loss<T>(Var<T>, const Tensor<T>&, const LossConfig&);                  \
  template Var<T> mean_loss<T>(std::span<const Var<T>>, const Tensor<T>&, const LossConfig&);

RRCA_INSTANTIATE_LOSSES(float)
RRCA_INSTANTIATE_LOSSES(double)

#undef RRCA_INSTANTIATE_LOSSES

}  // namespace rrca
