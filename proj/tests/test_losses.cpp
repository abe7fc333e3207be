#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "rrca/losses.hpp"
#include "rrca/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace rrca;
using rrca::testing::gradcheck;
using namespace rrca::testing::loss_oracles;

namespace {

const LossKind kAllKinds[] = {LossKind::Dice,     LossKind::Poly,     LossKind::TopK,
                              LossKind::SoftIou,  LossKind::Ce,       LossKind::DiceTopK,
                              LossKind::PolyTopK, LossKind::DpTk};

double value(LossKind k, const Vec& p, const Vec& g, double alpha = 3.1, double kp = 10) {
  return evaluate_loss<double>(p, g, LossConfig{k, alpha, kp}).value;
}

}  // namespace

TEST_CASE("dice loss examples") {
  CHECK(value(LossKind::Dice, {1, 0, 0, 1}, {1, 0, 0, 1}) == doctest::Approx(0).epsilon(1e-6));
  CHECK(value(LossKind::Dice, {0, 1, 1, 0}, {1, 0, 0, 1}) == doctest::Approx(1));
  // two classes (p, g) and (1 - p, 1 - g), evaluated term by term
  const double num = 2 * (0.8 * 1 + 0.2 * 0 + 0.2 * 0 + 0.8 * 1);
  const double den = (0.8 + 0.2) + (0.2 + 0.8) + (1 + 0) + (0 + 1) + 1e-6;
  CHECK(value(LossKind::Dice, {0.8, 0.2}, {1, 0}) == doctest::Approx(1 - num / den).epsilon(1e-12));
}

TEST_CASE("poly loss examples") {
  std::mt19937_64 rng(1);
  auto pr = random_pair(rng, 32);
  CHECK(value(LossKind::Poly, pr.p, pr.g, 0.0) == value(LossKind::Ce, pr.p, pr.g));
  CHECK(std::abs(value(LossKind::Poly, {1, 0, 1}, {1, 0, 1})) < 1e-12);
  const double expect = std::log(2.0) + 3.1 * (1 - 0.5);
  CHECK(value(LossKind::Poly, {0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("top-k loss examples") {
  std::mt19937_64 rng(2);
  auto pr = random_pair(rng, 40);
  CHECK(value(LossKind::TopK, pr.p, pr.g, 3.1, 100) ==
        doctest::Approx(value(LossKind::Ce, pr.p, pr.g)).epsilon(1e-12));

  Vec p(100, 1.0), g(100, 1.0);
  p[37] = 0.1;
  CHECK(value(LossKind::TopK, p, g, 3.1, 1) == doctest::Approx(-std::log(0.1) / 100));

  for (int inst = 0; inst < 20; ++inst) {
    auto q = random_pair(rng, 16);
    Vec ce;
    for (int i = 0; i < 16; ++i) ce.push_back(ce_oracle(q.p[i], q.g[i]));
    std::sort(ce.rbegin(), ce.rend());
    const double brute = (ce[0] + ce[1] + ce[2] + ce[3]) / 16;
    CHECK(value(LossKind::TopK, q.p, q.g, 3.1, 25) == doctest::Approx(brute).epsilon(1e-12));
  }
}

TEST_CASE("top-k ties at the cutoff go to the lower index") {
  Vec p = {0.5, 0.5, 0.5, 0.9}, g = {1, 1, 1, 1};
  auto ev = evaluate_loss<double>(p, g, LossConfig{LossKind::TopK, 0, 50});
  CHECK(ev.grad[0] != 0.0);
  CHECK(ev.grad[1] != 0.0);
  CHECK(ev.grad[2] == 0.0);
  CHECK(ev.grad[3] == 0.0);
}

TEST_CASE("softiou loss examples") {
  CHECK(value(LossKind::SoftIou, {1, 0, 1}, {1, 0, 1}) == doctest::Approx(0).epsilon(1e-6));
  CHECK(value(LossKind::SoftIou, {0, 1, 0}, {1, 0, 0}) == doctest::Approx(1));
  std::mt19937_64 rng(3);
  auto pr = random_pair(rng, 8);
  double i = 0, sp = 0, sg = 0;
  for (int k = 0; k < 8; ++k) {
    i += pr.p[k] * pr.g[k];
    sp += pr.p[k];
    sg += pr.g[k];
  }
  CHECK(value(LossKind::SoftIou, pr.p, pr.g) ==
        doctest::Approx(1 - i / (sp + sg - i + 1e-6)).epsilon(1e-12));
}

TEST_CASE("dptk loss is the exact sum of its parts") {
  CHECK(value(LossKind::DpTk, {1, 0, 0, 1}, {1, 0, 0, 1}) == doctest::Approx(0).epsilon(1e-6));
  std::mt19937_64 rng(4);
  for (int inst = 0; inst < 20; ++inst) {
    auto pr = random_pair(rng, 64);
    const double parts = value(LossKind::Dice, pr.p, pr.g) + value(LossKind::Poly, pr.p, pr.g) +
                         value(LossKind::TopK, pr.p, pr.g);
    CHECK(std::abs(value(LossKind::DpTk, pr.p, pr.g) - parts) < 1e-9);
    CHECK(std::abs(value(LossKind::DiceTopK, pr.p, pr.g) -
                   value(LossKind::Dice, pr.p, pr.g) - value(LossKind::TopK, pr.p, pr.g)) < 1e-9);
  }
}

TEST_CASE("every loss is nonnegative and vanishes on a perfect prediction") {
  std::mt19937_64 rng(5);
  for (LossKind k : kAllKinds) {
    for (int inst = 0; inst < 10; ++inst) {
      auto pr = random_pair(rng, 30, 0.0, 1.0);
      CHECK(value(k, pr.p, pr.g) >= 0);
      CHECK(value(k, pr.g, pr.g) == doctest::Approx(0).epsilon(1e-6));
    }
  }
}

TEST_CASE("top-k at 100% and poly at alpha 0 reproduce cross-entropy") {
  std::mt19937_64 rng(6);
  for (int inst = 0; inst < 100; ++inst) {
    auto pr = random_pair(rng, 50, 0.0, 1.0);
    const double ce = value(LossKind::Ce, pr.p, pr.g);
    CHECK(std::abs(value(LossKind::TopK, pr.p, pr.g, 3.1, 100) - ce) < 1e-9);
    CHECK(std::abs(value(LossKind::Poly, pr.p, pr.g, 0.0) - ce) < 1e-9);
  }
}

TEST_CASE("loss gradients match finite differences") {
  for (LossKind k : kAllKinds) {
    for (int inst = 0; inst < 10; ++inst) {
      std::mt19937_64 rng(200 + inst);
      Pair pr = separated_pair(rng, 64);
      Tensor<double> p(Shape{1, 1, 8, 8}, pr.p);
      Tensor<double> g(Shape{1, 1, 8, 8}, pr.g);
      const LossConfig cfg{k, 3.1, 10};
      auto r = gradcheck({p}, [&](Tape<double>&, const std::vector<Var<double>>& in) {
        return loss(in[0], g, cfg);
      });
      INFO(to_string(k) << " instance " << inst);
      CHECK(r.max_rel < 1e-5);
    }
  }
}

TEST_CASE("loss node chains through the tape") {
  Tape<double> tape;
  Tensor<double> g(Shape{1, 1, 1, 2}, {1.0, 0.0});
  auto p = tape.input(Tensor<double>(Shape{1, 1, 1, 2}, {0.25, 0.25}), true);
  auto l = scale(loss(p, g, LossConfig{LossKind::Ce, 0, 100}), 2.0);
  tape.backward(l);
  auto dp = tape.grad_of(p);
  CHECK(dp[0] == doctest::Approx(2 * -1.0 / 0.25 / 2));
  CHECK(dp[1] == doctest::Approx(2 * 1.0 / 0.75 / 2));

  // deep supervision averages the heads
  Tape<double> t2;
  auto a = t2.input(Tensor<double>(Shape{1, 1, 1, 2}, {0.9, 0.2}));
  auto b = t2.input(Tensor<double>(Shape{1, 1, 1, 2}, {0.6, 0.3}));
  std::vector<Var<double>> heads{a, b};
  const LossConfig cfg{};
  const double expect = (value(cfg.kind, {0.9, 0.2}, {1, 0}) + value(cfg.kind, {0.6, 0.3}, {1, 0})) / 2;
  CHECK(mean_loss<double>(heads, g, cfg).value()[0] == doctest::Approx(expect));
}

TEST_CASE("float and double evaluations agree") {
  std::mt19937_64 rng(7);
  auto pr = random_pair(rng, 256);
  std::vector<float> pf(pr.p.begin(), pr.p.end()), gf(pr.g.begin(), pr.g.end());
  Vec pd(pf.begin(), pf.end());
  for (LossKind k : kAllKinds) {
    const double vf = evaluate_loss<float>(pf, gf, LossConfig{k, 3.1, 10}).value;
    CHECK(vf == doctest::Approx(value(k, pd, pr.g)).epsilon(1e-9));
  }
}

TEST_CASE("loss input validation") {
  CHECK_THROWS_AS(value(LossKind::Ce, {0.5, 0.5}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(value(LossKind::Ce, {0.5}, {0.5}), std::invalid_argument);
  CHECK_THROWS_AS(value(LossKind::Ce, {1.5}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(value(LossKind::Ce, {std::nan("")}, {1}), std::invalid_argument);
  CHECK_THROWS_AS(value(LossKind::TopK, {0.5}, {1}, 3.1, 0), std::invalid_argument);
  CHECK_THROWS_AS(value(LossKind::Poly, {0.5}, {1}, -1), std::invalid_argument);
  CHECK_THROWS_AS(parse_loss_kind("focal"), std::invalid_argument);
  CHECK(parse_loss_kind("dptk") == LossKind::DpTk);
}

TEST_CASE("loss curves for a single positive pixel") {
  Vec grid;
  for (int i = 1; i <= 99; ++i) grid.push_back(i / 100.0);
  auto rows = emit_loss_curves(3.1, 10, grid);
  CHECK(rows.size() == grid.size() * 8);
  std::vector<double> dptk, dice;
  for (const auto& r : rows) {
    CHECK(r.grad < 0);
    if (r.kind == LossKind::DpTk) dptk.push_back(r.value);
    if (r.kind == LossKind::Dice) dice.push_back(r.value);
    if (r.kind == LossKind::Ce && r.p == 0.5) CHECK(r.value == doctest::Approx(-std::log(0.5)));
  }
  for (std::size_t i = 0; i < dptk.size(); ++i) {
    CHECK(dptk[i] > dice[i]);
    if (i > 0) CHECK(dptk[i] < dptk[i - 1]);
  }
  std::ostringstream os;
  write_loss_curves(os, rows);
  CHECK(os.str().rfind("p,kind,value,grad\n0.01,dice,", 0) == 0);
  CHECK_THROWS_AS(emit_loss_curves(3.1, 10, Vec{1.0}), std::invalid_argument);
}
