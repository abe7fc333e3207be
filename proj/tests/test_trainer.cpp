#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "rrca/init.hpp"
#include "rrca/trainer.hpp"
#include "support/temp_dir.hpp"

using namespace rrca;
namespace fs = std::filesystem;

namespace {

NetworkConfig micro_net(int iterations = 1) {
  NetworkConfig c;
  c.channels = {4, 8};
  c.blocks = {1, 1};
  c.iterations = iterations;
  c.attention_reduction = 2;
  c.seed = 5;
  return c;
}

TrainConfig micro_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 4;
  t.crop = 32;
  t.seed = 9;
  return t;
}

struct Split {
  std::vector<Sample> train, test;
};

Split micro_data(int n_train = 8, int n_test = 4) {
  SynthConfig s;
  s.image_size = 32;
  s.seed = 3;
  Split d;
  for (int i = 0; i < n_train; ++i) d.train.push_back(synth_sample(s, i));
  for (int i = 0; i < n_test; ++i) d.test.push_back(synth_sample(s, 100 + i));
  return d;
}

TrainRun into(const fs::path& dir, int stop_after = -1) {
  TrainRun r;
  r.out_dir = dir;
  r.stop_after = stop_after;
  return r;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

bool same_params(const RrcaNet<float>& a, const RrcaNet<float>& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->name != pb[i]->name) return false;
    const auto va = pa[i]->value.data(), vb = pb[i]->value.data();
    if (va.size() != vb.size() || std::memcmp(va.data(), vb.data(), va.size_bytes()) != 0) return false;
  }
  const auto sa = a.running_stats(), sb = b.running_stats();
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i].second->mean != sb[i].second->mean || sa[i].second->var != sb[i].second->var) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("adagrad closed form") {
  Parameter<double> p("x", Tensor<double>(Shape{1, 1, 1, 1}, 0.0));
  std::vector<Parameter<double>*> ps{&p};
  AdaGradState<double> st;

  adagrad_step<double>(ps, st, 1.0);  // zero gradient
  CHECK(p.value[0] == 0.0);

  p.grad[0] = 1;
  adagrad_step<double>(ps, st, 1.0);
  CHECK(p.value[0] == doctest::Approx(-1.0 / (1.0 + 1e-10)).epsilon(1e-15));
  CHECK(p.grad[0] == 0.0);
  p.grad[0] = 1;
  adagrad_step<double>(ps, st, 1.0);
  CHECK(p.value[0] ==
        doctest::Approx(-1.0 / (1.0 + 1e-10) - 1.0 / (std::sqrt(2.0) + 1e-10)).epsilon(1e-15));
  CHECK(st.acc[0][0] == 2.0);

  p.grad[0] = std::numeric_limits<double>::quiet_NaN();
  const double before = p.value[0];
  CHECK_THROWS_AS(adagrad_step<double>(ps, st, 1.0), TrainingDiverged);
  CHECK(p.value[0] == before);
  CHECK(st.acc[0][0] == 2.0);
}

TEST_CASE("adagrad minimizes a quadratic bowl monotonically") {
  // f(x) = sum a_i (x_i - c_i)^2
  const std::vector<double> a{1.0, 4.0, 0.25}, c{1.0, -2.0, 3.0};
  Parameter<double> p("x", Tensor<double>(Shape{1, 3, 1, 1}, 0.0));
  std::vector<Parameter<double>*> ps{&p};
  AdaGradState<double> st;
  auto f = [&] {
    double s = 0;
    for (int i = 0; i < 3; ++i) s += a[i] * (p.value[i] - c[i]) * (p.value[i] - c[i]);
    return s;
  };
  const double f0 = f();
  double prev = f0;
  for (int step = 0; step < 2000; ++step) {
    for (int i = 0; i < 3; ++i) p.grad[i] = 2 * a[i] * (p.value[i] - c[i]);
    adagrad_step<double>(ps, st, 0.5);
    const double cur = f();
    REQUIRE(cur <= prev + 1e-15);
    prev = cur;
  }
  CHECK(prev < 1e-6 * f0);

  // with constant |g| the per-coordinate step lr / sqrt(acc) shrinks
  Parameter<double> q("q", Tensor<double>(Shape{1, 1, 1, 1}, 0.0));
  std::vector<Parameter<double>*> qs{&q};
  AdaGradState<double> sq;
  double last_step = 1e300;
  for (int k = 0; k < 50; ++k) {
    const double before = q.value[0];
    q.grad[0] = (k % 2) ? 3.0 : -3.0;
    adagrad_step<double>(qs, sq, 0.1);
    const double step = std::abs(q.value[0] - before);
    CHECK(step <= last_step);
    last_step = step;
  }
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 150, 0.05) == 0.05);
  CHECK(cosine_lr(150, 150, 0.05) == 0.0);
  CHECK(cosine_lr(75, 150, 0.05) == doctest::Approx(0.025).epsilon(1e-14));
  CHECK(cosine_lr(1, 4, 2.0) == doctest::Approx(1.0 + std::sqrt(0.5)).epsilon(1e-14));
  for (int e = 1; e <= 150; ++e) CHECK(cosine_lr(e, 150, 0.05) < cosine_lr(e - 1, 150, 0.05));
  CHECK_THROWS_AS(cosine_lr(151, 150, 0.05), std::invalid_argument);
  CHECK_THROWS_AS(cosine_lr(-1, 150, 0.05), std::invalid_argument);
}

TEST_CASE("xavier samples are bounded with the Glorot variance") {
  const Shape s{64, 32, 3, 3};  // fan_in 288, fan_out 576
  const auto w = xavier_init<double>(s, 1, "w");
  const auto f = fans_of(s);
  CHECK(f.fan_in == 288);
  CHECK(f.fan_out == 576);
  const double bound = std::sqrt(6.0 / (f.fan_in + f.fan_out));
  double sum = 0, sq = 0;
  for (double v : w) {
    CHECK(std::abs(v) <= bound);
    sum += v;
    sq += v * v;
  }
  // 18432 draws per tensor; pool several names to pass 1e5
  std::size_t n = w.size();
  for (int k = 0; k < 5; ++k) {
    for (double v : xavier_init<double>(s, 1, "extra" + std::to_string(k))) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  REQUIRE(n >= 100000);
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(var == doctest::Approx(2.0 / (f.fan_in + f.fan_out)).epsilon(0.10));
  CHECK(xavier_init<float>(s, 1, "w") == xavier_init<float>(s, 1, "w"));
  CHECK(xavier_init<float>(s, 1, "w") != xavier_init<float>(s, 1, "v"));
  CHECK(xavier_init<float>(s, 1, "w") != xavier_init<float>(s, 2, "w"));
}

TEST_CASE("checkpoint round trip is exact") {
  rrca::testing::TempDir dir;
  RrcaNet<float> model(micro_net());
  Rng noise(1);
  for (auto* p : model.parameters()) {
    for (auto& v : p->value.data()) v += static_cast<float>(noise.normal() * 0.01);
  }
  for (auto& [name, rs] : model.running_stats()) {
    for (auto& v : rs->mean) v = static_cast<float>(noise.uniform());
    for (auto& v : rs->var) v = static_cast<float>(1 + noise.uniform());
  }
  TrainConfig cfg = micro_train(7);
  cfg.loss.alpha = 2.5;
  TrainState st = initial_state(cfg);
  for (auto* p : model.parameters()) {
    st.optimizer.acc.emplace_back(p->value.numel());
    for (auto& v : st.optimizer.acc.back()) v = static_cast<float>(noise.uniform());
  }
  st.rng.next();
  st.epochs_done = 3;
  st.best_iou = 0.625;
  st.best_epoch = 1;
  st.log = std::string(kLogHeader) + "\n0,0.05,1.5,,,\n";
  save_checkpoint(dir.path() / "a.ckpt", model, cfg, st);

  auto loaded = load_checkpoint(dir.path() / "a.ckpt");
  CHECK(same_params(model, loaded.model));
  const Checkpoint& m = loaded.meta;
  CHECK(m.network.channels == model.config().channels);
  CHECK(m.network.iterations == 1);
  CHECK(m.network.attention_reduction == 2);
  CHECK(m.train.loss.alpha == 2.5);
  CHECK(m.train.epochs == 7);
  CHECK(m.state.epochs_done == 3);
  CHECK(m.state.best_iou == 0.625);
  CHECK(m.state.best_epoch == 1);
  CHECK(m.state.log == st.log);
  CHECK(m.state.optimizer.acc == st.optimizer.acc);
  Rng r1 = st.rng, r2 = m.state.rng;
  CHECK(r1.next() == r2.next());

  save_checkpoint(dir.path() / "b.ckpt", loaded.model, m.train, m.state);
  CHECK(read_file(dir.path() / "a.ckpt") == read_file(dir.path() / "b.ckpt"));

  std::string bytes = read_file(dir.path() / "a.ckpt");
  bytes[4] = 9;  // version field
  std::ofstream(dir.path() / "v.ckpt", std::ios::binary) << bytes;
  try {
    load_checkpoint(dir.path() / "v.ckpt");
    FAIL("version mismatch accepted");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("version 9") != std::string::npos);
  }
  std::ofstream(dir.path() / "m.ckpt", std::ios::binary) << "JUNKJUNKJUNK";
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "m.ckpt"), CheckpointError);
  std::ofstream(dir.path() / "t.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "t.ckpt"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "none.ckpt"), CheckpointError);
}

TEST_CASE("training log, determinism and bit-exact resume") {
  rrca::testing::TempDir a, b, c;
  const Split d = micro_data();
  TrainConfig cfg = micro_train(4);
  cfg.eval_every = 2;

  RrcaNet<float> ma(micro_net());
  auto ra = train(ma, d.train, d.test, cfg, initial_state(cfg), into(a.path()));
  const std::string log = read_file(a.path() / "log.csv");
  CHECK(log == ra.state.log);
  CHECK(fs::exists(a.path() / "last.ckpt"));
  CHECK(fs::exists(a.path() / "best.ckpt"));

  std::istringstream rows(log);
  std::string line;
  std::getline(rows, line);
  CHECK(line == kLogHeader);
  for (int e = 0; e < 4; ++e) {
    REQUIRE(std::getline(rows, line));
    const std::string prefix = std::to_string(e) + "," + format_number(cosine_lr(e, 4, cfg.lr0)) + ",";
    CHECK(line.rfind(prefix, 0) == 0);
    const bool evaluated = e % 2 == 1;
    CHECK((line.substr(line.size() - 3) == ",,,") == !evaluated);
  }

  // the final logged metrics are those of last.ckpt
  auto last = load_checkpoint(a.path() / "last.ckpt");
  CHECK(same_params(ma, last.model));
  const Metrics m = evaluate(last.model, d.test, cfg.match, cfg.batch_size);
  CHECK(line.substr(line.find(',', line.find(',', line.find(',') + 1) + 1) + 1) ==
        format_number(m.iou) + "," + format_number(m.pd) + "," + format_number(m.fa));

  // same seed, fresh model: identical bytes
  RrcaNet<float> mb(micro_net());
  train(mb, d.train, d.test, cfg, initial_state(cfg), into(b.path()));
  CHECK(read_file(b.path() / "log.csv") == log);
  CHECK(same_params(ma, mb));

  // interrupted after two epochs, resumed from the checkpoint
  {
    RrcaNet<float> mc(micro_net());
    auto rc = train(mc, d.train, d.test, cfg, initial_state(cfg), into(c.path(), 2));
    CHECK(rc.state.epochs_done == 2);
  }
  auto resumed = load_checkpoint(c.path() / "last.ckpt");
  CHECK(resumed.meta.state.epochs_done == 2);
  train(resumed.model, d.train, d.test, resumed.meta.train, resumed.meta.state, into(c.path()));
  CHECK(read_file(c.path() / "log.csv") == log);
  CHECK(same_params(ma, resumed.model));
  CHECK(read_file(c.path() / "last.ckpt") == read_file(a.path() / "last.ckpt"));
}

TEST_CASE("divergence keeps the last good checkpoint") {
  rrca::testing::TempDir dir;
  Split d = micro_data(4, 2);
  TrainConfig cfg = micro_train(3);
  RrcaNet<float> model(micro_net(0));
  train(model, d.train, d.test, cfg, initial_state(cfg), into(dir.path(), 1));
  const std::string good = read_file(dir.path() / "last.ckpt");

  for (auto& s : d.train) s.image.px[5] = std::numeric_limits<float>::quiet_NaN();
  auto ck = load_checkpoint(dir.path() / "last.ckpt");
  CHECK_THROWS_AS(train(ck.model, d.train, d.test, ck.meta.train, ck.meta.state, into(dir.path())),
                  TrainingDiverged);
  CHECK(read_file(dir.path() / "last.ckpt") == good);
}

TEST_CASE("one-sample overfit") {
  SynthConfig s;
  s.image_size = 32;
  s.targets_min = 2;
  s.seed = 4;
  const std::vector<Sample> one{synth_sample(s, 0)};
  NetworkConfig net;
  net.channels = {4, 8, 16, 32};
  net.iterations = 2;
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.batch_size = 1;
  cfg.crop = 32;
  cfg.eval_every = 1000;
  RrcaNet<float> model(net);
  double best = 1e9;
  int steps = 0;
  TrainRun run;
  run.on_epoch = [&](const std::string& row) {
    ++steps;
    const auto a = row.find(',') + 1;
    const auto b = row.find(',', a) + 1;
    best = std::min(best, std::stod(row.substr(b, row.find(',', b) - b)));
  };
  train(model, one, {}, cfg, initial_state(cfg), run);
  CHECK(steps == 300);
  CHECK(best < 0.05);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.lr0 = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.loss.k_percent = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  RrcaNet<float> model(micro_net(0));
  CHECK_THROWS_AS(train(model, {}, {}, micro_train(1), initial_state(micro_train(1))), std::invalid_argument);
}
