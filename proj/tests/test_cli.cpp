#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "rrca/trainer.hpp"
#include "support/temp_dir.hpp"

using namespace rrca;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = rrca::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Second line, first column of the count table.
double count_params(const std::vector<std::string>& flags) {
  std::vector<std::string> args{"count"};
  args.insert(args.end(), flags.begin(), flags.end());
  const auto r = call(args);
  REQUIRE(r.code == 0);
  const auto line = r.out.substr(r.out.find('\n') + 1);
  return std::stod(line.substr(0, line.find(',')));
}

std::vector<std::string> micro_flags(const std::string& data, const std::string& out) {
  return {"--data", data, "--out", out, "--channels", "4,8", "--blocks", "1,1",
          "--attention-reduction", "2", "--crop", "32", "--batch-size", "4", "--quiet"};
}

std::string last_line(const std::string& text) {
  auto end = text.find_last_not_of('\n');
  auto start = text.rfind('\n', end);
  return text.substr(start + 1, end - start);
}

// Dataset of bright square targets on a black background, with masks equal
// to the targets.
void write_square_dataset(const fs::path& root) {
  for (const char* sub : {"images", "masks", "splits"}) fs::create_directories(root / sub);
  std::ofstream split(root / "splits" / "test.txt");
  std::ofstream train(root / "splits" / "train.txt");
  for (int k = 0; k < 4; ++k) {
    Grid<std::uint8_t> img(32, 32, 0);
    const int cy = 5 + 6 * k, cx = 26 - 5 * k;
    for (int y = cy - 1; y <= cy + 1; ++y)
      for (int x = cx - 1; x <= cx + 1; ++x) img.at(y, x) = 255;
    if (k % 2) img.at(28, 3) = 255;  // a second, single-pixel target
    const std::string id = "sq" + std::to_string(k);
    write_pgm(root / "images" / (id + ".pgm"), img);
    write_pgm(root / "masks" / (id + ".pgm"), img);
    split << id << "\n";
    train << id << "\n";
  }
}

// Network that passes the image through unchanged to the head and outputs
// sigmoid(20 x - 10). Every convolution except the stem and head skip paths
// is zeroed, so each residual block reduces to its skip connection and each
// attention fusion returns its shallow input.
void write_oracle_checkpoint(const fs::path& path) {
  NetworkConfig net;
  net.channels = {4, 8};
  net.blocks = {1, 1};
  net.iterations = 1;
  net.attention_reduction = 2;
  RrcaNet<float> model(net);
  for (auto* p : model.parameters()) {
    const bool gamma = p->name.size() > 6 && p->name.ends_with(".gamma");
    p->value.fill(gamma ? 1.0f : 0.0f);
  }
  model.parameter("stem.skip.w").value[0] = 1.0f;
  model.parameter("head.skip.w").value[0] = 1.0f;
  model.parameter("head.out.w").value[0] = 20.0f;
  model.parameter("head.out.b").value[0] = -10.0f;
  TrainConfig cfg;
  save_checkpoint(path, model, cfg, initial_state(cfg));
}

}  // namespace

TEST_CASE("count reproduces the published parameter counts") {
  CHECK(count_params({}) / 1e6 == doctest::Approx(0.202).epsilon(0.05));
  CHECK(count_params({"--channels", "4,8,16,32"}) / 1e6 == doctest::Approx(0.052).epsilon(0.05));
  CHECK(count_params({"--blocks", "4,4,6,3"}) / 1e6 == doctest::Approx(0.363).epsilon(0.05));
  CHECK(count_params({"--blocks", "2,1,1,1"}) / 1e6 == doctest::Approx(0.103).epsilon(0.05));
  CHECK(count_params({"--iterations", "0"}) < count_params({"--iterations", "1"}));
  const auto r = call({"count", "--channels", "8,16,32", "--blocks", "1,1,1", "--attention-reduction", "3"});
  CHECK(r.code != 0);
  CHECK(r.err.find("attention_reduction") != std::string::npos);
}

TEST_CASE("synth, train, eval and predict on a fixture") {
  rrca::testing::TempDir dir;
  const auto data = (dir.path() / "data").string();
  REQUIRE(call({"synth", "--out", data, "--count", "10", "--size", "32", "--seed", "4"}).code == 0);
  CHECK(fs::exists(dir.path() / "data" / "splits" / "train.txt"));

  const auto run = (dir.path() / "run").string();
  auto flags = micro_flags(data, run);
  flags.insert(flags.begin(), "train");
  for (const char* f : {"--epochs", "3", "--iterations", "0"}) flags.push_back(f);
  const auto r = call(flags);
  REQUIRE(r.code == 0);
  for (const char* f : {"log.csv", "last.ckpt", "best.ckpt", "config.toml"}) CHECK(fs::exists(dir.path() / "run" / f));

  // --iterations 0 gives the plain U-shaped network
  auto ck = load_checkpoint(dir.path() / "run" / "last.ckpt");
  CHECK(ck.meta.network.iterations == 0);
  NetworkConfig plain = ck.meta.network;
  CHECK(ck.model.count_params() == RrcaNet<float>(plain).count_params());

  // eval of the final checkpoint reproduces the last logged metrics exactly
  const auto ev = (dir.path() / "eval").string();
  REQUIRE(call({"eval", "--checkpoint", run + "/last.ckpt", "--data", data, "--out", ev}).code == 0);
  CHECK(fs::exists(dir.path() / "eval" / "metrics.csv"));
  CHECK_FALSE(fs::exists(dir.path() / "eval" / "roc.csv"));
  std::istringstream metrics(slurp(dir.path() / "eval" / "metrics.csv"));
  std::string line, iou, pd, fa;
  std::getline(metrics, line);
  std::getline(metrics, iou);
  std::getline(metrics, pd);
  std::getline(metrics, fa);
  const std::string logged = last_line(slurp(dir.path() / "run" / "log.csv"));
  CHECK(logged.ends_with("," + iou.substr(4) + "," + pd.substr(3) + "," + fa.substr(3)));

  REQUIRE(call({"eval", "--checkpoint", run + "/last.ckpt", "--data", data, "--out", ev, "--thresholds",
               "0.9,0.5,0.1"})
              .code == 0);
  const std::string roc = slurp(dir.path() / "eval" / "roc.csv");
  CHECK(roc.rfind("threshold,fa,pd\n0.9,", 0) == 0);
  CHECK(call({"eval", "--checkpoint", run + "/last.ckpt", "--data", data, "--out", ev, "--thresholds", "0.5,0.9"})
            .code != 0);

  const auto pr = dir.path() / "pred";
  REQUIRE(call({"predict", "--checkpoint", run + "/last.ckpt", "--data", data, "--out", pr.string()}).code == 0);
  for (const auto& id : read_split(data, "test")) CHECK(fs::exists(pr / (id + ".pgm")));
}

TEST_CASE("perfect-oracle checkpoint scores IoU 1, Pd 1, Fa 0") {
  rrca::testing::TempDir dir;
  write_square_dataset(dir.path() / "data");
  write_oracle_checkpoint(dir.path() / "oracle.ckpt");
  const auto r = call({"eval", "--checkpoint", (dir.path() / "oracle.ckpt").string(), "--data",
                      (dir.path() / "data").string(), "--out", (dir.path() / "ev").string()});
  REQUIRE(r.code == 0);
  CHECK(slurp(dir.path() / "ev" / "metrics.csv") == "metric,value\niou,1\npd,1\nfa,0\n");

  const auto pr = dir.path() / "pred";
  REQUIRE(call({"predict", "--checkpoint", (dir.path() / "oracle.ckpt").string(), "--data",
               (dir.path() / "data").string(), "--out", pr.string()})
              .code == 0);
  CHECK(read_pgm(pr / "sq1.pgm") == read_pgm(dir.path() / "data" / "masks" / "sq1.pgm"));
}

TEST_CASE("config files: keys, precedence, rejection and echo") {
  rrca::testing::TempDir dir;
  const auto data = (dir.path() / "data").string();
  REQUIRE(call({"synth", "--out", data, "--count", "6", "--size", "32"}).code == 0);

  const auto cfg = dir.path() / "run.toml";
  std::ofstream(cfg) << "# desk run\nepochs = 3\nchannels = [4, 8]\nblocks = [1, 1]\n"
                        "attention_reduction = 2\ncrop = 32\nbatch-size = 3\nloss = \"dice\"\n";
  const auto run = (dir.path() / "run").string();
  REQUIRE(call({"train", "--config", cfg.string(), "--data", data, "--out", run, "--epochs", "2", "--quiet"}).code ==
          0);
  auto ck = load_checkpoint(dir.path() / "run" / "last.ckpt");
  CHECK(ck.meta.train.epochs == 2);  // flag beats file
  CHECK(ck.meta.train.batch_size == 3);
  CHECK(ck.meta.train.loss.kind == LossKind::Dice);
  CHECK(ck.meta.network.channels == std::vector<int>{4, 8});

  // the echoed configuration alone reproduces the run
  const auto again = (dir.path() / "again").string();
  REQUIRE(call({"train", "--config", run + "/config.toml", "--out", again, "--quiet"}).code == 0);
  CHECK(slurp(dir.path() / "again" / "log.csv") == slurp(dir.path() / "run" / "log.csv"));

  std::ofstream(dir.path() / "bad.toml") << "epochs = 3\nlearning_rate = 0.1\n";
  const auto bad = call({"train", "--config", (dir.path() / "bad.toml").string(), "--data", data, "--out", run});
  CHECK(bad.code != 0);
  CHECK(bad.err.find("learning_rate") != std::string::npos);

  std::ofstream(dir.path() / "sect.toml") << "[train]\nepochs = 3\n";
  CHECK(call({"train", "--config", (dir.path() / "sect.toml").string(), "--data", data, "--out", run}).code != 0);
}

TEST_CASE("resume through the command line continues the same run") {
  rrca::testing::TempDir dir;
  const auto data = (dir.path() / "data").string();
  REQUIRE(call({"synth", "--out", data, "--count", "8", "--size", "32"}).code == 0);
  auto full = micro_flags(data, (dir.path() / "full").string());
  full.insert(full.begin(), "train");
  full.insert(full.end(), {"--epochs", "3"});
  REQUIRE(call(full).code == 0);

  auto part = micro_flags(data, (dir.path() / "part").string());
  part.insert(part.begin(), "train");
  part.insert(part.end(), {"--epochs", "3", "--stop-after", "1"});
  REQUIRE(call(part).code == 0);
  REQUIRE(call({"train", "--data", data, "--out", (dir.path() / "part").string(), "--resume",
               (dir.path() / "part" / "last.ckpt").string(), "--quiet"})
              .code == 0);
  CHECK(slurp(dir.path() / "part" / "log.csv") == slurp(dir.path() / "full" / "log.csv"));
  CHECK(slurp(dir.path() / "part" / "last.ckpt") == slurp(dir.path() / "full" / "last.ckpt"));
}

TEST_CASE("losscurve, ablate and usage errors") {
  const auto r = call({"losscurve", "--points", "3", "--alpha", "3.1", "--k-percent", "10"});
  REQUIRE(r.code == 0);
  CHECK(r.out.rfind("p,kind,value,grad\n0.25,dice,", 0) == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 1 + 3 * 8);

  const auto a = call({"ablate", "sizes", "--out", "/nonexistent"});
  CHECK(a.code != 0);
  CHECK(a.err.find("sizes") != std::string::npos);
  CHECK(call({"train", "--out", "x"}).err.find("--data") != std::string::npos);
  CHECK(call({}).code != 0);
  CHECK(call({"frobnicate"}).code != 0);
  CHECK(call({"train", "--help"}).code == 0);
}

TEST_CASE("ablate runs one row per variant") {
  rrca::testing::TempDir dir;
  const auto data = (dir.path() / "data").string();
  REQUIRE(call({"synth", "--out", data, "--count", "6", "--size", "32"}).code == 0);
  const auto r = call({"ablate", "iterations", "--data", data, "--out", (dir.path() / "ab").string(), "--channels",
                      "4,8", "--blocks", "1,1", "--attention-reduction", "2", "--epochs", "1", "--crop", "32"});
  REQUIRE(r.code == 0);
  const std::string table = slurp(dir.path() / "ab" / "iterations.csv");
  CHECK(table.rfind("variant,params,flops,iou,pd,fa\nn0,", 0) == 0);
  std::istringstream rows(table);
  std::string line;
  std::getline(rows, line);
  long prev = 0;
  int n = 0;
  while (std::getline(rows, line)) {
    const long params = std::stol(line.substr(line.find(',') + 1));
    CHECK(params > prev);
    prev = params;
    ++n;
  }
  CHECK(n == 4);
}
