#include "rrca/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace rrca {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in host byte order");

const char* const kLogHeader = "epoch,lr,loss,iou,pd,fa";

void TrainConfig::validate() const {
  if (!(lr0 > 0) || !std::isfinite(lr0)) throw std::invalid_argument("lr0 must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  if (crop < 1) throw std::invalid_argument("crop must be >= 1");
  loss.validate();
  match.validate();
}

double cosine_lr(int epoch, int total_epochs, double lr0) {
  if (total_epochs < 1 || epoch < 0 || epoch > total_epochs) {
    throw std::invalid_argument("cosine_lr: epoch " + std::to_string(epoch) +
                                " outside [0, " + std::to_string(total_epochs) + "]");
  }
  const double lr =
      0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(total_epochs)));
  return std::max(lr, 0.0);
}

template <typename T>
void adagrad_step(std::span<Parameter<T>* const> params, AdaGradState<T>& state, double lr) {
  if (state.acc.empty()) {
    for (const auto* p : params) state.acc.emplace_back(p->value.numel(), T(0));
  }
  if (state.acc.size() != params.size()) {
    throw std::invalid_argument("adagrad_step: optimizer state holds " +
                                std::to_string(state.acc.size()) + " parameters, got " +
                                std::to_string(params.size()));
  }
  for (const auto* p : params) {
    for (T g : p->grad) {
      if (!std::isfinite(g)) throw TrainingDiverged("non-finite gradient in " + p->name);
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    auto& acc = state.acc[k];
    auto v = p.value.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double g = p.grad[i];
      acc[i] = static_cast<T>(acc[i] + g * g);
      v[i] = static_cast<T>(v[i] - lr * g / (std::sqrt(static_cast<double>(acc[i])) + state.eps));
    }
    std::fill(p.grad.begin(), p.grad.end(), T(0));
  }
}

template void adagrad_step<float>(std::span<Parameter<float>* const>, AdaGradState<float>&,
                                  double);
template void adagrad_step<double>(std::span<Parameter<double>* const>, AdaGradState<double>&,
                                   double);

TrainState initial_state(const TrainConfig& cfg) {
  TrainState s;
  s.rng = Rng(derive_seed(cfg.seed, "train/shuffle"));
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoint file: "RRCA", u32 version, then tagged sections
// (4-byte tag, u64 byte length, payload).

namespace {

using nlohmann::json;

json to_json(const NetworkConfig& c) {
  return {{"channels", c.channels},
          {"blocks", c.blocks},
          {"iterations", c.iterations},
          {"attention_reduction", c.attention_reduction},
          {"fusion", to_string(c.fusion)},
          {"fsm", to_string(c.fsm)},
          {"seed", c.seed},
          {"input_channels", c.input_channels},
          {"tie_encoder", c.tie_encoder}};
}

json to_json(const TrainConfig& c) {
  return {{"lr0", c.lr0},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"loss", {{"kind", to_string(c.loss.kind)}, {"alpha", c.loss.alpha}, {"k_percent", c.loss.k_percent}}},
          {"eval_every", c.eval_every},
          {"seed", c.seed},
          {"crop", c.crop},
          {"match", {{"d_thresh", c.match.d_thresh}, {"binarize_threshold", c.match.binarize_threshold}}}};
}

NetworkConfig network_from_json(const json& j) {
  NetworkConfig c;
  c.channels = j.at("channels").get<std::vector<int>>();
  c.blocks = j.at("blocks").get<std::vector<int>>();
  c.iterations = j.at("iterations").get<int>();
  c.attention_reduction = j.at("attention_reduction").get<int>();
  c.fusion = parse_fusion_mode(j.at("fusion").get<std::string>());
  c.fsm = parse_fsm_mode(j.at("fsm").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.input_channels = j.at("input_channels").get<int>();
  c.tie_encoder = j.at("tie_encoder").get<bool>();
  return c;
}

TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  c.lr0 = j.at("lr0").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.loss.kind = parse_loss_kind(j.at("loss").at("kind").get<std::string>());
  c.loss.alpha = j.at("loss").at("alpha").get<double>();
  c.loss.k_percent = j.at("loss").at("k_percent").get<double>();
  c.eval_every = j.at("eval_every").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.crop = j.at("crop").get<int>();
  c.match.d_thresh = j.at("match").at("d_thresh").get<double>();
  c.match.binarize_threshold = j.at("match").at("binarize_threshold").get<double>();
  return c;
}

class Writer {
 public:
  template <typename V>
  void pod(V v) {
    const auto* b = reinterpret_cast<const char*>(&v);
    buf_.append(b, sizeof(V));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_ += s;
  }
  template <typename V>
  void array(std::span<const V> v) {
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size_bytes());
  }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  template <typename V>
  V pod() {
    V v;
    std::memcpy(&v, need(sizeof(V)), sizeof(V));
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    return std::string(need(n), n);
  }
  template <typename V>
  void array(std::span<V> out) {
    std::memcpy(out.data(), need(out.size_bytes()), out.size_bytes());
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  const char* need(std::size_t n) {
    if (n > data_.size() - pos_) throw CheckpointError(what_ + ": truncated record");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

void put_section(std::string& file, const char* tag, const std::string& payload) {
  file.append(tag, 4);
  const auto n = static_cast<std::uint64_t>(payload.size());
  file.append(reinterpret_cast<const char*>(&n), sizeof n);
  file += payload;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RrcaNet<float>& model,
                     const TrainConfig& cfg, const TrainState& state) {
  std::string file = "RRCA";
  file.append(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);

  put_section(file, "CONF",
              json{{"network", to_json(model.config())}, {"train", to_json(cfg)}}.dump());

  const auto params = model.parameters();
  Writer parm;
  parm.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    const Shape s = p->value.shape();
    parm.str(p->name);
    for (int e : {s.n, s.c, s.h, s.w}) parm.pod<std::int32_t>(e);
    parm.array<float>(p->value.data());
  }
  put_section(file, "PARM", parm.take());

  const auto stats = model.running_stats();
  Writer bnst;
  bnst.pod<std::uint32_t>(static_cast<std::uint32_t>(stats.size()));
  for (const auto& [name, rs] : stats) {
    bnst.str(name);
    bnst.pod<std::uint32_t>(static_cast<std::uint32_t>(rs->mean.size()));
    bnst.array<float>(rs->mean);
    bnst.array<float>(rs->var);
  }
  put_section(file, "BNST", bnst.take());

  Writer optm;
  optm.pod<double>(state.optimizer.eps);
  const auto& acc = state.optimizer.acc;
  optm.pod<std::uint32_t>(static_cast<std::uint32_t>(acc.size()));
  for (std::size_t k = 0; k < acc.size(); ++k) {
    optm.str(params.at(k)->name);
    optm.pod<std::uint64_t>(acc[k].size());
    optm.array<float>(acc[k]);
  }
  put_section(file, "OPTM", optm.take());

  Writer stat;
  stat.pod<std::int32_t>(state.epochs_done);
  stat.pod<double>(state.best_iou);
  stat.pod<std::int32_t>(state.best_epoch);
  stat.str(state.rng.save());
  stat.str(state.log);
  put_section(file, "STAT", stat.take());

  // Write beside the target and rename so an interrupted save never replaces
  // a good checkpoint with a partial one.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    os.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!os) throw CheckpointError("cannot write checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot write checkpoint " + path.string() + ": " + ec.message());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string what = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(what + ": cannot open checkpoint");
  const std::string file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Reader head(file, what);
  if (file.size() < 8 || file.compare(0, 4, "RRCA") != 0) {
    throw CheckpointError(what + ": not a checkpoint (bad magic)");
  }
  head.pod<std::uint32_t>();
  const auto version = head.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(what + ": checkpoint format version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  }

  std::map<std::string, std::string_view> sections;
  std::size_t pos = 8;
  while (pos < file.size()) {
    if (file.size() - pos < 12) throw CheckpointError(what + ": truncated section header");
    const std::string tag = file.substr(pos, 4);
    std::uint64_t n;
    std::memcpy(&n, file.data() + pos + 4, sizeof n);
    pos += 12;
    if (n > file.size() - pos) throw CheckpointError(what + ": truncated section " + tag);
    sections[tag] = std::string_view(file).substr(pos, n);
    pos += n;
  }
  auto section = [&](const char* tag) {
    auto it = sections.find(tag);
    if (it == sections.end()) throw CheckpointError(what + ": missing section " + tag);
    return Reader(it->second, what + " [" + tag + "]");
  };

  Checkpoint meta;
  try {
    const json conf = json::parse(sections.count("CONF") ? sections["CONF"] : "");
    meta.network = network_from_json(conf.at("network"));
    meta.train = train_from_json(conf.at("train"));
  } catch (const std::exception& e) {
    throw CheckpointError(what + ": bad configuration record: " + e.what());
  }
  RrcaNet<float> model(meta.network);

  const auto params = model.parameters();
  std::map<std::string, Parameter<float>*> by_name;
  for (auto* p : params) by_name[p->name] = p;

  Reader parm = section("PARM");
  const auto np = parm.pod<std::uint32_t>();
  if (np != params.size()) {
    throw CheckpointError(what + ": " + std::to_string(np) + " parameter records, network has " +
                         std::to_string(params.size()));
  }
  for (std::uint32_t i = 0; i < np; ++i) {
    const std::string name = parm.str();
    Shape s;
    s.n = parm.pod<std::int32_t>();
    s.c = parm.pod<std::int32_t>();
    s.h = parm.pod<std::int32_t>();
    s.w = parm.pod<std::int32_t>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError(what + ": unknown parameter " + name);
    if (!(it->second->value.shape() == s)) {
      throw CheckpointError(what + ": parameter " + name + " has shape " + s.str() +
                            ", network expects " + it->second->value.shape().str());
    }
    parm.array<float>(it->second->value.data());
  }

  std::map<std::string, RunningStats<float>*> stats_by_name;
  for (const auto& [name, rs] : model.running_stats()) stats_by_name[name] = rs;
  Reader bnst = section("BNST");
  const auto ns = bnst.pod<std::uint32_t>();
  if (ns != stats_by_name.size()) throw CheckpointError(what + ": running-statistics count differs");
  for (std::uint32_t i = 0; i < ns; ++i) {
    const std::string name = bnst.str();
    const auto c = bnst.pod<std::uint32_t>();
    auto it = stats_by_name.find(name);
    if (it == stats_by_name.end() || it->second->mean.size() != c) {
      throw CheckpointError(what + ": running statistics " + name + " do not fit the network");
    }
    bnst.array<float>(it->second->mean);
    bnst.array<float>(it->second->var);
  }

  Reader optm = section("OPTM");
  meta.state.optimizer.eps = optm.pod<double>();
  const auto na = optm.pod<std::uint32_t>();
  if (na != 0 && na != params.size()) throw CheckpointError(what + ": optimizer state size differs");
  std::map<std::string, std::vector<float>> acc_by_name;
  for (std::uint32_t i = 0; i < na; ++i) {
    const std::string name = optm.str();
    std::vector<float> acc(optm.pod<std::uint64_t>());
    optm.array<float>(acc);
    acc_by_name[name] = std::move(acc);
  }
  if (na != 0) {
    for (auto* p : params) {
      auto it = acc_by_name.find(p->name);
      if (it == acc_by_name.end() || it->second.size() != p->value.numel()) {
        throw CheckpointError(what + ": optimizer state for " + p->name + " missing");
      }
      meta.state.optimizer.acc.push_back(std::move(it->second));
    }
  }

  Reader stat = section("STAT");
  meta.state.epochs_done = stat.pod<std::int32_t>();
  meta.state.best_iou = stat.pod<double>();
  meta.state.best_epoch = stat.pod<std::int32_t>();
  meta.state.rng.load(stat.str());
  meta.state.log = stat.str();

  return {std::move(meta), std::move(model)};
}

// ---------------------------------------------------------------------------

std::vector<ImageF> predict(RrcaNet<float>& model, const std::vector<Sample>& samples,
                            int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("predict: batch_size must be >= 1");
  std::vector<ImageF> out;
  out.reserve(samples.size());
  std::size_t i = 0;
  while (i < samples.size()) {
    // batch consecutive samples of equal size
    std::vector<const Sample*> batch{&samples[i]};
    while (batch.size() < static_cast<std::size_t>(batch_size) && i + batch.size() < samples.size() &&
           samples[i + batch.size()].image.same_size(samples[i].image.h, samples[i].image.w)) {
      batch.push_back(&samples[i + batch.size()]);
    }
    auto [x, y] = to_batch(batch);
    Tape<float> tape;
    const auto res = model.forward(tape.input(std::move(x)), NormMode::Eval);
    const Tensor<float>& p = res.prediction().value();
    const int h = p.shape().h, w = p.shape().w;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      ImageF img(h, w);
      const auto src = p.data().subspan(b * img.size(), img.size());
      std::copy(src.begin(), src.end(), img.px.begin());
      out.push_back(std::move(img));
    }
    i += batch.size();
  }
  return out;
}

Metrics evaluate(RrcaNet<float>& model, const std::vector<Sample>& samples,
                 const MatchConfig& match, int batch_size) {
  match.validate();
  const auto probs = predict(model, samples, batch_size);
  MetricAccumulator acc;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    acc.add(binarize(probs[i], match.binarize_threshold), samples[i].mask, match);
  }
  return compute_metrics(acc);
}

TrainResult train(RrcaNet<float>& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& test_set, const TrainConfig& cfg, TrainState state,
                  const TrainRun& run) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (state.epochs_done < 0 || state.epochs_done > cfg.epochs) {
    throw std::invalid_argument("train: state is at epoch " + std::to_string(state.epochs_done) +
                                " of " + std::to_string(cfg.epochs));
  }
  const bool files = !run.out_dir.empty();
  if (files) std::filesystem::create_directories(run.out_dir);
  if (state.log.empty()) state.log = std::string(kLogHeader) + "\n";
  auto write_log = [&] {
    if (!files) return;
    std::ofstream os(run.out_dir / "log.csv", std::ios::binary | std::ios::trunc);
    os << state.log;
    if (!os) throw std::runtime_error("cannot write " + (run.out_dir / "log.csv").string());
  };
  write_log();

  const auto params = model.parameters();
  const int n = static_cast<int>(train_set.size());
  const int end = run.stop_after >= 0 ? std::min(cfg.epochs, run.stop_after) : cfg.epochs;
  TrainResult result;

  for (int epoch = state.epochs_done; epoch < end; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<int>(state.rng.below(static_cast<std::uint64_t>(i) + 1))]);
    }

    double loss_sum = 0;
    for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const int nb = std::min(cfg.batch_size, n - b0);
      std::vector<Sample> views;
      views.reserve(nb);
      for (int i = b0; i < b0 + nb; ++i) {
        const Sample& s = train_set[order[i]];
        views.push_back(augment(s, derive_seed(cfg.seed, "aug/" + std::to_string(epoch) + "/" + s.id),
                                cfg.crop));
      }
      std::vector<const Sample*> ptrs;
      for (const auto& v : views) ptrs.push_back(&v);
      auto [x, y] = to_batch(ptrs);

      Tape<float> tape;
      const auto res = model.forward(tape.input(std::move(x)), NormMode::Train);
      const Var<float> l = mean_loss<float>(res.outputs, y, cfg.loss);
      const double lv = l.value()[0];
      if (!std::isfinite(lv)) {
        throw TrainingDiverged("non-finite loss in epoch " + std::to_string(epoch));
      }
      tape.backward(l);
      adagrad_step<float>(params, state.optimizer, lr);
      loss_sum += lv * nb;
    }

    const bool eval = !test_set.empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
    std::string row = std::to_string(epoch) + "," + format_number(lr) + "," + format_number(loss_sum / n);
    bool improved = false;
    if (eval) {
      result.last_metrics = evaluate(model, test_set, cfg.match, cfg.batch_size);
      const Metrics& m = result.last_metrics;
      row += "," + format_number(m.iou) + "," + format_number(m.pd) + "," + format_number(m.fa);
      if (m.iou > state.best_iou) {
        state.best_iou = m.iou;
        state.best_epoch = epoch;
        improved = true;
      }
    } else {
      row += ",,,";
    }
    state.epochs_done = epoch + 1;
    state.log += row + "\n";

    if (files) {
      write_log();
      save_checkpoint(run.out_dir / "last.ckpt", model, cfg, state);
      if (improved) save_checkpoint(run.out_dir / "best.ckpt", model, cfg, state);
      if (run.snapshot_every > 0 && state.epochs_done % run.snapshot_every == 0) {
        save_checkpoint(run.out_dir / ("epoch_" + std::to_string(state.epochs_done) + ".ckpt"), model,
                        cfg, state);
      }
    }
    if (run.on_epoch) run.on_epoch(row);
  }
  result.state = std::move(state);
  return result;
}

}  // namespace rrca
