#include "rrca/model.hpp"

#include <numeric>
#include <stdexcept>

#include "rrca/init.hpp"

namespace rrca {

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::Diaam: return "diaam";
    case FusionMode::Concat: return "concat";
    case FusionMode::Sum: return "sum";
    case FusionMode::DiaamNoCa: return "diaam_no_ca";
  }
  return "?";
}

std::string to_string(FsmMode m) {
  switch (m) {
    case FsmMode::Stack: return "stack";
    case FsmMode::LastOnly: return "last_only";
    case FsmMode::DeepSupervision: return "deep_supervision";
  }
  return "?";
}

FusionMode parse_fusion_mode(std::string_view s) {
  if (s == "diaam") return FusionMode::Diaam;
  if (s == "concat") return FusionMode::Concat;
  if (s == "sum") return FusionMode::Sum;
  if (s == "diaam_no_ca") return FusionMode::DiaamNoCa;
  throw std::invalid_argument("unknown fusion mode '" + std::string(s) +
                              "' (expected diaam, concat, sum, diaam_no_ca)");
}

FsmMode parse_fsm_mode(std::string_view s) {
  if (s == "stack") return FsmMode::Stack;
  if (s == "last_only") return FsmMode::LastOnly;
  if (s == "deep_supervision") return FsmMode::DeepSupervision;
  throw std::invalid_argument("unknown fsm mode '" + std::string(s) +
                              "' (expected stack, last_only, deep_supervision)");
}

void NetworkConfig::validate() const {
  if (channels.empty()) throw std::invalid_argument("channels: at least one depth required");
  if (channels.size() != blocks.size()) {
    throw std::invalid_argument("channels and blocks must have equal length (" +
                                std::to_string(channels.size()) + " vs " +
                                std::to_string(blocks.size()) + ")");
  }
  for (int c : channels) {
    if (c < 1) throw std::invalid_argument("channels: entries must be positive");
  }
  for (int b : blocks) {
    if (b < 1) throw std::invalid_argument("blocks: entries must be positive");
  }
  if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (input_channels < 1) throw std::invalid_argument("input_channels must be >= 1");
  if (attention_reduction < 1) {
    throw std::invalid_argument("attention_reduction must be >= 1");
  }
  if (fusion == FusionMode::Diaam) {
    for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
      if (channels[i] % attention_reduction != 0) {
        throw std::invalid_argument(
            "attention_reduction " + std::to_string(attention_reduction) +
            " does not divide channel count " + std::to_string(channels[i]));
      }
    }
  }
}

namespace {

std::string it_tag(int n) { return ".it" + std::to_string(n); }

bool has_projection(int cin, int cout, bool project) { return project || cin != cout; }

}  // namespace

template <typename T>
Parameter<T>& RrcaNet<T>::make_param(const std::string& name, Shape shape,
                                     const std::string& init_name) {
  auto p = std::make_unique<Parameter<T>>(
      name, Tensor<T>(shape, xavier_init<T>(shape, cfg_.seed, init_name)));
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>& RrcaNet<T>::make_const(const std::string& name, Shape shape, T value) {
  auto p = std::make_unique<Parameter<T>>(name, Tensor<T>(shape, value));
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
typename RrcaNet<T>::Norm RrcaNet<T>::make_norm(const std::string& prefix, int channels) {
  Norm n;
  n.gamma = &make_const(prefix + ".gamma", Shape{1, channels, 1, 1}, T(1));
  n.beta = &make_const(prefix + ".beta", Shape{1, channels, 1, 1}, T(0));
  stats_.emplace_back(prefix, std::make_unique<RunningStats<T>>(channels));
  n.stats = stats_.back().second.get();
  return n;
}

template <typename T>
typename RrcaNet<T>::ResBlock RrcaNet<T>::make_block(const std::string& prefix, int cin,
                                                     int cout, int banks,
                                                     int kernel_sets, bool project) {
  ResBlock b;
  b.cin = cin;
  b.cout = cout;
  for (int k = 0; k < kernel_sets; ++k) {
    const std::string suffix = kernel_sets > 1 ? "@it" + std::to_string(k) : "";
    ConvSet cs;
    cs.w1 = &make_param(prefix + ".conv1.w" + suffix, Shape{cout, cin, 3, 3},
                        prefix + ".conv1.w");
    cs.w2 = &make_param(prefix + ".conv2.w" + suffix, Shape{cout, cout, 3, 3},
                        prefix + ".conv2.w");
    if (has_projection(cin, cout, project)) {
      cs.skip_w = &make_param(prefix + ".skip.w" + suffix, Shape{cout, cin, 1, 1},
                              prefix + ".skip.w");
      cs.skip_b = &make_const(prefix + ".skip.b" + suffix, Shape{1, cout, 1, 1}, T(0));
    }
    b.kernels.push_back(cs);
  }
  for (int n = 0; n < banks; ++n) {
    const std::string bp = banks > 1 ? prefix + it_tag(n) : prefix;
    NormSet ns;
    ns.n1 = make_norm(bp + ".bn1", cout);
    ns.n2 = make_norm(bp + ".bn2", cout);
    if (has_projection(cin, cout, project)) ns.skip = make_norm(bp + ".skip_bn", cout);
    b.banks.push_back(ns);
  }
  return b;
}

template <typename T>
RrcaNet<T>::RrcaNet(NetworkConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int L = cfg_.depth();
  const int iters = cfg_.iterations + 1;
  const int c0 = cfg_.channels[0];

  stem_ = std::make_unique<ResBlock>(make_block("stem", cfg_.input_channels, c0, 1, 1));
  for (int n = 1; n < iters; ++n) {
    adapters_.push_back(std::make_unique<ResBlock>(
        make_block("adapter" + it_tag(n), c0, c0, 1, 1)));
  }

  const int kernel_sets = cfg_.tie_encoder ? 1 : iters;
  layers_.resize(L);
  for (int i = 0; i < L; ++i) {
    const int cin_layer = i == 0 ? c0 : cfg_.channels[i - 1];
    for (int j = 0; j < cfg_.blocks[i]; ++j) {
      const int cin = j == 0 ? cin_layer : cfg_.channels[i];
      const std::string prefix = "enc.l" + std::to_string(i) + ".b" + std::to_string(j);
      layers_[i].push_back(std::make_unique<ResBlock>(
          make_block(prefix, cin, cfg_.channels[i], iters, kernel_sets)));
    }
  }

  fusion_.resize(iters);
  for (int n = 0; n < iters; ++n) {
    IterationFusion& f = fusion_[n];
    const std::string base = "dec" + it_tag(n);
    switch (cfg_.fusion) {
      case FusionMode::Diaam:
      case FusionMode::DiaamNoCa:
        for (int i = 0; i + 1 < L; ++i) {
          const int c = cfg_.channels[i];
          const int cd = cfg_.channels[i + 1];
          const std::string p = base + ".l" + std::to_string(i);
          Diaam d;
          d.proj_w = &make_param(p + ".proj.w", Shape{c, cd, 1, 1}, p + ".proj.w");
          d.proj_b = &make_const(p + ".proj.b", Shape{1, c, 1, 1}, T(0));
          d.gate_w = &make_param(p + ".gate.w", Shape{c, c, 1, 1}, p + ".gate.w");
          d.gate_b = &make_const(p + ".gate.b", Shape{1, c, 1, 1}, T(0));
          if (cfg_.fusion == FusionMode::Diaam) {
            const int hid = c / cfg_.attention_reduction;
            d.fc1_w = &make_param(p + ".mlp1.w", Shape{hid, c, 1, 1}, p + ".mlp1.w");
            d.fc1_b = &make_const(p + ".mlp1.b", Shape{1, hid, 1, 1}, T(0));
            d.fc2_w = &make_param(p + ".mlp2.w", Shape{c, hid, 1, 1}, p + ".mlp2.w");
            d.fc2_b = &make_const(p + ".mlp2.b", Shape{1, c, 1, 1}, T(0));
          }
          f.diaam.push_back(d);
        }
        break;
      case FusionMode::Sum:
        f.sum_proj.resize(L);
        for (int i = 1; i < L; ++i) {
          const std::string p = base + ".l" + std::to_string(i) + ".proj";
          f.sum_proj[i].w = &make_param(p + ".w", Shape{c0, cfg_.channels[i], 1, 1}, p + ".w");
          f.sum_proj[i].b = &make_const(p + ".b", Shape{1, c0, 1, 1}, T(0));
        }
        break;
      case FusionMode::Concat: {
        const int total = std::accumulate(cfg_.channels.begin(), cfg_.channels.end(), 0);
        f.concat_block = std::make_unique<ResBlock>(make_block(base + ".fuse", total, c0, 1, 1));
        break;
      }
    }
  }

  const int head_in = cfg_.fsm == FsmMode::Stack ? iters * c0 : c0;
  // The head always projects its skip, so every mode shares one head layout
  // and the stacked width only changes the kernel sizes.
  head_block_ = std::make_unique<ResBlock>(make_block("head", head_in, c0, 1, 1, true));
  head_out_.w = &make_param("head.out.w", Shape{1, c0, 1, 1}, "head.out.w");
  head_out_.b = &make_const("head.out.b", Shape{1, 1, 1, 1}, T(0));
}

template <typename T>
std::vector<Parameter<T>*> RrcaNet<T>::parameters() const {
  std::vector<Parameter<T>*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
Parameter<T>& RrcaNet<T>::parameter(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }
  return *params_[it->second];
}

template <typename T>
std::vector<std::pair<std::string, RunningStats<T>*>> RrcaNet<T>::running_stats() const {
  std::vector<std::pair<std::string, RunningStats<T>*>> out;
  for (const auto& [name, s] : stats_) out.emplace_back(name, s.get());
  return out;
}

template <typename T>
void RrcaNet<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
std::size_t RrcaNet<T>::count_params() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p->numel();
  return total;
}

template <typename T>
std::uint64_t RrcaNet<T>::count_flops(int h, int w) const {
  using u64 = std::uint64_t;
  const int L = cfg_.depth();
  const int iters = cfg_.iterations + 1;
  const int c0 = cfg_.channels[0];
  auto block = [](int cin, int cout, u64 px, bool project = false) {
    u64 m = 9ull * cin * cout * px + 9ull * cout * cout * px;
    if (has_projection(cin, cout, project)) m += static_cast<u64>(cin) * cout * px;
    return m;
  };
  std::vector<u64> px(L);
  for (int i = 0; i < L; ++i) px[i] = static_cast<u64>(h >> i) * static_cast<u64>(w >> i);

  u64 total = block(cfg_.input_channels, c0, px[0]);
  for (int n = 0; n < iters; ++n) {
    if (n > 0) total += block(c0, c0, px[0]);
    for (int i = 0; i < L; ++i) {
      for (int j = 0; j < cfg_.blocks[i]; ++j) {
        const int cin = j == 0 ? (i == 0 ? c0 : cfg_.channels[i - 1]) : cfg_.channels[i];
        total += block(cin, cfg_.channels[i], px[i]);
      }
    }
    switch (cfg_.fusion) {
      case FusionMode::Diaam:
      case FusionMode::DiaamNoCa:
        for (int i = 0; i + 1 < L; ++i) {
          const u64 c = cfg_.channels[i];
          total += c * cfg_.channels[i + 1] * px[i] + c * c * px[i];
          if (cfg_.fusion == FusionMode::Diaam) {
            const u64 hid = c / cfg_.attention_reduction;
            total += 2 * (hid * c + c * hid);  // shared MLP on max and avg
          }
        }
        break;
      case FusionMode::Sum:
        for (int i = 1; i < L; ++i) total += static_cast<u64>(cfg_.channels[i]) * c0 * px[0];
        break;
      case FusionMode::Concat:
        total += block(std::accumulate(cfg_.channels.begin(), cfg_.channels.end(), 0), c0, px[0]);
        break;
    }
  }
  const int heads = cfg_.fsm == FsmMode::DeepSupervision ? iters : 1;
  const int head_in = cfg_.fsm == FsmMode::Stack ? iters * c0 : c0;
  total += heads * (block(head_in, c0, px[0], true) + static_cast<u64>(c0) * px[0]);
  return total;
}

template <typename T>
Var<T> RrcaNet<T>::norm_forward(const Norm& n, Var<T> x, NormMode mode) {
  Tape<T>& tp = *x.tape;
  return batchnorm2d(x, tp.param(*n.gamma), tp.param(*n.beta), *n.stats, mode);
}

template <typename T>
Var<T> RrcaNet<T>::block_forward(const ResBlock& b, Var<T> x, int bank, int kernel_set,
                                 NormMode mode) {
  Tape<T>& tp = *x.tape;
  const ConvSet& k = b.kernels.at(kernel_set);
  const NormSet& nb = b.banks.at(bank);
  Var<T> h = relu(norm_forward(nb.n1, conv2d(x, tp.param(*k.w1), std::nullopt, 1, 1), mode));
  h = norm_forward(nb.n2, conv2d(h, tp.param(*k.w2), std::nullopt, 1, 1), mode);
  Var<T> s = x;
  if (k.skip_w) {
    s = norm_forward(nb.skip, conv2d(x, tp.param(*k.skip_w), tp.param(*k.skip_b), 1, 0), mode);
  }
  return relu(add(h, s));
}

template <typename T>
std::vector<Var<T>> RrcaNet<T>::encoder_pass(Var<T> x, int iteration, NormMode mode) {
  if (iteration < 0 || iteration > cfg_.iterations) {
    throw std::out_of_range("iteration " + std::to_string(iteration) + " outside 0.." +
                            std::to_string(cfg_.iterations));
  }
  const int L = cfg_.depth();
  const Shape s = x.shape();
  const int div = 1 << (L - 1);
  if (s.h % div != 0 || s.w % div != 0) {
    throw std::invalid_argument("input spatial size " + std::to_string(s.h) + "x" +
                                std::to_string(s.w) + " not divisible by " +
                                std::to_string(div));
  }
  if (s.c != cfg_.channels[0]) {
    throw std::invalid_argument("encoder input must have " + std::to_string(cfg_.channels[0]) +
                                " channels, got " + s.str());
  }
  const int kset = cfg_.tie_encoder ? 0 : iteration;
  std::vector<Var<T>> feats;
  Var<T> cur = x;
  for (int i = 0; i < L; ++i) {
    if (i > 0) cur = maxpool2(cur);
    for (const auto& b : layers_[i]) cur = block_forward(*b, cur, iteration, kset, mode);
    feats.push_back(cur);
  }
  return feats;
}

template <typename T>
Var<T> RrcaNet<T>::channel_attention(const Diaam& d, Var<T> f) {
  Tape<T>& tp = *f.tape;
  auto mlp = [&](Var<T> v) {
    Var<T> hdn = relu(linear(v, tp.param(*d.fc1_w), tp.param(*d.fc1_b)));
    return linear(hdn, tp.param(*d.fc2_w), tp.param(*d.fc2_b));
  };
  Var<T> att = sigmoid(add(mlp(global_pool(f, PoolKind::Max)), mlp(global_pool(f, PoolKind::Avg))));
  return mul(f, att);
}

template <typename T>
Var<T> RrcaNet<T>::diaam(Var<T> shallow, Var<T> deep, int depth, int iteration) {
  if (cfg_.fusion != FusionMode::Diaam && cfg_.fusion != FusionMode::DiaamNoCa) {
    throw std::logic_error("diaam called on a network built with fusion mode " +
                           to_string(cfg_.fusion));
  }
  if (depth < 0 || depth + 1 >= cfg_.depth()) {
    throw std::out_of_range("diaam depth " + std::to_string(depth) + " out of range");
  }
  const Shape ss = shallow.shape(), ds = deep.shape();
  if (ss.c != cfg_.channels[depth] || ds.c != cfg_.channels[depth + 1] || ds.n != ss.n ||
      2 * ds.h != ss.h || 2 * ds.w != ss.w) {
    throw std::invalid_argument("diaam: shallow " + ss.str() + " and deep " + ds.str() +
                                " violate the (C, h, w) / (C', h/2, w/2) contract at depth " +
                                std::to_string(depth));
  }
  const Diaam& d = fusion_.at(iteration).diaam.at(depth);
  Tape<T>& tp = *shallow.tape;
  Var<T> up = conv2d(bilinear_up2(deep), tp.param(*d.proj_w), tp.param(*d.proj_b), 1, 0);
  if (cfg_.fusion == FusionMode::Diaam) up = channel_attention(d, up);
  Var<T> gate = sigmoid(conv2d(shallow, tp.param(*d.gate_w), tp.param(*d.gate_b), 1, 0));
  return add(shallow, mul(gate, up));
}

template <typename T>
Var<T> RrcaNet<T>::decode_pass(const std::vector<Var<T>>& feats, int iteration,
                               NormMode mode) {
  const int L = cfg_.depth();
  if (static_cast<int>(feats.size()) != L) {
    throw std::invalid_argument("decode_pass expects " + std::to_string(L) + " features");
  }
  Tape<T>& tp = *feats[0].tape;
  IterationFusion& f = fusion_.at(iteration);
  auto upsample_to_full = [](Var<T> v, int depth) {
    for (int k = 0; k < depth; ++k) v = bilinear_up2(v);
    return v;
  };
  switch (cfg_.fusion) {
    case FusionMode::Diaam:
    case FusionMode::DiaamNoCa: {
      Var<T> cur = feats[L - 1];
      for (int i = L - 2; i >= 0; --i) cur = diaam(feats[i], cur, i, iteration);
      return cur;
    }
    case FusionMode::Sum: {
      Var<T> cur = feats[0];
      for (int i = 1; i < L; ++i) {
        cur = add(cur, conv2d(upsample_to_full(feats[i], i), tp.param(*f.sum_proj[i].w),
                              tp.param(*f.sum_proj[i].b), 1, 0));
      }
      return cur;
    }
    case FusionMode::Concat: {
      std::vector<Var<T>> parts;
      for (int i = 0; i < L; ++i) parts.push_back(upsample_to_full(feats[i], i));
      return block_forward(*f.concat_block, concat_c<T>(parts), 0, 0, mode);
    }
  }
  throw std::logic_error("unreachable fusion mode");
}

template <typename T>
Var<T> RrcaNet<T>::head_forward(Var<T> x, NormMode mode) {
  Tape<T>& tp = *x.tape;
  Var<T> h = block_forward(*head_block_, x, 0, 0, mode);
  return sigmoid(conv2d(h, tp.param(*head_out_.w), tp.param(*head_out_.b), 1, 0));
}

template <typename T>
ForwardResult<T> RrcaNet<T>::forward(Var<T> x, NormMode mode) {
  const Shape s = x.shape();
  if (s.c != cfg_.input_channels) {
    throw std::invalid_argument("network expects " + std::to_string(cfg_.input_channels) +
                                " input channels, got " + s.str());
  }
  ForwardResult<T> r;
  Var<T> entry = block_forward(*stem_, x, 0, 0, mode);
  for (int n = 0; n <= cfg_.iterations; ++n) {
    if (n > 0) entry = block_forward(*adapters_[n - 1], r.decoded.back(), 0, 0, mode);
    r.decoded.push_back(decode_pass(encoder_pass(entry, n, mode), n, mode));
  }
  switch (cfg_.fsm) {
    case FsmMode::Stack: {
      Var<T> stacked = concat_c<T>(r.decoded);
      r.fsm_channels = stacked.shape().c;
      r.outputs.push_back(head_forward(stacked, mode));
      break;
    }
    case FsmMode::LastOnly:
      r.fsm_channels = cfg_.channels[0];
      r.outputs.push_back(head_forward(r.decoded.back(), mode));
      break;
    case FsmMode::DeepSupervision:
      r.fsm_channels = cfg_.channels[0];
      for (Var<T> d : r.decoded) r.outputs.push_back(head_forward(d, mode));
      break;
  }
  return r;
}

template <typename T>
Parameter<T>& RrcaNet<T>::encoder_kernel(int layer, int block, int conv, int iteration) const {
  const ResBlock& b = *layers_.at(layer).at(block);
  const ConvSet& k = b.kernels.at(cfg_.tie_encoder ? 0 : iteration);
  Parameter<T>* p = conv == 0 ? k.w1 : conv == 1 ? k.w2 : k.skip_w;
  if (!p) throw std::out_of_range("block has no skip projection");
  return *p;
}

template class RrcaNet<float>;
template class RrcaNet<double>;

}  // namespace rrca
