#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "rrca/ops.hpp"

namespace rrca {

enum class FusionMode { Diaam, Concat, Sum, DiaamNoCa };
enum class FsmMode { Stack, LastOnly, DeepSupervision };

std::string to_string(FusionMode m);
std::string to_string(FsmMode m);
FusionMode parse_fusion_mode(std::string_view s);
FsmMode parse_fsm_mode(std::string_view s);

/// Every architectural switch of the network, including the ablation axes.
struct NetworkConfig {
  std::vector<int> channels{8, 16, 32, 64};
  std::vector<int> blocks{3, 2, 2, 2};
  int iterations = 2;  // N; the network runs N + 1 encode/decode passes
  int attention_reduction = 4;
  FusionMode fusion = FusionMode::Diaam;
  FsmMode fsm = FsmMode::Stack;
  std::uint64_t seed = 0;
  int input_channels = 1;
  /// false builds the untied reference network: every iteration owns its own
  /// copy of the encoder kernels, initialized identically.
  bool tie_encoder = true;

  int depth() const { return static_cast<int>(channels.size()); }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

template <typename T>
struct ForwardResult {
  /// Probability maps (n, 1, h, w). One entry, or N + 1 under deep
  /// supervision.
  std::vector<Var<T>> outputs;
  /// Decoded full-resolution C0 map of every iteration.
  std::vector<Var<T>> decoded;
  int fsm_channels = 0;

  Var<T> prediction() const { return outputs.back(); }
};

/// Recurrent reusable-convolution network.
///
/// Layout: a residual stem maps the image to C0 channels; each of the N + 1
/// iterations runs the residual encoder (kernels shared by all iterations,
/// batch-norm banks private to each iteration) and an attention decoder that
/// fuses deep into shallow features top-down. Iteration n > 0 starts from the
/// previous decoded map after a residual adapter. The decoded maps are
/// stacked into a residual head with a 1x1 output conv and sigmoid.
template <typename T>
class RrcaNet {
 public:
  explicit RrcaNet(NetworkConfig cfg);
  RrcaNet(RrcaNet&&) noexcept = default;
  RrcaNet& operator=(RrcaNet&&) noexcept = default;

  const NetworkConfig& config() const { return cfg_; }

  std::vector<Parameter<T>*> parameters() const;
  Parameter<T>& parameter(std::string_view name) const;
  /// Running statistics of every batch-norm site, in creation order.
  std::vector<std::pair<std::string, RunningStats<T>*>> running_stats() const;
  void zero_grad();

  std::size_t count_params() const;
  /// Multiply-accumulates of one forward pass on a (1, in, h, w) input.
  std::uint64_t count_flops(int h, int w) const;

  /// Per-depth features of iteration `iteration` for a C0-channel input.
  std::vector<Var<T>> encoder_pass(Var<T> x, int iteration, NormMode mode);
  /// Fuses `deep` (2C, h/2, w/2) into `shallow` (C, h, w) at `depth`.
  Var<T> diaam(Var<T> shallow, Var<T> deep, int depth, int iteration);
  /// Decoder output at full resolution with C0 channels.
  Var<T> decode_pass(const std::vector<Var<T>>& features, int iteration,
                     NormMode mode);
  ForwardResult<T> forward(Var<T> x, NormMode mode);

  /// Encoder kernel used by `iteration`; conv 0/1 are the 3x3 kernels, 2 is
  /// the 1x1 skip projection (present only on channel-changing blocks).
  Parameter<T>& encoder_kernel(int layer, int block, int conv,
                               int iteration) const;

 private:
  struct Norm {
    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    RunningStats<T>* stats = nullptr;
  };
  struct ConvSet {
    Parameter<T>* w1 = nullptr;
    Parameter<T>* w2 = nullptr;
    Parameter<T>* skip_w = nullptr;
    Parameter<T>* skip_b = nullptr;
  };
  struct NormSet {
    Norm n1, n2, skip;
  };
  struct ResBlock {
    int cin = 0;
    int cout = 0;
    std::vector<ConvSet> kernels;  // one entry when tied
    std::vector<NormSet> banks;    // one per iteration
  };
  struct Diaam {
    Parameter<T>* proj_w = nullptr;
    Parameter<T>* proj_b = nullptr;
    Parameter<T>* gate_w = nullptr;
    Parameter<T>* gate_b = nullptr;
    Parameter<T>* fc1_w = nullptr;
    Parameter<T>* fc1_b = nullptr;
    Parameter<T>* fc2_w = nullptr;
    Parameter<T>* fc2_b = nullptr;
  };
  struct Pointwise {
    Parameter<T>* w = nullptr;
    Parameter<T>* b = nullptr;
  };
  struct IterationFusion {
    std::vector<Diaam> diaam;         // per depth 0..l-2
    std::vector<Pointwise> sum_proj;  // per depth 1..l-1 (index 0 unused)
    std::unique_ptr<ResBlock> concat_block;
  };

  Parameter<T>& make_param(const std::string& name, Shape shape,
                           const std::string& init_name);
  Parameter<T>& make_const(const std::string& name, Shape shape, T value);
  Norm make_norm(const std::string& prefix, int channels);
  ResBlock make_block(const std::string& prefix, int cin, int cout, int banks,
                      int kernel_sets, bool project = false);
  Var<T> block_forward(const ResBlock& b, Var<T> x, int bank, int kernel_set,
                       NormMode mode);
  Var<T> norm_forward(const Norm& n, Var<T> x, NormMode mode);
  Var<T> channel_attention(const Diaam& d, Var<T> f);
  Var<T> head_forward(Var<T> x, NormMode mode);

  NetworkConfig cfg_;
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::vector<std::pair<std::string, std::unique_ptr<RunningStats<T>>>> stats_;

  std::unique_ptr<ResBlock> stem_;
  std::vector<std::unique_ptr<ResBlock>> adapters_;            // iterations 1..N
  std::vector<std::vector<std::unique_ptr<ResBlock>>> layers_;  // [depth][block]
  std::vector<IterationFusion> fusion_;                          // per iteration
  std::unique_ptr<ResBlock> head_block_;
  Pointwise head_out_;
};

extern template class RrcaNet<float>;
extern template class RrcaNet<double>;

}  // namespace rrca
