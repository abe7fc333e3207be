#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <unordered_set>
#include <vector>

#include "rrca/tensor.hpp"

namespace rrca {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

enum class OpKind {
  Input,
  Param,
  Conv2d,
  BatchNorm,
  MaxPool2,
  BilinearUp2,
  GlobalMax,
  GlobalAvg,
  Relu,
  Sigmoid,
  Add,
  Mul,
  Scale,
  ConcatC,
  Linear,
  Sum,
  Loss,
};

const char* op_name(OpKind k);

/// Reverse-mode autodiff tape. Nodes are appended in execution order, so the
/// node list is topologically sorted by construction; backward walks it once
/// in reverse.
///
/// Not thread-safe: one tape per thread.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    int output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> input(Tensor<T> value, bool requires_grad = false);
  Var<T> param(Parameter<T>& p);

  /// Appends a node. `fn` is dropped when no input requires a gradient.
  Var<T> record(OpKind kind, std::vector<int> inputs, Tensor<T> out,
                BackwardFn fn);

  const Tensor<T>& value(int id) const;
  bool requires_grad(int id) const { return slots_[id].requires_grad; }
  Parameter<T>* parameter(int id) const { return slots_[id].param; }

  /// Mutable gradient buffer for a slot, zero-allocated on first access.
  /// Parameter slots alias Parameter::grad.
  std::span<T> grad(int id);
  /// Gradient of a slot, empty if nothing flowed into it.
  std::span<const T> grad_of(Var<T> v) const;

  void backward(Var<T> loss);

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return slots_.size(); }

  void add_macs(std::uint64_t m) { macs_ += m; }
  std::uint64_t macs() const { return macs_; }

 private:
  struct Slot {
    Tensor<T> value;
    Parameter<T>* param = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = false;
  };

  // deque keeps references to slot values stable while ops append.
  std::deque<Slot> slots_;
  std::vector<Node> nodes_;
  std::unordered_set<const Parameter<T>*> seen_params_;
  std::uint64_t macs_ = 0;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace rrca
