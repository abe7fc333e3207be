#include "rrca/tape.hpp"

#include <algorithm>
#include <stdexcept>

namespace rrca {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::BatchNorm: return "batchnorm2d";
    case OpKind::MaxPool2: return "maxpool2";
    case OpKind::BilinearUp2: return "bilinear_up2";
    case OpKind::GlobalMax: return "global_max";
    case OpKind::GlobalAvg: return "global_avg";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::ConcatC: return "concat_c";
    case OpKind::Linear: return "linear";
    case OpKind::Sum: return "sum";
    case OpKind::Loss: return "loss";
  }
  return "?";
}

template <typename T>
Var<T> Tape<T>::input(Tensor<T> value, bool requires_grad) {
  Slot s;
  s.value = std::move(value);
  s.requires_grad = requires_grad;
  s.leaf = true;
  slots_.push_back(std::move(s));
  const int id = static_cast<int>(slots_.size()) - 1;
  nodes_.push_back(Node{OpKind::Input, {}, id, {}});
  return Var<T>{this, id};
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  if (seen_params_.insert(&p).second) p.share_count = 0;
  ++p.share_count;
  if (p.grad.size() != p.value.numel()) p.grad.assign(p.value.numel(), T(0));
  Slot s;
  s.param = &p;
  s.requires_grad = true;
  s.leaf = true;
  slots_.push_back(std::move(s));
  const int id = static_cast<int>(slots_.size()) - 1;
  nodes_.push_back(Node{OpKind::Param, {}, id, {}});
  return Var<T>{this, id};
}

template <typename T>
Var<T> Tape<T>::record(OpKind kind, std::vector<int> inputs, Tensor<T> out,
                       BackwardFn fn) {
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [&](int i) { return slots_[i].requires_grad; });
  Slot s;
  s.value = std::move(out);
  s.requires_grad = needs;
  slots_.push_back(std::move(s));
  const int id = static_cast<int>(slots_.size()) - 1;
  nodes_.push_back(
      Node{kind, std::move(inputs), id, needs ? std::move(fn) : BackwardFn{}});
  return Var<T>{this, id};
}

template <typename T>
const Tensor<T>& Tape<T>::value(int id) const {
  const Slot& s = slots_.at(id);
  return s.param ? s.param->value : s.value;
}

template <typename T>
std::span<T> Tape<T>::grad(int id) {
  Slot& s = slots_.at(id);
  if (s.param) return s.param->grad;
  if (s.grad.empty()) s.grad.assign(s.value.numel(), T(0));
  return s.grad;
}

template <typename T>
std::span<const T> Tape<T>::grad_of(Var<T> v) const {
  const Slot& s = slots_.at(v.id);
  if (s.param) return s.param->grad;
  return s.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) {
    throw std::invalid_argument("backward: loss belongs to another tape");
  }
  const Tensor<T>& lv = value(loss.id);
  if (lv.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                lv.shape().str());
  }
  // Interior gradients restart every pass; leaves keep accumulating.
  for (Slot& s : slots_) {
    if (!s.leaf) s.grad.clear();
  }
  if (!slots_[loss.id].requires_grad) return;
  grad(loss.id)[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->backward) continue;
    if (slots_[it->output].grad.empty()) continue;  // no adjoint reached it
    it->backward(*this);
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace rrca
