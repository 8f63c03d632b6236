#include "fvae/autodiff.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace fvae {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Var Graph<T>::constant(BasicTensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, false});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::parameter(Parameter<T>& param) {
  nodes_.push_back(Node{param.value, {}, {}, {}, &param, true});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::variable(BasicTensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, true});
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::record(BasicTensor<T> value, std::vector<Var> inputs, Backward backward) {
  bool needs = false;
  for (Var in : inputs) needs = needs || nodes_.at(in.id).requires_grad;
  Node node{std::move(value), {}, std::move(inputs), {}, nullptr, needs};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
const BasicTensor<T>& Graph<T>::grad(Var v) {
  return grad_buffer(v);
}

template <typename T>
BasicTensor<T>& Graph<T>::grad_buffer(Var v) {
  Node& node = nodes_.at(v.id);
  if (node.grad.empty()) node.grad = BasicTensor<T>(node.value.shape());
  return node.grad;
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (nodes_.at(loss.id).value.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(nodes_[loss.id].value.shape()));
  }
  for (Node& node : nodes_) node.grad = BasicTensor<T>();
  grad_buffer(loss)[0] = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.backward) node.backward(*this, i);
    if (node.param != nullptr) {
      auto dst = node.param->grad.data();
      auto src = nodes_[i].grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace fvae
