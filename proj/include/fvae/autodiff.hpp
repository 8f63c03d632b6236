#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fvae/tensor.hpp"

namespace fvae {

template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, BasicTensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = BasicTensor<T>(value.shape()); }
};

// Handle to a value recorded on a Graph.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

// Tape for reverse-mode differentiation. Operations append nodes in execution
// order; backward() walks them in exact reverse order, so the tape is valid for
// one forward pass and is discarded afterwards.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t self)>;

  Var constant(BasicTensor<T> value);

  // Leaf bound to a parameter; backward() accumulates into param.grad.
  Var parameter(Parameter<T>& param);

  // Leaf that receives a gradient on the tape without a backing Parameter.
  Var variable(BasicTensor<T> value);

  Var record(BasicTensor<T> value, std::vector<Var> inputs, Backward backward);

  const BasicTensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient of the last backward() w.r.t. v; zeros if v was not reached.
  const BasicTensor<T>& grad(Var v);

  // Accumulation buffer used by adjoints, allocated on first use.
  BasicTensor<T>& grad_buffer(Var v);

  // Seeds d(loss)/d(loss) = 1 and propagates. Throws if loss is not scalar.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    std::vector<Var> inputs;
    Backward backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace fvae
