#include "gode/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

#include "gode/error.hpp"

namespace gode {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : node_(std::make_shared<detail::Node<T>>()) {
  if (gode::numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                     std::to_string(gode::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero extent in shape " + to_string(shape));
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = gode::numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  }
  return node_->values[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->values);
}

namespace {

template <typename T>
thread_local Tape<T>* active_tape = nullptr;

struct Fault {
  std::string op;
  double factor = 1.0;
};

Fault& fault() {
  static Fault f;
  return f;
}

}  // namespace

namespace testing {

void set_backward_fault(std::string_view op, double factor) {
  fault() = Fault{std::string(op), factor};
}

}  // namespace testing

template <typename T>
Tape<T>::Activation::Activation(Tape* tape) : previous_(active_tape<T>) {
  active_tape<T> = tape;
}

template <typename T>
Tape<T>::Activation::~Activation() {
  active_tape<T> = previous_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_tape<T>;
}

template <typename T>
void Tape<T>::record(std::string_view op, const detail::NodePtr<T>& output,
                     std::vector<detail::NodePtr<T>> inputs, BackwardFn backward) {
  if (consumed_) throw TapeError("tape: recording onto a consumed tape; call reset() first");
  const auto& f = fault();
  if (!f.op.empty() && f.op == op) {
    backward = [inner = std::move(backward), factor = T(f.factor)](detail::Node<T>& out) {
      for (auto& g : out.grad) g *= factor;
      inner(out);
    };
  }
  entries_.push_back(Entry{op, output, std::move(inputs), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw TapeError("backward: tape already consumed; call reset() first");
  if (loss.numel() != 1) {
    throw TapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  }
  consumed_ = true;
  visited_.clear();
  if (!loss.requires_grad()) return;

  auto seed = loss.node()->grad_buffer();
  seed[0] += T(1);
  for (std::size_t i = entries_.size(); i-- > 0;) {
    auto& e = entries_[i];
    if (e.output->grad.empty()) continue;
    visited_.push_back(i);
    for (auto& in : e.inputs) {
      if (in->requires_grad) in->grad_buffer();
    }
    e.backward(*e.output);
    if (!e.output->leaf) {
      e.output->grad.clear();
      e.output->grad.shrink_to_fit();
    }
  }
}

template <typename T>
void Tape<T>::reset() {
  entries_.clear();
  visited_.clear();
  consumed_ = false;
}

template <typename T>
void Tape<T>::rewind(std::size_t mark) {
  if (mark > entries_.size()) throw TapeError("rewind: mark beyond tape end");
  entries_.resize(mark);
}

namespace detail {

template <typename T>
bool should_record(const std::vector<NodePtr<T>>& inputs) {
  if (Tape<T>::active() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const NodePtr<T>& n) { return n && n->requires_grad; });
}

template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> values,
                      std::vector<NodePtr<T>> inputs, typename Tape<T>::BackwardFn backward) {
  for (const auto v : values) {
    if (!std::isfinite(v)) {
      throw OverflowError(std::string(op) + ": non-finite output (shape " + to_string(shape) +
                          ")");
    }
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  if (should_record(inputs)) {
    node->requires_grad = true;
    node->leaf = false;
    Tape<T>::active()->record(op, node, std::move(inputs), std::move(backward));
  }
  return Tensor<T>(std::move(node));
}

template bool should_record<float>(const std::vector<NodePtr<float>>&);
template bool should_record<double>(const std::vector<NodePtr<double>>&);
template Tensor<float> make_result<float>(std::string_view, Shape, std::vector<float>,
                                          std::vector<NodePtr<float>>, Tape<float>::BackwardFn);
template Tensor<double> make_result<double>(std::string_view, Shape, std::vector<double>,
                                            std::vector<NodePtr<double>>,
                                            Tape<double>::BackwardFn);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace gode
