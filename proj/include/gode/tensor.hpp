#pragma once

// Dense tensors with a define-by-run reverse-mode tape.
//
// A Tensor is a cheap handle to shared storage. Values are immutable once an
// operation has produced them; only parameter leaves are updated in place by
// optimizers, and only between tapes. Operations executed while a Tape is
// active (see Tape::activate) are recorded when at least one input requires
// a gradient; outside an active tape nothing is recorded (inference mode).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gode {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool leaf = true;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), T(0));
    return grad;
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);
  /// Trainable leaf: requires_grad is set and optimizers may update it.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  /// In-place access for optimizers and test fixtures. Never call while a
  /// tape that consumed this tensor is still live.
  std::span<T> mutable_values() { return node_->values; }
  T operator[](std::size_t i) const { return node_->values[i]; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();
  void clear_grad() { node_->grad.clear(); }

  /// Independent copy of the values with no gradient tracking.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const detail::NodePtr<T>& node() const { return node_; }
  explicit Tensor(detail::NodePtr<T> node) : node_(std::move(node)) {}

 private:
  detail::NodePtr<T> node_;
};

/// Ordered record of executed primitives. Backward replays the record in
/// exact reverse order, accumulating gradients additively.
template <typename T>
class Tape {
 public:
  /// Receives the output node with its accumulated gradient populated.
  using BackwardFn = std::function<void(detail::Node<T>& out)>;

  struct Entry {
    std::string_view op;
    detail::NodePtr<T> output;
    std::vector<detail::NodePtr<T>> inputs;
    BackwardFn backward;
  };

  /// Makes a tape the active recorder of the calling thread until the
  /// returned guard is destroyed. Guards nest.
  class [[nodiscard]] Activation {
   public:
    explicit Activation(Tape* tape);
    ~Activation();
    Activation(const Activation&) = delete;
    Activation& operator=(const Activation&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Activation activate() { return Activation(this); }
  static Tape* active();

  void record(std::string_view op, const detail::NodePtr<T>& output,
              std::vector<detail::NodePtr<T>> inputs, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf.
  void backward(const Tensor<T>& loss);
  void reset();

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  /// Entry indices in the order the last backward() visited them.
  const std::vector<std::size_t>& visit_order() const { return visited_; }

  /// Drop every entry recorded after `mark` (results of abandoned work such
  /// as rejected adaptive steps).
  std::size_t mark() const { return entries_.size(); }
  void rewind(std::size_t mark);

 private:
  std::vector<Entry> entries_;
  std::vector<std::size_t> visited_;
  bool consumed_ = false;
};

namespace testing {

/// Scales the incoming gradient of every backward rule for `op` by `factor`
/// on tapes recorded after the call. Negative control for gradient checks;
/// an empty name disables the fault.
void set_backward_fault(std::string_view op, double factor);

}  // namespace testing

namespace detail {

/// Wraps freshly computed values into a tensor and records it on the active
/// tape when any input requires a gradient. Throws OverflowError on
/// non-finite output.
template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> values,
                      std::vector<detail::NodePtr<T>> inputs,
                      typename Tape<T>::BackwardFn backward);

template <typename T>
bool should_record(const std::vector<detail::NodePtr<T>>& inputs);

}  // namespace detail

}  // namespace gode
