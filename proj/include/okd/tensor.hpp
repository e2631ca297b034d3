#pragma once

#include "okd/common.hpp"

#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace okd {

class Tape;

/// Dense row-major array of doubles. Copies share storage; writes through
/// mutable_data() detach the storage first, so values recorded on a tape are
/// never modified behind its back.
///
/// A tensor is "tracked" when it is a node on a Tape; only tracked tensors
/// carry gradients.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, Scalar fill = 0.0);
  Tensor(Shape shape, std::vector<Scalar> values);

  static Tensor scalar(Scalar value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const;
  Index numel() const noexcept { return static_cast<Index>(data_->size()); }

  std::span<const Scalar> data() const noexcept { return *data_; }
  std::span<Scalar> mutable_data();
  const Scalar* raw() const noexcept { return data_->data(); }

  ConstArrayMap array() const { return {data_->data(), numel()}; }

  /// Value of a one-element tensor.
  Scalar item() const;
  Scalar at(std::initializer_list<Index> index) const;

  bool requires_grad() const noexcept { return node_.has_value(); }
  Tape* tape() const noexcept { return tape_; }
  std::optional<std::size_t> node_id() const noexcept { return node_; }

  /// Same values, no tape linkage.
  Tensor detach() const;

  /// Same storage viewed under a different shape (element count must match).
  Tensor view(Shape shape) const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<std::vector<Scalar>> data_;
  Tape* tape_ = nullptr;
  std::optional<std::size_t> node_;
};

/// A named trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string name, Tensor value);

  void zero_grad();
};

/// Records operations in execution order so reverse-mode differentiation can
/// replay them back to front. A tape lives for one forward/backward step and
/// must not outlive the tensors that point at it (it is neither copyable nor
/// movable for that reason).
class Tape {
 public:
  /// Receives the output gradient and one accumulator per input; an
  /// accumulator is null when that input does not need a gradient.
  using BackwardFn =
      std::function<void(std::span<const Scalar> grad_out, std::span<std::vector<Scalar>* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is accumulated into `param.grad` on backward().
  Tensor watch(Parameter& param);
  /// Leaf whose gradient is kept on the tape, see grad().
  Tensor watch(const Tensor& value);

  /// Accumulated gradient of a leaf created with watch(const Tensor&).
  Tensor grad(const Tensor& leaf) const;

  /// Adds `output` as a node depending on `inputs`. Used by op kernels.
  Tensor record(Tensor output, std::span<const Tensor> inputs, BackwardFn backward);

  /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Nodes whose backward function ran during the last backward() call.
  std::size_t last_visit_count() const noexcept { return last_visits_; }

 private:
  struct Node {
    std::vector<std::optional<std::size_t>> inputs;
    Index numel = 0;
    BackwardFn backward;
    std::vector<Scalar> grad;     // transient, reset each backward()
    std::vector<Scalar> leaf_acc;  // persistent accumulator of a tensor leaf
    Parameter* sink = nullptr;     // parameter receiving the gradient, if any
    bool is_leaf = false;
  };

  std::size_t check_owned(const Tensor& t) const;

  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

/// Returns the tape shared by the tracked tensors among `inputs`, or null if
/// none is tracked. Mixing tapes is a contract error.
Tape* common_tape(std::span<const Tensor> inputs);

}  // namespace okd
