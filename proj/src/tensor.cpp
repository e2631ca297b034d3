#include "okd/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace okd {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (Index e : shape)
    if (e < 1) throw DimensionError("tensor extents must be >= 1, got " + to_string(shape));
}

}  // namespace

Tensor::Tensor() : data_(std::make_shared<std::vector<Scalar>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_ = std::make_shared<std::vector<Scalar>>(static_cast<std::size_t>(okd::numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<Scalar> values) : shape_(std::move(shape)) {
  check_extents(shape_);
  if (okd::numel(shape_) != static_cast<Index>(values.size()))
    throw DimensionError("shape " + to_string(shape_) + " does not hold " + std::to_string(values.size()) +
                         " values");
  data_ = std::make_shared<std::vector<Scalar>>(std::move(values));
}

Tensor Tensor::scalar(Scalar value) { return Tensor(Shape{}, std::vector<Scalar>{value}); }

Index Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw DimensionError("axis out of range for shape " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

std::span<Scalar> Tensor::mutable_data() {
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<Scalar>>(*data_);
  return *data_;
}

Scalar Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

Scalar Tensor::at(std::initializer_list<Index> index) const {
  if (static_cast<int>(index.size()) != rank()) throw DimensionError("index rank mismatch");
  Index flat = 0;
  std::size_t axis = 0;
  for (Index i : index) {
    if (i < 0 || i >= shape_[axis]) throw DimensionError("index out of range for shape " + to_string(shape_));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return (*data_)[static_cast<std::size_t>(flat)];
}

Tensor Tensor::detach() const {
  Tensor out = *this;
  out.tape_ = nullptr;
  out.node_.reset();
  return out;
}

Tensor Tensor::view(Shape shape) const {
  check_extents(shape);
  if (okd::numel(shape) != numel())
    throw DimensionError("cannot view " + to_string(shape_) + " as " + to_string(shape));
  Tensor out = detach();
  out.shape_ = std::move(shape);
  return out;
}

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(Tensor::zeros(value.shape())) {}

void Parameter::zero_grad() {
  auto g = grad.mutable_data();
  std::fill(g.begin(), g.end(), 0.0);
}

Tape* common_tape(std::span<const Tensor> inputs) {
  Tape* tape = nullptr;
  for (const Tensor& t : inputs) {
    if (!t.requires_grad()) continue;
    if (tape && t.tape() != tape) throw ContractError("operands recorded on different tapes");
    tape = t.tape();
  }
  return tape;
}

Tensor Tape::watch(Parameter& param) {
  Node node;
  node.numel = param.value.numel();
  node.is_leaf = true;
  node.sink = &param;
  nodes_.push_back(std::move(node));
  Tensor out = param.value.detach();
  out.tape_ = this;
  out.node_ = nodes_.size() - 1;
  return out;
}

Tensor Tape::watch(const Tensor& value) {
  Node node;
  node.numel = value.numel();
  node.is_leaf = true;
  node.leaf_acc.assign(static_cast<std::size_t>(node.numel), 0.0);
  nodes_.push_back(std::move(node));
  Tensor out = value.detach();
  out.tape_ = this;
  out.node_ = nodes_.size() - 1;
  return out;
}

std::size_t Tape::check_owned(const Tensor& t) const {
  if (!t.requires_grad() || t.tape() != this) throw ContractError("tensor is not recorded on this tape");
  return *t.node_id();
}

Tensor Tape::grad(const Tensor& leaf) const {
  const Node& node = nodes_[check_owned(leaf)];
  if (!node.is_leaf || node.sink) throw ContractError("grad() is only available for watched tensors");
  return Tensor(leaf.shape(), node.leaf_acc);
}

Tensor Tape::record(Tensor output, std::span<const Tensor> inputs, BackwardFn backward) {
  Node node;
  node.numel = output.numel();
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    if (in.requires_grad()) {
      node.inputs.emplace_back(check_owned(in));
    } else {
      node.inputs.emplace_back(std::nullopt);
    }
  }
  nodes_.push_back(std::move(node));
  output.tape_ = this;
  output.node_ = nodes_.size() - 1;
  return output;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  last_visits_ = 0;
  // A constant loss has no path to any leaf.
  if (!loss.requires_grad()) return;
  const std::size_t root = check_owned(loss);
  for (Node& n : nodes_) n.grad.clear();
  nodes_[root].grad.assign(1, 1.0);

  std::vector<std::vector<Scalar>*> grad_in;
  for (std::size_t id = root + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.grad.empty()) continue;
    ++last_visits_;
    if (node.is_leaf) {
      Scalar* dst = node.sink ? node.sink->grad.mutable_data().data() : node.leaf_acc.data();
      for (Index i = 0; i < node.numel; ++i) dst[i] += node.grad[static_cast<std::size_t>(i)];
      continue;
    }
    grad_in.clear();
    for (const auto& in : node.inputs) {
      if (!in) {
        grad_in.push_back(nullptr);
        continue;
      }
      Node& src = nodes_[*in];
      if (src.grad.empty()) src.grad.assign(static_cast<std::size_t>(src.numel), 0.0);
      grad_in.push_back(&src.grad);
    }
    node.backward(node.grad, grad_in);
    node.grad.clear();
    node.grad.shrink_to_fit();
  }
}

}  // namespace okd
