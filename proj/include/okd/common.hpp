#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace okd {

using Scalar = double;
using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using MatrixMap = Eigen::Map<MatrixX>;
using ConstMatrixMap = Eigen::Map<const MatrixX>;
using ArrayMap = Eigen::Map<ArrayX>;
using ConstArrayMap = Eigen::Map<const ArrayX>;

/// Incompatible extents, ranks, or element counts.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Caller broke an API precondition (non-scalar loss, foreign tape, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Inconsistent model or training configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Input data outside its admissible domain.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated file; the message names the file and, where known, the offset.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

}  // namespace okd
