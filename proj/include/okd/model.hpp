#pragma once

#include "okd/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace okd {

struct ConvSpec {
  Index out_channels = 0;
  Index kernel = 3;
  Index dilation = 1;
};

/// Convolutions between two pooling layers, optionally closed by a 2x2 max-pool.
struct BlockSpec {
  std::vector<ConvSpec> convs;
  bool trailing_pool = false;
};

/// Channel scaling num/den. Scaled widths round to nearest and never drop
/// below 8 channels; the identity multiplier leaves widths untouched.
struct WidthMultiplier {
  int num = 1;
  int den = 1;

  bool is_identity() const noexcept { return num == den; }
  Index apply(Index channels) const;
};

/// Blocks 2..N of one branch, written at teacher (base) width.
struct BranchConfig {
  std::vector<BlockSpec> blocks;
  WidthMultiplier width;
  bool head = true;  // 1x1 conv to a single density channel, then ReLU
};

enum class InitScheme { Gaussian, He };

struct ModelConfig {
  Index in_channels = 3;
  BlockSpec stem;
  BranchConfig teacher;
  BranchConfig student;
  InitScheme init = InitScheme::He;
  Scalar init_std = 0.01;  // used by InitScheme::Gaussian
};

/// Stem 16,16 | 32,32 | 48x3 | 64x3 | 64x3 dilated, student at 1/4 width.
ModelConfig desk_config();
/// VGG-16 front-end widths with a 256-channel dilated back-end, student at 1/4.
ModelConfig full_config();
/// Student branch sharing the teacher's topology at the given width.
BranchConfig scaled_branch(const BranchConfig& base, WidthMultiplier width);

enum class Component { Stem, Teacher, Student, Adapters };
std::string_view to_string(Component c);

/// t_i, s_i and the adapted s_i' for blocks 2..N.
struct FeatureGroup {
  std::vector<Tensor> teacher;
  std::vector<Tensor> student;
  std::vector<Tensor> adapted;
};

struct JointOutput {
  Tensor teacher_density;
  Tensor student_density;
  FeatureGroup features;
};

/// Which branches to run and which parameter groups get watched on the tape.
struct ForwardOptions {
  bool run_teacher = true;
  bool run_student = true;
  bool adapters = true;
  bool train_stem = true;
  bool train_teacher = true;
  bool train_student = true;
  bool train_adapters = true;
  /// Student branch reads a detached copy of the stem output, so no student-side
  /// loss reaches the stem.
  bool detach_student_input = false;
};

class Model {
 public:
  struct ConvLayer {
    std::size_t weight = 0;
    std::size_t bias = 0;
    Index dilation = 1;
    Index padding = 0;
  };
  struct Block {
    std::vector<ConvLayer> convs;
    bool pool = false;
  };

  const ModelConfig& config() const noexcept { return config_; }

  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  std::span<Parameter> component(Component c);
  std::span<const Parameter> component(Component c) const;
  Parameter* find(std::string_view name);

  const Block& stem() const noexcept { return stem_; }
  const std::vector<Block>& teacher_blocks() const noexcept { return teacher_; }
  const std::vector<Block>& student_blocks() const noexcept { return student_; }
  const std::vector<ConvLayer>& adapters() const noexcept { return adapters_; }
  const ConvLayer& teacher_head() const noexcept { return teacher_head_; }
  const ConvLayer& student_head() const noexcept { return student_head_; }

  void zero_grad();

 private:
  friend Model build_model(const ModelConfig& config, std::uint64_t seed);
  friend JointOutput forward_joint(Model& model, const Tensor& image, Tape* tape, const ForwardOptions& options);

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::array<std::pair<std::size_t, std::size_t>, 4> ranges_{};
  Block stem_;
  std::vector<Block> teacher_;
  std::vector<Block> student_;
  ConvLayer teacher_head_;
  ConvLayer student_head_;
  std::vector<ConvLayer> adapters_;
};

/// Weights drawn from N(0, std^2) (std per InitScheme), biases zero. Teacher
/// and student must share block/pool topology.
Model build_model(const ModelConfig& config, std::uint64_t seed);

/// Shared stem, then both branches. Image extents must be divisible by
/// 2^(number of pools). Pass a tape to record for training.
JointOutput forward_joint(Model& model, const Tensor& image, Tape* tape = nullptr, const ForwardOptions& options = {});

/// 1x1 channel lift s -> s' (channels(s) must equal weight.dim(1)).
Tensor adapt(const Tensor& features, const Tensor& weight, const Tensor& bias);

Index param_count(const Model& model, Component c);
/// Multiply-accumulates of one forward pass over a single H x W image.
Index mac_count(const Model& model, Component c, Index height, Index width);

// Checkpoint: "OKDC", u32 version, then per parameter: u32 name length, name
// bytes, u32 rank, u64 extents, f64 values. Little-endian throughout.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
/// Parameters must match the model by name and shape.
void load_checkpoint(Model& model, const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  Tensor value;
};
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

}  // namespace okd
