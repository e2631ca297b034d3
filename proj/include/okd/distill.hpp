#pragma once

#include "okd/model.hpp"
#include "okd/tensor.hpp"

#include <span>
#include <string>
#include <vector>

namespace okd {

// All losses reduce over the batch by averaging, so their scale does not
// depend on batch size.

/// Sum over blocks of ||gap(s') - gap(t)||^2 / C, gap = global average pool.
Tensor fid_loss(std::span<const Tensor> adapted, std::span<const Tensor> teacher);

/// K = sigmoid(X^T X) for x pooled to P x P, X the [C, P*P] pixel matrix.
/// Returns [B, P*P, P*P].
Tensor relation_matrix(const Tensor& features, Index pool);

/// R = (K_i * K_j) / P^2, elementwise.
Tensor pair_relation(const Tensor& k_i, const Tensor& k_j, Index pool);

enum class FrdMode { Dense, Sparse };

/// Block pairs (i < j) used by the relation loss, as indices into the feature
/// lists: every pair when dense, neighbours only when sparse.
std::vector<std::pair<std::size_t, std::size_t>> relation_pairs(std::size_t blocks, FrdMode mode);

/// Relation matrix of one block pair, labelled with block numbers (first
/// feature is block 2).
struct RelationMatrix {
  Tensor values;
  int block_i = 0;
  int block_j = 0;
  Index pool = 0;

  std::string label() const { return std::to_string(block_i) + "-" + std::to_string(block_j); }
};

std::vector<RelationMatrix> relation_matrices(std::span<const Tensor> features, FrdMode mode, Index pool);

struct RelationTerm {
  std::string label;
  Tensor value;
};

/// Per-pair ||R^s' - R^t||^2 terms of the relation loss.
std::vector<RelationTerm> frd_terms(std::span<const Tensor> adapted, std::span<const Tensor> teacher, FrdMode mode,
                                    Index pool);
Tensor frd_loss(std::span<const Tensor> adapted, std::span<const Tensor> teacher, FrdMode mode, Index pool);

/// Mean structural similarity over all window positions (uniform window,
/// stride 1) and the batch. Constants use L = max(max x, max y, 1e-3).
Tensor ssim(const Tensor& x, const Tensor& y, Index window = 8);
Tensor rd_loss(const Tensor& teacher_density, const Tensor& student_density, Index window = 8);

// Alternatives for ablations.
Tensor mse_feature_loss(std::span<const Tensor> adapted, std::span<const Tensor> teacher);
/// Sum over blocks of 1 - mean per-pixel cosine between channel vectors.
Tensor cos_feature_loss(std::span<const Tensor> adapted, std::span<const Tensor> teacher);
Tensor mse_response_loss(const Tensor& teacher_density, const Tensor& student_density);

/// Mean squared error over all elements.
Tensor mse_loss(const Tensor& prediction, const Tensor& target);

struct LossWeights {
  Scalar alpha1 = 1.0;     // feature internal
  Scalar alpha2 = 10.0;    // feature relation
  Scalar alpha3 = 1000.0;  // response
  bool detach_teacher = true;
};

enum class FeatureLossKind { Off, Fid, Mse, Cos };
enum class ResponseLossKind { Off, Ssim, Mse };

struct DistillConfig {
  LossWeights weights;
  FeatureLossKind feature = FeatureLossKind::Fid;
  bool relation = true;
  FrdMode relation_mode = FrdMode::Dense;
  ResponseLossKind response = ResponseLossKind::Ssim;
  Index relation_pool = 8;
  Index ssim_window = 8;
};

struct LossBreakdown {
  Tensor total;
  Scalar student = 0.0;   // L_st
  Scalar teacher = 0.0;   // L_tea
  Scalar feature = 0.0;   // L_f (unweighted)
  Scalar relation = 0.0;  // L_r (unweighted)
  Scalar response = 0.0;  // L_s (unweighted)
  std::vector<std::pair<std::string, Scalar>> relation_pairs;
};

/// L = L_st + L_tea + a1*L_f + a2*L_r + a3*L_s. A distillation term is skipped
/// when its weight is zero or its kind is Off.
LossBreakdown total_loss(const Tensor& gt_density, const JointOutput& output, const DistillConfig& config);

}  // namespace okd
