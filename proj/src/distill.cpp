#include "okd/distill.hpp"

#include "okd/ops.hpp"

#include <algorithm>

namespace okd {

namespace {

void check_aligned(std::span<const Tensor> a, std::span<const Tensor> t, const char* op) {
  if (a.size() != t.size())
    throw DimensionError(std::string(op) + ": " + std::to_string(a.size()) + " student features vs " +
                         std::to_string(t.size()) + " teacher features");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].rank() != 4 || t[i].rank() != 4)
      throw DimensionError(std::string(op) + ": features must be [B,C,H,W]");
    if (a[i].dim(0) != t[i].dim(0) || a[i].dim(1) != t[i].dim(1))
      throw DimensionError(std::string(op) + ": block " + std::to_string(i + 2) + " student " +
                           to_string(a[i].shape()) + " vs teacher " + to_string(t[i].shape()));
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
}

Tensor batch_mean(const Tensor& total, Index batch) { return scalar_mul(total, 1.0 / static_cast<Scalar>(batch)); }

std::vector<Tensor> detached(std::span<const Tensor> xs) {
  std::vector<Tensor> out;
  out.reserve(xs.size());
  for (const Tensor& x : xs) out.push_back(x.detach());
  return out;
}

}  // namespace

Tensor fid_loss(std::span<const Tensor> adapted, std::span<const Tensor> teacher) {
  check_aligned(adapted, teacher, "fid_loss");
  if (adapted.empty()) return Tensor::scalar(0.0);
  Tensor total;
  for (std::size_t i = 0; i < adapted.size(); ++i) {
    const Tensor diff = adaptive_avg_pool(adapted[i], 1, 1) - adaptive_avg_pool(teacher[i], 1, 1);
    const Tensor term = sum(square(diff)) * (1.0 / static_cast<Scalar>(adapted[i].dim(1)));
    total = i == 0 ? term : total + term;
  }
  return batch_mean(total, adapted[0].dim(0));
}

Tensor relation_matrix(const Tensor& features, Index pool) {
  if (features.rank() != 4) throw DimensionError("relation_matrix: features must be [B,C,H,W]");
  if (pool < 1 || pool > std::min(features.dim(2), features.dim(3)))
    throw DimensionError("relation_matrix: pool " + std::to_string(pool) + " exceeds feature extent " +
                         to_string(features.shape()));
  const Index b = features.dim(0), c = features.dim(1);
  const Tensor pooled = adaptive_avg_pool(features, pool, pool);
  const Tensor channels_by_pixel = reshape(pooled, {b, c, pool * pool});
  const Tensor pixel_by_channels = transpose2d_last(channels_by_pixel);
  return sigmoid(bmm(pixel_by_channels, channels_by_pixel));
}

Tensor pair_relation(const Tensor& k_i, const Tensor& k_j, Index pool) {
  check_same_shape(k_i, k_j, "pair_relation");
  return (k_i * k_j) * (1.0 / static_cast<Scalar>(pool * pool));
}

std::vector<std::pair<std::size_t, std::size_t>> relation_pairs(std::size_t blocks, FrdMode mode) {
  if (blocks < 2) throw ConfigError("feature relation needs at least two blocks");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < blocks; ++i)
    for (std::size_t j = i + 1; j < blocks; ++j)
      if (mode == FrdMode::Dense || j == i + 1) pairs.emplace_back(i, j);
  return pairs;
}

std::vector<RelationMatrix> relation_matrices(std::span<const Tensor> features, FrdMode mode, Index pool) {
  const auto pairs = relation_pairs(features.size(), mode);
  std::vector<Tensor> k;
  for (const Tensor& f : features) k.push_back(relation_matrix(f, pool));
  std::vector<RelationMatrix> out;
  for (auto [i, j] : pairs)
    out.push_back({pair_relation(k[i], k[j], pool), static_cast<int>(i) + 2, static_cast<int>(j) + 2, pool});
  return out;
}

std::vector<RelationTerm> frd_terms(std::span<const Tensor> adapted, std::span<const Tensor> teacher, FrdMode mode,
                                    Index pool) {
  check_aligned(adapted, teacher, "frd_loss");
  const auto rs = relation_matrices(adapted, mode, pool);
  const auto rt = relation_matrices(teacher, mode, pool);
  const Index batch = adapted[0].dim(0);
  std::vector<RelationTerm> terms;
  for (std::size_t p = 0; p < rs.size(); ++p)
    terms.push_back({rs[p].label(), batch_mean(sum(square(rs[p].values - rt[p].values)), batch)});
  return terms;
}

Tensor frd_loss(std::span<const Tensor> adapted, std::span<const Tensor> teacher, FrdMode mode, Index pool) {
  const auto terms = frd_terms(adapted, teacher, mode, pool);
  Tensor total = terms.front().value;
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i].value;
  return total;
}

Tensor ssim(const Tensor& x, const Tensor& y, Index window) {
  check_same_shape(x, y, "ssim");
  if (x.rank() != 4) throw DimensionError("ssim: maps must be [B,C,H,W]");
  if (x.dim(2) < window || x.dim(3) < window)
    throw DimensionError("ssim: map " + to_string(x.shape()) + " smaller than window " + std::to_string(window));
  // Dynamic range L = max(max x, max y, 1e-3); it depends on the inputs, so
  // it stays on the tape like everything else.
  const Scalar x_max = x.array().maxCoeff(), y_max = y.array().maxCoeff();
  const Tensor range = std::max(x_max, y_max) < 1e-3 ? Tensor::scalar(1e-3)
                       : x_max >= y_max               ? max_value(x)
                                                      : max_value(y);
  const Tensor c1 = square(range * 0.01);
  const Tensor c2 = square(range * 0.03);

  const Tensor mu_x = avg_pool2d(x, window, 1);
  const Tensor mu_y = avg_pool2d(y, window, 1);
  const Tensor var_x = avg_pool2d(x * x, window, 1) - mu_x * mu_x;
  const Tensor var_y = avg_pool2d(y * y, window, 1) - mu_y * mu_y;
  const Tensor cov = avg_pool2d(x * y, window, 1) - mu_x * mu_y;

  const Tensor num = ((mu_x * mu_y) * 2.0 + c1) * (cov * 2.0 + c2);
  const Tensor den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
  return mean(num / den);
}

Tensor rd_loss(const Tensor& teacher_density, const Tensor& student_density, Index window) {
  return -ssim(teacher_density, student_density, window) + 1.0;
}

Tensor mse_feature_loss(std::span<const Tensor> adapted, std::span<const Tensor> teacher) {
  check_aligned(adapted, teacher, "mse_feature_loss");
  if (adapted.empty()) return Tensor::scalar(0.0);
  Tensor total;
  for (std::size_t i = 0; i < adapted.size(); ++i) {
    check_same_shape(adapted[i], teacher[i], "mse_feature_loss");
    const Tensor term = mean(square(adapted[i] - teacher[i]));
    total = i == 0 ? term : total + term;
  }
  return total;
}

Tensor cos_feature_loss(std::span<const Tensor> adapted, std::span<const Tensor> teacher) {
  check_aligned(adapted, teacher, "cos_feature_loss");
  if (adapted.empty()) return Tensor::scalar(0.0);
  Tensor total;
  for (std::size_t i = 0; i < adapted.size(); ++i) {
    check_same_shape(adapted[i], teacher[i], "cos_feature_loss");
    const Tensor dot = sum(adapted[i] * teacher[i], 1);
    const Tensor ss = sum(square(adapted[i]), 1);
    const Tensor tt = sum(square(teacher[i]), 1);
    // Zero channel vectors get cosine 0.
    const Tensor cosine = dot / sqrt(ss * tt + 1e-24);
    const Tensor term = -mean(cosine) + 1.0;
    total = i == 0 ? term : total + term;
  }
  return total;
}

Tensor mse_response_loss(const Tensor& teacher_density, const Tensor& student_density) {
  return mse_loss(student_density, teacher_density);
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  check_same_shape(prediction, target, "mse_loss");
  return mean(square(prediction - target));
}

LossBreakdown total_loss(const Tensor& gt_density, const JointOutput& output, const DistillConfig& cfg) {
  const LossWeights& w = cfg.weights;
  if (w.alpha1 < 0 || w.alpha2 < 0 || w.alpha3 < 0) throw ConfigError("loss weights must be non-negative");
  check_same_shape(output.student_density, output.teacher_density, "total_loss");
  check_same_shape(output.student_density, gt_density, "total_loss");

  LossBreakdown out;
  const Tensor l_st = mse_loss(output.student_density, gt_density);
  const Tensor l_tea = mse_loss(output.teacher_density, gt_density);
  out.student = l_st.item();
  out.teacher = l_tea.item();
  Tensor total = l_st + l_tea;

  const auto& f = output.features;
  std::vector<Tensor> teacher_features;
  Tensor teacher_density = output.teacher_density;
  if (w.detach_teacher) {
    teacher_features = detached(f.teacher);
    teacher_density = teacher_density.detach();
  } else {
    teacher_features = f.teacher;
  }

  if (w.alpha1 > 0 && cfg.feature != FeatureLossKind::Off) {
    Tensor term;
    switch (cfg.feature) {
      case FeatureLossKind::Fid:
        term = fid_loss(f.adapted, teacher_features);
        break;
      case FeatureLossKind::Mse:
        term = mse_feature_loss(f.adapted, teacher_features);
        break;
      case FeatureLossKind::Cos:
        term = cos_feature_loss(f.adapted, teacher_features);
        break;
      case FeatureLossKind::Off:
        break;
    }
    out.feature = term.item();
    total = total + term * w.alpha1;
  }
  if (w.alpha2 > 0 && cfg.relation) {
    const auto terms = frd_terms(f.adapted, teacher_features, cfg.relation_mode, cfg.relation_pool);
    Tensor term = terms.front().value;
    for (std::size_t i = 1; i < terms.size(); ++i) term = term + terms[i].value;
    for (const auto& t : terms) out.relation_pairs.emplace_back(t.label, t.value.item());
    out.relation = term.item();
    total = total + term * w.alpha2;
  }
  if (w.alpha3 > 0 && cfg.response != ResponseLossKind::Off) {
    const Tensor term = cfg.response == ResponseLossKind::Ssim
                            ? rd_loss(teacher_density, output.student_density, cfg.ssim_window)
                            : mse_response_loss(teacher_density, output.student_density);
    out.response = term.item();
    total = total + term * w.alpha3;
  }
  out.total = total;
  return out;
}

}  // namespace okd
