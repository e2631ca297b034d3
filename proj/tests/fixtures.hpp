#pragma once
// Small configurations shared by the unit tests.

#include "okd/data.hpp"
#include "okd/distill.hpp"
#include "okd/model.hpp"
#include "okd/train.hpp"

namespace fixtures {

using namespace okd;

inline BlockSpec block(std::vector<Index> widths, bool pool, Index dilation = 1) {
  BlockSpec b;
  for (Index w : widths) b.convs.push_back({w, 3, dilation});
  b.trailing_pool = pool;
  return b;
}

// Same block/pool layout as the desk model with a handful of channels, so that
// finite differences over every student-side parameter stay cheap.
inline ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.stem = block({4}, true);
  cfg.teacher.blocks = {block({8}, true), block({8}, true), block({8}, false), block({8}, false, 2)};
  cfg.student = scaled_branch(cfg.teacher, {1, 2});
  return cfg;
}

// Loss settings that fit 32x32 images (features down to 4x4, 4x4 density maps).
inline DistillConfig tiny_distill() {
  DistillConfig d;
  d.relation_pool = 4;
  d.ssim_window = 4;
  return d;
}

inline SceneParams tiny_scenes(std::uint64_t seed) {
  SceneParams p;
  p.height = p.width = 32;
  p.count_min = 2;
  p.count_max = 20;
  p.seed = seed;
  return p;
}

inline TrainConfig tiny_train(Index epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.teacher_warmup_epochs = 2;
  c.distill = tiny_distill();
  c.augment_params.crop_height = c.augment_params.crop_width = 32;
  c.seed = 3;
  return c;
}

}  // namespace fixtures
