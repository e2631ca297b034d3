#pragma once

#include "okd/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

namespace okd {

/// Head position in pixel coordinates; pixel (r, c) covers [c, c+1) x [r, r+1).
struct Point {
  Scalar x = 0.0;
  Scalar y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

struct AnnotatedScene {
  Tensor image;  // [3,H,W], values in [0,1]
  std::vector<Point> points;
  Tensor density;  // [1,H/ds,W/ds], sums to points.size()
};

using Dataset = std::vector<AnnotatedScene>;

struct DensityParams {
  Scalar sigma = 2.0;  // in downsampled grid cells
  Index downsample = 8;
};

/// Sum of unit-mass Gaussians, one per point, each truncated at 4 sigma and
/// renormalized over the grid cells it reaches.
Tensor density_from_points(std::span<const Point> points, Index height, Index width, const DensityParams& params = {});

struct SceneParams {
  Index height = 64;
  Index width = 64;
  Index count_min = 5;
  Index count_max = 80;
  Scalar radius_min = 1.0;
  Scalar radius_max = 2.0;
  Scalar noise = 0.03;
  std::uint64_t seed = 0;
  DensityParams density;
};

/// Independent generator for scene `index` of a run seeded with `seed`.
std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t index);

/// Soft dark blobs at uniformly drawn head points over a smooth textured
/// background with pixel noise.
AnnotatedScene synth_scene(const SceneParams& params, std::mt19937_64& rng);
/// `count` scenes, scene i drawn from scene_rng(params.seed, i).
Dataset synth_dataset(const SceneParams& params, Index count);

struct AugmentParams {
  Index crop_height = 64;
  Index crop_width = 64;
  Scalar scale_min = 0.8;
  Scalar scale_max = 1.2;
  Scalar flip_probability = 0.5;
  Scalar gamma_min = 0.7;
  Scalar gamma_max = 1.4;
  DensityParams density;
};

/// One concrete augmentation. The scale is already clamped so the crop fits.
struct AugmentDraw {
  Scalar scale = 1.0;
  Index crop_y = 0;
  Index crop_x = 0;
  bool flip = false;
  Scalar gamma = 1.0;
};

AugmentDraw draw_augment(const AnnotatedScene& scene, const AugmentParams& params, std::mt19937_64& rng);
/// Bilinear rescale, crop (points outside are dropped), optional horizontal
/// mirror, gamma; the density is regenerated from the surviving points.
AnnotatedScene apply_augment(const AnnotatedScene& scene, const AugmentDraw& draw, const AugmentParams& params);
AnnotatedScene augment(const AnnotatedScene& scene, const AugmentParams& params, std::mt19937_64& rng);

// On-disk layout: per scene NAME.okdi ("OKDI", u32 H, u32 W, three f64 planes,
// little-endian) and NAME.json ({"points": [[x, y], ...]}).
void write_image(const std::filesystem::path& path, const Tensor& image);
Tensor read_image(const std::filesystem::path& path);
void write_scene(const std::filesystem::path& dir, const std::string& name, const AnnotatedScene& scene);
/// Scenes sorted by file name; the density is rebuilt from the points.
Dataset read_dataset(const std::filesystem::path& dir, const DensityParams& density = {});

/// Stack images to [B,3,H,W] and densities to [B,1,h,w].
struct Batch {
  Tensor images;
  Tensor densities;
};
Batch make_batch(std::span<const AnnotatedScene> scenes);

}  // namespace okd
