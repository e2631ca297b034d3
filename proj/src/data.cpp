#include "okd/data.hpp"

#include "binary_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace okd {

Tensor density_from_points(std::span<const Point> points, Index height, Index width, const DensityParams& params) {
  if (params.sigma <= 0) throw ValidationError("density sigma must be positive");
  if (params.downsample < 1 || height % params.downsample != 0 || width % params.downsample != 0)
    throw DimensionError("density: " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by downsample " + std::to_string(params.downsample));
  const Index gh = height / params.downsample;
  const Index gw = width / params.downsample;
  Tensor density({1, gh, gw});
  auto d = density.mutable_data();

  const Scalar sigma = params.sigma;
  const Scalar cutoff2 = 16.0 * sigma * sigma;
  std::vector<Scalar> kernel(static_cast<std::size_t>(gh * gw));
  for (const Point& p : points) {
    if (!(p.x >= 0 && p.x <= static_cast<Scalar>(width) && p.y >= 0 && p.y <= static_cast<Scalar>(height)))
      throw ValidationError("point (" + std::to_string(p.x) + ", " + std::to_string(p.y) + ") outside " +
                            std::to_string(width) + "x" + std::to_string(height) + " image");
    const Scalar gx = p.x / static_cast<Scalar>(params.downsample);
    const Scalar gy = p.y / static_cast<Scalar>(params.downsample);
    Scalar mass = 0.0;
    for (Index i = 0; i < gh; ++i)
      for (Index j = 0; j < gw; ++j) {
        const Scalar dy = static_cast<Scalar>(i) + 0.5 - gy;
        const Scalar dx = static_cast<Scalar>(j) + 0.5 - gx;
        const Scalar r2 = dx * dx + dy * dy;
        const Scalar v = r2 <= cutoff2 ? std::exp(-r2 / (2.0 * sigma * sigma)) : 0.0;
        kernel[static_cast<std::size_t>(i * gw + j)] = v;
        mass += v;
      }
    if (mass > 0.0) {
      for (std::size_t k = 0; k < kernel.size(); ++k) d[k] += kernel[k] / mass;
    } else {
      const Index i = std::clamp<Index>(static_cast<Index>(gy), 0, gh - 1);
      const Index j = std::clamp<Index>(static_cast<Index>(gx), 0, gw - 1);
      d[static_cast<std::size_t>(i * gw + j)] += 1.0;
    }
  }
  return density;
}

std::mt19937_64 scene_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

AnnotatedScene synth_scene(const SceneParams& params, std::mt19937_64& rng) {
  if (params.count_min < 0 || params.count_max < params.count_min)
    throw ConfigError("scene count range is empty");
  if (params.radius_min <= 0 || params.radius_max < params.radius_min)
    throw ConfigError("scene blob radius range is invalid");
  const Index h = params.height, w = params.width;
  std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
  std::normal_distribution<Scalar> normal(0.0, 1.0);

  // Background: per-channel base tone plus two low-frequency waves.
  std::array<Scalar, 3> base{}, amp{}, fx{}, fy{}, phase{};
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.45 + 0.3 * unit(rng);
    amp[c] = 0.05 + 0.1 * unit(rng);
    fx[c] = 2.0 * std::numbers::pi * (0.5 + 2.0 * unit(rng)) / static_cast<Scalar>(w);
    fy[c] = 2.0 * std::numbers::pi * (0.5 + 2.0 * unit(rng)) / static_cast<Scalar>(h);
    phase[c] = 2.0 * std::numbers::pi * unit(rng);
  }
  Tensor image({3, h, w});
  auto img = image.mutable_data();
  for (int c = 0; c < 3; ++c)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        img[static_cast<std::size_t>((c * h + y) * w + x)] =
            base[c] + amp[c] * std::sin(fx[c] * static_cast<Scalar>(x) + phase[c]) *
                          std::cos(fy[c] * static_cast<Scalar>(y) + phase[c]);

  std::uniform_int_distribution<Index> count_dist(params.count_min, params.count_max);
  const Index count = count_dist(rng);
  AnnotatedScene scene;
  for (Index n = 0; n < count; ++n) {
    const Point p{unit(rng) * static_cast<Scalar>(w), unit(rng) * static_cast<Scalar>(h)};
    const Scalar radius = params.radius_min + (params.radius_max - params.radius_min) * unit(rng);
    const Scalar tone = 0.05 + 0.2 * unit(rng);
    scene.points.push_back(p);
    const Index reach = static_cast<Index>(std::ceil(3.0 * radius));
    const Index cx = static_cast<Index>(p.x), cy = static_cast<Index>(p.y);
    for (Index y = std::max<Index>(0, cy - reach); y <= std::min(h - 1, cy + reach); ++y)
      for (Index x = std::max<Index>(0, cx - reach); x <= std::min(w - 1, cx + reach); ++x) {
        const Scalar dx = static_cast<Scalar>(x) + 0.5 - p.x;
        const Scalar dy = static_cast<Scalar>(y) + 0.5 - p.y;
        const Scalar alpha = std::exp(-(dx * dx + dy * dy) / (2.0 * radius * radius));
        for (int c = 0; c < 3; ++c) {
          Scalar& v = img[static_cast<std::size_t>((c * h + y) * w + x)];
          v = (1.0 - alpha) * v + alpha * tone;
        }
      }
  }
  for (Scalar& v : img) v = std::clamp(v + params.noise * normal(rng), 0.0, 1.0);

  scene.image = image;
  scene.density = density_from_points(scene.points, h, w, params.density);
  return scene;
}

Dataset synth_dataset(const SceneParams& params, Index count) {
  Dataset out;
  out.reserve(static_cast<std::size_t>(std::max<Index>(count, 0)));
  for (Index i = 0; i < count; ++i) {
    auto rng = scene_rng(params.seed, static_cast<std::uint64_t>(i));
    out.push_back(synth_scene(params, rng));
  }
  return out;
}

namespace {

Index scaled_extent(Index n, Scalar scale) { return static_cast<Index>(std::llround(static_cast<Scalar>(n) * scale)); }

Tensor resize_bilinear(const Tensor& image, Index oh, Index ow) {
  const Index ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (oh == h && ow == w) return image;
  Tensor out({ch, oh, ow});
  auto o = out.mutable_data();
  const Scalar* src = image.raw();
  const Scalar sy = static_cast<Scalar>(h) / static_cast<Scalar>(oh);
  const Scalar sx = static_cast<Scalar>(w) / static_cast<Scalar>(ow);
  for (Index y = 0; y < oh; ++y) {
    const Scalar fy = std::clamp((static_cast<Scalar>(y) + 0.5) * sy - 0.5, 0.0, static_cast<Scalar>(h - 1));
    const Index y0 = static_cast<Index>(fy);
    const Index y1 = std::min(y0 + 1, h - 1);
    const Scalar ty = fy - static_cast<Scalar>(y0);
    for (Index x = 0; x < ow; ++x) {
      const Scalar fx = std::clamp((static_cast<Scalar>(x) + 0.5) * sx - 0.5, 0.0, static_cast<Scalar>(w - 1));
      const Index x0 = static_cast<Index>(fx);
      const Index x1 = std::min(x0 + 1, w - 1);
      const Scalar tx = fx - static_cast<Scalar>(x0);
      for (Index c = 0; c < ch; ++c) {
        const Scalar* p = src + c * h * w;
        const Scalar top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const Scalar bottom = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        o[static_cast<std::size_t>((c * oh + y) * ow + x)] = top * (1 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

}  // namespace

AugmentDraw draw_augment(const AnnotatedScene& scene, const AugmentParams& params, std::mt19937_64& rng) {
  const Index h = scene.image.dim(1), w = scene.image.dim(2);
  std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
  AugmentDraw draw;
  draw.scale = params.scale_min + (params.scale_max - params.scale_min) * unit(rng);
  // Too small to hold the crop: clamp the scale up to the smallest that fits.
  if (scaled_extent(h, draw.scale) < params.crop_height || scaled_extent(w, draw.scale) < params.crop_width) {
    draw.scale = std::max(static_cast<Scalar>(params.crop_height) / static_cast<Scalar>(h),
                          static_cast<Scalar>(params.crop_width) / static_cast<Scalar>(w));
  }
  const Index sh = scaled_extent(h, draw.scale), sw = scaled_extent(w, draw.scale);
  draw.crop_y = std::uniform_int_distribution<Index>(0, sh - params.crop_height)(rng);
  draw.crop_x = std::uniform_int_distribution<Index>(0, sw - params.crop_width)(rng);
  draw.flip = unit(rng) < params.flip_probability;
  draw.gamma = params.gamma_min + (params.gamma_max - params.gamma_min) * unit(rng);
  return draw;
}

AnnotatedScene apply_augment(const AnnotatedScene& scene, const AugmentDraw& draw, const AugmentParams& params) {
  const Index ch = scene.image.dim(0), h = scene.image.dim(1), w = scene.image.dim(2);
  const Index sh = scaled_extent(h, draw.scale), sw = scaled_extent(w, draw.scale);
  const Index cH = params.crop_height, cW = params.crop_width;
  if (draw.crop_y < 0 || draw.crop_x < 0 || draw.crop_y + cH > sh || draw.crop_x + cW > sw)
    throw ValidationError("augment: crop window exceeds the scaled image");

  const Tensor scaled = resize_bilinear(scene.image, sh, sw);
  Tensor image({ch, cH, cW});
  auto img = image.mutable_data();
  const Scalar* src = scaled.raw();
  for (Index c = 0; c < ch; ++c)
    for (Index y = 0; y < cH; ++y)
      for (Index x = 0; x < cW; ++x) {
        const Index sx = draw.flip ? cW - 1 - x : x;
        Scalar v = src[(c * sh + draw.crop_y + y) * sw + draw.crop_x + sx];
        if (draw.gamma != 1.0) v = std::pow(std::max(v, 0.0), draw.gamma);
        img[static_cast<std::size_t>((c * cH + y) * cW + x)] = v;
      }

  AnnotatedScene out;
  const Scalar fx = static_cast<Scalar>(sw) / static_cast<Scalar>(w);
  const Scalar fy = static_cast<Scalar>(sh) / static_cast<Scalar>(h);
  for (const Point& p : scene.points) {
    const Scalar x = p.x * fx - static_cast<Scalar>(draw.crop_x);
    const Scalar y = p.y * fy - static_cast<Scalar>(draw.crop_y);
    if (x < 0 || x >= static_cast<Scalar>(cW) || y < 0 || y >= static_cast<Scalar>(cH)) continue;
    out.points.push_back({draw.flip ? static_cast<Scalar>(cW) - x : x, y});
  }
  out.image = image;
  out.density = density_from_points(out.points, cH, cW, params.density);
  return out;
}

AnnotatedScene augment(const AnnotatedScene& scene, const AugmentParams& params, std::mt19937_64& rng) {
  return apply_augment(scene, draw_augment(scene, params, rng), params);
}

namespace {

constexpr char kImageMagic[4] = {'O', 'K', 'D', 'I'};

}  // namespace

void write_image(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("write_image: expected [3,H,W]");
  detail::ByteWriter w;
  w.bytes(kImageMagic, 4);
  w.u32(static_cast<std::uint32_t>(image.dim(1)));
  w.u32(static_cast<std::uint32_t>(image.dim(2)));
  for (Scalar v : image.data()) w.f64(v);
  detail::write_file(path.string(), w.buffer());
}

Tensor read_image(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path.string()), path.string());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kImageMagic, 4) != 0) r.fail("bad magic (expected OKDI)");
  const Index h = r.u32();
  const Index w = r.u32();
  if (h < 1 || w < 1) r.fail("empty image");
  if (r.remaining() < static_cast<std::size_t>(3 * h * w) * 8) r.fail("truncated pixel data");
  std::vector<Scalar> values(static_cast<std::size_t>(3 * h * w));
  for (Scalar& v : values) v = r.f64();
  if (!r.at_end()) r.fail("trailing bytes");
  return Tensor({3, h, w}, std::move(values));
}

void write_scene(const std::filesystem::path& dir, const std::string& name, const AnnotatedScene& scene) {
  write_image(dir / (name + ".okdi"), scene.image);
  nlohmann::json pts = nlohmann::json::array();
  for (const Point& p : scene.points) pts.push_back({p.x, p.y});
  std::ofstream out(dir / (name + ".json"));
  if (!out) throw IoError("cannot write " + (dir / (name + ".json")).string());
  out << nlohmann::json{{"points", pts}}.dump() << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir, const DensityParams& density) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("dataset directory " + dir.string() + " does not exist");
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".okdi") images.push_back(entry.path());
  std::sort(images.begin(), images.end());

  Dataset out;
  for (const fs::path& image_path : images) {
    fs::path ann = image_path;
    ann.replace_extension(".json");
    AnnotatedScene scene;
    scene.image = read_image(image_path);
    std::ifstream in(ann);
    if (!in) throw FormatError(ann.string() + ": missing annotation file");
    nlohmann::json j;
    try {
      in >> j;
      for (const auto& p : j.at("points")) scene.points.push_back({p.at(0).get<Scalar>(), p.at(1).get<Scalar>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(ann.string() + ": malformed annotation: " + e.what());
    }
    scene.density = density_from_points(scene.points, scene.image.dim(1), scene.image.dim(2), density);
    out.push_back(std::move(scene));
  }
  return out;
}

Batch make_batch(std::span<const AnnotatedScene> scenes) {
  if (scenes.empty()) throw ContractError("make_batch: no scenes");
  const Shape& is = scenes.front().image.shape();
  const Shape& ds = scenes.front().density.shape();
  const auto b = static_cast<Index>(scenes.size());
  std::vector<Scalar> images, densities;
  images.reserve(static_cast<std::size_t>(b * numel(is)));
  densities.reserve(static_cast<std::size_t>(b * numel(ds)));
  for (const AnnotatedScene& s : scenes) {
    if (s.image.shape() != is || s.density.shape() != ds) throw DimensionError("make_batch: scene shapes differ");
    images.insert(images.end(), s.image.data().begin(), s.image.data().end());
    densities.insert(densities.end(), s.density.data().begin(), s.density.data().end());
  }
  return {Tensor({b, is[0], is[1], is[2]}, std::move(images)), Tensor({b, ds[0], ds[1], ds[2]}, std::move(densities))};
}

}  // namespace okd
