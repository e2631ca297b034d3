#include "okd/model.hpp"

#include "binary_io.hpp"
#include "okd/ops.hpp"

#include <cmath>
#include <fstream>
#include <random>

namespace okd {

Index WidthMultiplier::apply(Index channels) const {
  if (num <= 0 || den <= 0) throw ConfigError("width multiplier must be positive");
  if (is_identity()) return channels;
  const auto scaled = static_cast<Index>(std::llround(static_cast<double>(channels) * num / den));
  return std::max<Index>(8, scaled);
}

namespace {

BlockSpec block(std::vector<Index> widths, bool pool, Index dilation = 1) {
  BlockSpec b;
  for (Index w : widths) b.convs.push_back({w, 3, dilation});
  b.trailing_pool = pool;
  return b;
}

}  // namespace

BranchConfig scaled_branch(const BranchConfig& base, WidthMultiplier width) {
  BranchConfig out = base;
  out.width = width;
  return out;
}

ModelConfig desk_config() {
  ModelConfig cfg;
  cfg.stem = block({16, 16}, true);
  cfg.teacher.blocks = {block({32, 32}, true), block({48, 48, 48}, true), block({64, 64, 64}, false),
                        block({64, 64, 64}, false, 2)};
  cfg.student = scaled_branch(cfg.teacher, {1, 4});
  return cfg;
}

ModelConfig full_config() {
  ModelConfig cfg;
  cfg.stem = block({64, 64}, true);
  cfg.teacher.blocks = {block({128, 128}, true), block({256, 256, 256}, true), block({512, 512, 512}, false),
                        block({256, 256, 256}, false, 2)};
  cfg.student = scaled_branch(cfg.teacher, {1, 4});
  return cfg;
}

std::string_view to_string(Component c) {
  switch (c) {
    case Component::Stem:
      return "stem";
    case Component::Teacher:
      return "teacher";
    case Component::Student:
      return "student";
    case Component::Adapters:
      return "adapters";
  }
  return "?";
}

std::span<Parameter> Model::component(Component c) {
  const auto [first, last] = ranges_[static_cast<std::size_t>(c)];
  return std::span<Parameter>(params_).subspan(first, last - first);
}

std::span<const Parameter> Model::component(Component c) const {
  const auto [first, last] = ranges_[static_cast<std::size_t>(c)];
  return std::span<const Parameter>(params_).subspan(first, last - first);
}

Parameter* Model::find(std::string_view name) {
  for (Parameter& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void Model::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

namespace {

class Builder {
 public:
  Builder(std::vector<Parameter>& params, const ModelConfig& cfg, std::uint64_t seed)
      : params_(params), cfg_(cfg), rng_(seed) {}

  Model::ConvLayer conv(const std::string& prefix, Index cin, Index cout, Index k, Index dilation) {
    const Index fan_in = cin * k * k;
    const Scalar std = cfg_.init == InitScheme::He ? std::sqrt(2.0 / static_cast<Scalar>(fan_in)) : cfg_.init_std;
    std::normal_distribution<Scalar> normal(0.0, std);
    Tensor w({cout, cin, k, k});
    for (Scalar& v : w.mutable_data()) v = normal(rng_);
    Model::ConvLayer layer;
    layer.weight = params_.size();
    params_.emplace_back(prefix + ".weight", std::move(w));
    layer.bias = params_.size();
    params_.emplace_back(prefix + ".bias", Tensor::zeros({cout}));
    layer.dilation = dilation;
    layer.padding = dilation * (k - 1) / 2;
    return layer;
  }

  Model::Block block(const std::string& prefix, const BlockSpec& spec, WidthMultiplier width, Index& channels) {
    Model::Block b;
    b.pool = spec.trailing_pool;
    for (std::size_t i = 0; i < spec.convs.size(); ++i) {
      const ConvSpec& c = spec.convs[i];
      if (c.kernel % 2 == 0 || c.kernel < 1) throw ConfigError(prefix + ": kernel size must be odd");
      if (c.dilation < 1) throw ConfigError(prefix + ": dilation must be >= 1");
      const Index out = width.apply(c.out_channels);
      b.convs.push_back(conv(prefix + ".conv" + std::to_string(i + 1), channels, out, c.kernel, c.dilation));
      channels = out;
    }
    return b;
  }

 private:
  std::vector<Parameter>& params_;
  const ModelConfig& cfg_;
  std::mt19937_64 rng_;
};

void check_topology(const ModelConfig& cfg) {
  const auto& t = cfg.teacher;
  const auto& s = cfg.student;
  if (t.blocks.size() != s.blocks.size()) throw ConfigError("teacher and student have different block counts");
  if (t.head != s.head) throw ConfigError("teacher and student disagree on the output head");
  for (std::size_t i = 0; i < t.blocks.size(); ++i) {
    const auto& a = t.blocks[i];
    const auto& b = s.blocks[i];
    if (a.trailing_pool != b.trailing_pool || a.convs.size() != b.convs.size())
      throw ConfigError("block " + std::to_string(i + 2) + ": teacher and student topology differ");
    for (std::size_t j = 0; j < a.convs.size(); ++j)
      if (a.convs[j].kernel != b.convs[j].kernel || a.convs[j].dilation != b.convs[j].dilation)
        throw ConfigError("block " + std::to_string(i + 2) + ": teacher and student kernels differ");
  }
  if (cfg.in_channels < 1) throw ConfigError("input needs at least one channel");
}

Tensor use(Parameter& p, Tape* tape, bool trainable) { return (tape && trainable) ? tape->watch(p) : p.value; }

Tensor run_conv(std::vector<Parameter>& params, const Model::ConvLayer& layer, const Tensor& x, Tape* tape,
                bool trainable) {
  return conv2d(x, use(params[layer.weight], tape, trainable), use(params[layer.bias], tape, trainable),
                layer.dilation, layer.padding);
}

Tensor run_block(std::vector<Parameter>& params, const Model::Block& block, Tensor x, Tape* tape, bool trainable,
                 Tensor* pre_pool) {
  for (const auto& layer : block.convs) x = relu(run_conv(params, layer, x, tape, trainable));
  if (pre_pool) *pre_pool = x;
  if (block.pool) x = maxpool2d(x, 2, 2);
  return x;
}

}  // namespace

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  check_topology(config);
  Model model;
  model.config_ = config;
  Builder build(model.params_, config, seed);

  Index channels = config.in_channels;
  model.ranges_[0].first = 0;
  model.stem_ = build.block("stem", config.stem, {}, channels);
  model.ranges_[0].second = model.params_.size();
  const Index stem_channels = channels;

  std::vector<Index> teacher_widths;
  model.ranges_[1].first = model.params_.size();
  for (std::size_t i = 0; i < config.teacher.blocks.size(); ++i) {
    model.teacher_.push_back(build.block("teacher.block" + std::to_string(i + 2), config.teacher.blocks[i],
                                         config.teacher.width, channels));
    teacher_widths.push_back(channels);
  }
  if (config.teacher.head) model.teacher_head_ = build.conv("teacher.head", channels, 1, 1, 1);
  model.ranges_[1].second = model.params_.size();

  std::vector<Index> student_widths;
  channels = stem_channels;
  model.ranges_[2].first = model.params_.size();
  for (std::size_t i = 0; i < config.student.blocks.size(); ++i) {
    model.student_.push_back(build.block("student.block" + std::to_string(i + 2), config.student.blocks[i],
                                         config.student.width, channels));
    student_widths.push_back(channels);
  }
  if (config.student.head) model.student_head_ = build.conv("student.head", channels, 1, 1, 1);
  model.ranges_[2].second = model.params_.size();

  model.ranges_[3].first = model.params_.size();
  for (std::size_t i = 0; i < student_widths.size(); ++i)
    model.adapters_.push_back(
        build.conv("adapter.block" + std::to_string(i + 2), student_widths[i], teacher_widths[i], 1, 1));
  model.ranges_[3].second = model.params_.size();
  return model;
}

Tensor adapt(const Tensor& features, const Tensor& weight, const Tensor& bias) {
  if (features.rank() != 4 || weight.rank() != 4 || weight.dim(2) != 1 || weight.dim(3) != 1)
    throw DimensionError("adapt: expects [B,C,H,W] features and a [Ct,Cs,1,1] weight");
  if (features.dim(1) != weight.dim(1))
    throw DimensionError("adapt: features have " + std::to_string(features.dim(1)) + " channels, adapter expects " +
                         std::to_string(weight.dim(1)));
  return conv2d(features, weight, bias, 1, 0);
}

JointOutput forward_joint(Model& model, const Tensor& image, Tape* tape, const ForwardOptions& opt) {
  const ModelConfig& cfg = model.config_;
  if (image.rank() != 4 || image.dim(1) != cfg.in_channels)
    throw DimensionError("forward_joint: expected [B," + std::to_string(cfg.in_channels) + ",H,W] image, got " +
                         to_string(image.shape()));
  if (!cfg.teacher.head) throw ConfigError("forward_joint: model has no output head");
  Index pools = cfg.stem.trailing_pool ? 1 : 0;
  for (const auto& b : cfg.teacher.blocks) pools += b.trailing_pool ? 1 : 0;
  const Index stride = Index{1} << pools;
  if (image.dim(2) % stride != 0 || image.dim(3) % stride != 0)
    throw DimensionError("forward_joint: image extents " + to_string(image.shape()) + " not divisible by " +
                         std::to_string(stride));

  auto& params = model.params_;
  JointOutput out;
  const bool stem_trainable = opt.train_stem && (opt.run_teacher || !opt.detach_student_input);
  const Tensor stem_out = run_block(params, model.stem_, image, tape, stem_trainable, nullptr);

  if (opt.run_teacher) {
    Tensor x = stem_out;
    for (const auto& b : model.teacher_) {
      Tensor feature;
      x = run_block(params, b, x, tape, opt.train_teacher, &feature);
      out.features.teacher.push_back(feature);
    }
    out.teacher_density = relu(run_conv(params, model.teacher_head_, x, tape, opt.train_teacher));
  }
  if (opt.run_student) {
    Tensor x = opt.detach_student_input ? stem_out.detach() : stem_out;
    for (std::size_t i = 0; i < model.student_.size(); ++i) {
      Tensor feature;
      x = run_block(params, model.student_[i], x, tape, opt.train_student, &feature);
      out.features.student.push_back(feature);
      if (opt.adapters) {
        const auto& a = model.adapters_[i];
        out.features.adapted.push_back(adapt(feature, use(params[a.weight], tape, opt.train_adapters),
                                             use(params[a.bias], tape, opt.train_adapters)));
      }
    }
    out.student_density = relu(run_conv(params, model.student_head_, x, tape, opt.train_student));
  }
  return out;
}

Index param_count(const Model& model, Component c) {
  Index n = 0;
  for (const Parameter& p : model.component(c)) n += p.value.numel();
  return n;
}

namespace {

Index conv_macs(const std::vector<Parameter>& params, const Model::ConvLayer& layer, Index pixels) {
  const Tensor& w = params[layer.weight].value;
  return w.numel() * pixels;
}

Index branch_macs(const std::vector<Parameter>& params, const std::vector<Model::Block>& blocks, Index h, Index w,
                  const Model::ConvLayer* head) {
  Index macs = 0;
  for (const auto& b : blocks) {
    for (const auto& layer : b.convs) macs += conv_macs(params, layer, h * w);
    if (b.pool) {
      h /= 2;
      w /= 2;
    }
  }
  if (head) macs += conv_macs(params, *head, h * w);
  return macs;
}

}  // namespace

Index mac_count(const Model& model, Component c, Index height, Index width) {
  const auto& params = model.parameters();
  const auto& cfg = model.config();
  Index h = height, w = width;
  if (c == Component::Stem) return branch_macs(params, {model.stem()}, h, w, nullptr);
  if (model.stem().pool) {
    h /= 2;
    w /= 2;
  }
  switch (c) {
    case Component::Teacher:
      return branch_macs(params, model.teacher_blocks(), h, w, cfg.teacher.head ? &model.teacher_head() : nullptr);
    case Component::Student:
      return branch_macs(params, model.student_blocks(), h, w, cfg.student.head ? &model.student_head() : nullptr);
    default:
      break;
  }
  Index macs = 0;
  for (std::size_t i = 0; i < model.adapters().size(); ++i) {
    macs += conv_macs(params, model.adapters()[i], h * w);
    if (model.student_blocks()[i].pool) {
      h /= 2;
      w /= 2;
    }
  }
  return macs;
}

namespace detail {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<unsigned char>& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace detail

namespace {

constexpr char kCheckpointMagic[4] = {'O', 'K', 'D', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  for (const Parameter& p : model.parameters()) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (Index e : p.value.shape()) w.u64(static_cast<std::uint64_t>(e));
    for (Scalar v : p.value.data()) w.f64(v);
  }
  detail::write_file(path.string(), w.buffer());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path.string()), path.string());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) r.fail("bad magic (expected OKDC)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  std::vector<NamedTensor> out;
  while (!r.at_end()) {
    NamedTensor nt;
    const std::uint32_t len = r.u32();
    if (len > 4096) r.fail("implausible parameter name length");
    nt.name.resize(len);
    r.bytes(nt.name.data(), len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible tensor rank");
    Shape shape(rank);
    for (auto& e : shape) {
      e = static_cast<Index>(r.u64());
      if (e < 1 || e > (Index{1} << 32)) r.fail("invalid extent");
    }
    std::vector<Scalar> values(static_cast<std::size_t>(numel(shape)));
    for (auto& v : values) v = r.f64();
    nt.value = Tensor(shape, std::move(values));
    out.push_back(std::move(nt));
  }
  return out;
}

void load_checkpoint(Model& model, const std::filesystem::path& path) {
  auto entries = read_checkpoint(path);
  auto& params = model.parameters();
  if (entries.size() != params.size())
    throw FormatError(path.string() + ": checkpoint has " + std::to_string(entries.size()) +
                      " parameters, model has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (entries[i].name != params[i].name || entries[i].value.shape() != params[i].value.shape())
      throw FormatError(path.string() + ": parameter " + std::to_string(i) + " is " + entries[i].name + " " +
                        to_string(entries[i].value.shape()) + ", model expects " + params[i].name + " " +
                        to_string(params[i].value.shape()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].value = std::move(entries[i].value);
    params[i].zero_grad();
  }
}

}  // namespace okd
