#include "okd/cli.hpp"

#include "okd/distill.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace okd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads one JSON object, remembering which keys were consumed so that typos
// in config files fail loudly instead of silently keeping a default.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw bad(key, "a boolean");
      out = it->get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw bad(key, "an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (it->is_number_unsigned() || it->get<std::int64_t>() >= 0) {
          out = it->get<T>();
        } else {
          throw bad(key, "a non-negative integer");
        }
      } else {
        out = it->get<T>();
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw bad(key, "a number");
      out = it->get<T>();
    } else if constexpr (std::is_same_v<T, fs::path>) {
      if (!it->is_string()) throw bad(key, "a string");
      out = it->get<std::string>();
    } else {
      if (!it->is_string()) throw bad(key, "a string");
      out = it->get<std::string>();
    }
  }

  std::optional<ObjectReader> child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return std::nullopt;
    return ObjectReader(*it, where_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.contains(key)) throw ConfigError("unknown key " + where_ + "." + key);
  }

 private:
  ConfigError bad(const char* key, const char* what) const {
    return ConfigError(where_ + "." + key + " must be " + what);
  }

  const json& j_;
  std::string where_;
  std::set<std::string, std::less<>> seen_;
};

template <class E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<FeatureLossKind> kFeatureNames[] = {{FeatureLossKind::Off, "off"},
                                                       {FeatureLossKind::Fid, "fid"},
                                                       {FeatureLossKind::Mse, "mse"},
                                                       {FeatureLossKind::Cos, "cos"}};
constexpr EnumName<ResponseLossKind> kResponseNames[] = {
    {ResponseLossKind::Off, "off"}, {ResponseLossKind::Ssim, "ssim"}, {ResponseLossKind::Mse, "mse"}};
constexpr EnumName<FrdMode> kFrdNames[] = {{FrdMode::Dense, "dense"}, {FrdMode::Sparse, "sparse"}};
constexpr EnumName<ModelPreset> kPresetNames[] = {{ModelPreset::Desk, "desk"}, {ModelPreset::Full, "full"}};
constexpr EnumName<InitScheme> kInitNames[] = {{InitScheme::He, "he"}, {InitScheme::Gaussian, "gaussian"}};

template <class E, std::size_t N>
const char* name_of(const EnumName<E> (&table)[N], E value) {
  for (const auto& e : table)
    if (e.value == value) return e.name;
  return "?";
}

template <class E, std::size_t N>
E parse_enum(const EnumName<E> (&table)[N], const std::string& name, const char* what) {
  for (const auto& e : table)
    if (name == e.name) return e.value;
  throw ConfigError(std::string("unknown ") + what + " '" + name + "'");
}

template <class E, std::size_t N>
void get_enum(ObjectReader& r, const char* key, const EnumName<E> (&table)[N], E& out) {
  std::string name = name_of(table, out);
  r.get(key, name);
  out = parse_enum(table, name, key);
}

void validate(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  if (t.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (t.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(t.student_lr > 0) || !(t.teacher_lr > 0) || !(t.warmup_lr > 0))
    throw ConfigError("learning rates must be positive");
  if (t.teacher_warmup_epochs < 0) throw ConfigError("train.teacher_warmup_epochs must be >= 0");
  const LossWeights& w = t.distill.weights;
  if (w.alpha1 < 0 || w.alpha2 < 0 || w.alpha3 < 0) throw ConfigError("loss weights must be non-negative");
  if (cfg.data.train_scenes < 1 || cfg.data.test_scenes < 0) throw ConfigError("scene counts are invalid");
  const SceneParams& s = cfg.data.synthetic;
  const Index down = s.density.downsample;
  if (down < 1 || s.height < down || s.width < down || s.height % down || s.width % down)
    throw ConfigError("data.synthetic height and width must be positive multiples of data.downsample");
  if (cfg.data.train_dir.empty() != cfg.data.test_dir.empty())
    throw ConfigError("data.train_dir and data.test_dir must be given together");
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg;
  ObjectReader root(j, "config");
  if (auto m = root.child("model")) {
    get_enum(*m, "preset", kPresetNames, cfg.preset);
    get_enum(*m, "init", kInitNames, cfg.init);
    m->get("init_std", cfg.init_std);
    m->finish();
  }
  DensityParams density;
  if (auto d = root.child("data")) {
    d->get("train_dir", cfg.data.train_dir);
    d->get("test_dir", cfg.data.test_dir);
    d->get("train_scenes", cfg.data.train_scenes);
    d->get("test_scenes", cfg.data.test_scenes);
    d->get("test_seed_offset", cfg.data.test_seed_offset);
    d->get("sigma", density.sigma);
    d->get("downsample", density.downsample);
    if (auto s = d->child("synthetic")) {
      SceneParams& p = cfg.data.synthetic;
      s->get("height", p.height);
      s->get("width", p.width);
      s->get("count_min", p.count_min);
      s->get("count_max", p.count_max);
      s->get("radius_min", p.radius_min);
      s->get("radius_max", p.radius_max);
      s->get("noise", p.noise);
      s->get("seed", p.seed);
      s->finish();
    }
    d->finish();
  }
  cfg.data.synthetic.density = density;
  if (auto t = root.child("train")) {
    TrainConfig& c = cfg.train;
    t->get("epochs", c.epochs);
    t->get("batch_size", c.batch_size);
    t->get("student_lr", c.student_lr);
    t->get("teacher_lr", c.teacher_lr);
    t->get("warmup_lr", c.warmup_lr);
    t->get("teacher_warmup_epochs", c.teacher_warmup_epochs);
    std::string mode(to_string(c.mode));
    t->get("mode", mode);
    c.mode = parse_train_mode(mode);
    t->get("seed", c.seed);
    t->get("eval_every", c.eval_every);
    t->get("clip_norm", c.clip_norm);
    t->get("augment", c.augment);
    if (auto a = t->child("augment_params")) {
      AugmentParams& p = c.augment_params;
      a->get("crop_height", p.crop_height);
      a->get("crop_width", p.crop_width);
      a->get("scale_min", p.scale_min);
      a->get("scale_max", p.scale_max);
      a->get("flip_probability", p.flip_probability);
      a->get("gamma_min", p.gamma_min);
      a->get("gamma_max", p.gamma_max);
      a->finish();
    }
    t->finish();
  }
  cfg.train.augment_params.density = density;
  if (auto d = root.child("distill")) {
    DistillConfig& c = cfg.train.distill;
    d->get("alpha1", c.weights.alpha1);
    d->get("alpha2", c.weights.alpha2);
    d->get("alpha3", c.weights.alpha3);
    d->get("detach_teacher", c.weights.detach_teacher);
    get_enum(*d, "feature", kFeatureNames, c.feature);
    d->get("relation", c.relation);
    get_enum(*d, "relation_mode", kFrdNames, c.relation_mode);
    get_enum(*d, "response", kResponseNames, c.response);
    d->get("relation_pool", c.relation_pool);
    d->get("ssim_window", c.ssim_window);
    d->finish();
  }
  root.get("out_dir", cfg.out_dir);
  root.finish();
  validate(cfg);
  return cfg;
}

json to_json(const RunConfig& cfg) {
  const SceneParams& s = cfg.data.synthetic;
  const TrainConfig& t = cfg.train;
  const AugmentParams& a = t.augment_params;
  const DistillConfig& d = t.distill;
  json j;
  j["model"] = {{"preset", name_of(kPresetNames, cfg.preset)},
                {"init", name_of(kInitNames, cfg.init)},
                {"init_std", cfg.init_std}};
  j["data"] = {{"train_dir", cfg.data.train_dir.string()},
               {"test_dir", cfg.data.test_dir.string()},
               {"train_scenes", cfg.data.train_scenes},
               {"test_scenes", cfg.data.test_scenes},
               {"test_seed_offset", cfg.data.test_seed_offset},
               {"sigma", s.density.sigma},
               {"downsample", s.density.downsample},
               {"synthetic",
                {{"height", s.height},
                 {"width", s.width},
                 {"count_min", s.count_min},
                 {"count_max", s.count_max},
                 {"radius_min", s.radius_min},
                 {"radius_max", s.radius_max},
                 {"noise", s.noise},
                 {"seed", s.seed}}}};
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"student_lr", t.student_lr},
                {"teacher_lr", t.teacher_lr},
                {"warmup_lr", t.warmup_lr},
                {"teacher_warmup_epochs", t.teacher_warmup_epochs},
                {"mode", std::string(to_string(t.mode))},
                {"seed", t.seed},
                {"eval_every", t.eval_every},
                {"clip_norm", t.clip_norm},
                {"augment", t.augment},
                {"augment_params",
                 {{"crop_height", a.crop_height},
                  {"crop_width", a.crop_width},
                  {"scale_min", a.scale_min},
                  {"scale_max", a.scale_max},
                  {"flip_probability", a.flip_probability},
                  {"gamma_min", a.gamma_min},
                  {"gamma_max", a.gamma_max}}}};
  j["distill"] = {{"alpha1", d.weights.alpha1},
                  {"alpha2", d.weights.alpha2},
                  {"alpha3", d.weights.alpha3},
                  {"detach_teacher", d.weights.detach_teacher},
                  {"feature", name_of(kFeatureNames, d.feature)},
                  {"relation", d.relation},
                  {"relation_mode", name_of(kFrdNames, d.relation_mode)},
                  {"response", name_of(kResponseNames, d.response)},
                  {"relation_pool", d.relation_pool},
                  {"ssim_window", d.ssim_window}};
  j["out_dir"] = cfg.out_dir.string();
  return j;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

ModelConfig model_config(const RunConfig& cfg) {
  ModelConfig m = cfg.preset == ModelPreset::Desk ? desk_config() : full_config();
  m.init = cfg.init;
  m.init_std = cfg.init_std;
  return m;
}

Datasets load_datasets(const DataSource& source) {
  const DensityParams& density = source.synthetic.density;
  if (!source.train_dir.empty()) return {read_dataset(source.train_dir, density), read_dataset(source.test_dir, density)};
  SceneParams test = source.synthetic;
  test.seed = source.synthetic.seed + source.test_seed_offset;
  return {synth_dataset(source.synthetic, source.train_scenes), synth_dataset(test, source.test_scenes)};
}

std::vector<AblationRow> ablation_rows(const std::string& suite, const DistillConfig& base) {
  DistillConfig none = base;
  none.feature = FeatureLossKind::Off;
  none.relation = false;
  none.response = ResponseLossKind::Off;
  std::vector<AblationRow> rows{{"baseline", none}};
  if (suite == "modules") {
    for (int mask = 1; mask < 8; ++mask) {
      DistillConfig c = none;
      std::string name;
      if (mask & 1) {
        c.feature = FeatureLossKind::Fid;
        name += "FID";
      }
      if (mask & 2) {
        c.relation = true;
        name += name.empty() ? "FRD" : "+FRD";
      }
      if (mask & 4) {
        c.response = ResponseLossKind::Ssim;
        name += name.empty() ? "RD" : "+RD";
      }
      rows.push_back({name, c});
    }
    // Single modules first, then pairs, then all three.
    std::stable_sort(rows.begin() + 1, rows.end(), [](const AblationRow& a, const AblationRow& b) {
      return std::count(a.name.begin(), a.name.end(), '+') < std::count(b.name.begin(), b.name.end(), '+');
    });
  } else if (suite == "fid") {
    for (auto [kind, name] : {std::pair{FeatureLossKind::Mse, "MSE"}, std::pair{FeatureLossKind::Cos, "Cos"},
                              std::pair{FeatureLossKind::Fid, "FID"}}) {
      DistillConfig c = none;
      c.feature = kind;
      rows.push_back({name, c});
    }
  } else if (suite == "frd") {
    for (auto [mode, name] : {std::pair{FrdMode::Sparse, "sparse"}, std::pair{FrdMode::Dense, "dense"}}) {
      DistillConfig c = none;
      c.relation = true;
      c.relation_mode = mode;
      rows.push_back({name, c});
    }
  } else if (suite == "rd") {
    for (auto [kind, name] : {std::pair{ResponseLossKind::Mse, "MSE"}, std::pair{ResponseLossKind::Ssim, "SSIM"}}) {
      DistillConfig c = none;
      c.response = kind;
      rows.push_back({name, c});
    }
  } else {
    throw ConfigError("unknown ablation suite '" + suite + "'");
  }
  return rows;
}

void write_pgm(const fs::path& path, std::span<const Scalar> values, Index height, Index width) {
  if (static_cast<Index>(values.size()) != height * width) throw DimensionError("write_pgm: size mismatch");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const Scalar lo = values.empty() ? 0.0 : *lo_it;
  const Scalar range = values.empty() ? 0.0 : *hi_it - lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (Scalar v : values) {
    const auto level = range > 0 ? static_cast<unsigned char>(std::lround((v - lo) / range * 255.0)) : 0;
    out.put(static_cast<char>(level));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

RunConfig config_for_checkpoint(const fs::path& checkpoint, const std::string& config_path) {
  if (!config_path.empty()) return load_run_config(config_path);
  const fs::path sibling = checkpoint.parent_path() / "config.json";
  if (fs::exists(sibling)) return load_run_config(sibling);
  return RunConfig{};
}

Model load_model(const RunConfig& cfg, const fs::path& checkpoint) {
  Model model = build_model(model_config(cfg), cfg.train.seed);
  load_checkpoint(model, checkpoint);
  return model;
}

json final_metrics(const TrainResult& r) {
  if (r.history.empty()) return nullptr;
  json j = to_json(r.history.back());
  j.erase("elapsed_seconds");
  return j;
}

int cmd_gen_data(const std::string& out_dir, Index scenes, std::uint64_t seed, const SceneParams& base, std::ostream& out) {
  if (scenes < 0) throw UsageError("--scenes must be >= 0");
  SceneParams params = base;
  params.seed = seed;
  make_dir(out_dir);
  json list = json::array();
  for (Index i = 0; i < scenes; ++i) {
    auto rng = scene_rng(seed, static_cast<std::uint64_t>(i));
    const AnnotatedScene scene = synth_scene(params, rng);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05td", i);
    write_scene(out_dir, name, scene);
    list.push_back({{"name", name}, {"count", scene.points.size()}});
  }
  json manifest = {{"count", scenes},
                   {"seed", seed},
                   {"height", params.height},
                   {"width", params.width},
                   {"count_min", params.count_min},
                   {"count_max", params.count_max},
                   {"scenes", list}};
  write_text(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
  out << json{{"out", out_dir}, {"count", scenes}, {"seed", seed}}.dump() << "\n";
  return 0;
}

int cmd_train(RunConfig cfg, std::ostream& out, std::ostream& err) {
  make_dir(cfg.out_dir);
  write_text(cfg.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  const Datasets data = load_datasets(cfg.data);
  Model model = build_model(model_config(cfg), cfg.train.seed);

  // Wall-clock measurements live in timing.json so that history, checkpoint and
  // stdout are byte-identical across repeated runs.
  std::ofstream history(cfg.out_dir / "history.jsonl", std::ios::binary | std::ios::trunc);
  if (!history) throw IoError("cannot write " + (cfg.out_dir / "history.jsonl").string());
  json eval_seconds = json::array();
  const TrainResult result = train(model, data.train, data.test, cfg.train, [&](const json& record) {
    json stable = record;
    if (stable.contains("elapsed_seconds")) {
      eval_seconds.push_back({{"phase", stable.value("phase", "")},
                              {"epoch", stable.value("epoch", 0)},
                              {"elapsed_seconds", stable["elapsed_seconds"]}});
      stable.erase("elapsed_seconds");
    }
    history << stable.dump() << "\n";
    history.flush();
    if (stable.contains("mae"))
      err << stable.value("phase", "") << " epoch " << stable.value("epoch", 0) << ": mae "
          << stable.value("mae", 0.0) << "\n";
  });
  const fs::path checkpoint = cfg.out_dir / "checkpoint.okdc";
  save_checkpoint(model, checkpoint);

  json phases = json::object();
  for (const auto& [name, secs] : result.phase_seconds) phases[name] = secs;
  const fs::path timing = cfg.out_dir / "timing.json";
  write_text(timing, json{{"warmup_seconds", result.warmup_seconds},
                          {"phase_seconds", phases},
                          {"train_seconds", result.train_seconds()},
                          {"evaluations", eval_seconds}}
                             .dump(2) +
                         "\n");
  out << json{{"checkpoint", checkpoint.string()},
              {"mode", std::string(to_string(cfg.train.mode))},
              {"final", final_metrics(result)},
              {"timing", timing.string()}}
             .dump()
      << "\n";
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, Branch branch, const std::string& config_path,
             std::ostream& out) {
  const RunConfig cfg = config_for_checkpoint(checkpoint, config_path);
  Model model = load_model(cfg, checkpoint);
  const Dataset data = read_dataset(data_dir, cfg.data.synthetic.density);
  out << to_json(evaluate(model, data, branch)).dump() << "\n";
  return 0;
}

std::string fixed(Scalar v, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

int cmd_ablate(RunConfig cfg, const std::string& suite, std::ostream& out, std::ostream& err) {
  if (cfg.train.mode != TrainMode::Online && cfg.train.mode != TrainMode::TwoPhase)
    throw ConfigError("ablations need mode online or two_phase");
  const auto rows = ablation_rows(suite, cfg.train.distill);
  make_dir(cfg.out_dir);
  write_text(cfg.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  const Datasets data = load_datasets(cfg.data);

  // Every row starts from the same warmed-up teacher.
  Model warmed = build_model(model_config(cfg), cfg.train.seed);
  warm_up_teacher(warmed, data.train, data.test, cfg.train);

  json results = json::array();
  std::ostringstream csv;
  csv << "name,feature,relation,response,teacher_mae,teacher_mse,student_mae,student_mse\n";
  for (const AblationRow& row : rows) {
    err << "ablate " << suite << ": " << row.name << "\n";
    TrainConfig tc = cfg.train;
    tc.teacher_warmup_epochs = 0;
    tc.distill = row.distill;
    Model model = warmed;
    train(model, data.train, data.test, tc);
    const EvalReport report = evaluate(model, data.test, Branch::Student);
    const char* feature = name_of(kFeatureNames, row.distill.feature);
    const char* relation = row.distill.relation ? name_of(kFrdNames, row.distill.relation_mode) : "off";
    const char* response = name_of(kResponseNames, row.distill.response);
    results.push_back({{"name", row.name},
                       {"feature", feature},
                       {"relation", relation},
                       {"response", response},
                       {"teacher", {{"mae", report.teacher->mae}, {"mse", report.teacher->mse}}},
                       {"student", {{"mae", report.student->mae}, {"mse", report.student->mse}}}});
    csv << row.name << ',' << feature << ',' << relation << ',' << response << ',' << json(report.teacher->mae) << ','
        << json(report.teacher->mse) << ',' << json(report.student->mae) << ',' << json(report.student->mse) << "\n";
  }

  std::ostringstream text;
  text << std::left << std::setw(14) << "name" << std::setw(9) << "feature" << std::setw(9) << "relation"
       << std::setw(9) << "response" << std::right << std::setw(10) << "T-MAE" << std::setw(10) << "T-MSE"
       << std::setw(10) << "S-MAE" << std::setw(10) << "S-MSE" << "\n";
  for (const json& r : results)
    text << std::left << std::setw(14) << r["name"].get<std::string>() << std::setw(9)
         << r["feature"].get<std::string>() << std::setw(9) << r["relation"].get<std::string>() << std::setw(9)
         << r["response"].get<std::string>() << std::right << std::setw(10) << fixed(r["teacher"]["mae"])
         << std::setw(10) << fixed(r["teacher"]["mse"]) << std::setw(10) << fixed(r["student"]["mae"])
         << std::setw(10) << fixed(r["student"]["mse"]) << "\n";

  const fs::path csv_path = cfg.out_dir / ("ablate_" + suite + ".csv");
  const fs::path txt_path = cfg.out_dir / ("ablate_" + suite + ".txt");
  write_text(csv_path, csv.str());
  write_text(txt_path, text.str());
  err << text.str();
  out << json{{"suite", suite}, {"csv", csv_path.string()}, {"table", txt_path.string()}, {"rows", results}}.dump()
      << "\n";
  return 0;
}

void write_matrix(const fs::path& path, const Tensor& r) {
  const Index n = r.dim(1), m = r.dim(2);
  std::ostringstream s;
  s << std::setprecision(17);
  const auto v = r.data();
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) s << (j ? " " : "") << v[static_cast<std::size_t>(i * m + j)];
    s << "\n";
  }
  write_text(path, s.str());
}

int cmd_inspect(const fs::path& checkpoint, const fs::path& image_path, const fs::path& out_dir,
                const std::string& config_path, std::ostream& out) {
  const RunConfig cfg = config_for_checkpoint(checkpoint, config_path);
  Model model = load_model(cfg, checkpoint);
  const Tensor image = read_image(image_path);
  const Tensor batch = image.view({1, image.dim(0), image.dim(1), image.dim(2)});
  const JointOutput output = forward_joint(model, batch);
  const Index pool = cfg.train.distill.relation_pool;
  const auto teacher = relation_matrices(output.features.teacher, FrdMode::Dense, pool);
  const auto student = relation_matrices(output.features.adapted, FrdMode::Dense, pool);
  make_dir(out_dir);

  json pairs = json::array();
  Scalar total = 0.0;
  for (std::size_t p = 0; p < teacher.size(); ++p) {
    const std::string t_name = "t" + std::to_string(teacher[p].block_i) + "_t" + std::to_string(teacher[p].block_j);
    const std::string s_name = "s" + std::to_string(student[p].block_i) + "_s" + std::to_string(student[p].block_j);
    for (const auto& [name, r] : {std::pair{t_name, &teacher[p]}, std::pair{s_name, &student[p]}}) {
      write_matrix(out_dir / (name + ".txt"), r->values);
      write_pgm(out_dir / (name + ".pgm"), r->values.data(), r->values.dim(1), r->values.dim(2));
    }
    const Scalar diff = (student[p].values.array() - teacher[p].values.array()).abs().mean();
    total += diff;
    pairs.push_back({{"pair", teacher[p].label()}, {"teacher", t_name}, {"student", s_name}, {"mean_abs_diff", diff}});
  }
  out << json{{"out", out_dir.string()},
              {"pool", pool},
              {"pairs", pairs},
              {"mean_abs_diff", total / static_cast<Scalar>(teacher.size())}}
             .dump()
      << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Online knowledge distillation for crowd counting"};
  app.require_subcommand(1);

  std::string out_dir;
  Index scenes = 0;
  std::uint64_t seed = 0;
  SceneParams scene_params;
  Index size = 0;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic annotated dataset");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--scenes", scenes, "Number of scenes")->required();
  gen->add_option("--seed", seed, "Generator seed")->required();
  gen->add_option("--count-min", scene_params.count_min, "Fewest heads per scene");
  gen->add_option("--count-max", scene_params.count_max, "Most heads per scene");
  gen->add_option("--size", size, "Square image extent in pixels (multiple of 8)");

  std::string config_path;
  std::string mode, frd, fid, rd;
  std::optional<Scalar> alpha1, alpha2, alpha3;
  std::optional<Index> epochs;
  std::optional<std::uint64_t> train_seed;
  auto* tr = app.add_subcommand("train", "Train a model and write checkpoint, history and resolved config");
  tr->add_option("--config", config_path, "JSON run configuration")->required();
  tr->add_option("--mode", mode, "Training mode")
      ->check(CLI::IsMember({"online", "two_phase", "student_only", "teacher_only"}));
  tr->add_option("--alpha1", alpha1, "Feature internal weight")->check(CLI::NonNegativeNumber);
  tr->add_option("--alpha2", alpha2, "Feature relation weight")->check(CLI::NonNegativeNumber);
  tr->add_option("--alpha3", alpha3, "Response weight")->check(CLI::NonNegativeNumber);
  tr->add_option("--frd", frd, "Relation pairs")->check(CLI::IsMember({"sparse", "dense"}));
  tr->add_option("--fid", fid, "Feature loss")->check(CLI::IsMember({"fid", "mse", "cos", "off"}));
  tr->add_option("--rd", rd, "Response loss")->check(CLI::IsMember({"ssim", "mse", "off"}));
  tr->add_option("--out", out_dir, "Output directory (overrides out_dir)");
  tr->add_option("--epochs", epochs, "Epochs (overrides train.epochs)");
  tr->add_option("--seed", train_seed, "Seed (overrides train.seed)");

  std::string checkpoint, data_dir, branch = "student";
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--branch", branch, "Branch to report")->check(CLI::IsMember({"teacher", "student"}));
  ev->add_option("--config", config_path, "Run configuration (default: config.json next to the checkpoint)");

  std::string suite;
  auto* ab = app.add_subcommand("ablate", "Run an ablation grid and write a summary table");
  ab->add_option("--config", config_path, "JSON run configuration")->required();
  ab->add_option("--suite", suite, "Grid to run")->required()->check(CLI::IsMember({"fid", "frd", "rd", "modules"}));
  ab->add_option("--out", out_dir, "Output directory (overrides out_dir)");

  std::string image_path;
  auto* ins = app.add_subcommand("inspect-relations", "Export teacher and student relation matrices");
  ins->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ins->add_option("--image", image_path, "Image file (.okdi)")->required();
  ins->add_option("--out", out_dir, "Output directory")->required();
  ins->add_option("--config", config_path, "Run configuration (default: config.json next to the checkpoint)");

  auto* pc = app.add_subcommand("print-config", "Print the default run configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    auto resolved = [&] {
      RunConfig cfg = load_run_config(config_path);
      if (!mode.empty()) cfg.train.mode = parse_train_mode(mode);
      auto& w = cfg.train.distill.weights;
      if (alpha1) w.alpha1 = *alpha1;
      if (alpha2) w.alpha2 = *alpha2;
      if (alpha3) w.alpha3 = *alpha3;
      auto& d = cfg.train.distill;
      if (!frd.empty()) d.relation_mode = parse_enum(kFrdNames, frd, "--frd");
      if (!fid.empty()) d.feature = parse_enum(kFeatureNames, fid, "--fid");
      if (!rd.empty()) d.response = parse_enum(kResponseNames, rd, "--rd");
      if (epochs) cfg.train.epochs = *epochs;
      if (train_seed) cfg.train.seed = *train_seed;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      validate(cfg);
      return cfg;
    };

    if (*gen) {
      if (size > 0) scene_params.height = scene_params.width = size;
      return cmd_gen_data(out_dir, scenes, seed, scene_params, out);
    }
    if (*tr) return cmd_train(resolved(), out, err);
    if (*ev)
      return cmd_eval(checkpoint, data_dir, branch == "teacher" ? Branch::Teacher : Branch::Student, config_path, out);
    if (*ab) return cmd_ablate(resolved(), suite, out, err);
    if (*ins) return cmd_inspect(checkpoint, image_path, out_dir, config_path, out);
    if (*pc) {
      out << to_json(RunConfig{}).dump(2) << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace okd
