#include "okd/train.hpp"

#include "okd/ops.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace okd {

void adam_step(Parameter& param, AdamState& state, Scalar lr, const AdamHyper& h) {
  if (state.m.shape() != param.value.shape()) {
    state.m = Tensor::zeros(param.value.shape());
    state.v = Tensor::zeros(param.value.shape());
    state.step = 0;
  }
  ++state.step;
  const Scalar bc1 = 1.0 - std::pow(h.beta1, static_cast<Scalar>(state.step));
  const Scalar bc2 = 1.0 - std::pow(h.beta2, static_cast<Scalar>(state.step));
  auto m = state.m.mutable_data();
  auto v = state.v.mutable_data();
  auto w = param.value.mutable_data();
  const auto g = param.grad.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
    const Scalar m_hat = m[i] / bc1;
    const Scalar v_hat = v[i] / bc2;
    w[i] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

AdamGroup::AdamGroup(std::vector<Parameter*> params, Scalar lr, AdamHyper hyper)
    : params_(std::move(params)), state_(params_.size()), lr_(lr), hyper_(hyper) {
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
}

void AdamGroup::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

Scalar AdamGroup::clip_grad_norm(Scalar max_norm) {
  Scalar sq = 0.0;
  for (const Parameter* p : params_) sq += p->grad.array().square().sum();
  const Scalar norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Scalar scale = max_norm / norm;
    for (Parameter* p : params_)
      for (Scalar& g : p->grad.mutable_data()) g *= scale;
  }
  return norm;
}

void AdamGroup::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) adam_step(*params_[i], state_[i], lr_, hyper_);
}

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Online:
      return "online";
    case TrainMode::TwoPhase:
      return "two_phase";
    case TrainMode::StudentOnly:
      return "student_only";
    case TrainMode::TeacherOnly:
      return "teacher_only";
  }
  return "?";
}

TrainMode parse_train_mode(std::string_view name) {
  for (TrainMode m : {TrainMode::Online, TrainMode::TwoPhase, TrainMode::StudentOnly, TrainMode::TeacherOnly})
    if (to_string(m) == name) return m;
  throw ConfigError("unknown training mode '" + std::string(name) + "'");
}

std::string_view to_string(Branch b) { return b == Branch::Teacher ? "teacher" : "student"; }

CountMetrics count_metrics(std::span<const Scalar> predicted, std::span<const Scalar> truth) {
  if (predicted.empty()) throw ContractError("cannot evaluate an empty dataset");
  if (predicted.size() != truth.size()) throw DimensionError("count_metrics: length mismatch");
  Scalar abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const Scalar e = predicted[i] - truth[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const auto n = static_cast<Scalar>(predicted.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

std::vector<Scalar> predict_counts(Model& model, const Dataset& data, Branch branch, Index batch_size) {
  std::vector<Scalar> counts;
  counts.reserve(data.size());
  ForwardOptions opt;
  opt.run_teacher = branch == Branch::Teacher;
  opt.run_student = branch == Branch::Student;
  opt.adapters = false;
  for (std::size_t first = 0; first < data.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(static_cast<std::size_t>(batch_size), data.size() - first);
    const Batch batch = make_batch(std::span<const AnnotatedScene>(data).subspan(first, n));
    const JointOutput out = forward_joint(model, batch.images, nullptr, opt);
    const Tensor& density = branch == Branch::Teacher ? out.teacher_density : out.student_density;
    const Index per = density.numel() / static_cast<Index>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto d = density.data().subspan(i * static_cast<std::size_t>(per), static_cast<std::size_t>(per));
      counts.push_back(std::accumulate(d.begin(), d.end(), 0.0));
    }
  }
  return counts;
}

namespace {

std::vector<Scalar> true_counts(const Dataset& data) {
  std::vector<Scalar> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(static_cast<Scalar>(s.points.size()));
  return out;
}

nlohmann::json metrics_json(const CountMetrics& m) { return {{"mae", m.mae}, {"mse", m.mse}}; }

}  // namespace

EvalReport evaluate(Model& model, const Dataset& data, Branch branch) {
  if (data.empty()) throw ContractError("cannot evaluate an empty dataset");
  const auto truth = true_counts(data);
  EvalReport report;
  report.branch = branch;
  report.teacher = count_metrics(predict_counts(model, data, Branch::Teacher), truth);
  report.student = count_metrics(predict_counts(model, data, Branch::Student), truth);
  const CountMetrics& primary = branch == Branch::Teacher ? *report.teacher : *report.student;
  report.mae = primary.mae;
  report.mse = primary.mse;
  return report;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["type"] = "eval";
  j["epoch"] = r.epoch;
  if (!r.phase.empty()) j["phase"] = r.phase;
  j["branch"] = std::string(to_string(r.branch));
  j["mae"] = r.mae;
  j["mse"] = r.mse;
  if (r.teacher) j["teacher"] = metrics_json(*r.teacher);
  if (r.student) j["student"] = metrics_json(*r.student);
  if (r.losses) {
    const LossSummary& l = *r.losses;
    nlohmann::json pairs = nlohmann::json::object();
    for (const auto& [label, v] : l.relation_pairs) pairs[label] = v;
    j["losses"] = {{"total", l.total},       {"student", l.student},   {"teacher", l.teacher},
                   {"feature", l.feature},   {"relation", l.relation}, {"response", l.response},
                   {"relation_pairs", pairs}};
  }
  if (r.wall_clock_seconds) j["elapsed_seconds"] = *r.wall_clock_seconds;
  return j;
}

Scalar TrainResult::train_seconds() const {
  Scalar s = 0.0;
  for (const auto& [name, secs] : phase_seconds) s += secs;
  return s;
}

namespace {

using Clock = std::chrono::steady_clock;

enum class LossKind { Teacher, Student, Joint };

struct Phase {
  std::string name;
  std::uint64_t stream = 1;  // data order / augmentation stream
  Index epochs = 0;
  bool run_teacher = true;
  bool run_student = true;
  bool train_teacher_side = true;  // stem + teacher branch
  bool train_student_side = true;  // student branch + adapters
  Scalar teacher_lr = 0.0;
  LossKind loss = LossKind::Joint;
};

struct RunState {
  TrainResult result;
  Scalar elapsed = 0.0;  // training seconds so far, warm-up included
};

std::vector<Parameter*> pointers(Model& model, std::initializer_list<Component> parts) {
  std::vector<Parameter*> out;
  for (Component c : parts)
    for (Parameter& p : model.component(c)) out.push_back(&p);
  return out;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9E3779B97F4A7C15ULL ^ (b + 0x632BE59BD9B4E019ULL + (a << 6) + (a >> 2));
  x ^= x >> 31;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  return x;
}

bool finite_loss(const LossBreakdown& b) { return std::isfinite(b.total.item()); }

void accumulate(LossSummary& acc, const LossBreakdown& b) {
  acc.total += b.total.item();
  acc.student += b.student;
  acc.teacher += b.teacher;
  acc.feature += b.feature;
  acc.relation += b.relation;
  acc.response += b.response;
  if (acc.relation_pairs.empty()) {
    acc.relation_pairs = b.relation_pairs;
  } else {
    for (std::size_t i = 0; i < b.relation_pairs.size(); ++i) acc.relation_pairs[i].second += b.relation_pairs[i].second;
  }
}

void scale(LossSummary& acc, Scalar s) {
  acc.total *= s;
  acc.student *= s;
  acc.teacher *= s;
  acc.feature *= s;
  acc.relation *= s;
  acc.response *= s;
  for (auto& p : acc.relation_pairs) p.second *= s;
}

LossBreakdown phase_loss(const Phase& phase, const Tensor& gt, const JointOutput& out, const DistillConfig& distill) {
  if (phase.loss == LossKind::Joint) return total_loss(gt, out, distill);
  LossBreakdown b;
  if (phase.loss == LossKind::Teacher) {
    b.total = mse_loss(out.teacher_density, gt);
    b.teacher = b.total.item();
  } else {
    b.total = mse_loss(out.student_density, gt);
    b.student = b.total.item();
  }
  return b;
}

void run_phase(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg, const Phase& phase,
               const HistorySink& sink, RunState& state, bool record_epoch_losses) {
  if (train.empty()) throw ContractError("training set is empty");
  if (cfg.batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<AdamGroup> groups;
  if (phase.train_teacher_side)
    groups.emplace_back(pointers(model, {Component::Stem, Component::Teacher}), phase.teacher_lr);
  if (phase.train_student_side)
    groups.emplace_back(pointers(model, {Component::Student, Component::Adapters}), cfg.student_lr);

  ForwardOptions opt;
  opt.run_teacher = phase.run_teacher;
  opt.run_student = phase.run_student;
  opt.adapters = phase.loss == LossKind::Joint;
  opt.train_stem = opt.train_teacher = phase.train_teacher_side;
  opt.train_student = opt.train_adapters = phase.train_student_side;
  opt.detach_student_input = cfg.distill.weights.detach_teacher || phase.loss != LossKind::Joint;

  Scalar phase_seconds = 0.0;
  std::vector<std::size_t> order(train.size());
  for (Index epoch = 1; epoch <= phase.epochs; ++epoch) {
    const auto t0 = Clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::uint64_t epoch_seed = mix(mix(cfg.seed, phase.stream), static_cast<std::uint64_t>(epoch));
    auto shuffle_rng = scene_rng(epoch_seed, ~std::uint64_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    LossSummary epoch_loss;
    Index steps = 0;
    std::vector<AnnotatedScene> scenes;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - first);
      scenes.clear();
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = order[first + k];
        if (cfg.augment) {
          auto rng = scene_rng(epoch_seed, idx);
          scenes.push_back(augment(train[idx], cfg.augment_params, rng));
        } else {
          scenes.push_back(train[idx]);
        }
      }
      const Batch batch = make_batch(scenes);

      for (AdamGroup& g : groups) g.zero_grad();
      Tape tape;
      const JointOutput out = forward_joint(model, batch.images, &tape, opt);
      const LossBreakdown loss = phase_loss(phase, batch.densities, out, cfg.distill);
      if (!finite_loss(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss in phase '" << phase.name << "' epoch " << epoch << " step " << steps
            << " (L_st=" << loss.student << ", L_tea=" << loss.teacher << ", L_f=" << loss.feature
            << ", L_r=" << loss.relation << ", L_s=" << loss.response << ")";
        throw DivergenceError(msg.str());
      }
      tape.backward(loss.total);
      for (AdamGroup& g : groups) {
        g.clip_grad_norm(cfg.clip_norm);
        g.step();
      }
      accumulate(epoch_loss, loss);
      ++steps;
    }
    scale(epoch_loss, 1.0 / static_cast<Scalar>(steps));
    const Scalar secs = std::chrono::duration<Scalar>(Clock::now() - t0).count();
    phase_seconds += secs;
    state.elapsed += secs;
    if (record_epoch_losses) state.result.epoch_losses.push_back(epoch_loss.total);

    if (epoch % std::max<Index>(cfg.eval_every, 1) == 0 || epoch == phase.epochs) {
      EvalReport report;
      if (!test.empty()) {
        report = evaluate(model, test, phase.train_student_side ? Branch::Student : Branch::Teacher);
      } else {
        report.branch = phase.train_student_side ? Branch::Student : Branch::Teacher;
      }
      report.epoch = epoch;
      report.phase = phase.name;
      report.losses = epoch_loss;
      report.wall_clock_seconds = state.elapsed;
      if (sink) sink(to_json(report));
      state.result.history.push_back(std::move(report));
    }
  }
  if (phase.name == "warmup") {
    state.result.warmup_seconds += phase_seconds;
  } else {
    state.result.phase_seconds.emplace_back(phase.name, phase_seconds);
  }
}

Phase warmup_phase(const TrainConfig& cfg) {
  Phase p;
  p.name = "warmup";
  p.stream = 0;
  p.epochs = cfg.teacher_warmup_epochs;
  p.run_student = false;
  p.train_student_side = false;
  p.teacher_lr = cfg.warmup_lr;
  p.loss = LossKind::Teacher;
  return p;
}

void check_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(cfg.student_lr > 0) || !(cfg.teacher_lr > 0) || !(cfg.warmup_lr > 0))
    throw ConfigError("learning rates must be positive");
  if (cfg.teacher_warmup_epochs < 0) throw ConfigError("warm-up epochs must be >= 0");
}

void maybe_warm_up(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                   const HistorySink& sink, RunState& state) {
  if (cfg.teacher_warmup_epochs > 0) run_phase(model, train, test, cfg, warmup_phase(cfg), sink, state, false);
}

}  // namespace

TrainResult warm_up_teacher(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                            const HistorySink& sink) {
  RunState state;
  maybe_warm_up(model, train, test, cfg, sink, state);
  return state.result;
}

TrainResult train_online(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                         const HistorySink& sink) {
  check_config(cfg);
  if (cfg.mode != TrainMode::Online) throw ConfigError("train_online called with mode " + std::string(to_string(cfg.mode)));
  RunState state;
  maybe_warm_up(model, train, test, cfg, sink, state);
  Phase joint;
  joint.name = "online";
  joint.epochs = cfg.epochs;
  joint.teacher_lr = cfg.teacher_lr;
  run_phase(model, train, test, cfg, joint, sink, state, true);
  return state.result;
}

TrainResult train_two_phase(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                            const HistorySink& sink) {
  check_config(cfg);
  if (cfg.mode != TrainMode::TwoPhase)
    throw ConfigError("train_two_phase called with mode " + std::string(to_string(cfg.mode)));
  RunState state;
  maybe_warm_up(model, train, test, cfg, sink, state);

  Phase teacher;
  teacher.name = "teacher";
  teacher.epochs = cfg.epochs;
  teacher.run_student = false;
  teacher.train_student_side = false;
  teacher.teacher_lr = cfg.teacher_lr;
  teacher.loss = LossKind::Teacher;
  run_phase(model, train, test, cfg, teacher, sink, state, true);

  if (sink)
    sink({{"type", "phase_boundary"}, {"from", "teacher"}, {"to", "student"}, {"epoch", cfg.epochs}});

  Phase student;
  student.name = "student";
  student.epochs = cfg.epochs;
  student.train_teacher_side = false;
  student.loss = LossKind::Joint;
  run_phase(model, train, test, cfg, student, sink, state, true);
  return state.result;
}

TrainResult train(Model& model, const Dataset& train_set, const Dataset& test, const TrainConfig& cfg,
                  const HistorySink& sink) {
  switch (cfg.mode) {
    case TrainMode::Online:
      return train_online(model, train_set, test, cfg, sink);
    case TrainMode::TwoPhase:
      return train_two_phase(model, train_set, test, cfg, sink);
    case TrainMode::StudentOnly:
    case TrainMode::TeacherOnly: {
      check_config(cfg);
      RunState state;
      maybe_warm_up(model, train_set, test, cfg, sink, state);
      Phase p;
      p.epochs = cfg.epochs;
      if (cfg.mode == TrainMode::StudentOnly) {
        p.name = "student_only";
        p.run_teacher = false;
        p.train_teacher_side = false;
        p.loss = LossKind::Student;
      } else {
        p.name = "teacher_only";
        p.run_student = false;
        p.train_student_side = false;
        p.teacher_lr = cfg.teacher_lr;
        p.loss = LossKind::Teacher;
      }
      run_phase(model, train_set, test, cfg, p, sink, state, true);
      return state.result;
    }
  }
  throw ConfigError("unknown training mode");
}

}  // namespace okd
