// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. Arguments (optional) restrict the run to the
// listed criterion numbers, e.g. `acceptance 1 2 8`.

#include "okd/cli.hpp"
#include "okd/distill.hpp"
#include "okd/grad_check.hpp"
#include "okd/ops.hpp"
#include "okd/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace okd;
using oracle::max_abs_diff;
using oracle::random_tensor;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  // Records a named sub-check; failing ones are listed in the detail line.
  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Scalar median(std::vector<Scalar> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(Scalar v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

constexpr Scalar kGradTol = 1e-4;
constexpr Scalar kGradEps = 1e-5;

// Contracts an op's output with fixed random weights so every output element
// contributes a distinct amount to the scalar.
Tensor contract(const Tensor& y, std::mt19937_64& rng) {
  static std::map<Shape, Tensor> weights;
  auto it = weights.find(y.shape());
  if (it == weights.end()) it = weights.emplace(y.shape(), random_tensor(y.shape(), rng)).first;
  return sum(y * it->second);
}

void criterion_gradients(Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  Scalar worst = 0.0;
  const auto check = [&](const std::string& name, Scalar err) {
    worst = std::max(worst, err);
    v.expect(err < kGradTol, name + " rel err " + fmt(err));
  };
  const auto op_check = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    check(name, grad_check([&](const Tensor& in) { return contract(f(in), rng); }, x, kGradEps));
  };

  for (Index dil : {1, 2}) {
    const Tensor x = random_tensor({2, 3, 7, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng),
                 b = random_tensor({4}, rng);
    const std::string tag = "conv2d dil " + std::to_string(dil);
    op_check(tag + " input", [&](const Tensor& in) { return conv2d(in, w, b, dil, dil); }, x);
    op_check(tag + " weight", [&](const Tensor& in) { return conv2d(x, in, b, dil, dil); }, w);
    op_check(tag + " bias", [&](const Tensor& in) { return conv2d(x, w, in, dil, dil); }, b);
  }
  op_check("maxpool2d", [](const Tensor& in) { return maxpool2d(in); }, random_tensor({2, 3, 6, 8}, rng));
  op_check("adaptive_avg_pool", [](const Tensor& in) { return adaptive_avg_pool(in, 3, 2); },
           random_tensor({2, 2, 7, 5}, rng));
  {
    const Tensor a = random_tensor({3, 4, 5}, rng), b = random_tensor({3, 5, 2}, rng);
    op_check("bmm lhs", [&](const Tensor& in) { return bmm(in, b); }, a);
    op_check("bmm rhs", [&](const Tensor& in) { return bmm(a, in); }, b);
  }
  op_check("sigmoid", [](const Tensor& in) { return sigmoid(in); }, random_tensor({3, 7}, rng, -4.0, 4.0));

  // Loss functions with respect to the student-side inputs.
  const std::vector<Tensor> t = {random_tensor({2, 6, 8, 8}, rng), random_tensor({2, 8, 4, 4}, rng),
                                 random_tensor({2, 8, 4, 4}, rng), random_tensor({2, 8, 4, 4}, rng)};
  std::vector<Tensor> s;
  for (const Tensor& ti : t) s.push_back(random_tensor(ti.shape(), rng));
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto with = [&](const Tensor& x) {
      std::vector<Tensor> v2 = s;
      v2[k] = x;
      return v2;
    };
    const std::string tag = " block " + std::to_string(k + 2);
    check("fid_loss" + tag, grad_check([&](const Tensor& x) { return fid_loss(with(x), t); }, s[k], kGradEps));
    check("frd_loss dense" + tag,
          grad_check([&](const Tensor& x) { return frd_loss(with(x), t, FrdMode::Dense, 4); }, s[k], kGradEps));
    check("frd_loss sparse" + tag,
          grad_check([&](const Tensor& x) { return frd_loss(with(x), t, FrdMode::Sparse, 4); }, s[k], kGradEps));
  }
  {
    const Tensor td = random_tensor({2, 1, 8, 8}, rng, 0.0, 1.0), sd = random_tensor({2, 1, 8, 8}, rng, 0.0, 0.9);
    check("rd_loss", grad_check([&](const Tensor& x) { return rd_loss(td, x); }, sd, kGradEps));
  }

  // Total loss through a small network, every student and adapter parameter
  // probed entry by entry.
  {
    Model model = build_model(fixtures::tiny_config(), 5);
    const Tensor image = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
    const Tensor gt = random_tensor({2, 1, 4, 4}, rng, 0.0, 0.5);
    const DistillConfig cfg = fixtures::tiny_distill();
    std::vector<Parameter*> student;
    for (Component c : {Component::Student, Component::Adapters})
      for (Parameter& p : model.component(c)) student.push_back(&p);
    ForwardOptions opt;
    opt.train_stem = opt.train_teacher = false;
    check("total_loss (all student-side entries, small net)",
          grad_check([&](Tape& tape) { return total_loss(gt, forward_joint(model, image, &tape, opt), cfg).total; },
                     student, kGradEps));
  }
  // Supplementary spot check on the desk network (a spread of entries from every
  // student-side tensor). At this size some probe can land within eps of a
  // ReLU/max-pool switch, where central differences are meaningless; such a
  // probe shows up as disagreeing forward and backward one-sided differences
  // (smooth probes agree to ~1e-5) and is re-probed with a step below the
  // switch distance instead.
  {
    Model model = build_model(desk_config(), 6);
    const Tensor image = random_tensor({1, 3, 64, 64}, rng, 0.0, 1.0);
    const Tensor gt = random_tensor({1, 1, 8, 8}, rng, 0.0, 0.5);
    const DistillConfig cfg;
    std::vector<Parameter*> student;
    for (Component c : {Component::Student, Component::Adapters})
      for (Parameter& p : model.component(c)) student.push_back(&p);
    ForwardOptions opt;
    opt.train_stem = opt.train_teacher = false;
    const auto eval = [&] { return total_loss(gt, forward_joint(model, image, nullptr, opt), cfg).total.item(); };
    for (Parameter* p : student) p->zero_grad();
    {
      Tape tape;
      tape.backward(total_loss(gt, forward_joint(model, image, &tape, opt), cfg).total);
    }
    const auto rel = [](Scalar a, Scalar b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); };
    const Scalar f0 = eval();
    Index probes = 0, kinks = 0;
    Scalar kink_err = 0.0;
    for (Parameter* p : student) {
      const Index n = p->value.numel(), count = std::min<Index>(n, 6);
      for (Index k = 0; k < count; ++k, ++probes) {
        const auto i = static_cast<std::size_t>((k * n) / count);
        const Scalar orig = p->value.data()[i], analytic = p->grad.data()[i];
        const auto at = [&](Scalar x) {
          p->value.mutable_data()[i] = x;
          const Scalar f = eval();
          p->value.mutable_data()[i] = orig;
          return f;
        };
        const Scalar up = at(orig + kGradEps), down = at(orig - kGradEps);
        if (rel((up - f0) / kGradEps, (f0 - down) / kGradEps) <= 1e-3) {
          check("total_loss desk " + p->name, rel(analytic, (up - down) / (2 * kGradEps)));
          continue;
        }
        ++kinks;
        const Scalar small = kGradEps / 10;
        kink_err = std::max(kink_err, rel(analytic, (at(orig + small) - at(orig - small)) / (2 * small)));
      }
    }
    v.expect(kink_err < kGradTol, "desk probes at switches, eps 1e-6 rel err " + fmt(kink_err));
    v.expect(kinks * 20 <= probes, "too many desk probes at switches: " + std::to_string(kinks));
    v.detail << "desk spot check " << probes << " probes, " << kinks << " straddling a ReLU/max-pool switch at eps 1e-5"
             << (kinks ? " (re-probed at 1e-6: rel err " + fmt(kink_err) + ")" : std::string()) << "; ";
  }

  const double secs = seconds_since(t0);
  v.expect(secs < 120.0, "runtime " + fmt(secs) + " s >= 120 s");
  v.detail << "max rel err " << fmt(worst) << " (< 1e-4), " << fmt(secs, 3) << " s (< 120 s)";
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence

void criterion_oracles(Verdict& v) {
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<Index> small(1, 3), extent(4, 12), kern(1, 3), dil(1, 2);
  constexpr int kShapes = 50;
  constexpr Scalar kExact = 1e-12, kLoose = 1e-10;
  Scalar conv_err = 0, bmm_err = 0, pool_err = 0, ssim_err = 0;
  for (int i = 0; i < kShapes; ++i) {
    const Index k = kern(rng) * 2 - 1, d = dil(rng), pad = (k / 2) * d;
    const Tensor x = random_tensor({small(rng), small(rng), extent(rng), extent(rng)}, rng);
    const Tensor w = random_tensor({small(rng), x.dim(1), k, k}, rng), b = random_tensor({w.dim(0)}, rng);
    conv_err = std::max(conv_err, max_abs_diff(conv2d(x, w, b, d, pad), oracle::conv2d(x, w, b, d, pad)));

    const Tensor a = random_tensor({small(rng), extent(rng), extent(rng)}, rng);
    const Tensor c = random_tensor({a.dim(0), a.dim(2), extent(rng)}, rng);
    bmm_err = std::max(bmm_err, max_abs_diff(bmm(a, c), oracle::bmm(a, c)));

    std::uniform_int_distribution<Index> oh(1, x.dim(2)), ow(1, x.dim(3));
    const Index ph = oh(rng), pw = ow(rng);
    pool_err = std::max(pool_err, max_abs_diff(adaptive_avg_pool(x, ph, pw), oracle::adaptive_avg_pool(x, ph, pw)));

    const Shape dshape{small(rng), 1, extent(rng), extent(rng)};
    const Tensor p = random_tensor(dshape, rng, 0.0, 1.0), q = random_tensor(dshape, rng, 0.0, 1.0);
    std::uniform_int_distribution<Index> win(2, std::min(dshape[2], dshape[3]));
    const Index wsz = win(rng);
    ssim_err = std::max(ssim_err, std::abs(ssim(p, q, wsz).item() - oracle::ssim(p, q, wsz)));
  }
  v.expect(conv_err < kExact, "conv2d err " + fmt(conv_err));
  v.expect(bmm_err < kExact, "bmm err " + fmt(bmm_err));
  v.expect(pool_err < kExact, "adaptive_avg_pool err " + fmt(pool_err));
  v.expect(ssim_err < kLoose, "ssim err " + fmt(ssim_err));
  v.detail << kShapes << " shapes each; max abs err conv2d " << fmt(conv_err) << ", bmm " << fmt(bmm_err)
           << ", adaptive_avg_pool " << fmt(pool_err) << " (< 1e-12); ssim " << fmt(ssim_err) << " (< 1e-10)";
}

// ---------------------------------------------------------------------------
// 3. Loss identities

void criterion_identities(Verdict& v) {
  Model model = build_model(desk_config(), 7);
  auto rng = scene_rng(303, 0);
  const AnnotatedScene scene = synth_scene(SceneParams{}, rng);
  const Batch batch = make_batch(std::span(&scene, 1));
  const JointOutput real = forward_joint(model, batch.images);

  JointOutput same = real;
  same.features.adapted = real.features.teacher;
  same.student_density = real.teacher_density;
  const DistillConfig cfg;
  const LossBreakdown lb = total_loss(batch.densities, same, cfg);
  v.expect(std::abs(lb.feature) <= 1e-12, "L_f = " + fmt(lb.feature));
  v.expect(std::abs(lb.relation) <= 1e-12, "L_r = " + fmt(lb.relation));
  v.expect(std::abs(lb.response) <= 1e-12, "L_s = " + fmt(lb.response));

  // Relation matrices of both branches of the untrained network and of random features.
  const Index P = cfg.relation_pool;
  const Scalar upper = 1.0 / static_cast<Scalar>(P * P);
  std::vector<std::vector<Tensor>> groups = {real.features.teacher, real.features.adapted};
  std::mt19937_64 frng(304);
  groups.push_back({random_tensor({2, 32, 16, 16}, frng), random_tensor({2, 48, 8, 8}, frng),
                    random_tensor({2, 64, 8, 8}, frng), random_tensor({2, 64, 8, 8}, frng)});
  Scalar asym = 0, lo = INFINITY, hi = -INFINITY;
  for (const auto& g : groups)
    for (const RelationMatrix& r : relation_matrices(g, FrdMode::Dense, P)) {
      const Index B = r.values.dim(0), N = r.values.dim(1);
      for (Index b = 0; b < B; ++b)
        for (Index i = 0; i < N; ++i)
          for (Index j = 0; j < N; ++j) {
            const Scalar x = r.values.at({b, i, j});
            asym = std::max(asym, std::abs(x - r.values.at({b, j, i})));
            lo = std::min(lo, x);
            hi = std::max(hi, x);
          }
    }
  v.expect(asym == 0.0, "asymmetry " + fmt(asym));
  v.expect(lo > 0.0 && hi < upper, "entries outside (0, 1/P^2)");

  const auto dense = frd_terms(real.features.adapted, real.features.teacher, FrdMode::Dense, P);
  const auto sparse = frd_terms(real.features.adapted, real.features.teacher, FrdMode::Sparse, P);
  v.expect(dense.size() == 6, "dense pairs " + std::to_string(dense.size()));
  v.expect(sparse.size() == 3, "sparse pairs " + std::to_string(sparse.size()));
  v.detail << "L_f " << lb.feature << ", L_r " << lb.relation << ", L_s " << lb.response
           << "; relation entries in [" << fmt(lo) << ", " << fmt(hi) << "] within (0, " << fmt(upper)
           << "), max asymmetry " << asym << "; dense " << dense.size() << " / sparse " << sparse.size() << " pairs";
}

// ---------------------------------------------------------------------------
// 4. Mass conservation

void criterion_mass(Verdict& v) {
  SceneParams params;
  params.seed = 404;
  const Dataset scenes = synth_dataset(params, 100);
  const AugmentParams aug;
  Scalar worst_raw = 0, worst_aug = 0, worst_direct = 0;
  std::mt19937_64 prng(405);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const AnnotatedScene& s = scenes[i];
    worst_raw = std::max(worst_raw, std::abs(s.density.array().sum() - static_cast<Scalar>(s.points.size())));
    auto rng = scene_rng(406, i);
    const AnnotatedScene a = augment(s, aug, rng);
    worst_aug = std::max(worst_aug, std::abs(a.density.array().sum() - static_cast<Scalar>(a.points.size())));
    // Points anywhere in the image, including the borders.
    std::uniform_int_distribution<int> count(0, 120);
    std::uniform_real_distribution<Scalar> ux(0.0, 64.0), uy(0.0, 64.0);
    std::vector<Point> pts(static_cast<std::size_t>(count(prng)));
    for (Point& p : pts) p = {std::min(ux(prng), 63.999), std::min(uy(prng), 63.999)};
    worst_direct = std::max(
        worst_direct, std::abs(density_from_points(pts, 64, 64).array().sum() - static_cast<Scalar>(pts.size())));
  }
  const Scalar worst = std::max({worst_raw, worst_aug, worst_direct});
  v.expect(worst < 1e-4, "max deviation " + fmt(worst));
  v.detail << "100 scenes; max |sum - count| generated " << fmt(worst_raw) << ", augmented " << fmt(worst_aug)
           << ", random point sets " << fmt(worst_direct) << " (< 1e-4)";
}

// ---------------------------------------------------------------------------
// 5-7. Training benchmark, shared by the directional criteria

struct RunOutcome {
  Scalar student_mae = 0;
  Scalar teacher_mae = 0;
  Scalar train_seconds = 0;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  Scalar warmup_seconds = 0;
  Scalar warm_teacher_mae = 0;
  RunOutcome online, student_only, two_phase, online_cold;
};

RunOutcome finish_run(const TrainResult& r) {
  const EvalReport& last = r.history.back();
  return {last.student->mae, last.teacher->mae, r.train_seconds()};
}

std::vector<SeedOutcome> run_benchmark() {
  RunConfig base;  // 200 train / 50 test synthetic 64x64 scenes, 5-80 heads, desk model
  const Datasets data = load_datasets(base.data);
  std::vector<SeedOutcome> out;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    SeedOutcome so;
    so.seed = seed;
    TrainConfig cfg = base.train;
    cfg.seed = seed;
    cfg.eval_every = 10;
    const ModelConfig mc = model_config(base);

    Model warmed = build_model(mc, seed);
    const TrainResult w = warm_up_teacher(warmed, data.train, data.test, cfg);
    so.warmup_seconds = w.warmup_seconds;
    so.warm_teacher_mae = w.history.back().teacher->mae;

    const auto run = [&](TrainMode mode, Index warmup, Model model) {
      TrainConfig c = cfg;
      c.mode = mode;
      c.teacher_warmup_epochs = warmup;
      return finish_run(train(model, data.train, data.test, c));
    };
    so.online = run(TrainMode::Online, 0, warmed);
    so.student_only = run(TrainMode::StudentOnly, 0, warmed);
    so.two_phase = run(TrainMode::TwoPhase, 0, warmed);
    so.online_cold = run(TrainMode::Online, 0, build_model(mc, seed));
    std::cerr << "seed " << seed << ": warm-up " << fmt(so.warmup_seconds, 3) << " s (teacher mae "
              << fmt(so.warm_teacher_mae) << "); student mae online " << fmt(so.online.student_mae)
              << ", student_only " << fmt(so.student_only.student_mae) << ", two_phase "
              << fmt(so.two_phase.student_mae) << ", online without warm-up " << fmt(so.online_cold.student_mae)
              << "; train s online " << fmt(so.online.train_seconds, 3) << ", two_phase "
              << fmt(so.two_phase.train_seconds, 3) << "\n";
    out.push_back(so);
  }
  return out;
}

std::vector<Scalar> collect(const std::vector<SeedOutcome>& runs, Scalar (*pick)(const SeedOutcome&)) {
  std::vector<Scalar> v;
  for (const auto& r : runs) v.push_back(pick(r));
  return v;
}

std::string list(const std::vector<Scalar>& v) {
  std::string s;
  for (Scalar x : v) s += (s.empty() ? "" : "/") + fmt(x);
  return s;
}

void criterion_distillation_gain(Verdict& v, const std::vector<SeedOutcome>& runs) {
  const auto online = collect(runs, [](const SeedOutcome& r) { return r.online.student_mae; });
  const auto alone = collect(runs, [](const SeedOutcome& r) { return r.student_only.student_mae; });
  const Scalar m_online = median(online), m_alone = median(alone);
  const Scalar gain = 1.0 - m_online / m_alone;
  Scalar worst_seed_minutes = 0;
  for (const auto& r : runs)
    worst_seed_minutes = std::max(worst_seed_minutes, (r.warmup_seconds + r.online.train_seconds +
                                                       r.student_only.train_seconds) / 60.0);
  v.expect(gain >= 0.10, "improvement " + fmt(100 * gain) + "% < 10%");
  v.expect(worst_seed_minutes < 30.0, "runtime per seed " + fmt(worst_seed_minutes) + " min");
  v.detail << "median student MAE distilled " << fmt(m_online) << " (" << list(online) << ") vs student_only "
           << fmt(m_alone) << " (" << list(alone) << "): " << fmt(100 * gain, 3) << "% lower (>= 10%); "
           << fmt(worst_seed_minutes, 3) << " min per seed (< 30)";
}

void criterion_online_vs_two_phase(Verdict& v, const std::vector<SeedOutcome>& runs) {
  Scalar online_s = 0, two_s = 0;
  for (const auto& r : runs) {
    online_s += r.online.train_seconds;
    two_s += r.two_phase.train_seconds;
  }
  const Scalar saving = 1.0 - online_s / two_s;
  const auto online = collect(runs, [](const SeedOutcome& r) { return r.online.student_mae; });
  const auto two = collect(runs, [](const SeedOutcome& r) { return r.two_phase.student_mae; });
  const Scalar m_online = median(online), m_two = median(two);
  v.expect(saving >= 0.20, "wall-clock saving " + fmt(100 * saving) + "% < 20%");
  v.expect(m_online <= 1.05 * m_two, "online MAE above two-phase + 5%");
  v.detail << "training wall clock online " << fmt(online_s, 4) << " s vs two-phase " << fmt(two_s, 4) << " s ("
           << fmt(100 * saving, 3) << "% saving, >= 20%); median student MAE online " << fmt(m_online)
           << " vs two-phase " << fmt(m_two) << " (" << list(two) << "), limit " << fmt(1.05 * m_two);
}

void criterion_warmup(Verdict& v, const std::vector<SeedOutcome>& runs) {
  const auto warm = collect(runs, [](const SeedOutcome& r) { return r.online.student_mae; });
  const auto cold = collect(runs, [](const SeedOutcome& r) { return r.online_cold.student_mae; });
  const Scalar m_warm = median(warm), m_cold = median(cold);
  v.expect(m_cold > m_warm, "no warm-up is not worse");
  v.detail << "median distilled-student MAE without warm-up " << fmt(m_cold) << " (" << list(cold)
           << ") vs with warm-up " << fmt(m_warm) << " (" << list(warm) << ")";
}

// ---------------------------------------------------------------------------
// 8. Parameter accounting

Index conv_params(Index in, Index out, Index k = 3) { return out * in * k * k + out; }

void criterion_params(Verdict& v) {
  const Model desk = build_model(desk_config(), 0);
  // Stem 3-16-16; teacher 32,32 | 48x3 | 64x3 | 64x3 + 1x1 head; student at a quarter width; 1x1 adapters.
  const Index stem = conv_params(3, 16) + conv_params(16, 16);
  const Index teacher = conv_params(16, 32) + conv_params(32, 32) + conv_params(32, 48) + 2 * conv_params(48, 48) +
                        conv_params(48, 64) + 5 * conv_params(64, 64) + conv_params(64, 1, 1);
  const Index student = conv_params(16, 8) + conv_params(8, 8) + conv_params(8, 12) + 2 * conv_params(12, 12) +
                        conv_params(12, 16) + 5 * conv_params(16, 16) + conv_params(16, 1, 1);
  const Index adapters = conv_params(8, 32, 1) + conv_params(12, 48, 1) + 2 * conv_params(16, 64, 1);
  const std::pair<Component, Index> expected[] = {
      {Component::Stem, stem}, {Component::Teacher, teacher}, {Component::Student, student},
      {Component::Adapters, adapters}};
  for (const auto& [c, n] : expected)
    v.expect(param_count(desk, c) == n, std::string(to_string(c)) + " " + std::to_string(param_count(desk, c)) +
                                            " != " + std::to_string(n));
  const Model full = build_model(full_config(), 0);
  const Index full_ss = param_count(full, Component::Stem) + param_count(full, Component::Student);
  v.expect(full_ss >= 550000 && full_ss <= 850000, "full stem+student " + std::to_string(full_ss));
  v.detail << "desk stem/teacher/student/adapters " << param_count(desk, Component::Stem) << "/"
           << param_count(desk, Component::Teacher) << "/" << param_count(desk, Component::Student) << "/"
           << param_count(desk, Component::Adapters) << " match hand counts; full-scale stem+student " << full_ss
           << " in [550000, 850000]";
}

// ---------------------------------------------------------------------------
// 9. Determinism of every command

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Every file under `dir` (relative path -> bytes).
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return files;
}

std::pair<int, std::string> cli(std::vector<std::string> args) {
  args.insert(args.begin(), "okd");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str()};
}

void criterion_determinism(Verdict& v) {
  const fs::path root = fs::temp_directory_path() / "okd_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);

  RunConfig cfg;
  cfg.data.synthetic.height = cfg.data.synthetic.width = 32;
  cfg.data.synthetic.count_max = 30;
  cfg.data.train_dir = root / "train_data";
  cfg.data.test_dir = root / "test_data";
  cfg.train.epochs = 2;
  cfg.train.teacher_warmup_epochs = 1;
  cfg.train.batch_size = 4;
  cfg.train.distill.relation_pool = 4;
  cfg.train.distill.ssim_window = 4;
  cfg.train.augment_params.crop_height = cfg.train.augment_params.crop_width = 32;
  cfg.out_dir = root / "run";
  std::ofstream(root / "config.json") << to_json(cfg).dump(2);
  const std::string config = (root / "config.json").string();

  const std::vector<std::pair<std::string, std::vector<std::string>>> commands = {
      {"gen-data train", {"gen-data", "--out", (root / "train_data").string(), "--scenes", "12", "--seed", "9",
                          "--size", "32", "--count-max", "30"}},
      {"gen-data test", {"gen-data", "--out", (root / "test_data").string(), "--scenes", "4", "--seed", "10",
                         "--size", "32", "--count-max", "30"}},
      {"train online", {"train", "--config", config}},
      {"train two_phase", {"train", "--config", config, "--mode", "two_phase", "--out", (root / "two").string()}},
      {"eval", {"eval", "--checkpoint", (root / "run" / "checkpoint.okdc").string(), "--data",
                (root / "test_data").string()}},
      {"inspect-relations", {"inspect-relations", "--checkpoint", (root / "run" / "checkpoint.okdc").string(),
                             "--image", (root / "test_data" / "scene_00000.okdi").string(), "--out",
                             (root / "relations").string()}},
      {"ablate rd", {"ablate", "--config", config, "--suite", "rd", "--out", (root / "ablate").string()}},
  };

  const auto run_all = [&]() {
    std::vector<std::string> stdouts;
    for (const auto& [name, args] : commands) {
      const auto [code, out] = cli(args);
      v.expect(code == 0, name + " exit " + std::to_string(code));
      stdouts.push_back(out);
    }
    auto files = snapshot(root);
    // Wall-clock measurements are the one intended difference between runs.
    for (auto it = files.begin(); it != files.end();)
      it = fs::path(it->first).filename() == "timing.json" ? files.erase(it) : std::next(it);
    return std::pair{stdouts, files};
  };
  const auto first = run_all();
  const auto second = run_all();
  std::size_t same_files = 0;
  for (const auto& [name, bytes] : first.second) {
    const auto it = second.second.find(name);
    const bool same = it != second.second.end() && it->second == bytes;
    v.expect(same, name + " differs");
    same_files += same;
  }
  v.expect(first.second.size() == second.second.size(), "file sets differ");
  for (std::size_t i = 0; i < commands.size(); ++i)
    v.expect(first.first[i] == second.first[i], commands[i].first + " stdout differs");
  v.detail << commands.size() << " commands run twice; " << same_files << "/" << first.second.size()
           << " files (datasets, configs, histories, checkpoints, relation exports, ablation tables) and all "
           << commands.size() << " stdout reports byte-identical; timing.json excluded";
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  const auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

  bool all_pass = true;
  const auto report = [&](int n, const std::string& title, Verdict& v) {
    all_pass = all_pass && v.pass;
    std::cout << "criterion " << n << " (" << title << "): " << (v.pass ? "PASS" : "FAIL") << " - " << v.detail.str()
              << std::endl;
  };
  const auto run = [&](int n, const std::string& title, const std::function<void(Verdict&)>& body) {
    if (!wanted(n)) return;
    Verdict v;
    try {
      body(v);
    } catch (const std::exception& e) {
      v.expect(false, std::string("exception: ") + e.what());
    }
    report(n, title, v);
  };

  run(1, "gradient suite", criterion_gradients);
  run(2, "oracle equivalence", criterion_oracles);
  run(3, "loss identities", criterion_identities);
  run(4, "mass conservation", criterion_mass);

  if (wanted(5) || wanted(6) || wanted(7)) {
    std::vector<SeedOutcome> runs;
    std::string failure;
    try {
      runs = run_benchmark();
    } catch (const std::exception& e) {
      failure = e.what();
    }
    const auto directional = [&](int n, const std::string& title,
                                 void (*body)(Verdict&, const std::vector<SeedOutcome>&)) {
      run(n, title, [&](Verdict& v) {
        if (!failure.empty()) throw std::runtime_error("benchmark failed: " + failure);
        body(v, runs);
      });
    };
    directional(5, "distillation beats student alone", criterion_distillation_gain);
    directional(6, "online vs two-phase", criterion_online_vs_two_phase);
    directional(7, "warm-up effect", criterion_warmup);
  }

  run(8, "parameter accounting", criterion_params);
  run(9, "determinism", criterion_determinism);
  return all_pass ? 0 : 1;
}
