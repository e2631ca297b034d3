#pragma once

#include "okd/data.hpp"
#include "okd/distill.hpp"
#include "okd/model.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace okd {

struct AdamState {
  Tensor m;
  Tensor v;
  Index step = 0;
};

struct AdamHyper {
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;
};

/// One bias-corrected Adam update of `param` from its accumulated gradient.
void adam_step(Parameter& param, AdamState& state, Scalar lr, const AdamHyper& hyper = {});

/// Parameters sharing a learning rate, with per-group gradient clipping.
class AdamGroup {
 public:
  AdamGroup(std::vector<Parameter*> params, Scalar lr, AdamHyper hyper = {});

  void zero_grad();
  /// Rescales gradients so their global L2 norm is at most `max_norm`;
  /// returns the norm before clipping.
  Scalar clip_grad_norm(Scalar max_norm);
  void step();

  std::span<Parameter* const> params() const noexcept { return params_; }
  Scalar lr() const noexcept { return lr_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<AdamState> state_;
  Scalar lr_;
  AdamHyper hyper_;
};

enum class TrainMode { Online, TwoPhase, StudentOnly, TeacherOnly };
std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view name);

struct TrainConfig {
  Index epochs = 30;
  Index batch_size = 8;
  Scalar student_lr = 1e-4;
  Scalar teacher_lr = 1e-6;
  /// Learning rate of the teacher+stem warm-up that stands in for pre-training.
  Scalar warmup_lr = 1e-3;
  Index teacher_warmup_epochs = 20;
  TrainMode mode = TrainMode::Online;
  DistillConfig distill;
  std::uint64_t seed = 0;
  Index eval_every = 1;
  Scalar clip_norm = 10.0;
  bool augment = true;
  AugmentParams augment_params;
};

enum class Branch { Teacher, Student };
std::string_view to_string(Branch b);

struct CountMetrics {
  Scalar mae = 0.0;
  Scalar mse = 0.0;  // root of the mean squared count error
};

/// MAE and root-mean-square error between predicted and true counts.
CountMetrics count_metrics(std::span<const Scalar> predicted, std::span<const Scalar> truth);

/// Sum of each scene's predicted density map.
std::vector<Scalar> predict_counts(Model& model, const Dataset& data, Branch branch, Index batch_size = 16);

/// Epoch means of the loss terms.
struct LossSummary {
  Scalar total = 0.0;
  Scalar student = 0.0;
  Scalar teacher = 0.0;
  Scalar feature = 0.0;
  Scalar relation = 0.0;
  Scalar response = 0.0;
  std::vector<std::pair<std::string, Scalar>> relation_pairs;
};

struct EvalReport {
  Index epoch = 0;
  std::string phase;
  Branch branch = Branch::Student;
  Scalar mae = 0.0;
  Scalar mse = 0.0;
  std::optional<CountMetrics> teacher;
  std::optional<CountMetrics> student;
  std::optional<LossSummary> losses;
  std::optional<Scalar> wall_clock_seconds;
};

nlohmann::json to_json(const EvalReport& report);

/// Counts of `branch` against the annotated counts; both branches are filled in.
EvalReport evaluate(Model& model, const Dataset& data, Branch branch = Branch::Student);

/// Receives every history record (eval reports and phase markers).
using HistorySink = std::function<void(const nlohmann::json&)>;

struct TrainResult {
  std::vector<EvalReport> history;
  Scalar warmup_seconds = 0.0;
  /// Per phase, excluding warm-up and evaluation.
  std::vector<std::pair<std::string, Scalar>> phase_seconds;
  /// Mean training loss of every epoch after warm-up, in order.
  std::vector<Scalar> epoch_losses;

  Scalar train_seconds() const;
};

/// Teacher+stem trained alone on L_tea for cfg.teacher_warmup_epochs.
TrainResult warm_up_teacher(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                            const HistorySink& sink = {});

/// Optional warm-up, then joint epochs on the total loss: student side at
/// student_lr, teacher+stem at teacher_lr.
TrainResult train_online(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                         const HistorySink& sink = {});

/// Optional warm-up, teacher+stem for cfg.epochs, then the student for
/// cfg.epochs against the frozen teacher.
TrainResult train_two_phase(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                            const HistorySink& sink = {});

/// Dispatches on cfg.mode.
TrainResult train(Model& model, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                  const HistorySink& sink = {});

}  // namespace okd
