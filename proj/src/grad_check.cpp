#include "okd/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace okd {

namespace {

Scalar relative_error(Scalar analytic, Scalar numeric) {
  const Scalar scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

}  // namespace

Scalar grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, Scalar eps) {
  Tape tape;
  const Tensor leaf = tape.watch(x);
  tape.backward(f(leaf));
  const Tensor analytic = tape.grad(leaf);

  Scalar worst = 0.0;
  Tensor probe = x.detach();
  for (Index i = 0; i < x.numel(); ++i) {
    const Scalar orig = x.data()[static_cast<std::size_t>(i)];
    probe.mutable_data()[static_cast<std::size_t>(i)] = orig + eps;
    const Scalar up = f(probe).item();
    probe.mutable_data()[static_cast<std::size_t>(i)] = orig - eps;
    const Scalar down = f(probe).item();
    probe.mutable_data()[static_cast<std::size_t>(i)] = orig;
    const Scalar numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, relative_error(analytic.data()[static_cast<std::size_t>(i)], numeric));
  }
  return worst;
}

Scalar grad_check(const std::function<Tensor(Tape&)>& loss, std::span<Parameter* const> params, Scalar eps,
                  Index max_probes_per_param) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto eval = [&] {
    Tape tape;
    return loss(tape).item();
  };

  Scalar worst = 0.0;
  for (Parameter* p : params) {
    const Tensor analytic = p->grad.detach();
    const Index n = p->value.numel();
    const Index probes = (max_probes_per_param > 0) ? std::min(n, max_probes_per_param) : n;
    for (Index k = 0; k < probes; ++k) {
      const auto i = static_cast<std::size_t>(probes == n ? k : (k * n) / probes);
      const Scalar orig = p->value.data()[i];
      p->value.mutable_data()[i] = orig + eps;
      const Scalar up = eval();
      p->value.mutable_data()[i] = orig - eps;
      const Scalar down = eval();
      p->value.mutable_data()[i] = orig;
      worst = std::max(worst, relative_error(analytic.data()[i], (up - down) / (2.0 * eps)));
    }
  }
  return worst;
}

}  // namespace okd
