#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "fedktl/autograd.hpp"
#include "fedktl/module.hpp"

namespace fedktl {

/// A tensor the finite-difference check perturbs. The loss builder must
/// register it on the tape under `name` (Tape::input or Module::forward).
struct Probe {
  std::string name;
  Tensor<double>* tensor;
};

using LossBuilder = std::function<Var(Tape<double>&)>;

/// Probes for every parameter of the given modules.
inline std::vector<Probe> probes_of(std::initializer_list<Module<double>*> modules) {
  std::vector<Probe> out;
  for (auto* m : modules)
    for (auto& p : m->parameters()) out.push_back(Probe{p.name, &p.value});
  return out;
}

/// Maximum over all probe elements of
///   |analytic - central_difference| / max(|analytic|, |fd|, 1e-8).
/// Probes the loss builder never reaches count as analytic zero.
inline double fd_gradcheck(const std::vector<Probe>& probes, const LossBuilder& build, double epsilon) {
  detail::require(epsilon > 0.0 && epsilon <= 1e-2, "fd_gradcheck: epsilon must lie in (0, 1e-2]");
  auto eval = [&] {
    Tape<double> t;
    return t.item(build(t));
  };
  const double base1 = eval();
  const double base2 = eval();
  if (std::memcmp(&base1, &base2, sizeof(double)) != 0)
    throw Error("fd_gradcheck: loss function is not bitwise repeatable");

  Tape<double> tape;
  const auto grads = tape.backward(build(tape));

  double worst = 0.0;
  for (const auto& probe : probes) {
    auto it = grads.find(probe.name);
    auto& data = probe.tensor->buffer();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + epsilon;
      const double up = eval();
      data[i] = saved - epsilon;
      const double down = eval();
      data[i] = saved;
      const double fd = (up - down) / (2.0 * epsilon);
      const double an = it == grads.end() ? 0.0 : it->second[i];
      const double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(an - fd) / denom);
    }
  }
  return worst;
}

}  // namespace fedktl
