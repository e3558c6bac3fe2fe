// Copyright 2026 The SMF Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Central finite-difference gradient checking. It only ever evaluates the
// forward pass, so it is independent of the reverse-mode implementation.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "smf/tensor.hpp"

namespace smf::ad {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // |a - n| / max(|a|, |n|, floor); the floor keeps round-off on
  // vanishing gradients from reading as relative error.
  double floor = 1e-4;
  // 0 checks every element; otherwise an evenly strided subset per input.
  std::size_t max_elements_per_input = 0;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t checked = 0;
  bool ok = true;
};

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline GradCheckResult gradcheck(const std::string& name, const ScalarFn& fn, std::vector<Tensor> inputs,
                                 const GradCheckOptions& opt = {}) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = fn(inputs);
  backward(loss);

  GradCheckResult res{name, 0.0, 0, true};
  for (auto& t : inputs) {
    const std::size_t n = t.numel();
    std::vector<double> analytic = t.grad();
    analytic.resize(n, 0.0);
    std::size_t stride = 1;
    if (opt.max_elements_per_input > 0 && n > opt.max_elements_per_input)
      stride = (n + opt.max_elements_per_input - 1) / opt.max_elements_per_input;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = t.values()[i];
      t.values()[i] = orig + opt.step;
      const double fp = fn(inputs).item();
      t.values()[i] = orig - opt.step;
      const double fm = fn(inputs).item();
      t.values()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opt.floor});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      res.max_rel_error = std::max(res.max_rel_error, rel);
      ++res.checked;
    }
  }
  res.ok = res.max_rel_error < opt.tolerance;
  return res;
}

}  // namespace smf::ad
