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

// Small end-to-end run in memory: synthesize scenes, fuse object points,
// train a multi-frame teacher, distill a single-frame student, evaluate.

#include <cstdio>

#include "smf/pipeline.hpp"

using namespace smf;

int main() {
  auto c = config::parse(R"(
[data]
train_scenes = 4
test_scenes = 2
[model]
range = 8
[train]
teacher_steps = 150
student_steps = 150
warmup_steps = 20
)");

  // One orbit: fused object coverage vs. the best single view.
  const auto orbit = synth::orbit_benchmark(7);
  std::printf("orbit coverage: fused >= %.2f, single frame <= %.2f\n", orbit.min_fused, orbit.max_single_frame);

  const auto train = pipeline::prepare_all(pipeline::build_samples(c, c.train_seed, c.train_scenes, 1), c, true, 1);
  const auto test = pipeline::prepare_all(pipeline::build_samples(c, c.test_seed, c.test_scenes, 1), c, true, 1);
  std::printf("%zu training frames, %zu test frames\n", train.size(), test.size());

  auto teacher = pipeline::train_teacher(c, train).params;
  teacher.set_trainable(false);
  std::printf("teacher mAPH L2 %.4f\n", pipeline::evaluate(teacher, c, test, true, 1).score());

  const auto cache = pipeline::teacher_caches(teacher, c, train, 1);
  const auto plain = pipeline::train_student(c, train, nullptr, 1);
  const auto distilled = pipeline::train_student(c, train, &cache, 1);
  std::printf("student mAPH L2: plain %.4f, distilled %.4f\n",
              pipeline::evaluate(plain.params, c, test, false, 1).score(),
              pipeline::evaluate(distilled.params, c, test, false, 1).score());

  const auto& last = distilled.log.back();
  std::printf("last step losses: cls %.4f reg %.4f vxl %.4f bev %.4f rsp %.4f/%.4f\n", last.cls, last.reg, last.vxl,
              last.bev, last.rsp_c, last.rsp_r);
  return 0;
}
