#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "nudiff/diffusion.hpp"
#include "nudiff/net/denoiser.hpp"
#include "nudiff/rng.hpp"
#include "nudiff/tensor.hpp"

namespace nudiff {

// Decoupled-weight-decay adaptive-moment optimizer. Moment accumulators
// mirror the store's parameters; construct a fresh instance per phase.
struct AdamW {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  int64_t step_count = 0;
  std::vector<Tensor> m, v;

  AdamW(const ParamStore& store, double lr_);
  void step(ParamStore& store);
};

// One training sample: the clean target raster and, for conditional nets,
// the structure it is conditioned on.
struct TrainExample {
  Tensor target;               // [3,H,W]
  std::optional<Tensor> cond;  // [3,H,W]
};

struct TrainOptions {
  int steps = 100;
  int batch = 4;
  double drop_rate = 0.0;
};

struct TrainResult {
  std::vector<double> losses;    // one entry per step
  int64_t examples_seen = 0;
  int64_t null_cond_used = 0;    // rows where the condition was dropped
};

// Runs the q-sample / predict / simple-loss / optimizer-step loop. Each batch
// row draws, in order: a dataset index, a uniform t in 1..T, fresh noise,
// then (conditional nets) the condition-drop decision. Throws on an empty
// dataset or a non-finite loss.
TrainResult train(UNetDenoiser& net, const std::vector<TrainExample>& dataset,
                  const NoiseSchedule& sched, AdamW& opt, const TrainOptions& opts, Rng& rng);

}  // namespace nudiff
