#pragma once

#include <vector>

#include "nudiff/rng.hpp"
#include "nudiff/tensor.hpp"

namespace nudiff {

// Variance schedule with derived per-step quantities. The reverse-process
// variance is fixed at sigma_t^2 = beta_t.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1] is the step-t variance
  std::vector<double> alpha;      // 1 - beta_t
  std::vector<double> alpha_bar;  // prod_{i<=t} alpha_i
  std::vector<double> sigma;      // sqrt(beta_t)
};

NoiseSchedule linear_schedule(int T, double beta1, double betaT);

// One forward-process step: sqrt(1-beta_t)*y_prev + sqrt(beta_t)*eps.
Tensor forward_step(const Tensor& y_prev, int t, const Tensor& eps, const NoiseSchedule& sched);

// Closed-form jump to step t: sqrt(abar_t)*y0 + sqrt(1-abar_t)*eps.
Tensor q_sample(const Tensor& y0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Mean squared error between noise and prediction, accumulated in 64-bit.
double simple_loss(const Tensor& eps_hat, const Tensor& eps);

// One reverse ancestral step. z must be zero when t == 1.
Tensor reverse_step(const Tensor& y_t, int t, const Tensor& eps_hat, const Tensor& z,
                    const NoiseSchedule& sched);

// Classifier-free guidance combination: (w+1)*cond - w*uncond.
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

// Noise-prediction capability. x is a batch [N,C,H,W]; t holds one 1-based
// step index per batch row; cond is null for unconditional prediction or a
// per-row conditioning batch [N,3,H,W].
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Tensor predict(const Tensor& x, const std::vector<int>& t, const Tensor* cond) = 0;
};

// Full ancestral sampling of one raster of the given shape [C,H,W].
// cond, when non-null, is a [3,H,W] structure and predictions are combined
// with guidance scale w; the result is clamped to [-1,1].
Tensor sample(Denoiser& denoiser, const std::vector<int>& shape, const NoiseSchedule& sched,
              const Tensor* cond, double w, Rng rng);

// Lockstep batched sampling. Row k uses rng.stream(k) and is bit-identical
// to sample() run with that stream. cond, when present, is [N,3,H,W].
Tensor sample_batch(Denoiser& denoiser, int count, const std::vector<int>& shape,
                    const NoiseSchedule& sched, const Tensor* cond, double w, const Rng& rng);

}  // namespace nudiff
