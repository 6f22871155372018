#include "nudiff/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace nudiff {

NoiseSchedule linear_schedule(int T, double beta1, double betaT) {
  if (T < 1) throw std::invalid_argument("linear_schedule: T must be >= 1");
  if (!(beta1 > 0.0 && beta1 <= betaT && betaT < 1.0))
    throw std::invalid_argument("linear_schedule: need 0 < beta1 <= betaT < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.sigma.resize(T);
  double abar = 1.0;
  for (int t = 0; t < T; ++t) {
    double b = T == 1 ? beta1 : beta1 + (betaT - beta1) * t / (T - 1);
    s.beta[t] = b;
    s.alpha[t] = 1.0 - b;
    abar *= s.alpha[t];
    s.alpha_bar[t] = abar;
    s.sigma[t] = std::sqrt(b);
  }
  return s;
}

namespace {
void check_t(int t, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) throw std::invalid_argument("step index out of range");
}
}  // namespace

Tensor forward_step(const Tensor& y_prev, int t, const Tensor& eps, const NoiseSchedule& sched) {
  check_t(t, sched);
  check_same_shape(y_prev, eps, "forward_step");
  double a = std::sqrt(1.0 - sched.beta[t - 1]);
  double b = std::sqrt(sched.beta[t - 1]);
  Tensor out(y_prev.dims);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * y_prev[i] + b * eps[i];
  return out;
}

Tensor q_sample(const Tensor& y0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  check_t(t, sched);
  check_same_shape(y0, eps, "q_sample");
  double abar = sched.alpha_bar[t - 1];
  double a = std::sqrt(abar);
  double b = std::sqrt(1.0 - abar);
  Tensor out(y0.dims);
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * y0[i] + b * eps[i];
  return out;
}

double simple_loss(const Tensor& eps_hat, const Tensor& eps) {
  check_same_shape(eps_hat, eps, "simple_loss");
  double acc = 0.0;
  for (int64_t i = 0; i < eps.numel(); ++i) {
    double d = eps[i] - eps_hat[i];
    acc += d * d;
  }
  return acc / static_cast<double>(eps.numel());
}

Tensor reverse_step(const Tensor& y_t, int t, const Tensor& eps_hat, const Tensor& z,
                    const NoiseSchedule& sched) {
  check_t(t, sched);
  check_same_shape(y_t, eps_hat, "reverse_step");
  check_same_shape(y_t, z, "reverse_step");
  double alpha = sched.alpha[t - 1];
  double abar = sched.alpha_bar[t - 1];
  double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  double coef = (1.0 - alpha) / std::sqrt(1.0 - abar);
  double sigma = t == 1 ? 0.0 : sched.sigma[t - 1];
  Tensor out(y_t.dims);
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = inv_sqrt_alpha * (y_t[i] - coef * eps_hat[i]) + sigma * z[i];
  return out;
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
  check_same_shape(eps_cond, eps_uncond, "cfg_combine");
  Tensor out(eps_cond.dims);
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = (w + 1.0) * eps_cond[i] - w * eps_uncond[i];
  return out;
}

namespace {
Tensor sample_rows(Denoiser& denoiser, int count, const std::vector<int>& shape,
                   const NoiseSchedule& sched, const Tensor* cond, double w,
                   std::vector<Rng>& streams) {
  if (shape.size() != 3) throw std::invalid_argument("sample: shape must be [C,H,W]");
  if (count < 1) throw std::invalid_argument("sample: count must be >= 1");
  if (cond && (cond->rank() != 4 || cond->dim(0) != count))
    throw std::invalid_argument("sample: cond must be [N,3,H,W]");
  const int64_t per = static_cast<int64_t>(shape[0]) * shape[1] * shape[2];

  Tensor x({count, shape[0], shape[1], shape[2]});
  for (int k = 0; k < count; ++k)
    for (int64_t i = 0; i < per; ++i) x[k * per + i] = streams[k].normal();

  Tensor z(x.dims);
  std::vector<int> t_vec(static_cast<size_t>(count));
  for (int t = sched.T; t >= 1; --t) {
    std::fill(t_vec.begin(), t_vec.end(), t);
    Tensor eps_hat;
    if (cond) {
      Tensor e_cond = denoiser.predict(x, t_vec, cond);
      Tensor e_uncond = denoiser.predict(x, t_vec, nullptr);
      eps_hat = cfg_combine(e_cond, e_uncond, w);
    } else {
      eps_hat = denoiser.predict(x, t_vec, nullptr);
    }
    if (t == 1) {
      z.zero();
    } else {
      for (int k = 0; k < count; ++k)
        for (int64_t i = 0; i < per; ++i) z[k * per + i] = streams[k].normal();
    }
    x = reverse_step(x, t, eps_hat, z, sched);
  }
  for (auto& v : x.v) v = std::clamp(v, -1.0, 1.0);
  return x;
}
}  // namespace

Tensor sample_batch(Denoiser& denoiser, int count, const std::vector<int>& shape,
                    const NoiseSchedule& sched, const Tensor* cond, double w, const Rng& rng) {
  std::vector<Rng> streams;
  streams.reserve(static_cast<size_t>(count < 0 ? 0 : count));
  for (int k = 0; k < count; ++k) streams.push_back(rng.stream(static_cast<uint64_t>(k)));
  return sample_rows(denoiser, count, shape, sched, cond, w, streams);
}

Tensor sample(Denoiser& denoiser, const std::vector<int>& shape, const NoiseSchedule& sched,
              const Tensor* cond, double w, Rng rng) {
  Tensor cond_batch;
  const Tensor* cond_ptr = nullptr;
  if (cond) {
    if (cond->rank() != 3) throw std::invalid_argument("sample: cond must be [3,H,W]");
    cond_batch = Tensor({1, cond->dim(0), cond->dim(1), cond->dim(2)});
    cond_batch.v = cond->v;
    cond_ptr = &cond_batch;
  }
  // The caller's rng is the row stream itself, so sample_batch row k is
  // bit-identical to sample() run with rng.stream(k).
  std::vector<Rng> streams{rng};
  Tensor out = sample_rows(denoiser, 1, shape, sched, cond_ptr, w, streams);
  Tensor res({shape[0], shape[1], shape[2]});
  res.v = out.v;
  return res;
}

}  // namespace nudiff
