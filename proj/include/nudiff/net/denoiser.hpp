#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "nudiff/diffusion.hpp"
#include "nudiff/net/ops.hpp"
#include "nudiff/rng.hpp"
#include "nudiff/tensor.hpp"

namespace nudiff {

// U-Net geometry. attn_levels holds 1-based level indices; level 1 runs at
// the input resolution, each following level at half the previous.
struct NetworkShape {
  int levels = 3;
  std::vector<int> channels = {16, 32, 64};
  std::vector<int> attn_levels = {3};
  int base_resolution = 32;
  int blocks = 1;
};

void validate_shape(const NetworkShape& shape);

// Sinusoidal embedding: interleaved sin/cos at geometric frequencies spanning
// wavelength 2*pi .. 2*pi*10000. Throws on odd dim or t < 1.
std::vector<double> time_embed(int t, int dim);

// Largest of {8,4,2,1} dividing c.
int norm_groups(int c);

// Named learnable tensor with a matching gradient accumulator.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Owns parameters in registration order; that order is the checkpoint order.
class ParamStore {
 public:
  Param* add(std::string name, const std::vector<int>& dims);
  Param* find(std::string_view name);
  const std::vector<std::unique_ptr<Param>>& all() const { return params_; }
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Param>> params_;
};

// Noise-prediction U-Net: encoder of residual blocks (attention at the
// configured levels) with stride-2 downsampling between levels, decoder of
// residual blocks (SPADE-conditioned when the net is conditional) joined by
// skip concatenation with nearest-upsampling between levels.
//
// predict() is the frozen-parameter inference pass. forward_train() records
// every intermediate needed by backward(), which accumulates parameter
// gradients; pair each forward_train with exactly one backward.
class UNetDenoiser : public Denoiser {
 public:
  UNetDenoiser(const NetworkShape& shape, bool conditional, Rng& init_rng);
  ~UNetDenoiser() override;

  Tensor predict(const Tensor& x, const std::vector<int>& t, const Tensor* cond) override;

  // drop[i] != 0 substitutes the learned null structure for row i; drop may
  // be empty (no rows dropped). cond == nullptr drops every row.
  Tensor forward_train(const Tensor& x, const std::vector<int>& t, const Tensor* cond,
                       const std::vector<uint8_t>& drop);
  void backward(const Tensor& d_out);
  void zero_grad();

  const NetworkShape& shape() const { return shape_; }
  bool conditional() const { return conditional_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  void save(const std::string& path) const;
  static std::unique_ptr<UNetDenoiser> load(const std::string& path);

 private:
  struct Impl;
  Tensor run(const Tensor& x, const std::vector<int>& t, const Tensor* cond,
             const std::vector<uint8_t>& drop, bool record);

  NetworkShape shape_;
  bool conditional_;
  ParamStore store_;
  std::unique_ptr<Impl> impl_;
};

// Closed-form optimal noise predictor when the clean data is elementwise
// N(mu, var): eps_hat = sqrt(1-abar_t)*(y_t - sqrt(abar_t)*mu) /
// (abar_t*var + 1 - abar_t). Throws if var < 0.
class GaussianOracleDenoiser : public Denoiser {
 public:
  GaussianOracleDenoiser(double mu, double var, NoiseSchedule sched);
  Tensor predict(const Tensor& x, const std::vector<int>& t, const Tensor* cond) override;

 private:
  double mu_;
  double var_;
  NoiseSchedule sched_;
};

}  // namespace nudiff
