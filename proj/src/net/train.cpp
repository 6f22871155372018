#include "nudiff/net/train.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace nudiff {

AdamW::AdamW(const ParamStore& store, double lr_) : lr(lr_) {
  m.reserve(store.all().size());
  v.reserve(store.all().size());
  for (const auto& p : store.all()) {
    m.emplace_back(p->value.dims);
    v.emplace_back(p->value.dims);
  }
}

void AdamW::step(ParamStore& store) {
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  const auto& params = store.all();
  if (params.size() != m.size()) throw std::logic_error("optimizer/store parameter mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    Tensor& mi = m[i];
    Tensor& vi = v[i];
    for (int64_t j = 0; j < p.value.numel(); ++j) {
      double g = p.grad[j];
      mi[j] = beta1 * mi[j] + (1.0 - beta1) * g;
      vi[j] = beta2 * vi[j] + (1.0 - beta2) * g * g;
      double mhat = mi[j] / bc1;
      double vhat = vi[j] / bc2;
      p.value[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.value[j]);
    }
  }
}

TrainResult train(UNetDenoiser& net, const std::vector<TrainExample>& dataset,
                  const NoiseSchedule& sched, AdamW& opt, const TrainOptions& opts, Rng& rng) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (opts.batch < 1 || opts.steps < 0) throw std::invalid_argument("train: bad options");
  if (opts.drop_rate < 0.0 || opts.drop_rate >= 1.0)
    throw std::invalid_argument("train: drop_rate must be in [0,1)");
  const Tensor& t0 = dataset[0].target;
  if (t0.rank() != 3 || t0.dim(0) != 3)
    throw std::invalid_argument("train: targets must be [3,H,W]");
  for (const auto& ex : dataset) {
    check_same_shape(ex.target, t0, "train targets");
    if (net.conditional() != ex.cond.has_value())
      throw std::invalid_argument(net.conditional()
                                      ? "train: conditional net needs a condition per example"
                                      : "train: unconditional net takes no conditions");
    if (ex.cond) check_same_shape(*ex.cond, *dataset[0].cond, "train conditions");
  }

  const bool conditional = net.conditional();
  const int B = opts.batch;
  const int H = t0.dim(1), W = t0.dim(2);
  const int64_t row = static_cast<int64_t>(3) * H * W;
  TrainResult res;
  res.losses.reserve(static_cast<size_t>(opts.steps));

  Tensor xb({B, 3, H, W}), eb({B, 3, H, W});
  Tensor condb;
  int ch = 0, cw = 0;
  if (conditional) {
    ch = dataset[0].cond->dim(1);
    cw = dataset[0].cond->dim(2);
    condb = Tensor({B, 3, ch, cw});
  }
  std::vector<int> tb(static_cast<size_t>(B));
  std::vector<uint8_t> dropb(static_cast<size_t>(B), 0);

  for (int step = 1; step <= opts.steps; ++step) {
    for (int b = 0; b < B; ++b) {
      const TrainExample& ex = dataset[static_cast<size_t>(rng.uniform_int(
          static_cast<int>(dataset.size())))];
      int t = 1 + rng.uniform_int(sched.T);
      tb[static_cast<size_t>(b)] = t;
      double sa = std::sqrt(sched.alpha_bar[static_cast<size_t>(t - 1)]);
      double s1 = std::sqrt(1.0 - sched.alpha_bar[static_cast<size_t>(t - 1)]);
      double* xp = xb.data() + static_cast<size_t>(b) * row;
      double* ep = eb.data() + static_cast<size_t>(b) * row;
      const double* yp = ex.target.data();
      for (int64_t j = 0; j < row; ++j) {
        ep[j] = rng.normal();
        xp[j] = sa * yp[j] + s1 * ep[j];
      }
      if (conditional) {
        std::memcpy(condb.data() + static_cast<size_t>(b) * 3 * ch * cw, ex.cond->data(),
                    static_cast<size_t>(3) * ch * cw * sizeof(double));
        dropb[static_cast<size_t>(b)] = rng.uniform() < opts.drop_rate ? 1 : 0;
        if (dropb[static_cast<size_t>(b)]) ++res.null_cond_used;
      }
      ++res.examples_seen;
    }
    Tensor pred = net.forward_train(xb, tb, conditional ? &condb : nullptr,
                                    conditional ? dropb : std::vector<uint8_t>{});
    double loss = simple_loss(pred, eb);
    if (!std::isfinite(loss))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    Tensor d(pred.dims);
    double scale = 2.0 / static_cast<double>(pred.numel());
    for (int64_t j = 0; j < pred.numel(); ++j) d[j] = scale * (pred[j] - eb[j]);
    net.zero_grad();
    net.backward(d);
    opt.step(net.params());
    res.losses.push_back(loss);
  }
  return res;
}

}  // namespace nudiff
