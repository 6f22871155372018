#include "nudiff/net/denoiser.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace nudiff {

namespace {

constexpr int kSpadeHidden = 32;

void scale_inplace(Tensor& t, double s) {
  for (int64_t i = 0; i < t.numel(); ++i) t[i] *= s;
}

void add_inplace(Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
  Tensor y({n, ca + cb, h, w});
  const size_t plane = static_cast<size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    std::memcpy(y.data() + static_cast<size_t>(i) * (ca + cb) * plane,
                a.data() + static_cast<size_t>(i) * ca * plane, ca * plane * sizeof(double));
    std::memcpy(y.data() + (static_cast<size_t>(i) * (ca + cb) + ca) * plane,
                b.data() + static_cast<size_t>(i) * cb * plane, cb * plane * sizeof(double));
  }
  return y;
}

void split_channels(const Tensor& d, int ca, Tensor* da, Tensor* db) {
  const int n = d.dim(0), c = d.dim(1), h = d.dim(2), w = d.dim(3);
  const int cb = c - ca;
  *da = Tensor({n, ca, h, w});
  *db = Tensor({n, cb, h, w});
  const size_t plane = static_cast<size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    std::memcpy(da->data() + static_cast<size_t>(i) * ca * plane,
                d.data() + static_cast<size_t>(i) * c * plane, ca * plane * sizeof(double));
    std::memcpy(db->data() + static_cast<size_t>(i) * cb * plane,
                d.data() + (static_cast<size_t>(i) * c + ca) * plane, cb * plane * sizeof(double));
  }
}

// ---- layer modules; parameters live in the owning ParamStore --------------

struct Conv {
  Param* w = nullptr;
  Param* b = nullptr;
  int stride = 1;
  int pad = 0;

  // wstd < 0 selects 1/sqrt(fan_in); 0 gives zero-initialized kernels.
  void init(ParamStore& ps, const std::string& name, int cout, int cin, int k, int stride_,
            int pad_, Rng& rng, double wstd) {
    stride = stride_;
    pad = pad_;
    w = ps.add(name + ".w", {cout, cin, k, k});
    b = ps.add(name + ".b", {cout});
    double s = wstd < 0.0 ? 1.0 / std::sqrt(static_cast<double>(cin) * k * k) : wstd;
    if (s > 0.0) {
      rng.fill_normal(w->value);
      scale_inplace(w->value, s);
    }
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, w->value, &b->value, stride, pad); }

  Tensor backward(const Tensor& x, const Tensor& dy, bool need_dx = true) const {
    Tensor dx;
    if (need_dx) dx = Tensor(x.dims);
    conv2d_backward(x, w->value, dy, stride, pad, need_dx ? &dx : nullptr, &w->grad, &b->grad);
    return dx;
  }
};

struct Linear {
  Param* w = nullptr;  // [out, in]
  Param* b = nullptr;

  void init(ParamStore& ps, const std::string& name, int out, int in, Rng& rng) {
    w = ps.add(name + ".w", {out, in});
    b = ps.add(name + ".b", {out});
    rng.fill_normal(w->value);
    scale_inplace(w->value, 1.0 / std::sqrt(static_cast<double>(in)));
  }

  Tensor forward(const Tensor& x) const {
    const int n = x.dim(0), in = w->value.dim(1), out = w->value.dim(0);
    Tensor y({n, out});
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out; ++o) {
        double acc = b->value[o];
        for (int j = 0; j < in; ++j)
          acc += w->value[static_cast<int64_t>(o) * in + j] * x[static_cast<int64_t>(i) * in + j];
        y[static_cast<int64_t>(i) * out + o] = acc;
      }
    return y;
  }

  Tensor backward(const Tensor& x, const Tensor& dy) const {
    const int n = x.dim(0), in = w->value.dim(1), out = w->value.dim(0);
    Tensor dx({n, in});
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out; ++o) {
        double g = dy[static_cast<int64_t>(i) * out + o];
        b->grad[o] += g;
        for (int j = 0; j < in; ++j) {
          w->grad[static_cast<int64_t>(o) * in + j] += g * x[static_cast<int64_t>(i) * in + j];
          dx[static_cast<int64_t>(i) * in + j] += g * w->value[static_cast<int64_t>(o) * in + j];
        }
      }
    return dx;
  }
};

struct Norm {
  Param* gain = nullptr;
  Param* bias = nullptr;
  int groups = 1;

  void init(ParamStore& ps, const std::string& name, int c) {
    groups = norm_groups(c);
    gain = ps.add(name + ".gain", {c});
    bias = ps.add(name + ".bias", {c});
    std::fill(gain->value.v.begin(), gain->value.v.end(), 1.0);
  }

  Tensor forward(const Tensor& x, GroupNormCtx* ctx) const {
    return group_norm(x, groups, &gain->value, &bias->value, ctx);
  }

  Tensor backward(const Tensor& dy, const GroupNormCtx& ctx) const {
    return group_norm_backward(dy, groups, &gain->value, ctx, &gain->grad, &bias->grad);
  }
};

// Parameter-free normalization modulated by per-pixel scale/shift fields
// computed from the (nearest-resized) structure raster.
struct Spade {
  int groups = 1;
  Conv shared, gamma_head, beta_head;

  struct Ctx {
    Tensor cond_in;          // condition at feature resolution (head input)
    int src_h = 0, src_w = 0;  // nonzero when cond was resized from this size
    Tensor shared_pre, shared_act, gamma, normed;
    GroupNormCtx gn;
  };

  void init(ParamStore& ps, const std::string& name, int c, Rng& rng) {
    groups = norm_groups(c);
    shared.init(ps, name + ".shared", kSpadeHidden, 3, 3, 1, 1, rng, -1.0);
    gamma_head.init(ps, name + ".gamma", c, kSpadeHidden, 3, 1, 1, rng, 0.01);
    beta_head.init(ps, name + ".beta", c, kSpadeHidden, 3, 1, 1, rng, 0.01);
  }

  Tensor forward(const Tensor& x, const Tensor& cond, Ctx* ctx) const {
    const int h = x.dim(2), w = x.dim(3);
    Tensor cond_r;
    const Tensor* cp = &cond;
    int src_h = 0, src_w = 0;
    if (cond.dim(2) != h || cond.dim(3) != w) {
      src_h = cond.dim(2);
      src_w = cond.dim(3);
      cond_r = resize_nearest(cond, h, w);
      cp = &cond_r;
    }
    Tensor sp = shared.forward(*cp);
    Tensor sa = silu(sp);
    Tensor g = gamma_head.forward(sa);
    Tensor bt = beta_head.forward(sa);
    Tensor normed = group_norm(x, groups, nullptr, nullptr, ctx ? &ctx->gn : nullptr);
    Tensor y(x.dims);
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = normed[i] * (1.0 + g[i]) + bt[i];
    if (ctx) {
      ctx->cond_in = (cp == &cond) ? cond : std::move(cond_r);
      ctx->src_h = src_h;
      ctx->src_w = src_w;
      ctx->shared_pre = std::move(sp);
      ctx->shared_act = std::move(sa);
      ctx->gamma = std::move(g);
      ctx->normed = std::move(normed);
    }
    return y;
  }

  // Adds the condition gradient (at its original resolution) into *dcond.
  Tensor backward(const Tensor& dy, const Ctx& ctx, Tensor* dcond) const {
    Tensor d_normed(dy.dims), d_g(dy.dims);
    for (int64_t i = 0; i < dy.numel(); ++i) {
      d_normed[i] = dy[i] * (1.0 + ctx.gamma[i]);
      d_g[i] = dy[i] * ctx.normed[i];
    }
    Tensor dx = group_norm_backward(d_normed, groups, nullptr, ctx.gn, nullptr, nullptr);
    Tensor d_sa = gamma_head.backward(ctx.shared_act, d_g);
    add_inplace(d_sa, beta_head.backward(ctx.shared_act, dy));
    Tensor d_sp = silu_backward(ctx.shared_pre, d_sa);
    Tensor d_cond = shared.backward(ctx.cond_in, d_sp, dcond != nullptr);
    if (dcond) {
      if (ctx.src_h > 0)
        add_inplace(*dcond, resize_nearest_backward(d_cond, ctx.src_h, ctx.src_w));
      else
        add_inplace(*dcond, d_cond);
    }
    return dx;
  }
};

// Two norm->SiLU->3x3-conv stages with the projected time vector added after
// the first, plus an input skip (1x1 conv when channel counts differ). The
// conditional variant swaps both norms for SPADE.
struct ResBlock {
  bool conditional = false;
  int cin = 0, cout = 0;
  Norm n1, n2;
  Spade s1, s2;
  Conv conv1, conv2, skip;
  Linear tproj;
  bool has_skip = false;

  struct Ctx {
    Tensor x, st;
    Tensor a1, h1, a2, h2;
    GroupNormCtx gn1, gn2;
    Spade::Ctx sp1, sp2;
  };

  void init(ParamStore& ps, const std::string& name, int cin_, int cout_, int tdim,
            bool conditional_, Rng& rng) {
    conditional = conditional_;
    cin = cin_;
    cout = cout_;
    if (conditional)
      s1.init(ps, name + ".norm1", cin, rng);
    else
      n1.init(ps, name + ".norm1", cin);
    conv1.init(ps, name + ".conv1", cout, cin, 3, 1, 1, rng, -1.0);
    tproj.init(ps, name + ".temb", cout, tdim, rng);
    if (conditional)
      s2.init(ps, name + ".norm2", cout, rng);
    else
      n2.init(ps, name + ".norm2", cout);
    conv2.init(ps, name + ".conv2", cout, cout, 3, 1, 1, rng, 0.0);
    has_skip = cin != cout;
    if (has_skip) skip.init(ps, name + ".skip", cout, cin, 1, 1, 0, rng, -1.0);
  }

  Tensor forward(const Tensor& x, const Tensor& st, const Tensor* cond, Ctx* ctx) const {
    Tensor a1 = conditional ? s1.forward(x, *cond, ctx ? &ctx->sp1 : nullptr)
                            : n1.forward(x, ctx ? &ctx->gn1 : nullptr);
    Tensor h1 = silu(a1);
    Tensor h = conv1.forward(h1);
    Tensor tv = tproj.forward(st);
    const int n = h.dim(0), hw = h.dim(2) * h.dim(3);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < cout; ++c) {
        double add = tv[static_cast<int64_t>(i) * cout + c];
        double* hp = h.data() + (static_cast<size_t>(i) * cout + c) * hw;
        for (int p = 0; p < hw; ++p) hp[p] += add;
      }
    Tensor a2 = conditional ? s2.forward(h, *cond, ctx ? &ctx->sp2 : nullptr)
                            : n2.forward(h, ctx ? &ctx->gn2 : nullptr);
    Tensor h2 = silu(a2);
    Tensor out = conv2.forward(h2);
    add_inplace(out, has_skip ? skip.forward(x) : x);
    if (ctx) {
      ctx->x = x;
      ctx->st = st;
      ctx->a1 = std::move(a1);
      ctx->h1 = std::move(h1);
      ctx->a2 = std::move(a2);
      ctx->h2 = std::move(h2);
    }
    return out;
  }

  Tensor backward(const Tensor& dy, const Ctx& ctx, Tensor* dcond) const {
    Tensor d_h2 = conv2.backward(ctx.h2, dy);
    Tensor d_a2 = silu_backward(ctx.a2, d_h2);
    Tensor d_h = conditional ? s2.backward(d_a2, ctx.sp2, dcond) : n2.backward(d_a2, ctx.gn2);
    const int n = d_h.dim(0), hw = d_h.dim(2) * d_h.dim(3);
    Tensor d_tv({n, cout});
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < cout; ++c) {
        const double* hp = d_h.data() + (static_cast<size_t>(i) * cout + c) * hw;
        double acc = 0.0;
        for (int p = 0; p < hw; ++p) acc += hp[p];
        d_tv[static_cast<int64_t>(i) * cout + c] = acc;
      }
    tproj.backward(ctx.st, d_tv);
    Tensor d_h1 = conv1.backward(ctx.h1, d_h);
    Tensor d_a1 = silu_backward(ctx.a1, d_h1);
    Tensor dx = conditional ? s1.backward(d_a1, ctx.sp1, dcond) : n1.backward(d_a1, ctx.gn1);
    add_inplace(dx, has_skip ? skip.backward(ctx.x, dy) : dy);
    return dx;
  }
};

struct AttnMod {
  Param *wq = nullptr, *bq = nullptr, *wk = nullptr, *bk = nullptr;
  Param *wv = nullptr, *bv = nullptr, *wo = nullptr, *bo = nullptr;

  struct Ctx {
    Tensor x;
    AttnCtx a;
  };

  void init(ParamStore& ps, const std::string& name, int c, Rng& rng) {
    double s = 1.0 / std::sqrt(static_cast<double>(c));
    auto proj = [&](const char* part, double wstd) {
      Param* w = ps.add(name + "." + part + ".w", {c, c});
      if (wstd > 0.0) {
        rng.fill_normal(w->value);
        scale_inplace(w->value, wstd);
      }
      return std::pair{w, ps.add(name + "." + part + ".b", {c})};
    };
    std::tie(wq, bq) = proj("q", s);
    std::tie(wk, bk) = proj("k", s);
    std::tie(wv, bv) = proj("v", s);
    std::tie(wo, bo) = proj("out", 0.0);
  }

  Tensor forward(const Tensor& x, Ctx* ctx) const {
    Tensor y = attention(x, wq->value, bq->value, wk->value, bk->value, wv->value, bv->value,
                         wo->value, bo->value, ctx ? &ctx->a : nullptr);
    if (ctx) ctx->x = x;
    return y;
  }

  Tensor backward(const Tensor& dy, const Ctx& ctx) const {
    return attention_backward(ctx.x, dy, wq->value, wk->value, wv->value, wo->value, ctx.a,
                              &wq->grad, &bq->grad, &wk->grad, &bk->grad, &wv->grad, &bv->grad,
                              &wo->grad, &bo->grad);
  }
};

// ---- checkpoint bytes ------------------------------------------------------

void put_u32(std::string& s, uint32_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& s, float v) { put_u32(s, std::bit_cast<uint32_t>(v)); }

struct Cursor {
  const std::string& buf;
  size_t off = 0;

  void need(size_t n) const {
    if (off + n > buf.size()) throw std::runtime_error("truncated checkpoint");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(buf[off + i]);
    off += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(off, n);
    off += n;
    return s;
  }
};

}  // namespace

int norm_groups(int c) {
  for (int g : {8, 4, 2})
    if (c % g == 0) return g;
  return 1;
}

void validate_shape(const NetworkShape& shape) {
  if (shape.levels < 1) throw std::invalid_argument("levels must be >= 1");
  if (static_cast<int>(shape.channels.size()) != shape.levels)
    throw std::invalid_argument("channels length must equal levels");
  for (int c : shape.channels)
    if (c < 1) throw std::invalid_argument("channel widths must be positive");
  for (int a : shape.attn_levels)
    if (a < 1 || a > shape.levels) throw std::invalid_argument("attn level out of range");
  if (shape.blocks < 1) throw std::invalid_argument("blocks must be >= 1");
  int div = 1 << (shape.levels - 1);
  if (shape.base_resolution < 1 || shape.base_resolution % div != 0)
    throw std::invalid_argument("base resolution must be divisible by 2^(levels-1)");
}

std::vector<double> time_embed(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("time_embed: dim must be even");
  if (t < 1) throw std::invalid_argument("time_embed: t must be >= 1");
  const int half = dim / 2;
  std::vector<double> out(static_cast<size_t>(dim));
  for (int i = 0; i < half; ++i) {
    double freq = half > 1 ? std::exp(-std::log(10000.0) * i / (half - 1)) : 1.0;
    out[static_cast<size_t>(2 * i)] = std::sin(t * freq);
    out[static_cast<size_t>(2 * i + 1)] = std::cos(t * freq);
  }
  return out;
}

Param* ParamStore::add(std::string name, const std::vector<int>& dims) {
  auto p = std::make_unique<Param>();
  p->name = std::move(name);
  p->value = Tensor(dims);
  p->grad = Tensor(dims);
  params_.push_back(std::move(p));
  return params_.back().get();
}

Param* ParamStore::find(std::string_view name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->grad.zero();
}

struct UNetDenoiser::Impl {
  Conv stem;
  struct Level {
    std::vector<ResBlock> enc;
    std::unique_ptr<AttnMod> attn;
    std::unique_ptr<Conv> down;  // to the next (coarser) level
    std::vector<ResBlock> dec;
    std::unique_ptr<Conv> up;  // applied after nearest x2, to the previous level's width
  };
  std::vector<Level> levels;
  Norm out_norm;
  Conv out_conv;
  Param* null_cond = nullptr;

  struct Trace {
    bool valid = false;
    Tensor x;
    Tensor cond_eff;
    std::vector<uint8_t> null_rows;
    std::vector<std::vector<ResBlock::Ctx>> enc_ctx, dec_ctx;
    std::vector<AttnMod::Ctx> attn_ctx;
    std::vector<Tensor> down_in, up_in;
    std::vector<std::array<int, 2>> up_src;
    GroupNormCtx out_gn;
    Tensor out_a, out_s;
  } trace;
};

UNetDenoiser::UNetDenoiser(const NetworkShape& shape, bool conditional, Rng& init_rng)
    : shape_(shape), conditional_(conditional), impl_(std::make_unique<Impl>()) {
  validate_shape(shape_);
  auto& im = *impl_;
  const int L = shape_.levels;
  const auto& ch = shape_.channels;
  const int tdim = 4 * ch[0];
  auto has_attn = [&](int i) {
    return std::find(shape_.attn_levels.begin(), shape_.attn_levels.end(), i + 1) !=
           shape_.attn_levels.end();
  };
  auto lvname = [](const char* base, int i) { return std::string(base) + std::to_string(i + 1); };

  im.stem.init(store_, "stem", ch[0], 3, 3, 1, 1, init_rng, -1.0);
  im.levels.resize(static_cast<size_t>(L));
  for (int i = 0; i < L; ++i) {
    auto& lv = im.levels[static_cast<size_t>(i)];
    lv.enc.resize(static_cast<size_t>(shape_.blocks));
    for (int b = 0; b < shape_.blocks; ++b)
      lv.enc[static_cast<size_t>(b)].init(store_,
                                          lvname("enc", i) + ".block" + std::to_string(b + 1),
                                          ch[i], ch[i], tdim, false, init_rng);
    if (has_attn(i)) {
      lv.attn = std::make_unique<AttnMod>();
      lv.attn->init(store_, lvname("enc", i) + ".attn", ch[i], init_rng);
    }
    if (i < L - 1) {
      lv.down = std::make_unique<Conv>();
      lv.down->init(store_, lvname("down", i), ch[i + 1], ch[i], 3, 2, 1, init_rng, -1.0);
    }
  }
  for (int i = L - 1; i >= 0; --i) {
    auto& lv = im.levels[static_cast<size_t>(i)];
    lv.dec.resize(static_cast<size_t>(shape_.blocks));
    for (int b = 0; b < shape_.blocks; ++b) {
      int cin = (b == 0 && i < L - 1) ? 2 * ch[i] : ch[i];
      lv.dec[static_cast<size_t>(b)].init(store_,
                                          lvname("dec", i) + ".block" + std::to_string(b + 1),
                                          cin, ch[i], tdim, conditional_, init_rng);
    }
    if (i > 0) {
      lv.up = std::make_unique<Conv>();
      lv.up->init(store_, lvname("up", i), ch[i - 1], ch[i], 3, 1, 1, init_rng, -1.0);
    }
  }
  im.out_norm.init(store_, "out.norm", ch[0]);
  im.out_conv.init(store_, "out.conv", 3, ch[0], 3, 1, 1, init_rng, 0.0);
  if (conditional_) im.null_cond = store_.add("null_structure", {3});
}

UNetDenoiser::~UNetDenoiser() = default;

Tensor UNetDenoiser::predict(const Tensor& x, const std::vector<int>& t, const Tensor* cond) {
  return run(x, t, cond, {}, false);
}

Tensor UNetDenoiser::forward_train(const Tensor& x, const std::vector<int>& t, const Tensor* cond,
                                   const std::vector<uint8_t>& drop) {
  return run(x, t, cond, drop, true);
}

void UNetDenoiser::zero_grad() { store_.zero_grad(); }

Tensor UNetDenoiser::run(const Tensor& x, const std::vector<int>& t, const Tensor* cond,
                         const std::vector<uint8_t>& drop, bool record) {
  if (x.rank() != 4 || x.dim(1) != 3) throw std::invalid_argument("predict: x must be [N,3,H,W]");
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int L = shape_.levels;
  const int div = 1 << (L - 1);
  if (H % div != 0 || W % div != 0)
    throw std::invalid_argument("predict: resolution not divisible by 2^(levels-1)");
  if (static_cast<int>(t.size()) != N) throw std::invalid_argument("predict: t count mismatch");
  if (!conditional_ && cond) throw std::invalid_argument("predict: net is unconditional");
  if (cond && (cond->rank() != 4 || cond->dim(0) != N || cond->dim(1) != 3))
    throw std::invalid_argument("predict: cond must be [N,3,H,W]");
  if (!drop.empty() && static_cast<int>(drop.size()) != N)
    throw std::invalid_argument("predict: drop count mismatch");

  auto& im = *impl_;
  const int tdim = 4 * shape_.channels[0];
  Tensor temb({N, tdim});
  for (int i = 0; i < N; ++i) {
    auto e = time_embed(t[static_cast<size_t>(i)], tdim);
    std::copy(e.begin(), e.end(), temb.data() + static_cast<size_t>(i) * tdim);
  }
  Tensor st = silu(temb);

  Tensor cond_eff;
  const Tensor* cptr = nullptr;
  std::vector<uint8_t> null_rows;
  if (conditional_) {
    const int ch = cond ? cond->dim(2) : H;
    const int cw = cond ? cond->dim(3) : W;
    const size_t plane = static_cast<size_t>(ch) * cw;
    cond_eff = Tensor({N, 3, ch, cw});
    null_rows.assign(static_cast<size_t>(N), 0);
    for (int i = 0; i < N; ++i) {
      bool use_null = !cond || (!drop.empty() && drop[static_cast<size_t>(i)]);
      null_rows[static_cast<size_t>(i)] = use_null ? 1 : 0;
      double* dst = cond_eff.data() + static_cast<size_t>(i) * 3 * plane;
      if (use_null) {
        for (int c = 0; c < 3; ++c)
          std::fill(dst + c * plane, dst + (c + 1) * plane, im.null_cond->value[c]);
      } else {
        std::memcpy(dst, cond->data() + static_cast<size_t>(i) * 3 * plane,
                    3 * plane * sizeof(double));
      }
    }
    cptr = &cond_eff;
  }

  Impl::Trace* tr = record ? &im.trace : nullptr;
  if (tr) {
    *tr = Impl::Trace{};
    tr->x = x;
    tr->null_rows = null_rows;
    tr->enc_ctx.resize(static_cast<size_t>(L));
    tr->dec_ctx.resize(static_cast<size_t>(L));
    tr->attn_ctx.resize(static_cast<size_t>(L));
    tr->down_in.resize(static_cast<size_t>(L));
    tr->up_in.resize(static_cast<size_t>(L));
    tr->up_src.assign(static_cast<size_t>(L), {0, 0});
    for (int i = 0; i < L; ++i) {
      tr->enc_ctx[static_cast<size_t>(i)].resize(im.levels[static_cast<size_t>(i)].enc.size());
      tr->dec_ctx[static_cast<size_t>(i)].resize(im.levels[static_cast<size_t>(i)].dec.size());
    }
  }

  Tensor h = im.stem.forward(x);
  std::vector<Tensor> skips(static_cast<size_t>(L));
  for (int i = 0; i < L; ++i) {
    auto& lv = im.levels[static_cast<size_t>(i)];
    for (size_t b = 0; b < lv.enc.size(); ++b)
      h = lv.enc[b].forward(h, st, nullptr, tr ? &tr->enc_ctx[static_cast<size_t>(i)][b] : nullptr);
    if (lv.attn) h = lv.attn->forward(h, tr ? &tr->attn_ctx[static_cast<size_t>(i)] : nullptr);
    if (lv.down) {
      skips[static_cast<size_t>(i)] = h;
      if (tr) tr->down_in[static_cast<size_t>(i)] = h;
      h = lv.down->forward(h);
    }
  }
  for (int i = L - 1; i >= 0; --i) {
    auto& lv = im.levels[static_cast<size_t>(i)];
    if (i < L - 1) h = concat_channels(h, skips[static_cast<size_t>(i)]);
    for (size_t b = 0; b < lv.dec.size(); ++b)
      h = lv.dec[b].forward(h, st, cptr, tr ? &tr->dec_ctx[static_cast<size_t>(i)][b] : nullptr);
    if (lv.up) {
      if (tr) tr->up_src[static_cast<size_t>(i)] = {h.dim(2), h.dim(3)};
      Tensor r = resize_nearest(h, h.dim(2) * 2, h.dim(3) * 2);
      if (tr) tr->up_in[static_cast<size_t>(i)] = r;
      h = lv.up->forward(r);
    }
  }
  Tensor a = im.out_norm.forward(h, tr ? &tr->out_gn : nullptr);
  Tensor s = silu(a);
  Tensor y = im.out_conv.forward(s);
  if (tr) {
    tr->out_a = std::move(a);
    tr->out_s = std::move(s);
    tr->cond_eff = std::move(cond_eff);
    tr->valid = true;
  }
  return y;
}

void UNetDenoiser::backward(const Tensor& d_out) {
  auto& im = *impl_;
  auto& tr = im.trace;
  if (!tr.valid) throw std::logic_error("backward requires a preceding forward_train");
  const int L = shape_.levels;

  Tensor d_s = im.out_conv.backward(tr.out_s, d_out);
  Tensor d_a = silu_backward(tr.out_a, d_s);
  Tensor dh = im.out_norm.backward(d_a, tr.out_gn);

  Tensor d_cond_eff;
  Tensor* dcond = nullptr;
  if (conditional_) {
    d_cond_eff = Tensor(tr.cond_eff.dims);
    dcond = &d_cond_eff;
  }

  std::vector<Tensor> d_skips(static_cast<size_t>(L));
  for (int i = 0; i < L; ++i) {
    auto& lv = im.levels[static_cast<size_t>(i)];
    if (i > 0) {
      Tensor d_resized = lv.up->backward(tr.up_in[static_cast<size_t>(i)], dh);
      dh = resize_nearest_backward(d_resized, tr.up_src[static_cast<size_t>(i)][0],
                                   tr.up_src[static_cast<size_t>(i)][1]);
    }
    for (int b = static_cast<int>(lv.dec.size()) - 1; b >= 0; --b)
      dh = lv.dec[static_cast<size_t>(b)].backward(
          dh, tr.dec_ctx[static_cast<size_t>(i)][static_cast<size_t>(b)], dcond);
    if (i < L - 1) {
      Tensor d_front, d_back;
      split_channels(dh, shape_.channels[static_cast<size_t>(i)], &d_front, &d_back);
      d_skips[static_cast<size_t>(i)] = std::move(d_back);
      dh = std::move(d_front);
    }
  }
  for (int i = L - 1; i >= 0; --i) {
    auto& lv = im.levels[static_cast<size_t>(i)];
    if (lv.down) {
      Tensor d_pre = lv.down->backward(tr.down_in[static_cast<size_t>(i)], dh);
      add_inplace(d_pre, d_skips[static_cast<size_t>(i)]);
      dh = std::move(d_pre);
    }
    if (lv.attn) dh = lv.attn->backward(dh, tr.attn_ctx[static_cast<size_t>(i)]);
    for (int b = static_cast<int>(lv.enc.size()) - 1; b >= 0; --b)
      dh = lv.enc[static_cast<size_t>(b)].backward(
          dh, tr.enc_ctx[static_cast<size_t>(i)][static_cast<size_t>(b)], nullptr);
  }
  im.stem.backward(tr.x, dh, false);

  if (conditional_) {
    const int N = d_cond_eff.dim(0);
    const size_t plane = static_cast<size_t>(d_cond_eff.dim(2)) * d_cond_eff.dim(3);
    for (int i = 0; i < N; ++i) {
      if (!tr.null_rows[static_cast<size_t>(i)]) continue;
      for (int c = 0; c < 3; ++c) {
        const double* p = d_cond_eff.data() + (static_cast<size_t>(i) * 3 + c) * plane;
        double acc = 0.0;
        for (size_t j = 0; j < plane; ++j) acc += p[j];
        im.null_cond->grad[c] += acc;
      }
    }
  }
  tr = Impl::Trace{};
}

void UNetDenoiser::save(const std::string& path) const {
  std::string buf;
  buf.append("NDCK");
  put_u32(buf, 1);
  put_u32(buf, static_cast<uint32_t>(shape_.levels));
  for (int c : shape_.channels) put_u32(buf, static_cast<uint32_t>(c));
  put_u32(buf, static_cast<uint32_t>(shape_.attn_levels.size()));
  for (int a : shape_.attn_levels) put_u32(buf, static_cast<uint32_t>(a));
  put_u32(buf, static_cast<uint32_t>(shape_.base_resolution));
  put_u32(buf, static_cast<uint32_t>(shape_.blocks));
  put_u32(buf, conditional_ ? 1u : 0u);
  put_u32(buf, static_cast<uint32_t>(store_.all().size()));
  for (const auto& p : store_.all()) {
    put_u32(buf, static_cast<uint32_t>(p->name.size()));
    buf.append(p->name);
    put_u32(buf, static_cast<uint32_t>(p->value.rank()));
    for (int d : p->value.dims) put_u32(buf, static_cast<uint32_t>(d));
    for (int64_t i = 0; i < p->value.numel(); ++i)
      put_f32(buf, static_cast<float>(p->value[i]));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  f.flush();
  if (!f.good()) throw std::runtime_error("write failed: " + path);
}

std::unique_ptr<UNetDenoiser> UNetDenoiser::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Cursor cur{buf};
  if (cur.bytes(4) != "NDCK") throw std::runtime_error("not a checkpoint file: " + path);
  if (cur.u32() != 1) throw std::runtime_error("unsupported checkpoint version");
  NetworkShape shape;
  shape.levels = static_cast<int>(cur.u32());
  if (shape.levels < 1 || shape.levels > 64) throw std::runtime_error("corrupt checkpoint shape");
  shape.channels.resize(static_cast<size_t>(shape.levels));
  for (int& c : shape.channels) c = static_cast<int>(cur.u32());
  uint32_t na = cur.u32();
  if (na > static_cast<uint32_t>(shape.levels)) throw std::runtime_error("corrupt checkpoint shape");
  shape.attn_levels.resize(na);
  for (int& a : shape.attn_levels) a = static_cast<int>(cur.u32());
  shape.base_resolution = static_cast<int>(cur.u32());
  shape.blocks = static_cast<int>(cur.u32());
  bool conditional = cur.u32() != 0;

  Rng rng(0);
  auto net = std::make_unique<UNetDenoiser>(shape, conditional, rng);
  uint32_t count = cur.u32();
  if (count != net->store_.all().size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = cur.bytes(cur.u32());
    Param* p = net->store_.find(name);
    if (!p) throw std::runtime_error("unknown checkpoint parameter: " + name);
    uint32_t rank = cur.u32();
    if (rank != static_cast<uint32_t>(p->value.rank()))
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    for (uint32_t d = 0; d < rank; ++d)
      if (static_cast<int>(cur.u32()) != p->value.dim(static_cast<int>(d)))
        throw std::runtime_error("checkpoint shape mismatch for " + name);
    for (int64_t j = 0; j < p->value.numel(); ++j) p->value[j] = cur.f32();
  }
  return net;
}

GaussianOracleDenoiser::GaussianOracleDenoiser(double mu, double var, NoiseSchedule sched)
    : mu_(mu), var_(var), sched_(std::move(sched)) {
  if (var < 0.0) throw std::invalid_argument("variance must be nonnegative");
}

Tensor GaussianOracleDenoiser::predict(const Tensor& x, const std::vector<int>& t,
                                       const Tensor* cond) {
  (void)cond;
  const int N = x.dim(0);
  if (static_cast<int>(t.size()) != N) throw std::invalid_argument("oracle: t count mismatch");
  const int64_t per = x.numel() / N;
  Tensor out(x.dims);
  for (int i = 0; i < N; ++i) {
    int ti = t[static_cast<size_t>(i)];
    if (ti < 1 || ti > sched_.T) throw std::invalid_argument("oracle: t out of range");
    double abar = sched_.alpha_bar[static_cast<size_t>(ti - 1)];
    double sa = std::sqrt(abar);
    double s1a = std::sqrt(1.0 - abar);
    double denom = abar * var_ + 1.0 - abar;
    const double* xp = x.data() + static_cast<size_t>(i) * per;
    double* op = out.data() + static_cast<size_t>(i) * per;
    for (int64_t j = 0; j < per; ++j) op[j] = s1a * (xp[j] - sa * mu_) / denom;
  }
  return out;
}

}  // namespace nudiff
