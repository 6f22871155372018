#include "nudiff/net/ops.hpp"

#include <cblas.h>

#include <cmath>
#include <mutex>
#include <stdexcept>

extern "C" void openblas_set_num_threads(int);

namespace nudiff {

namespace {

std::once_flag blas_once;

void blas_init() {
  // Single-threaded BLAS keeps reductions order-fixed and results
  // reproducible run to run.
  std::call_once(blas_once, [] { openblas_set_num_threads(1); });
}

int out_extent(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// col buffer layout: [(Cin*Kh*Kw) x (Ho*Wo)], rows ordered (ci,ky,kx).
void im2col(const double* x, int c, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, double* col) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        double* dst = col + ((static_cast<size_t>(ci) * kh + ky) * kw + kx) *
                                (static_cast<size_t>(ho) * wo);
        const double* src = x + static_cast<size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < wo; ++ox) *dst++ = 0.0;
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kx;
            *dst++ = (ix < 0 || ix >= w) ? 0.0 : src[static_cast<size_t>(iy) * w + ix];
          }
        }
      }
}

void col2im(const double* col, int c, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, double* x) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const double* src = col + ((static_cast<size_t>(ci) * kh + ky) * kw + kx) *
                                      (static_cast<size_t>(ho) * wo);
        double* dst = x + static_cast<size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            src += wo;
            continue;
          }
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[static_cast<size_t>(iy) * w + ix] += src[ox];
          }
          src += wo;
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad) {
  blas_init();
  if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: bad ranks");
  if (x.dim(1) != w.dim(1)) throw std::invalid_argument("conv2d: channel mismatch");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = out_extent(h, kh, stride, pad), wo = out_extent(wd, kw, stride, pad);
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");

  Tensor y({n, cout, ho, wo});
  const int ckk = cin * kh * kw;
  const int hw = ho * wo;
  std::vector<double> col(static_cast<size_t>(ckk) * hw);
  for (int i = 0; i < n; ++i) {
    im2col(x.data() + static_cast<size_t>(i) * cin * h * wd, cin, h, wd, kh, kw, stride, pad, ho,
           wo, col.data());
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, cout, hw, ckk, 1.0, w.data(), ckk,
                col.data(), hw, 0.0, y.data() + static_cast<size_t>(i) * cout * hw, hw);
    if (b) {
      double* yp = y.data() + static_cast<size_t>(i) * cout * hw;
      for (int co = 0; co < cout; ++co)
        for (int p = 0; p < hw; ++p) yp[static_cast<size_t>(co) * hw + p] += (*b)[co];
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int stride, int pad,
                     Tensor* dx, Tensor* dw, Tensor* db) {
  blas_init();
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = dy.dim(2), wo = dy.dim(3);
  const int ckk = cin * kh * kw;
  const int hw = ho * wo;

  std::vector<double> col(static_cast<size_t>(ckk) * hw);
  std::vector<double> dcol(static_cast<size_t>(ckk) * hw);
  if (dx) dx->zero();
  for (int i = 0; i < n; ++i) {
    const double* dyp = dy.data() + static_cast<size_t>(i) * cout * hw;
    if (dw) {
      im2col(x.data() + static_cast<size_t>(i) * cin * h * wd, cin, h, wd, kh, kw, stride, pad,
             ho, wo, col.data());
      // dW += dY * col^T
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, cout, ckk, hw, 1.0, dyp, hw,
                  col.data(), hw, 1.0, dw->data(), ckk);
    }
    if (db) {
      for (int co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (int p = 0; p < hw; ++p) acc += dyp[static_cast<size_t>(co) * hw + p];
        (*db)[co] += acc;
      }
    }
    if (dx) {
      // dcol = W^T * dY, then scatter back
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, ckk, hw, cout, 1.0, w.data(), ckk,
                  dyp, hw, 0.0, dcol.data(), hw);
      col2im(dcol.data(), cin, h, wd, kh, kw, stride, pad, ho, wo,
             dx->data() + static_cast<size_t>(i) * cin * h * wd);
    }
  }
}

Tensor silu(const Tensor& x) {
  Tensor y(x.dims);
  for (int64_t i = 0; i < x.numel(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
  return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.dims);
  for (int64_t i = 0; i < x.numel(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-x[i]));
    dx[i] = dy[i] * (s + x[i] * s * (1.0 - s));
  }
  return dx;
}

Tensor group_norm(const Tensor& x, int groups, const Tensor* gain, const Tensor* bias,
                  GroupNormCtx* ctx) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
  const int cg = c / groups;
  const int64_t spatial = static_cast<int64_t>(h) * w;
  const int64_t gsize = cg * spatial;
  const double eps = 1e-5;

  Tensor y(x.dims);
  Tensor xhat(x.dims);
  std::vector<double> inv_std(static_cast<size_t>(n) * groups);
  for (int i = 0; i < n; ++i)
    for (int g = 0; g < groups; ++g) {
      const double* xp = x.data() + (static_cast<size_t>(i) * c + static_cast<size_t>(g) * cg) * spatial;
      double mean = 0.0;
      for (int64_t j = 0; j < gsize; ++j) mean += xp[j];
      mean /= static_cast<double>(gsize);
      double var = 0.0;
      for (int64_t j = 0; j < gsize; ++j) {
        double d = xp[j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(gsize);
      double inv = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(i) * groups + g] = inv;
      double* xh = xhat.data() + (static_cast<size_t>(i) * c + static_cast<size_t>(g) * cg) * spatial;
      for (int64_t j = 0; j < gsize; ++j) xh[j] = (xp[j] - mean) * inv;
    }
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      double gv = gain ? (*gain)[ch] : 1.0;
      double bv = bias ? (*bias)[ch] : 0.0;
      const double* xh = xhat.data() + (static_cast<size_t>(i) * c + ch) * spatial;
      double* yp = y.data() + (static_cast<size_t>(i) * c + ch) * spatial;
      for (int64_t j = 0; j < spatial; ++j) yp[j] = gv * xh[j] + bv;
    }
  if (ctx) {
    ctx->xhat = std::move(xhat);
    ctx->inv_std = std::move(inv_std);
  }
  return y;
}

Tensor group_norm_backward(const Tensor& dy, int groups, const Tensor* gain,
                           const GroupNormCtx& ctx, Tensor* dgain, Tensor* dbias) {
  const Tensor& xhat = ctx.xhat;
  const int n = dy.dim(0), c = dy.dim(1), h = dy.dim(2), w = dy.dim(3);
  const int cg = c / groups;
  const int64_t spatial = static_cast<int64_t>(h) * w;
  const int64_t gsize = cg * spatial;

  if (dgain || dbias) {
    for (int ch = 0; ch < c; ++ch) {
      double dg = 0.0, db = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* dyp = dy.data() + (static_cast<size_t>(i) * c + ch) * spatial;
        const double* xh = xhat.data() + (static_cast<size_t>(i) * c + ch) * spatial;
        for (int64_t j = 0; j < spatial; ++j) {
          dg += dyp[j] * xh[j];
          db += dyp[j];
        }
      }
      if (dgain) (*dgain)[ch] += dg;
      if (dbias) (*dbias)[ch] += db;
    }
  }

  Tensor dx(dy.dims);
  for (int i = 0; i < n; ++i)
    for (int g = 0; g < groups; ++g) {
      size_t base = (static_cast<size_t>(i) * c + static_cast<size_t>(g) * cg) * spatial;
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int cc = 0; cc < cg; ++cc) {
        double gv = gain ? (*gain)[g * cg + cc] : 1.0;
        const double* dyp = dy.data() + base + static_cast<size_t>(cc) * spatial;
        const double* xh = xhat.data() + base + static_cast<size_t>(cc) * spatial;
        for (int64_t j = 0; j < spatial; ++j) {
          double dxh = dyp[j] * gv;
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh[j];
        }
      }
      double m1 = sum_dxhat / static_cast<double>(gsize);
      double m2 = sum_dxhat_xhat / static_cast<double>(gsize);
      double inv = ctx.inv_std[static_cast<size_t>(i) * groups + g];
      for (int cc = 0; cc < cg; ++cc) {
        double gv = gain ? (*gain)[g * cg + cc] : 1.0;
        const double* dyp = dy.data() + base + static_cast<size_t>(cc) * spatial;
        const double* xh = xhat.data() + base + static_cast<size_t>(cc) * spatial;
        double* dxp = dx.data() + base + static_cast<size_t>(cc) * spatial;
        for (int64_t j = 0; j < spatial; ++j)
          dxp[j] = inv * (dyp[j] * gv - m1 - xh[j] * m2);
      }
    }
  return dx;
}

Tensor resize_nearest(const Tensor& x, int h2, int w2) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({n, c, h2, w2});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* xp = x.data() + (static_cast<size_t>(i) * c + ch) * h * w;
      double* yp = y.data() + (static_cast<size_t>(i) * c + ch) * h2 * w2;
      for (int oy = 0; oy < h2; ++oy) {
        int iy = static_cast<int>(static_cast<int64_t>(oy) * h / h2);
        for (int ox = 0; ox < w2; ++ox) {
          int ix = static_cast<int>(static_cast<int64_t>(ox) * w / w2);
          yp[static_cast<size_t>(oy) * w2 + ox] = xp[static_cast<size_t>(iy) * w + ix];
        }
      }
    }
  return y;
}

Tensor resize_nearest_backward(const Tensor& dy, int h, int w) {
  const int n = dy.dim(0), c = dy.dim(1), h2 = dy.dim(2), w2 = dy.dim(3);
  Tensor dx({n, c, h, w});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* dyp = dy.data() + (static_cast<size_t>(i) * c + ch) * h2 * w2;
      double* dxp = dx.data() + (static_cast<size_t>(i) * c + ch) * h * w;
      for (int oy = 0; oy < h2; ++oy) {
        int iy = static_cast<int>(static_cast<int64_t>(oy) * h / h2);
        for (int ox = 0; ox < w2; ++ox) {
          int ix = static_cast<int>(static_cast<int64_t>(ox) * w / w2);
          dxp[static_cast<size_t>(iy) * w + ix] += dyp[static_cast<size_t>(oy) * w2 + ox];
        }
      }
    }
  return dx;
}

namespace {

// 1x1 projection y[c_out, p] = sum_ci w[c_out, ci] x[ci, p] + b, per sample.
void proj_1x1(const double* x, const double* w, const double* b, int c, int hw, double* y) {
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, c, hw, c, 1.0, w, c, x, hw, 0.0, y, hw);
  if (b)
    for (int co = 0; co < c; ++co)
      for (int p = 0; p < hw; ++p) y[static_cast<size_t>(co) * hw + p] += b[co];
}

}  // namespace

Tensor attention(const Tensor& x, const Tensor& wq, const Tensor& bq, const Tensor& wk,
                 const Tensor& bk, const Tensor& wv, const Tensor& bv, const Tensor& wo,
                 const Tensor& bo, AttnCtx* ctx) {
  blas_init();
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int hw = h * w;
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));

  Tensor q({n, c, hw}), k({n, c, hw}), v({n, c, hw}), attn({n, hw, hw}), o({n, c, hw});
  Tensor y(x.dims);
  for (int i = 0; i < n; ++i) {
    const double* xp = x.data() + static_cast<size_t>(i) * c * hw;
    double* qp = q.data() + static_cast<size_t>(i) * c * hw;
    double* kp = k.data() + static_cast<size_t>(i) * c * hw;
    double* vp = v.data() + static_cast<size_t>(i) * c * hw;
    double* ap = attn.data() + static_cast<size_t>(i) * hw * hw;
    double* op = o.data() + static_cast<size_t>(i) * c * hw;
    proj_1x1(xp, wq.data(), bq.data(), c, hw, qp);
    proj_1x1(xp, wk.data(), bk.data(), c, hw, kp);
    proj_1x1(xp, wv.data(), bv.data(), c, hw, vp);
    // scores[i_pos, j_pos] = scale * q(:,i)^T k(:,j)
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, hw, hw, c, scale, qp, hw, kp, hw, 0.0,
                ap, hw);
    for (int r = 0; r < hw; ++r) {
      double* row = ap + static_cast<size_t>(r) * hw;
      double mx = row[0];
      for (int j = 1; j < hw; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (int j = 0; j < hw; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (int j = 0; j < hw; ++j) row[j] /= sum;
    }
    // o[c, i_pos] = sum_j v[c, j] attn[i_pos, j]
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, c, hw, hw, 1.0, vp, hw, ap, hw, 0.0, op,
                hw);
    double* yp = y.data() + static_cast<size_t>(i) * c * hw;
    proj_1x1(op, wo.data(), bo.data(), c, hw, yp);
    for (int64_t j = 0; j < static_cast<int64_t>(c) * hw; ++j) yp[j] += xp[j];
  }
  if (ctx) {
    ctx->q = std::move(q);
    ctx->k = std::move(k);
    ctx->v = std::move(v);
    ctx->attn = std::move(attn);
    ctx->o = std::move(o);
  }
  return y;
}

Tensor attention_backward(const Tensor& x, const Tensor& dy, const Tensor& wq, const Tensor& wk,
                          const Tensor& wv, const Tensor& wo, const AttnCtx& ctx, Tensor* dwq,
                          Tensor* dbq, Tensor* dwk, Tensor* dbk, Tensor* dwv, Tensor* dbv,
                          Tensor* dwo, Tensor* dbo) {
  blas_init();
  const int n = x.dim(0), c = x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));

  Tensor dx(x.dims);
  std::vector<double> d_o(static_cast<size_t>(c) * hw), d_attn(static_cast<size_t>(hw) * hw),
      d_s(static_cast<size_t>(hw) * hw), d_q(static_cast<size_t>(c) * hw),
      d_k(static_cast<size_t>(c) * hw), d_v(static_cast<size_t>(c) * hw),
      d_proj_in(static_cast<size_t>(c) * hw);
  for (int i = 0; i < n; ++i) {
    const double* xp = x.data() + static_cast<size_t>(i) * c * hw;
    const double* dyp = dy.data() + static_cast<size_t>(i) * c * hw;
    const double* qp = ctx.q.data() + static_cast<size_t>(i) * c * hw;
    const double* kp = ctx.k.data() + static_cast<size_t>(i) * c * hw;
    const double* vp = ctx.v.data() + static_cast<size_t>(i) * c * hw;
    const double* ap = ctx.attn.data() + static_cast<size_t>(i) * hw * hw;
    const double* op = ctx.o.data() + static_cast<size_t>(i) * c * hw;
    double* dxp = dx.data() + static_cast<size_t>(i) * c * hw;

    // residual
    for (int64_t j = 0; j < static_cast<int64_t>(c) * hw; ++j) dxp[j] = dyp[j];
    // output projection: y = wo * o + bo
    if (dwo)
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, c, c, hw, 1.0, dyp, hw, op, hw, 1.0,
                  dwo->data(), c);
    if (dbo)
      for (int co = 0; co < c; ++co) {
        double acc = 0.0;
        for (int p = 0; p < hw; ++p) acc += dyp[static_cast<size_t>(co) * hw + p];
        (*dbo)[co] += acc;
      }
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, c, hw, c, 1.0, wo.data(), c, dyp, hw,
                0.0, d_o.data(), hw);

    // o = v * attn^T
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, c, hw, hw, 1.0, d_o.data(), hw, ap,
                hw, 0.0, d_v.data(), hw);
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, hw, hw, c, 1.0, d_o.data(), hw, vp, hw,
                0.0, d_attn.data(), hw);

    // softmax rows
    for (int r = 0; r < hw; ++r) {
      const double* arow = ap + static_cast<size_t>(r) * hw;
      const double* darow = d_attn.data() + static_cast<size_t>(r) * hw;
      double dot = 0.0;
      for (int j = 0; j < hw; ++j) dot += arow[j] * darow[j];
      double* dsrow = d_s.data() + static_cast<size_t>(r) * hw;
      for (int j = 0; j < hw; ++j) dsrow[j] = arow[j] * (darow[j] - dot);
    }

    // s[i_pos,j_pos] = scale * q^T k
    // dq[c,i] = scale * sum_j ds[i,j] k[c,j]  => dq = scale * k * ds^T
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, c, hw, hw, scale, kp, hw, d_s.data(),
                hw, 0.0, d_q.data(), hw);
    // dk[c,j] = scale * sum_i ds[i,j] q[c,i]  => dk = scale * q * ds
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, c, hw, hw, scale, qp, hw, d_s.data(),
                hw, 0.0, d_k.data(), hw);

    // projections q/k/v: p = w * x + b
    struct ProjGrad {
      const double* dp;
      const Tensor* w;
      Tensor* dw;
      Tensor* db;
    } projs[3] = {{d_q.data(), &wq, dwq, dbq}, {d_k.data(), &wk, dwk, dbk},
                  {d_v.data(), &wv, dwv, dbv}};
    for (auto& pr : projs) {
      if (pr.dw)
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, c, c, hw, 1.0, pr.dp, hw, xp, hw,
                    1.0, pr.dw->data(), c);
      if (pr.db)
        for (int co = 0; co < c; ++co) {
          double acc = 0.0;
          for (int p = 0; p < hw; ++p) acc += pr.dp[static_cast<size_t>(co) * hw + p];
          (*pr.db)[co] += acc;
        }
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, c, hw, c, 1.0, pr.w->data(), c, pr.dp,
                  hw, 0.0, d_proj_in.data(), hw);
      for (int64_t j = 0; j < static_cast<int64_t>(c) * hw; ++j) dxp[j] += d_proj_in[j];
    }
  }
  return dx;
}

}  // namespace nudiff
