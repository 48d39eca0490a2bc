#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "autodiff_internal.hpp"
#include "drc/tensor.hpp"

namespace drc {

namespace {

std::vector<Tensor> tracked(std::initializer_list<Tensor> ts) {
    std::vector<Tensor> out;
    for (const auto& t : ts)
        if (tracks_grad(t)) out.push_back(t);
    return out;
}

// Grow-only per-thread scratch; growth leaves contents uninitialized.
DataVec& scratch(int slot, i64 n) {
    thread_local DataVec bufs[4];
    auto& b = bufs[slot];
    if (static_cast<i64>(b.size()) < n) b.resize(static_cast<size_t>(n));
    return b;
}

constexpr i64 kColTile = 512;

// C[M,N] = alpha*A[M,K]*B[K,N] + beta*C. 4x2 register blocks over column
// tiles; each output element sums in ascending k order regardless of thread
// count.
void gemm_nn(i64 m, i64 n, i64 k, double alpha, const double* a, i64 lda,
             const double* b, i64 ldb, double beta, double* c, i64 ldc) {
#pragma omp parallel for schedule(static)
    for (i64 jt = 0; jt < n; jt += kColTile) {
        const i64 je = std::min(n, jt + kColTile);
        const i64 jn = je - jt;
        auto prep = [&](double* crow) {
            if (beta == 0.0)
                std::fill(crow, crow + jn, 0.0);
            else if (beta != 1.0)
                for (i64 j = 0; j < jn; ++j) crow[j] *= beta;
        };
        i64 ib = 0;
        for (; ib + 4 <= m; ib += 4) {
            double* c0 = c + (ib + 0) * ldc + jt;
            double* c1 = c + (ib + 1) * ldc + jt;
            double* c2 = c + (ib + 2) * ldc + jt;
            double* c3 = c + (ib + 3) * ldc + jt;
            prep(c0);
            prep(c1);
            prep(c2);
            prep(c3);
            const double* a0 = a + (ib + 0) * lda;
            const double* a1 = a + (ib + 1) * lda;
            const double* a2 = a + (ib + 2) * lda;
            const double* a3 = a + (ib + 3) * lda;
            i64 kk = 0;
            for (; kk + 2 <= k; kk += 2) {
                const double a00 = alpha * a0[kk], a01 = alpha * a0[kk + 1];
                const double a10 = alpha * a1[kk], a11 = alpha * a1[kk + 1];
                const double a20 = alpha * a2[kk], a21 = alpha * a2[kk + 1];
                const double a30 = alpha * a3[kk], a31 = alpha * a3[kk + 1];
                const double* b0 = b + kk * ldb + jt;
                const double* b1 = b0 + ldb;
#pragma omp simd
                for (i64 j = 0; j < jn; ++j) {
                    const double bv0 = b0[j], bv1 = b1[j];
                    c0[j] += a00 * bv0 + a01 * bv1;
                    c1[j] += a10 * bv0 + a11 * bv1;
                    c2[j] += a20 * bv0 + a21 * bv1;
                    c3[j] += a30 * bv0 + a31 * bv1;
                }
            }
            for (; kk < k; ++kk) {
                const double a00 = alpha * a0[kk], a10 = alpha * a1[kk];
                const double a20 = alpha * a2[kk], a30 = alpha * a3[kk];
                const double* b0 = b + kk * ldb + jt;
#pragma omp simd
                for (i64 j = 0; j < jn; ++j) {
                    const double bv0 = b0[j];
                    c0[j] += a00 * bv0;
                    c1[j] += a10 * bv0;
                    c2[j] += a20 * bv0;
                    c3[j] += a30 * bv0;
                }
            }
        }
        for (; ib < m; ++ib) {
            double* crow = c + ib * ldc + jt;
            prep(crow);
            const double* arow = a + ib * lda;
            for (i64 kk = 0; kk < k; ++kk) {
                const double av = alpha * arow[kk];
                const double* b0 = b + kk * ldb + jt;
#pragma omp simd
                for (i64 j = 0; j < jn; ++j) crow[j] += av * b0[j];
            }
        }
    }
}

// C[M,N] = alpha*A[M,K]*B[N,K]^T + beta*C. 4x4 register blocks of dot
// products; fixed k order per element.
void gemm_nt(i64 m, i64 n, i64 k, double alpha, const double* a, i64 lda,
             const double* b, i64 ldb, double beta, double* c, i64 ldc) {
#pragma omp parallel for schedule(static)
    for (i64 ib = 0; ib < m; ib += 4) {
        const i64 im = std::min<i64>(4, m - ib);
        for (i64 jb = 0; jb < n; jb += 4) {
            const i64 jm = std::min<i64>(4, n - jb);
            if (im == 4 && jm == 4) {
                const double* a0 = a + (ib + 0) * lda;
                const double* a1 = a + (ib + 1) * lda;
                const double* a2 = a + (ib + 2) * lda;
                const double* a3 = a + (ib + 3) * lda;
                const double* b0 = b + (jb + 0) * ldb;
                const double* b1 = b + (jb + 1) * ldb;
                const double* b2 = b + (jb + 2) * ldb;
                const double* b3 = b + (jb + 3) * ldb;
                double s00 = 0, s01 = 0, s02 = 0, s03 = 0;
                double s10 = 0, s11 = 0, s12 = 0, s13 = 0;
                double s20 = 0, s21 = 0, s22 = 0, s23 = 0;
                double s30 = 0, s31 = 0, s32 = 0, s33 = 0;
#pragma omp simd reduction(+ : s00, s01, s02, s03, s10, s11, s12, s13, s20, \
                               s21, s22, s23, s30, s31, s32, s33)
                for (i64 kk = 0; kk < k; ++kk) {
                    const double av0 = a0[kk], av1 = a1[kk], av2 = a2[kk], av3 = a3[kk];
                    const double bv0 = b0[kk], bv1 = b1[kk], bv2 = b2[kk], bv3 = b3[kk];
                    s00 += av0 * bv0;
                    s01 += av0 * bv1;
                    s02 += av0 * bv2;
                    s03 += av0 * bv3;
                    s10 += av1 * bv0;
                    s11 += av1 * bv1;
                    s12 += av1 * bv2;
                    s13 += av1 * bv3;
                    s20 += av2 * bv0;
                    s21 += av2 * bv1;
                    s22 += av2 * bv2;
                    s23 += av2 * bv3;
                    s30 += av3 * bv0;
                    s31 += av3 * bv1;
                    s32 += av3 * bv2;
                    s33 += av3 * bv3;
                }
                const double res[4][4] = {{s00, s01, s02, s03},
                                          {s10, s11, s12, s13},
                                          {s20, s21, s22, s23},
                                          {s30, s31, s32, s33}};
                for (i64 ii = 0; ii < 4; ++ii)
                    for (i64 jj = 0; jj < 4; ++jj) {
                        double* cp = c + (ib + ii) * ldc + jb + jj;
                        *cp = (beta == 0.0 ? 0.0 : beta * *cp) + alpha * res[ii][jj];
                    }
            } else {
                for (i64 ii = 0; ii < im; ++ii)
                    for (i64 jj = 0; jj < jm; ++jj) {
                        const double* ar = a + (ib + ii) * lda;
                        const double* br = b + (jb + jj) * ldb;
                        double s = 0;
#pragma omp simd reduction(+ : s)
                        for (i64 kk = 0; kk < k; ++kk) s += ar[kk] * br[kk];
                        double* cp = c + (ib + ii) * ldc + jb + jj;
                        *cp = (beta == 0.0 ? 0.0 : beta * *cp) + alpha * s;
                    }
            }
        }
    }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, double alpha,
          const double* a, i64 lda, const double* b, i64 ldb, double beta,
          double* c, i64 ldc) {
    if (!trans_a && !trans_b) return gemm_nn(m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    if (!trans_a && trans_b) return gemm_nt(m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    throw ConfigError("gemm: unsupported transpose combination");
}

// ---------------- broadcast multiply ----------------

Tensor bcast_mul(const Tensor& x, const Tensor& m) {
    const auto& xs = x.shape();
    const auto& ms = m.shape();
    if (xs.size() != 4 || ms.size() != 4 || ms[1] != 1 || ms[0] != xs[0] ||
        ms[2] != xs[2] || ms[3] != xs[3])
        throw ConfigError("bcast_mul: expected [N,C,H,W] and [N,1,H,W]");
    const i64 n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    const bool nx = tracks_grad(x), nm = tracks_grad(m);
    auto px = x.impl(), pm = m.impl();
    Tensor out = make_op(xs, tracked({x, m}),
                         [px, pm, n, c, hw, nx, nm](TensorImpl& self) {
                             const double* g = self.grad->data();
                             const double* md = pm->data->data();
                             const double* xd = px->data->data();
                             if (nx) {
                                 double* gx = px->ensure_grad().data();
                                 for (i64 in = 0; in < n; ++in)
                                     for (i64 ic = 0; ic < c; ++ic) {
                                         const double* gp = g + (in * c + ic) * hw;
                                         const double* mp = md + in * hw;
                                         double* gd = gx + (in * c + ic) * hw;
                                         for (i64 i = 0; i < hw; ++i) gd[i] += gp[i] * mp[i];
                                     }
                             }
                             if (nm) {
                                 double* gm = pm->ensure_grad().data();
                                 for (i64 in = 0; in < n; ++in)
                                     for (i64 ic = 0; ic < c; ++ic) {
                                         const double* gp = g + (in * c + ic) * hw;
                                         const double* xp = xd + (in * c + ic) * hw;
                                         double* gd = gm + in * hw;
                                         for (i64 i = 0; i < hw; ++i) gd[i] += gp[i] * xp[i];
                                     }
                             }
                         });
    const double* xd = x.data();
    const double* md = m.data();
    double* o = out.data();
#pragma omp parallel for schedule(static) collapse(2)
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < c; ++ic) {
            const double* xp = xd + (in * c + ic) * hw;
            const double* mp = md + in * hw;
            double* op = o + (in * c + ic) * hw;
            for (i64 i = 0; i < hw; ++i) op[i] = xp[i] * mp[i];
        }
    return out;
}

// ---------------- linear ----------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2)
        throw ConfigError("linear: expected 2-D input and weight");
    const i64 n = x.dim(0), in = x.dim(1), out_f = w.dim(0);
    if (w.dim(1) != in || b.dim(0) != out_f)
        throw ConfigError("linear: dimension mismatch");

    const bool nx = tracks_grad(x), nw = tracks_grad(w), nb = tracks_grad(b);
    auto px = x.impl(), pw = w.impl(), pb = b.impl();
    std::vector<Tensor> parents;
    if (nx) parents.push_back(x);
    if (nw) parents.push_back(w);
    if (nb) parents.push_back(b);

    Tensor out = make_op({n, out_f}, std::move(parents),
                         [px, pw, pb, n, in, out_f, nx, nw, nb](TensorImpl& self) {
                             const double* gy = self.grad->data();
                             if (nx) {
                                 double* gx = px->ensure_grad().data();
                                 gemm(false, false, n, in, out_f, 1.0, gy, out_f,
                                      pw->data->data(), in, 1.0, gx, in);
                             }
                             if (nw) {
                                 auto& gyt = scratch(0, n * out_f);
                                 for (i64 r = 0; r < n; ++r)
                                     for (i64 o = 0; o < out_f; ++o)
                                         gyt[static_cast<size_t>(o * n + r)] = gy[r * out_f + o];
                                 double* gw = pw->ensure_grad().data();
                                 gemm(false, false, out_f, in, n, 1.0, gyt.data(), n,
                                      px->data->data(), in, 1.0, gw, in);
                             }
                             if (nb) {
                                 double* gb = pb->ensure_grad().data();
                                 for (i64 r = 0; r < n; ++r)
                                     for (i64 o = 0; o < out_f; ++o) gb[o] += gy[r * out_f + o];
                             }
                         });
    gemm(false, true, n, out_f, in, 1.0, x.data(), in, w.data(), in, 0.0,
         out.data(), out_f);
    double* o = out.data();
    const double* bias = b.data();
    for (i64 r = 0; r < n; ++r)
        for (i64 of = 0; of < out_f; ++of) o[r * out_f + of] += bias[of];
    return out;
}

// ---------------- conv2d ----------------

namespace {

struct ConvDims {
    i64 n, ic, h, w, oc, kh, kw, oh, ow, stride, pad;
    i64 ickk() const { return ic * kh * kw; }
    i64 ohow() const { return oh * ow; }
};

// One image's patch matrix written into a batch-wide layout: row r of the
// patch matrix lives at col_base + r * row_stride.
void im2col_strided(const double* x, const ConvDims& d, i64 row_stride,
                    double* col_base) {
    const i64 ow = d.ow, oh = d.oh;
    for (i64 ic = 0; ic < d.ic; ++ic)
        for (i64 ky = 0; ky < d.kh; ++ky)
            for (i64 kx = 0; kx < d.kw; ++kx) {
                double* crow = col_base + ((ic * d.kh + ky) * d.kw + kx) * row_stride;
                const double* xc = x + ic * d.h * d.w;
                for (i64 oy = 0; oy < oh; ++oy) {
                    const i64 iy = oy * d.stride - d.pad + ky;
                    double* dst = crow + oy * ow;
                    if (iy < 0 || iy >= d.h) {
                        std::fill(dst, dst + ow, 0.0);
                        continue;
                    }
                    const double* xrow = xc + iy * d.w;
                    for (i64 ox = 0; ox < ow; ++ox) {
                        const i64 ix = ox * d.stride - d.pad + kx;
                        dst[ox] = (ix >= 0 && ix < d.w) ? xrow[ix] : 0.0;
                    }
                }
            }
}

// ---- direct 3x3, stride 1, pad 1 path ----

// zero-padded copy of one image: [IC, H+2, W+2]
void pad_image(const double* x, i64 ic, i64 h, i64 w, double* xp) {
    const i64 pw = w + 2;
    for (i64 c = 0; c < ic; ++c) {
        double* base = xp + c * (h + 2) * pw;
        std::fill(base, base + pw, 0.0);
        for (i64 y = 0; y < h; ++y) {
            double* row = base + (y + 1) * pw;
            row[0] = 0.0;
            std::memcpy(row + 1, x + (c * h + y) * w, sizeof(double) * static_cast<size_t>(w));
            row[w + 1] = 0.0;
        }
        std::fill(base + (h + 1) * pw, base + (h + 2) * pw, 0.0);
    }
}

// out[n] (+)= conv3x3(x[n], w) with w[oc][ic][3][3]; accumulate toggles +=.
void conv3x3_forward_one(const double* xp, i64 ic, i64 h, i64 w, const double* wt,
                         const double* bias, i64 oc, double* out, bool accumulate) {
    const i64 pw = w + 2;
    constexpr i64 kOcBlock = 8;
    double acc[kOcBlock][128];
    for (i64 ocb = 0; ocb < oc; ocb += kOcBlock) {
        const i64 ocn = std::min(kOcBlock, oc - ocb);
        for (i64 oy = 0; oy < h; ++oy) {
            for (i64 o = 0; o < ocn; ++o) {
                const double bv = bias ? bias[ocb + o] : 0.0;
                for (i64 j = 0; j < w; ++j) acc[o][j] = bv;
            }
            for (i64 c = 0; c < ic; ++c) {
                const double* r0 = xp + (c * (h + 2) + oy) * pw;
                const double* r1 = r0 + pw;
                const double* r2 = r1 + pw;
                for (i64 o = 0; o < ocn; ++o) {
                    const double* k = wt + ((ocb + o) * ic + c) * 9;
                    double* a = acc[o];
#pragma omp simd
                    for (i64 j = 0; j < w; ++j)
                        a[j] += k[0] * r0[j] + k[1] * r0[j + 1] + k[2] * r0[j + 2] +
                                k[3] * r1[j] + k[4] * r1[j + 1] + k[5] * r1[j + 2] +
                                k[6] * r2[j] + k[7] * r2[j + 1] + k[8] * r2[j + 2];
                }
            }
            for (i64 o = 0; o < ocn; ++o) {
                double* dst = out + ((ocb + o) * h + oy) * w;
                if (accumulate)
                    for (i64 j = 0; j < w; ++j) dst[j] += acc[o][j];
                else
                    std::memcpy(dst, acc[o], sizeof(double) * static_cast<size_t>(w));
            }
        }
    }
}

// gw[oc][ic][3][3] += sum over pixels of gy[oc] x xp[ic] shifted
void conv3x3_grad_weight_one(const double* xp, i64 ic, i64 h, i64 w, const double* gy,
                             i64 oc_begin, i64 oc_end, i64 oc_total, double* gw) {
    const i64 pw = w + 2;
    (void)oc_total;
    for (i64 o = oc_begin; o < oc_end; ++o) {
        const double* gyp = gy + o * h * w;
        for (i64 c = 0; c < ic; ++c) {
            double k[9] = {0};
            for (i64 oy = 0; oy < h; ++oy) {
                const double* g = gyp + oy * w;
                const double* r0 = xp + (c * (h + 2) + oy) * pw;
                const double* r1 = r0 + pw;
                const double* r2 = r1 + pw;
                double s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0,
                       s8 = 0;
#pragma omp simd reduction(+ : s0, s1, s2, s3, s4, s5, s6, s7, s8)
                for (i64 j = 0; j < w; ++j) {
                    const double gv = g[j];
                    s0 += gv * r0[j];
                    s1 += gv * r0[j + 1];
                    s2 += gv * r0[j + 2];
                    s3 += gv * r1[j];
                    s4 += gv * r1[j + 1];
                    s5 += gv * r1[j + 2];
                    s6 += gv * r2[j];
                    s7 += gv * r2[j + 1];
                    s8 += gv * r2[j + 2];
                }
                k[0] += s0;
                k[1] += s1;
                k[2] += s2;
                k[3] += s3;
                k[4] += s4;
                k[5] += s5;
                k[6] += s6;
                k[7] += s7;
                k[8] += s8;
            }
            double* dst = gw + (o * ic + c) * 9;
            for (int t = 0; t < 9; ++t) dst[t] += k[t];
        }
    }
}

void col2im_accum(const double* col, const ConvDims& d, double* gx) {
    for (i64 ic = 0; ic < d.ic; ++ic)
        for (i64 ky = 0; ky < d.kh; ++ky)
            for (i64 kx = 0; kx < d.kw; ++kx) {
                const double* crow = col + ((ic * d.kh + ky) * d.kw + kx) * d.ohow();
                double* xc = gx + ic * d.h * d.w;
                for (i64 oy = 0; oy < d.oh; ++oy) {
                    const i64 iy = oy * d.stride - d.pad + ky;
                    if (iy < 0 || iy >= d.h) continue;
                    const double* src = crow + oy * d.ow;
                    double* xrow = xc + iy * d.w;
                    for (i64 ox = 0; ox < d.ow; ++ox) {
                        const i64 ix = ox * d.stride - d.pad + kx;
                        if (ix >= 0 && ix < d.w) xrow[ix] += src[ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, i64 stride, i64 pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4) throw ConfigError("conv2d: expected 4-D tensors");
    ConvDims d;
    d.n = xs[0];
    d.ic = xs[1];
    d.h = xs[2];
    d.w = xs[3];
    d.oc = ws[0];
    d.kh = ws[2];
    d.kw = ws[3];
    d.stride = stride;
    d.pad = pad;
    if (ws[1] != d.ic) throw ConfigError("conv2d: channel mismatch");
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.oh <= 0 || d.ow <= 0) throw ConfigError("conv2d: empty output");

    const bool nx = tracks_grad(x), nw = tracks_grad(w), nb = tracks_grad(b);
    auto px = x.impl(), pw = w.impl(), pb = b.impl();
    std::vector<Tensor> parents;
    if (nx) parents.push_back(x);
    if (nw) parents.push_back(w);
    if (nb) parents.push_back(b);

    // 3x3 stride-1 convolutions (the generator hot path) run a direct
    // stencil; everything else goes through batch-wide im2col + GEMM.
    const bool direct =
        d.kh == 3 && d.kw == 3 && d.stride == 1 && d.pad == 1 && d.w <= 128;

    Tensor out = make_op(
        {d.n, d.oc, d.oh, d.ow}, std::move(parents),
        [px, pw, pb, d, nx, nw, nb, direct](TensorImpl& self) {
            const double* gy = self.grad->data();
            const i64 ickk = d.ickk(), ohow = d.ohow();
            const i64 padded = d.ic * (d.h + 2) * (d.w + 2);
            if (direct) {
                if (nx) {
                    // transpose convolution: rotate kernels, swap channel roles
                    auto& wrot = scratch(2, ickk * d.oc);
                    const double* wd = pw->data->data();
                    for (i64 o = 0; o < d.oc; ++o)
                        for (i64 c = 0; c < d.ic; ++c)
                            for (i64 t = 0; t < 9; ++t)
                                wrot[static_cast<size_t>((c * d.oc + o) * 9 + (8 - t))] =
                                    wd[(o * d.ic + c) * 9 + t];
                    double* gx = px->ensure_grad().data();
#pragma omp parallel for schedule(static)
                    for (i64 in = 0; in < d.n; ++in) {
                        auto& gyp = scratch(0, d.oc * (d.h + 2) * (d.w + 2));
                        pad_image(gy + in * d.oc * ohow, d.oc, d.h, d.w, gyp.data());
                        conv3x3_forward_one(gyp.data(), d.oc, d.h, d.w, wrot.data(),
                                            nullptr, d.ic, gx + in * d.ic * ohow, true);
                    }
                }
                if (nw) {
                    auto& xpall = scratch(3, d.n * padded);
                    const double* xd = px->data->data();
#pragma omp parallel for schedule(static)
                    for (i64 in = 0; in < d.n; ++in)
                        pad_image(xd + in * d.ic * ohow, d.ic, d.h, d.w,
                                  xpall.data() + in * padded);
                    double* gw = pw->ensure_grad().data();
                    const i64 blk = std::max<i64>(1, d.oc / 8);
#pragma omp parallel for schedule(static)
                    for (i64 ob = 0; ob < d.oc; ob += blk) {
                        const i64 oe = std::min(d.oc, ob + blk);
                        for (i64 in = 0; in < d.n; ++in)
                            conv3x3_grad_weight_one(xpall.data() + in * padded, d.ic, d.h,
                                                    d.w, gy + in * d.oc * ohow, ob, oe,
                                                    d.oc, gw);
                    }
                }
            } else {
                const i64 cols = d.n * ohow;
                // reorder [N,OC,OHOW] -> [OC, N*OHOW]
                auto& gyt = scratch(3, d.oc * cols);
#pragma omp parallel for schedule(static)
                for (i64 in = 0; in < d.n; ++in)
                    for (i64 oc = 0; oc < d.oc; ++oc)
                        std::memcpy(gyt.data() + oc * cols + in * ohow,
                                    gy + (in * d.oc + oc) * ohow,
                                    sizeof(double) * static_cast<size_t>(ohow));
                if (nx) {
                    auto& wt = scratch(2, ickk * d.oc);
                    const double* wd = pw->data->data();
                    for (i64 oc = 0; oc < d.oc; ++oc)
                        for (i64 r = 0; r < ickk; ++r)
                            wt[static_cast<size_t>(r * d.oc + oc)] = wd[oc * ickk + r];
                    auto& gcol = scratch(0, ickk * cols);
                    gemm(false, false, ickk, cols, d.oc, 1.0, wt.data(), d.oc, gyt.data(),
                         cols, 0.0, gcol.data(), cols);
                    double* gx = px->ensure_grad().data();
#pragma omp parallel for schedule(static)
                    for (i64 in = 0; in < d.n; ++in) {
                        auto& slice = scratch(1, ickk * ohow);
                        for (i64 r = 0; r < ickk; ++r)
                            std::memcpy(slice.data() + r * ohow,
                                        gcol.data() + r * cols + in * ohow,
                                        sizeof(double) * static_cast<size_t>(ohow));
                        col2im_accum(slice.data(), d, gx + in * d.ic * d.h * d.w);
                    }
                }
                if (nw) {
                    auto& col = scratch(1, ickk * cols);
                    const double* xd = px->data->data();
#pragma omp parallel for schedule(static)
                    for (i64 in = 0; in < d.n; ++in)
                        im2col_strided(xd + in * d.ic * d.h * d.w, d, cols,
                                       col.data() + in * ohow);
                    gemm(false, true, d.oc, ickk, cols, 1.0, gyt.data(), cols, col.data(),
                         cols, 1.0, pw->ensure_grad().data(), ickk);
                }
            }
            if (nb) {
                double* gb = pb->ensure_grad().data();
                for (i64 oc = 0; oc < d.oc; ++oc) {
                    double s = 0;
                    for (i64 in = 0; in < d.n; ++in) {
                        const double* row = gy + (in * d.oc + oc) * ohow;
                        for (i64 i = 0; i < ohow; ++i) s += row[i];
                    }
                    gb[oc] += s;
                }
            }
        });

    const i64 ickk = d.ickk(), ohow = d.ohow();
    double* o = out.data();
    const double* bias = b.data();
    if (direct) {
#pragma omp parallel for schedule(static)
        for (i64 in = 0; in < d.n; ++in) {
            auto& xp = scratch(0, d.ic * (d.h + 2) * (d.w + 2));
            pad_image(x.data() + in * d.ic * d.h * d.w, d.ic, d.h, d.w, xp.data());
            conv3x3_forward_one(xp.data(), d.ic, d.h, d.w, w.data(), bias, d.oc,
                                o + in * d.oc * ohow, false);
        }
        return out;
    }
    const i64 cols = d.n * ohow;
    auto& col = scratch(0, ickk * cols);
#pragma omp parallel for schedule(static)
    for (i64 in = 0; in < d.n; ++in)
        im2col_strided(x.data() + in * d.ic * d.h * d.w, d, cols, col.data() + in * ohow);
    auto& obuf = scratch(1, d.oc * cols);
    gemm(false, false, d.oc, cols, ickk, 1.0, w.data(), ickk, col.data(), cols, 0.0,
         obuf.data(), cols);
#pragma omp parallel for schedule(static)
    for (i64 in = 0; in < d.n; ++in)
        for (i64 oc = 0; oc < d.oc; ++oc) {
            const double* src = obuf.data() + oc * cols + in * ohow;
            double* dst = o + (in * d.oc + oc) * ohow;
            const double bv = bias[oc];
            for (i64 i = 0; i < ohow; ++i) dst[i] = src[i] + bv;
        }
    return out;
}

// ---------------- upsample ----------------

Tensor upsample_nearest2(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ConfigError("upsample_nearest2: expected NCHW");
    const i64 n = s[0], c = s[1], h = s[2], w = s[3];
    const i64 oh = 2 * h, ow = 2 * w;
    const bool nx = tracks_grad(x);
    auto px = x.impl();
    Tensor out = make_op({n, c, oh, ow},
                         nx ? std::vector<Tensor>{x} : std::vector<Tensor>{},
                         [px, n, c, h, w, oh, ow](TensorImpl& self) {
                             const double* g = self.grad->data();
                             double* gx = px->ensure_grad().data();
#pragma omp parallel for schedule(static)
                             for (i64 nc = 0; nc < n * c; ++nc) {
                                 const double* gp = g + nc * oh * ow;
                                 double* xp = gx + nc * h * w;
                                 for (i64 i = 0; i < h; ++i)
                                     for (i64 j = 0; j < w; ++j)
                                         xp[i * w + j] += gp[(2 * i) * ow + 2 * j] +
                                                          gp[(2 * i) * ow + 2 * j + 1] +
                                                          gp[(2 * i + 1) * ow + 2 * j] +
                                                          gp[(2 * i + 1) * ow + 2 * j + 1];
                             }
                         });
    const double* xd = x.data();
    double* o = out.data();
#pragma omp parallel for schedule(static)
    for (i64 nc = 0; nc < n * c; ++nc) {
        const double* xp = xd + nc * h * w;
        double* op = o + nc * oh * ow;
        for (i64 i = 0; i < h; ++i)
            for (i64 j = 0; j < w; ++j) {
                const double v = xp[i * w + j];
                op[(2 * i) * ow + 2 * j] = v;
                op[(2 * i) * ow + 2 * j + 1] = v;
                op[(2 * i + 1) * ow + 2 * j] = v;
                op[(2 * i + 1) * ow + 2 * j + 1] = v;
            }
    }
    return out;
}

// ---------------- instance norm ----------------

Tensor instance_norm(const Tensor& x, double eps) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ConfigError("instance_norm: expected NCHW");
    const i64 n = s[0], c = s[1], hw = s[2] * s[3];
    const bool nx = tracks_grad(x);
    auto px = x.impl();
    auto stats = std::make_shared<std::vector<double>>(
        static_cast<size_t>(2 * n * c));  // mean, invstd per (n,c)

    Tensor out = make_op(
        s, nx ? std::vector<Tensor>{x} : std::vector<Tensor>{},
        [px, stats, n, c, hw](TensorImpl& self) {
            const double* g = self.grad->data();
            const double* xd = px->data->data();
            double* gx = px->ensure_grad().data();
            const double inv_hw = 1.0 / static_cast<double>(hw);
#pragma omp parallel for schedule(static)
            for (i64 nc = 0; nc < n * c; ++nc) {
                const double mu = (*stats)[static_cast<size_t>(2 * nc)];
                const double inv = (*stats)[static_cast<size_t>(2 * nc + 1)];
                const double* gp = g + nc * hw;
                const double* xp = xd + nc * hw;
                double gsum = 0, gxhat = 0;
                for (i64 i = 0; i < hw; ++i) {
                    const double xh = (xp[i] - mu) * inv;
                    gsum += gp[i];
                    gxhat += gp[i] * xh;
                }
                const double mg = gsum * inv_hw;
                const double mgx = gxhat * inv_hw;
                double* gd = gx + nc * hw;
                for (i64 i = 0; i < hw; ++i) {
                    const double xh = (xp[i] - mu) * inv;
                    gd[i] += inv * (gp[i] - mg - xh * mgx);
                }
            }
        });
    const double* xd = x.data();
    double* o = out.data();
#pragma omp parallel for schedule(static)
    for (i64 nc = 0; nc < n * c; ++nc) {
        const double* xp = xd + nc * hw;
        double m = 0;
        for (i64 i = 0; i < hw; ++i) m += xp[i];
        m /= static_cast<double>(hw);
        double var = 0;
        for (i64 i = 0; i < hw; ++i) {
            const double dlt = xp[i] - m;
            var += dlt * dlt;
        }
        var /= static_cast<double>(hw);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*stats)[static_cast<size_t>(2 * nc)] = m;
        (*stats)[static_cast<size_t>(2 * nc + 1)] = inv;
        double* op = o + nc * hw;
        for (i64 i = 0; i < hw; ++i) op[i] = (xp[i] - m) * inv;
    }
    return out;
}

// ---------------- grid sample ----------------

namespace {

inline double snap_to_center(double p) {
    const double r = std::round(p);
    return std::abs(p - r) < 1e-9 ? r : p;
}

}  // namespace

Tensor identity_grid(i64 n, i64 h, i64 w) {
    Tensor g = Tensor::zeros({n, 2, h, w});
    double* d = g.data();
    const i64 hw = h * w;
    for (i64 in = 0; in < n; ++in)
        for (i64 y = 0; y < h; ++y)
            for (i64 x = 0; x < w; ++x) {
                d[in * 2 * hw + y * w + x] =
                    w > 1 ? 2.0 * static_cast<double>(x) / static_cast<double>(w - 1) - 1.0 : 0.0;
                d[in * 2 * hw + hw + y * w + x] =
                    h > 1 ? 2.0 * static_cast<double>(y) / static_cast<double>(h - 1) - 1.0 : 0.0;
            }
    return g;
}

Tensor grid_sample(const Tensor& image, const Tensor& grid) {
    const auto& is = image.shape();
    const auto& gs = grid.shape();
    if (is.size() != 4 || gs.size() != 4 || gs[1] != 2)
        throw ConfigError("grid_sample: expected image NCHW and grid [N,2,H,W]");
    if (is[0] != gs[0] || is[2] != gs[2] || is[3] != gs[3])
        throw ConfigError("grid_sample: grid spatial dims must equal image dims");
    const i64 n = is[0], c = is[1], h = is[2], w = is[3];
    const i64 hw = h * w;
    const bool ni = tracks_grad(image), ng = tracks_grad(grid);
    auto pi = image.impl(), pg = grid.impl();

    Tensor out = make_op(
        is, tracked({image, grid}),
        [pi, pg, n, c, h, w, hw, ni, ng](TensorImpl& self) {
            const double* g = self.grad->data();
            const double* img = pi->data->data();
            const double* gr = pg->data->data();
            double* gi = ni ? pi->ensure_grad().data() : nullptr;
            double* gg = ng ? pg->ensure_grad().data() : nullptr;
            const double sx = 0.5 * static_cast<double>(w - 1);
            const double sy = 0.5 * static_cast<double>(h - 1);
#pragma omp parallel for schedule(static)
            for (i64 in = 0; in < n; ++in) {
                const double* gu = gr + in * 2 * hw;
                const double* gv = gu + hw;
                for (i64 p = 0; p < hw; ++p) {
                    double pxf = snap_to_center((gu[p] + 1.0) * sx);
                    double pyf = snap_to_center((gv[p] + 1.0) * sy);
                    const bool inx = pxf > 0.0 && pxf < static_cast<double>(w - 1);
                    const bool iny = pyf > 0.0 && pyf < static_cast<double>(h - 1);
                    pxf = std::min(std::max(pxf, 0.0), static_cast<double>(w - 1));
                    pyf = std::min(std::max(pyf, 0.0), static_cast<double>(h - 1));
                    const i64 x0 = static_cast<i64>(pxf);
                    const i64 y0 = static_cast<i64>(pyf);
                    const i64 x1 = std::min(x0 + 1, w - 1);
                    const i64 y1 = std::min(y0 + 1, h - 1);
                    const double wx = pxf - static_cast<double>(x0);
                    const double wy = pyf - static_cast<double>(y0);
                    double du = 0, dv = 0;
                    for (i64 ic = 0; ic < c; ++ic) {
                        const double go = g[(in * c + ic) * hw + p];
                        const double* ip = img + (in * c + ic) * hw;
                        const double a = ip[y0 * w + x0], bb = ip[y0 * w + x1];
                        const double cc = ip[y1 * w + x0], dd = ip[y1 * w + x1];
                        if (gi) {
                            double* gp = gi + (in * c + ic) * hw;
                            gp[y0 * w + x0] += go * (1 - wy) * (1 - wx);
                            gp[y0 * w + x1] += go * (1 - wy) * wx;
                            gp[y1 * w + x0] += go * wy * (1 - wx);
                            gp[y1 * w + x1] += go * wy * wx;
                        }
                        if (gg) {
                            du += go * ((1 - wy) * (bb - a) + wy * (dd - cc));
                            dv += go * ((1 - wx) * (cc - a) + wx * (dd - bb));
                        }
                    }
                    if (gg) {
                        if (inx) gg[in * 2 * hw + p] += du * sx;
                        if (iny) gg[in * 2 * hw + hw + p] += dv * sy;
                    }
                }
            }
        });
    const double* img = image.data();
    const double* gr = grid.data();
    double* o = out.data();
    const double sx = 0.5 * static_cast<double>(w - 1);
    const double sy = 0.5 * static_cast<double>(h - 1);
#pragma omp parallel for schedule(static)
    for (i64 in = 0; in < n; ++in) {
        const double* gu = gr + in * 2 * hw;
        const double* gv = gu + hw;
        for (i64 p = 0; p < hw; ++p) {
            double pxf = snap_to_center((gu[p] + 1.0) * sx);
            double pyf = snap_to_center((gv[p] + 1.0) * sy);
            pxf = std::min(std::max(pxf, 0.0), static_cast<double>(w - 1));
            pyf = std::min(std::max(pyf, 0.0), static_cast<double>(h - 1));
            const i64 x0 = static_cast<i64>(pxf);
            const i64 y0 = static_cast<i64>(pyf);
            const i64 x1 = std::min(x0 + 1, w - 1);
            const i64 y1 = std::min(y0 + 1, h - 1);
            const double wx = pxf - static_cast<double>(x0);
            const double wy = pyf - static_cast<double>(y0);
            for (i64 ic = 0; ic < c; ++ic) {
                const double* ip = img + (in * c + ic) * hw;
                const double top = (1 - wx) * ip[y0 * w + x0] + wx * ip[y0 * w + x1];
                const double bot = (1 - wx) * ip[y1 * w + x0] + wx * ip[y1 * w + x1];
                o[(in * c + ic) * hw + p] = (1 - wy) * top + wy * bot;
            }
        }
    }
    return out;
}

// ---------------- total variation ----------------

Tensor tv_norm(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ConfigError("tv_norm: expected NCHW");
    const i64 n = s[0], c = s[1], h = s[2], w = s[3];
    const bool nx = tracks_grad(x);
    auto px = x.impl();
    auto sign = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
    Tensor out = make_op(
        {n}, nx ? std::vector<Tensor>{x} : std::vector<Tensor>{},
        [px, n, c, h, w, sign](TensorImpl& self) {
            const double* g = self.grad->data();
            const double* xd = px->data->data();
            double* gx = px->ensure_grad().data();
            for (i64 in = 0; in < n; ++in) {
                const double gn = g[in];
                for (i64 ic = 0; ic < c; ++ic) {
                    const double* xp = xd + (in * c + ic) * h * w;
                    double* gp = gx + (in * c + ic) * h * w;
                    for (i64 i = 0; i < h; ++i)
                        for (i64 j = 0; j + 1 < w; ++j) {
                            const double sg = gn * sign(xp[i * w + j + 1] - xp[i * w + j]);
                            gp[i * w + j + 1] += sg;
                            gp[i * w + j] -= sg;
                        }
                    for (i64 i = 0; i + 1 < h; ++i)
                        for (i64 j = 0; j < w; ++j) {
                            const double sg = gn * sign(xp[(i + 1) * w + j] - xp[i * w + j]);
                            gp[(i + 1) * w + j] += sg;
                            gp[i * w + j] -= sg;
                        }
                }
            }
        });
    const double* xd = x.data();
    double* o = out.data();
    for (i64 in = 0; in < n; ++in) {
        double acc = 0;
        for (i64 ic = 0; ic < c; ++ic) {
            const double* xp = xd + (in * c + ic) * h * w;
            for (i64 i = 0; i < h; ++i)
                for (i64 j = 0; j + 1 < w; ++j)
                    acc += std::abs(xp[i * w + j + 1] - xp[i * w + j]);
            for (i64 i = 0; i + 1 < h; ++i)
                for (i64 j = 0; j < w; ++j)
                    acc += std::abs(xp[(i + 1) * w + j] - xp[i * w + j]);
        }
        o[in] = acc;
    }
    return out;
}

// ---------------- orthogonal regularization ----------------

Tensor orthogonal_reg(const Tensor& w) {
    const auto& s = w.shape();
    if (s.empty()) throw ConfigError("orthogonal_reg: scalar weight");
    const i64 rows = s[0];
    i64 cols = 1;
    for (size_t i = 1; i < s.size(); ++i) cols *= s[i];

    // S = (W W^T) with zeroed diagonal; value is ||S||_F
    auto gram = std::make_shared<std::vector<double>>(static_cast<size_t>(rows * rows));
    gemm(false, true, rows, rows, cols, 1.0, w.data(), cols, w.data(), cols, 0.0,
         gram->data(), rows);
    for (i64 i = 0; i < rows; ++i) (*gram)[static_cast<size_t>(i * rows + i)] = 0.0;
    double f2 = 0;
    for (double v : *gram) f2 += v * v;
    const double fnorm = std::sqrt(f2);

    const bool nw = tracks_grad(w);
    auto pw = w.impl();
    Tensor out = make_op({1}, nw ? std::vector<Tensor>{w} : std::vector<Tensor>{},
                         [pw, gram, rows, cols](TensorImpl& self) {
                             const double f = (*self.data)[0];
                             // at (near-)orthogonal rows the norm sits at its
                             // non-smooth minimum; 0 is a valid subgradient
                             if (f < 1e-12) return;
                             const double g = (*self.grad)[0] * 2.0 / f;
                             // dF/dW = (2/F) S W
                             double* gw = pw->ensure_grad().data();
                             gemm(false, false, rows, cols, rows, g, gram->data(), rows,
                                  pw->data->data(), cols, 1.0, gw, cols);
                         });
    out.data()[0] = fnorm;
    return out;
}

// ---------------- row-wise ops ----------------

Tensor logsumexp_rows(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 2) throw ConfigError("logsumexp_rows: expected [N,K]");
    const i64 n = s[0], k = s[1];
    const bool nx = tracks_grad(x);
    auto px = x.impl();
    Tensor out = make_op({n}, nx ? std::vector<Tensor>{x} : std::vector<Tensor>{},
                         [px, n, k](TensorImpl& self) {
                             const double* g = self.grad->data();
                             const double* xd = px->data->data();
                             const double* y = self.data->data();
                             double* gx = px->ensure_grad().data();
                             for (i64 r = 0; r < n; ++r)
                                 for (i64 j = 0; j < k; ++j)
                                     gx[r * k + j] += g[r] * std::exp(xd[r * k + j] - y[r]);
                         });
    const double* xd = x.data();
    double* o = out.data();
    for (i64 r = 0; r < n; ++r) {
        const double* row = xd + r * k;
        double m = row[0];
        for (i64 j = 1; j < k; ++j) m = std::max(m, row[j]);
        double acc = 0;
        for (i64 j = 0; j < k; ++j) acc += std::exp(row[j] - m);
        o[r] = m + std::log(acc);
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    const auto& s = x.shape();
    if (s.size() != 2) throw ConfigError("softmax_rows: expected [N,K]");
    const i64 n = s[0], k = s[1];
    const bool nx = tracks_grad(x);
    auto px = x.impl();
    Tensor out = make_op(s, nx ? std::vector<Tensor>{x} : std::vector<Tensor>{},
                         [px, n, k](TensorImpl& self) {
                             const double* g = self.grad->data();
                             const double* y = self.data->data();
                             double* gx = px->ensure_grad().data();
                             for (i64 r = 0; r < n; ++r) {
                                 double dot = 0;
                                 for (i64 j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
                                 for (i64 j = 0; j < k; ++j)
                                     gx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
                             }
                         });
    const double* xd = x.data();
    double* o = out.data();
    for (i64 r = 0; r < n; ++r) {
        const double* row = xd + r * k;
        double m = row[0];
        for (i64 j = 1; j < k; ++j) m = std::max(m, row[j]);
        double acc = 0;
        for (i64 j = 0; j < k; ++j) {
            o[r * k + j] = std::exp(row[j] - m);
            acc += o[r * k + j];
        }
        const double inv = 1.0 / acc;
        for (i64 j = 0; j < k; ++j) o[r * k + j] *= inv;
    }
    return out;
}

Tensor cross_entropy_mean(const Tensor& p_target, const Tensor& logits) {
    const auto& s = logits.shape();
    if (s.size() != 2 || p_target.shape() != s)
        throw ConfigError("cross_entropy_mean: expected matching [N,K]");
    const i64 n = s[0], k = s[1];
    const bool nl = tracks_grad(logits);
    auto pl = logits.impl();
    auto pt = p_target.impl();  // constant target by contract
    Tensor out = make_op(
        {1}, nl ? std::vector<Tensor>{logits} : std::vector<Tensor>{},
        [pl, pt, n, k](TensorImpl& self) {
            const double g = (*self.grad)[0] / static_cast<double>(n);
            const double* ld = pl->data->data();
            const double* pd = pt->data->data();
            double* gl = pl->ensure_grad().data();
            for (i64 r = 0; r < n; ++r) {
                const double* row = ld + r * k;
                double m = row[0];
                for (i64 j = 1; j < k; ++j) m = std::max(m, row[j]);
                double acc = 0;
                for (i64 j = 0; j < k; ++j) acc += std::exp(row[j] - m);
                const double inv = 1.0 / acc;
                for (i64 j = 0; j < k; ++j)
                    gl[r * k + j] += g * (std::exp(row[j] - m) * inv - pd[r * k + j]);
            }
        });
    const double* ld = logits.data();
    const double* pd = p_target.data();
    double acc_total = 0;
    for (i64 r = 0; r < n; ++r) {
        const double* row = ld + r * k;
        double m = row[0];
        for (i64 j = 1; j < k; ++j) m = std::max(m, row[j]);
        double acc = 0, dot = 0;
        for (i64 j = 0; j < k; ++j) {
            acc += std::exp(row[j] - m);
            dot += pd[r * k + j] * row[j];
        }
        acc_total += m + std::log(acc) - dot;
    }
    out.data()[0] = acc_total / static_cast<double>(n);
    return out;
}

}  // namespace drc
