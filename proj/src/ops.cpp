#include "changedet/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "changedet/errors.hpp"

namespace changedet::ag {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

void expect_rank(const Var& v, int rank, const char* what) {
  if (v.value().rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                     v.value().shape_str());
  }
}

void expect_same_shape(const Var& a, const Var& b, const char* what) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.value().shape_str() + " vs " +
                     b.value().shape_str());
  }
}

// Fills col (K x (p1-p0)) with the im2col patch matrix for output columns
// [p0, p1), K = Cin*kh*kw.
void im2col_chunk(const float* x, int64_t cin, int64_t h, int64_t w, int kh, int kw, int stride,
                  int pad, int64_t wo, int64_t p0, int64_t p1, float* col) {
  const int64_t pn = p1 - p0;
  for (int64_t ci = 0; ci < cin; ++ci) {
    const float* xc = x + ci * h * w;
    for (int di = 0; di < kh; ++di) {
      for (int dj = 0; dj < kw; ++dj) {
        float* row = col + ((ci * kh + di) * kw + dj) * pn;
        for (int64_t p = p0; p < p1; ++p) {
          const int64_t oy = p / wo, ox = p % wo;
          const int64_t iy = oy * stride + di - pad;
          const int64_t ix = ox * stride + dj - pad;
          row[p - p0] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? xc[iy * w + ix] : 0.0f;
        }
      }
    }
  }
}

// Scatter-adds a col chunk back into dx (the adjoint of im2col_chunk).
void col2im_chunk(const float* col, int64_t cin, int64_t h, int64_t w, int kh, int kw, int stride,
                  int pad, int64_t wo, int64_t p0, int64_t p1, float* dx) {
  const int64_t pn = p1 - p0;
  for (int64_t ci = 0; ci < cin; ++ci) {
    float* dxc = dx + ci * h * w;
    for (int di = 0; di < kh; ++di) {
      for (int dj = 0; dj < kw; ++dj) {
        const float* row = col + ((ci * kh + di) * kw + dj) * pn;
        for (int64_t p = p0; p < p1; ++p) {
          const int64_t oy = p / wo, ox = p % wo;
          const int64_t iy = oy * stride + di - pad;
          const int64_t ix = ox * stride + dj - pad;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) dxc[iy * w + ix] += row[p - p0];
        }
      }
    }
  }
}

constexpr int64_t kColChunkFloats = 1 << 21;  // ~8 MB chunk buffer

int64_t col_chunk_cols(int64_t k) { return std::max<int64_t>(256, kColChunkFloats / std::max<int64_t>(1, k)); }

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  expect_rank(x, 4, "conv2d input");
  expect_rank(w, 4, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const int64_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const int64_t cout = ws[0];
  const int kh = static_cast<int>(ws[2]), kw = static_cast<int>(ws[3]);
  if (ws[1] != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  if (b.defined() && (b.value().rank() != 1 || b.dim(0) != cout)) {
    throw ShapeError("conv2d: bias shape mismatch");
  }
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: input " + x.value().shape_str() + " too small");

  const int64_t k = cin * kh * kw;
  const int64_t pixels = ho * wo;
  const int64_t chunk = col_chunk_cols(k);

  Tensor out({n, cout, ho, wo});
  std::vector<float> col(static_cast<size_t>(k * std::min(chunk, pixels)));
  CMapMat wm(w.value().data(), cout, k);
  for (int64_t i = 0; i < n; ++i) {
    const float* xi = x.value().data() + i * cin * h * wd;
    float* yi = out.data() + i * cout * pixels;
    for (int64_t p0 = 0; p0 < pixels; p0 += chunk) {
      const int64_t p1 = std::min(pixels, p0 + chunk);
      im2col_chunk(xi, cin, h, wd, kh, kw, stride, pad, wo, p0, p1, col.data());
      CMapMat cm(col.data(), k, p1 - p0);
      StridedMap ym(yi + p0, cout, p1 - p0, Eigen::OuterStride<>(pixels));
      ym.noalias() = wm * cm;
    }
    if (b.defined()) {
      for (int64_t co = 0; co < cout; ++co) {
        const float bv = b.value()[co];
        float* row = yi + co * pixels;
        for (int64_t p = 0; p < pixels; ++p) row[p] += bv;
      }
    }
  }

  Var xv = x, wv = w, bv = b;
  const int s = stride, pd = pad;
  return make_op(std::move(out), {x, w, b.defined() ? b : Var()}, [=](Node& node) {
    const auto& g = node.grad;
    const int64_t pix = ho * wo;
    const int64_t ck = col_chunk_cols(k);
    std::vector<float> colbuf(static_cast<size_t>(k * std::min(ck, pix)));
    std::vector<float> dcol(colbuf.size());
    Tensor* dx = xv.requires_grad() ? &xv.node()->ensure_grad() : nullptr;
    Tensor* dw = wv.requires_grad() ? &wv.node()->ensure_grad() : nullptr;
    CMapMat wmat(wv.value().data(), cout, k);
    for (int64_t i = 0; i < n; ++i) {
      const float* xi = xv.value().data() + i * cin * h * wd;
      const float* gi = g.data() + i * cout * pix;
      for (int64_t p0 = 0; p0 < pix; p0 += ck) {
        const int64_t p1 = std::min(pix, p0 + ck);
        CStridedMap gm(gi + p0, cout, p1 - p0, Eigen::OuterStride<>(pix));
        if (dw) {
          im2col_chunk(xi, cin, h, wd, kh, kw, s, pd, wo, p0, p1, colbuf.data());
          CMapMat cm(colbuf.data(), k, p1 - p0);
          MapMat dwm(dw->data(), cout, k);
          dwm.noalias() += gm * cm.transpose();
        }
        if (dx) {
          MapMat dcm(dcol.data(), k, p1 - p0);
          dcm.noalias() = wmat.transpose() * gm;
          col2im_chunk(dcol.data(), cin, h, wd, kh, kw, s, pd, wo, p0, p1,
                       dx->data() + i * cin * h * wd);
        }
      }
    }
    if (bv.defined() && bv.requires_grad()) {
      Tensor& db = bv.node()->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const float* gi = g.data() + i * cout * pix;
        for (int64_t co = 0; co < cout; ++co) {
          double acc = 0.0;
          const float* row = gi + co * pix;
          for (int64_t p = 0; p < pix; ++p) acc += row[p];
          db[co] += static_cast<float>(acc);
        }
      }
    }
  });
}

Var conv_transpose2x2(const Var& x, const Var& w, const Var& b) {
  expect_rank(x, 4, "conv_transpose2x2 input");
  expect_rank(w, 4, "conv_transpose2x2 weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const int64_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  if (ws[0] != cin || ws[2] != 2 || ws[3] != 2) {
    throw ShapeError("conv_transpose2x2: weight " + w.value().shape_str() + " incompatible with input " +
                     x.value().shape_str());
  }
  const int64_t cout = ws[1];
  const int64_t ho = 2 * h, wo = 2 * wd;
  Tensor out({n, cout, ho, wo});

  // Slice weights per output offset: w_off (cin x cout) for offset (di, dj).
  auto wslice = [&](const Tensor& wt, int di, int dj) {
    RowMat m(cin, cout);
    for (int64_t ci = 0; ci < cin; ++ci)
      for (int64_t co = 0; co < cout; ++co) m(ci, co) = wt.at(ci, co, di, dj);
    return m;
  };
  RowMat wk[4] = {wslice(w.value(), 0, 0), wslice(w.value(), 0, 1), wslice(w.value(), 1, 0),
                  wslice(w.value(), 1, 1)};

  for (int64_t i = 0; i < n; ++i) {
    CMapMat xm(x.value().data() + i * cin * h * wd, cin, h * wd);
    for (int di = 0; di < 2; ++di) {
      for (int dj = 0; dj < 2; ++dj) {
        RowMat ys = wk[di * 2 + dj].transpose() * xm;  // (cout x h*wd)
        for (int64_t co = 0; co < cout; ++co) {
          const float bvv = b.defined() ? b.value()[co] : 0.0f;
          float* oc = out.data() + ((i * cout + co) * ho) * wo;
          for (int64_t y = 0; y < h; ++y) {
            const float* src = ys.data() + co * h * wd + y * wd;
            float* dst = oc + (2 * y + di) * wo + dj;
            for (int64_t z = 0; z < wd; ++z) dst[2 * z] = src[z] + bvv;
          }
        }
      }
    }
  }

  Var xv = x, wv = w, bvar = b;
  return make_op(std::move(out), {x, w, b.defined() ? b : Var()}, [=](Node& node) {
    const auto& g = node.grad;
    Tensor* dx = xv.requires_grad() ? &xv.node()->ensure_grad() : nullptr;
    Tensor* dw = wv.requires_grad() ? &wv.node()->ensure_grad() : nullptr;
    Tensor* db = (bvar.defined() && bvar.requires_grad()) ? &bvar.node()->ensure_grad() : nullptr;
    RowMat gslice(cout, h * wd);
    for (int64_t i = 0; i < n; ++i) {
      CMapMat xm(xv.value().data() + i * cin * h * wd, cin, h * wd);
      for (int di = 0; di < 2; ++di) {
        for (int dj = 0; dj < 2; ++dj) {
          for (int64_t co = 0; co < cout; ++co) {
            const float* gc = g.data() + ((i * cout + co) * ho) * wo;
            for (int64_t y = 0; y < h; ++y) {
              float* dst = gslice.data() + co * h * wd + y * wd;
              const float* src = gc + (2 * y + di) * wo + dj;
              for (int64_t z = 0; z < wd; ++z) dst[z] = src[2 * z];
            }
          }
          const RowMat& wmat = wk[di * 2 + dj];
          if (dx) {
            MapMat dxm(dx->data() + i * cin * h * wd, cin, h * wd);
            dxm.noalias() += wmat * gslice;
          }
          if (dw) {
            RowMat dwk = xm * gslice.transpose();  // (cin x cout)
            for (int64_t ci = 0; ci < cin; ++ci)
              for (int64_t co = 0; co < cout; ++co) dw->at(ci, co, di, dj) += dwk(ci, co);
          }
          if (db) {
            for (int64_t co = 0; co < cout; ++co) {
              double acc = 0.0;
              const float* row = gslice.data() + co * h * wd;
              for (int64_t z = 0; z < h * wd; ++z) acc += row[z];
              (*db)[co] += static_cast<float>(acc);
            }
          }
        }
      }
    }
  });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, float momentum, float eps) {
  expect_rank(x, 4, "batch_norm2d input");
  const auto& xs = x.shape();
  const int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  if (gamma.dim(0) != c || beta.dim(0) != c || running_mean.dim(0) != c || running_var.dim(0) != c) {
    throw ShapeError("batch_norm2d: parameter size mismatch for " + std::to_string(c) + " channels");
  }
  const int64_t m = n * h * w;
  const int64_t plane = h * w;

  Tensor mean({c}), var({c});
  if (training) {
    for (int64_t ci = 0; ci < c; ++ci) {
      double s = 0.0, s2 = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const float* p = x.value().data() + (i * c + ci) * plane;
        for (int64_t z = 0; z < plane; ++z) {
          s += p[z];
          s2 += static_cast<double>(p[z]) * p[z];
        }
      }
      const double mu = s / static_cast<double>(m);
      mean[ci] = static_cast<float>(mu);
      var[ci] = static_cast<float>(std::max(0.0, s2 / static_cast<double>(m) - mu * mu));
    }
    const double unbias = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
    for (int64_t ci = 0; ci < c; ++ci) {
      running_mean[ci] = (1.0f - momentum) * running_mean[ci] + momentum * mean[ci];
      running_var[ci] =
          (1.0f - momentum) * running_var[ci] + momentum * static_cast<float>(var[ci] * unbias);
    }
  } else {
    mean = running_mean;
    var = running_var;
  }

  Tensor xhat({n, c, h, w});
  Tensor out({n, c, h, w});
  std::vector<float> inv_std(static_cast<size_t>(c));
  for (int64_t ci = 0; ci < c; ++ci) inv_std[static_cast<size_t>(ci)] = 1.0f / std::sqrt(var[ci] + eps);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ci = 0; ci < c; ++ci) {
      const float mu = mean[ci], is = inv_std[static_cast<size_t>(ci)];
      const float gm = gamma.value()[ci], bt = beta.value()[ci];
      const float* p = x.value().data() + (i * c + ci) * plane;
      float* ph = xhat.data() + (i * c + ci) * plane;
      float* po = out.data() + (i * c + ci) * plane;
      for (int64_t z = 0; z < plane; ++z) {
        const float xh = (p[z] - mu) * is;
        ph[z] = xh;
        po[z] = gm * xh + bt;
      }
    }
  }

  Var xv = x, gv = gamma, bv = beta;
  auto xhat_keep = std::make_shared<Tensor>(std::move(xhat));
  auto istd_keep = std::make_shared<std::vector<float>>(std::move(inv_std));
  const bool train_mode = training;
  return make_op(std::move(out), {x, gamma, beta}, [=](Node& node) {
    const auto& g = node.grad;
    Tensor* dg = gv.requires_grad() ? &gv.node()->ensure_grad() : nullptr;
    Tensor* db = bv.requires_grad() ? &bv.node()->ensure_grad() : nullptr;
    Tensor* dx = xv.requires_grad() ? &xv.node()->ensure_grad() : nullptr;
    for (int64_t ci = 0; ci < c; ++ci) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const float* pg = g.data() + (i * c + ci) * plane;
        const float* ph = xhat_keep->data() + (i * c + ci) * plane;
        for (int64_t z = 0; z < plane; ++z) {
          sum_g += pg[z];
          sum_gx += static_cast<double>(pg[z]) * ph[z];
        }
      }
      if (db) (*db)[ci] += static_cast<float>(sum_g);
      if (dg) (*dg)[ci] += static_cast<float>(sum_gx);
      if (dx) {
        const float gm = gv.value()[ci];
        const float is = (*istd_keep)[static_cast<size_t>(ci)];
        if (train_mode) {
          const float mg = static_cast<float>(sum_g / static_cast<double>(m));
          const float mgx = static_cast<float>(sum_gx / static_cast<double>(m));
          for (int64_t i = 0; i < n; ++i) {
            const float* pg = g.data() + (i * c + ci) * plane;
            const float* ph = xhat_keep->data() + (i * c + ci) * plane;
            float* pd = dx->data() + (i * c + ci) * plane;
            for (int64_t z = 0; z < plane; ++z) pd[z] += gm * is * (pg[z] - mg - ph[z] * mgx);
          }
        } else {
          for (int64_t i = 0; i < n; ++i) {
            const float* pg = g.data() + (i * c + ci) * plane;
            float* pd = dx->data() + (i * c + ci) * plane;
            for (int64_t z = 0; z < plane; ++z) pd[z] += gm * is * pg[z];
          }
        }
      }
    }
  });
}

Var relu(const Var& x) {
  Tensor out(x.shape());
  const auto& v = x.value();
  for (int64_t i = 0; i < v.numel(); ++i) out[i] = v[i] > 0.0f ? v[i] : 0.0f;
  Var xv = x;
  return make_op(std::move(out), {x}, [xv](Node& node) {
    if (!xv.requires_grad()) return;
    Tensor& dx = xv.node()->ensure_grad();
    const Tensor& v = xv.value();
    for (int64_t i = 0; i < v.numel(); ++i)
      if (v[i] > 0.0f) dx[i] += node.grad[i];
  });
}

Var sigmoid(const Var& x) {
  Tensor out(x.shape());
  const auto& v = x.value();
  for (int64_t i = 0; i < v.numel(); ++i) {
    const float z = v[i];
    out[i] = z >= 0.0f ? 1.0f / (1.0f + std::exp(-z)) : std::exp(z) / (1.0f + std::exp(z));
  }
  Var xv = x;
  auto keep = std::make_shared<Tensor>(out);
  return make_op(std::move(out), {x}, [xv, keep](Node& node) {
    if (!xv.requires_grad()) return;
    Tensor& dx = xv.node()->ensure_grad();
    for (int64_t i = 0; i < keep->numel(); ++i) {
      const float s = (*keep)[i];
      dx[i] += node.grad[i] * s * (1.0f - s);
    }
  });
}

Var softmax_channels(const Var& x) {
  expect_rank(x, 4, "softmax_channels input");
  const auto& xs = x.shape();
  const int64_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  Tensor out(x.shape());
  const auto& v = x.value();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t z = 0; z < plane; ++z) {
      const int64_t base = i * c * plane + z;
      float mx = v[base];
      for (int64_t ci = 1; ci < c; ++ci) mx = std::max(mx, v[base + ci * plane]);
      double denom = 0.0;
      for (int64_t ci = 0; ci < c; ++ci) {
        const float e = std::exp(v[base + ci * plane] - mx);
        out[base + ci * plane] = e;
        denom += e;
      }
      const float inv = static_cast<float>(1.0 / denom);
      for (int64_t ci = 0; ci < c; ++ci) out[base + ci * plane] *= inv;
    }
  }
  Var xv = x;
  auto keep = std::make_shared<Tensor>(out);
  return make_op(std::move(out), {x}, [=](Node& node) {
    if (!xv.requires_grad()) return;
    Tensor& dx = xv.node()->ensure_grad();
    const Tensor& p = *keep;
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t z = 0; z < plane; ++z) {
        const int64_t base = i * c * plane + z;
        double dot = 0.0;
        for (int64_t ci = 0; ci < c; ++ci)
          dot += static_cast<double>(node.grad[base + ci * plane]) * p[base + ci * plane];
        for (int64_t ci = 0; ci < c; ++ci) {
          const int64_t k = base + ci * plane;
          dx[k] += p[k] * (node.grad[k] - static_cast<float>(dot));
        }
      }
    }
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input list");
  const auto& s0 = xs[0].shape();
  int64_t ctotal = 0;
  for (const auto& v : xs) {
    expect_rank(v, 4, "concat_channels input");
    const auto& s = v.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_channels: incompatible shapes " + xs[0].value().shape_str() + " vs " +
                       v.value().shape_str());
    }
    ctotal += s[1];
  }
  const int64_t n = s0[0], plane = s0[2] * s0[3];
  Tensor out({n, ctotal, s0[2], s0[3]});
  for (int64_t i = 0; i < n; ++i) {
    int64_t coff = 0;
    for (const auto& v : xs) {
      const int64_t ci = v.dim(1);
      std::memcpy(out.data() + (i * ctotal + coff) * plane, v.value().data() + i * ci * plane,
                  static_cast<size_t>(ci * plane) * sizeof(float));
      coff += ci;
    }
  }
  std::vector<Var> keep = xs;
  return make_op(std::move(out), xs, [keep, n, ctotal, plane](Node& node) {
    for (int64_t i = 0; i < n; ++i) {
      int64_t coff = 0;
      for (const auto& v : keep) {
        const int64_t ci = v.dim(1);
        if (v.requires_grad()) {
          Tensor& dx = v.node()->ensure_grad();
          const float* src = node.grad.data() + (i * ctotal + coff) * plane;
          float* dst = dx.data() + i * ci * plane;
          for (int64_t z = 0; z < ci * plane; ++z) dst[z] += src[z];
        }
        coff += ci;
      }
    }
  });
}

Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
  expect_rank(x, 4, "upsample_bilinear input");
  const auto& xs = x.shape();
  const int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  if (out_h <= 0 || out_w <= 0) throw ShapeError("upsample_bilinear: non-positive output size");
  Tensor out({n, c, out_h, out_w});
  const double sy = out_h > 1 ? static_cast<double>(h - 1) / static_cast<double>(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(w - 1) / static_cast<double>(out_w - 1) : 0.0;

  // Precompute the sampling lattice once per resize.
  std::vector<int64_t> y0(static_cast<size_t>(out_h)), x0(static_cast<size_t>(out_w));
  std::vector<float> wy(static_cast<size_t>(out_h)), wx(static_cast<size_t>(out_w));
  for (int64_t oy = 0; oy < out_h; ++oy) {
    const double fy = oy * sy;
    int64_t iy = static_cast<int64_t>(fy);
    if (iy > h - 1) iy = h - 1;
    y0[static_cast<size_t>(oy)] = iy;
    wy[static_cast<size_t>(oy)] = iy < h - 1 ? static_cast<float>(fy - iy) : 0.0f;
  }
  for (int64_t ox = 0; ox < out_w; ++ox) {
    const double fx = ox * sx;
    int64_t ix = static_cast<int64_t>(fx);
    if (ix > w - 1) ix = w - 1;
    x0[static_cast<size_t>(ox)] = ix;
    wx[static_cast<size_t>(ox)] = ix < w - 1 ? static_cast<float>(fx - ix) : 0.0f;
  }

  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ci = 0; ci < c; ++ci) {
      const float* src = x.value().data() + (i * c + ci) * h * w;
      float* dst = out.data() + (i * c + ci) * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const int64_t iy = y0[static_cast<size_t>(oy)];
        const float fy = wy[static_cast<size_t>(oy)];
        const int64_t iy1 = fy > 0.0f ? iy + 1 : iy;
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const int64_t ix = x0[static_cast<size_t>(ox)];
          const float fx = wx[static_cast<size_t>(ox)];
          const int64_t ix1 = fx > 0.0f ? ix + 1 : ix;
          const float v00 = src[iy * w + ix], v01 = src[iy * w + ix1];
          const float v10 = src[iy1 * w + ix], v11 = src[iy1 * w + ix1];
          dst[oy * out_w + ox] = (1.0f - fy) * ((1.0f - fx) * v00 + fx * v01) +
                                 fy * ((1.0f - fx) * v10 + fx * v11);
        }
      }
    }
  }

  Var xv = x;
  auto ky0 = std::make_shared<std::vector<int64_t>>(std::move(y0));
  auto kx0 = std::make_shared<std::vector<int64_t>>(std::move(x0));
  auto kwy = std::make_shared<std::vector<float>>(std::move(wy));
  auto kwx = std::make_shared<std::vector<float>>(std::move(wx));
  return make_op(std::move(out), {x}, [=](Node& node) {
    if (!xv.requires_grad()) return;
    Tensor& dx = xv.node()->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t ci = 0; ci < c; ++ci) {
        float* d = dx.data() + (i * c + ci) * h * w;
        const float* g = node.grad.data() + (i * c + ci) * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
          const int64_t iy = (*ky0)[static_cast<size_t>(oy)];
          const float fy = (*kwy)[static_cast<size_t>(oy)];
          const int64_t iy1 = fy > 0.0f ? iy + 1 : iy;
          for (int64_t ox = 0; ox < out_w; ++ox) {
            const int64_t ix = (*kx0)[static_cast<size_t>(ox)];
            const float fx = (*kwx)[static_cast<size_t>(ox)];
            const int64_t ix1 = fx > 0.0f ? ix + 1 : ix;
            const float gv = g[oy * out_w + ox];
            d[iy * w + ix] += (1.0f - fy) * (1.0f - fx) * gv;
            d[iy * w + ix1] += (1.0f - fy) * fx * gv;
            d[iy1 * w + ix] += fy * (1.0f - fx) * gv;
            d[iy1 * w + ix1] += fy * fx * gv;
          }
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  expect_rank(x, 4, "global_avg_pool input");
  const auto& xs = x.shape();
  const int64_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  Tensor out({n, c});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      const float* p = x.value().data() + (i * c + ci) * plane;
      for (int64_t z = 0; z < plane; ++z) acc += p[z];
      out[i * c + ci] = static_cast<float>(acc / static_cast<double>(plane));
    }
  }
  Var xv = x;
  return make_op(std::move(out), {x}, [xv, n, c, plane](Node& node) {
    if (!xv.requires_grad()) return;
    Tensor& dx = xv.node()->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t ci = 0; ci < c; ++ci) {
        const float g = node.grad[i * c + ci] / static_cast<float>(plane);
        float* d = dx.data() + (i * c + ci) * plane;
        for (int64_t z = 0; z < plane; ++z) d[z] += g;
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  expect_rank(x, 2, "linear input");
  expect_rank(w, 2, "linear weight");
  const int64_t n = x.dim(0), f = x.dim(1), o = w.dim(0);
  if (w.dim(1) != f) throw ShapeError("linear: weight/input feature mismatch");
  Tensor out({n, o});
  CMapMat xm(x.value().data(), n, f);
  CMapMat wm(w.value().data(), o, f);
  MapMat ym(out.data(), n, o);
  ym.noalias() = xm * wm.transpose();
  if (b.defined()) {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < o; ++j) out[i * o + j] += b.value()[j];
  }
  Var xv = x, wv = w, bv = b;
  return make_op(std::move(out), {x, w, b.defined() ? b : Var()}, [=](Node& node) {
    CMapMat gm(node.grad.data(), n, o);
    if (xv.requires_grad()) {
      MapMat dxm(xv.node()->ensure_grad().data(), n, f);
      CMapMat wm2(wv.value().data(), o, f);
      dxm.noalias() += gm * wm2;
    }
    if (wv.requires_grad()) {
      MapMat dwm(wv.node()->ensure_grad().data(), o, f);
      CMapMat xm2(xv.value().data(), n, f);
      dwm.noalias() += gm.transpose() * xm2;
    }
    if (bv.defined() && bv.requires_grad()) {
      Tensor& db = bv.node()->ensure_grad();
      for (int64_t j = 0; j < o; ++j) {
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += node.grad[i * o + j];
        db[j] += static_cast<float>(acc);
      }
    }
  });
}

Var channel_scale(const Var& x, const Var& s) {
  expect_rank(x, 4, "channel_scale input");
  expect_rank(s, 2, "channel_scale gate");
  const auto& xs = x.shape();
  const int64_t n = xs[0], c = xs[1], plane = xs[2] * xs[3];
  if (s.dim(0) != n || s.dim(1) != c) throw ShapeError("channel_scale: gate shape mismatch");
  Tensor out(x.shape());
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ci = 0; ci < c; ++ci) {
      const float sv = s.value()[i * c + ci];
      const float* p = x.value().data() + (i * c + ci) * plane;
      float* po = out.data() + (i * c + ci) * plane;
      for (int64_t z = 0; z < plane; ++z) po[z] = p[z] * sv;
    }
  }
  Var xv = x, sv = s;
  return make_op(std::move(out), {x, s}, [=](Node& node) {
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t ci = 0; ci < c; ++ci) {
        const float* g = node.grad.data() + (i * c + ci) * plane;
        if (xv.requires_grad()) {
          const float gate = sv.value()[i * c + ci];
          float* d = xv.node()->ensure_grad().data() + (i * c + ci) * plane;
          for (int64_t z = 0; z < plane; ++z) d[z] += g[z] * gate;
        }
        if (sv.requires_grad()) {
          const float* p = xv.value().data() + (i * c + ci) * plane;
          double acc = 0.0;
          for (int64_t z = 0; z < plane; ++z) acc += static_cast<double>(g[z]) * p[z];
          sv.node()->ensure_grad()[i * c + ci] += static_cast<float>(acc);
        }
      }
    }
  });
}

Var add(const Var& a, const Var& b) {
  expect_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  Var av = a, bv = b;
  return make_op(std::move(out), {a, b}, [av, bv](Node& node) {
    for (const Var& v : {av, bv}) {
      if (!v.requires_grad()) continue;
      Tensor& d = v.node()->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += node.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  expect_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  Var av = a, bv = b;
  return make_op(std::move(out), {a, b}, [av, bv](Node& node) {
    if (av.requires_grad()) {
      Tensor& d = av.node()->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += node.grad[i] * bv.value()[i];
    }
    if (bv.requires_grad()) {
      Tensor& d = bv.node()->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += node.grad[i] * av.value()[i];
    }
  });
}

Var emax(const Var& a, const Var& b) {
  expect_same_shape(a, b, "emax");
  Tensor out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(a.value()[i], b.value()[i]);
  Var av = a, bv = b;
  return make_op(std::move(out), {a, b}, [av, bv](Node& node) {
    for (int64_t i = 0; i < node.grad.numel(); ++i) {
      if (av.value()[i] >= bv.value()[i]) {
        if (av.requires_grad()) av.node()->ensure_grad()[i] += node.grad[i];
      } else if (bv.requires_grad()) {
        bv.node()->ensure_grad()[i] += node.grad[i];
      }
    }
  });
}

Var sum_all(const Var& x) {
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.value()[i];
  Tensor out({1}, static_cast<float>(acc));
  Var xv = x;
  return make_op(std::move(out), {x}, [xv](Node& node) {
    if (!xv.requires_grad()) return;
    Tensor& d = xv.node()->ensure_grad();
    const float g = node.grad[0];
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += g;
  });
}

Var scale(const Var& x, float c) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * c;
  Var xv = x;
  return make_op(std::move(out), {x}, [xv, c](Node& node) {
    if (!xv.requires_grad()) return;
    Tensor& d = xv.node()->ensure_grad();
    for (int64_t i = 0; i < d.numel(); ++i) d[i] += node.grad[i] * c;
  });
}

Var mul_scalar_var(const Var& x, const Var& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar_var: scale must be a scalar");
  const float sv = s.value()[0];
  Tensor out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * sv;
  Var xv = x, svar = s;
  return make_op(std::move(out), {x, s}, [xv, svar](Node& node) {
    if (xv.requires_grad()) {
      const float sc = svar.value()[0];
      Tensor& d = xv.node()->ensure_grad();
      for (int64_t i = 0; i < d.numel(); ++i) d[i] += node.grad[i] * sc;
    }
    if (svar.requires_grad()) {
      double acc = 0.0;
      for (int64_t i = 0; i < node.grad.numel(); ++i)
        acc += static_cast<double>(node.grad[i]) * xv.value()[i];
      svar.node()->ensure_grad()[0] += static_cast<float>(acc);
    }
  });
}

Var sub_from(float c, const Var& x) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = c - x.value()[i];
  Var xv = x;
  return make_op(std::move(out), {x}, [xv](Node& node) {
    if (!xv.requires_grad()) return;
    Tensor& d = xv.node()->ensure_grad();
    for (int64_t i = 0; i < d.numel(); ++i) d[i] -= node.grad[i];
  });
}

Var bce_mean(const Var& p, const Tensor& target, float clamp_eps) {
  if (!p.value().same_shape(target)) {
    throw ShapeError("bce_mean: prediction " + p.value().shape_str() + " vs target " +
                     target.shape_str());
  }
  const int64_t m = target.numel();
  if (m == 0) throw ShapeError("bce_mean: empty tensors");
  for (int64_t i = 0; i < m; ++i) {
    if (target[i] != 0.0f && target[i] != 1.0f) {
      throw DomainError("bce_mean: target contains non-binary value " + std::to_string(target[i]));
    }
  }
  const float lo = clamp_eps, hi = 1.0f - clamp_eps;
  double acc = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    const float pc = std::clamp(p.value()[i], lo, hi);
    acc -= target[i] == 1.0f ? std::log(static_cast<double>(pc))
                             : std::log(1.0 - static_cast<double>(pc));
  }
  Tensor out({1}, static_cast<float>(acc / static_cast<double>(m)));
  Var pv = p;
  auto tgt = std::make_shared<Tensor>(target);
  return make_op(std::move(out), {p}, [pv, tgt, m, lo, hi](Node& node) {
    if (!pv.requires_grad()) return;
    const float g = node.grad[0] / static_cast<float>(m);
    Tensor& d = pv.node()->ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      const float praw = pv.value()[i];
      if (praw <= lo || praw >= hi) continue;  // clamped region: flat loss
      d[i] += g * ((*tgt)[i] == 1.0f ? -1.0f / praw : 1.0f / (1.0f - praw));
    }
  });
}

Var ce_mean(const Var& probs, const Tensor& target, float clamp_eps) {
  expect_rank(probs, 4, "ce_mean probabilities");
  const auto& ps = probs.shape();
  const int64_t n = ps[0], k = ps[1], plane = ps[2] * ps[3];
  if (target.rank() != 3 || target.dim(0) != n || target.dim(1) != ps[2] || target.dim(2) != ps[3]) {
    throw ShapeError("ce_mean: target " + target.shape_str() + " incompatible with probabilities " +
                     probs.value().shape_str());
  }
  const int64_t m = n * plane;
  const float lo = clamp_eps, hi = 1.0f - clamp_eps;
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t z = 0; z < plane; ++z) {
      const float tv = target[i * plane + z];
      const auto cls = static_cast<int64_t>(tv);
      if (tv != static_cast<float>(cls) || cls < 0 || cls >= k) {
        throw DomainError("ce_mean: target class " + std::to_string(tv) + " outside [0, " +
                          std::to_string(k) + ")");
      }
      const float pc = std::clamp(probs.value()[(i * k + cls) * plane + z], lo, hi);
      acc -= std::log(static_cast<double>(pc));
    }
  }
  Tensor out({1}, static_cast<float>(acc / static_cast<double>(m)));
  Var pv = probs;
  auto tgt = std::make_shared<Tensor>(target);
  return make_op(std::move(out), {probs}, [pv, tgt, n, k, plane, m, lo, hi](Node& node) {
    if (!pv.requires_grad()) return;
    const float g = node.grad[0] / static_cast<float>(m);
    Tensor& d = pv.node()->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t z = 0; z < plane; ++z) {
        const auto cls = static_cast<int64_t>((*tgt)[i * plane + z]);
        const int64_t idx = (i * k + cls) * plane + z;
        const float praw = pv.value()[idx];
        if (praw <= lo || praw >= hi) continue;
        d[idx] -= g / praw;
      }
    }
  });
}

}  // namespace changedet::ag
