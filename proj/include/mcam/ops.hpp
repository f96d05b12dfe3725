#pragma once

// Differentiable array operations.  Every op validates shapes up front,
// computes its forward result eagerly, and (when the graph is recording and
// some input requires grad) registers a backward closure that accumulates
// into input gradients.  Convolution and the linear map lower to GEMM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mcam/graph.hpp"
#include "mcam/mathkit.hpp"
#include "mcam/tensor.hpp"

namespace mcam {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// Finite-scan an input tensor the first time this graph sees its buffer;
// later ops reading the same (immutable-within-the-graph) tensor skip the
// rescan.
inline void check_finite_once(Graph& g, const Tensor& t, const char* op, const char* arg) {
  if (g.first_sight(t)) check_finite(t, op, arg);
}

// Scatters a same-padded dilated patch matrix: cols holds rows of length H*W
// where row ((ci*kh)+u)*kw+v is input channel ci shifted by the (u,v) tap.
// `pitch` is the distance (in doubles) between consecutive rows, which lets
// several samples share one wide matrix of pitch = samples * H*W.
inline void im2col(const double* in, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                   int64_t dilation, double* cols, int64_t pitch) {
  const int64_t ch = (kh - 1) / 2, cw = (kw - 1) / 2;
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t u = 0; u < kh; ++u) {
      const int64_t dy = (u - ch) * dilation;
      for (int64_t v = 0; v < kw; ++v) {
        const int64_t dx = (v - cw) * dilation;
        double* dst = cols + ((ci * kh + u) * kw + v) * pitch;
        const int64_t x0 = std::max<int64_t>(0, -dx);      // valid output cols
        const int64_t x1 = std::min<int64_t>(w, w - dx);
        for (int64_t y = 0; y < h; ++y) {
          double* drow = dst + y * w;
          const int64_t iy = y + dy;
          if (iy < 0 || iy >= h || x0 >= x1) {
            std::fill(drow, drow + w, 0.0);
            continue;
          }
          const double* srow = in + (ci * h + iy) * w;
          std::fill(drow, drow + x0, 0.0);
          std::copy(srow + x0 + dx, srow + x1 + dx, drow + x0);
          std::fill(drow + x1, drow + w, 0.0);
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates patch-matrix gradients back onto the image.
inline void col2im_add(const double* cols, int64_t cin, int64_t h, int64_t w, int64_t kh,
                       int64_t kw, int64_t dilation, double* din, int64_t pitch) {
  const int64_t ch = (kh - 1) / 2, cw = (kw - 1) / 2;
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t u = 0; u < kh; ++u) {
      const int64_t dy = (u - ch) * dilation;
      for (int64_t v = 0; v < kw; ++v) {
        const int64_t dx = (v - cw) * dilation;
        const double* src = cols + ((ci * kh + u) * kw + v) * pitch;
        const int64_t x0 = std::max<int64_t>(0, -dx);
        const int64_t x1 = std::min<int64_t>(w, w - dx);
        if (x0 >= x1) continue;
        for (int64_t y = 0; y < h; ++y) {
          const int64_t iy = y + dy;
          if (iy < 0 || iy >= h) continue;
          double* drow = din + (ci * h + iy) * w + dx;
          const double* srow = src + y * w;
          for (int64_t x = x0; x < x1; ++x) drow[x] += srow[x];
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution over [N, Cin, H, W] with an odd [Cout, Cin, kh, kw] kernel,
// zero ("same") padding and uniform dilation; output is [N, Cout, H, W].
inline Tensor conv2d(Graph& g, const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     int64_t dilation) {
  detail::check(input.ndim() == 4, "conv2d: input must be [N,Cin,H,W], got " + shape_str(input.shape()));
  detail::check(kernel.ndim() == 4, "conv2d: kernel must be [Cout,Cin,kh,kw], got " + shape_str(kernel.shape()));
  detail::check(bias.ndim() == 1, "conv2d: bias must be [Cout], got " + shape_str(bias.shape()));
  const int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  detail::check(kernel.dim(1) == cin, "conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                                          " input channels, input has " + std::to_string(cin));
  detail::check(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd, got " +
                                                std::to_string(kh) + "x" + std::to_string(kw));
  detail::check(bias.dim(0) == cout, "conv2d: bias length " + std::to_string(bias.dim(0)) +
                                         " != output channels " + std::to_string(cout));
  detail::check(dilation >= 1, "conv2d: dilation must be >= 1, got " + std::to_string(dilation));
  detail::check_finite_once(g, input, "conv2d", "input");
  detail::check_finite(kernel, "conv2d", "kernel");
  detail::check_finite(bias, "conv2d", "bias");

  const int64_t hw = h * w, ckk = cin * kh * kw;
  const bool pointwise = (kh == 1 && kw == 1);
  const bool recording = detail::grad_needed(g, {&input, &kernel, &bias});
  // The kernel gradient is a GEMM against the very patch matrices the forward
  // builds, so when one is coming they are kept for the backward sweep
  // instead of being rebuilt sample by sample.
  const bool keep_cols = recording && !pointwise && kernel.requires_grad();
  std::shared_ptr<double[]> cols_cache;
  if (keep_cols) cols_cache.reset(new double[static_cast<size_t>(n * ckk * hw)]);

  Tensor out = Tensor::uninitialized({n, cout, h, w});
  {
    detail::ConstMatMap kmat(kernel.data().data(), cout, ckk);
    detail::ConstVecMap bvec(bias.data().data(), cout);
    if (pointwise) {
      // A 1x1 kernel needs no patch matrix: each sample's channel block is
      // multiplied in place.
      for (int64_t i = 0; i < n; ++i) {
        detail::ConstMatMap xmat(input.data().data() + i * cin * hw, cin, hw);
        detail::MatMap omat(out.data().data() + i * cout * hw, cout, hw);
        omat.noalias() = kmat * xmat;
        omat.colwise() += bvec;
      }
    } else {
      // One patch matrix per sample: it stays cache-resident, which beats a
      // single batch-wide GEMM that would stream operands from memory.
      auto scratch = std::make_unique_for_overwrite<double[]>(
          keep_cols ? 0 : static_cast<size_t>(ckk * hw));
      for (int64_t i = 0; i < n; ++i) {
        double* cols = keep_cols ? cols_cache.get() + i * ckk * hw : scratch.get();
        detail::im2col(input.data().data() + i * cin * hw, cin, h, w, kh, kw, dilation, cols, hw);
        detail::ConstMatMap cmat(cols, ckk, hw);
        detail::MatMap omat(out.data().data() + i * cout * hw, cout, hw);
        omat.noalias() = kmat * cmat;
        omat.colwise() += bvec;
      }
    }
  }

  if (recording) {
    out.set_requires_grad(true);
    Tensor in_c = input, k_c = kernel, b_c = bias, out_c = out;
    g.record(
        {input, kernel, bias}, out,
        [in_c, k_c, b_c, out_c, cols_cache, n, cin, cout, h, w, kh, kw, hw, ckk, dilation,
         pointwise]() mutable {
          detail::ConstMatMap kmat(k_c.data().data(), cout, ckk);
          const bool need_dk = k_c.requires_grad();
          const bool need_dx = in_c.requires_grad();
          if (b_c.requires_grad()) {
            // Sequential per-channel sums: Eigen's redux splits the sum
            // based on runtime pointer alignment, which makes the rounding
            // depend on heap addresses and breaks bit-reproducibility.
            double* db = b_c.grad().data();
            const double* gp = out_c.grad().data();
            for (int64_t i = 0; i < n; ++i)
              for (int64_t c = 0; c < cout; ++c) {
                double s = 0.0;
                const double* row = gp + (i * cout + c) * hw;
                for (int64_t t = 0; t < hw; ++t) s += row[t];
                db[c] += s;
              }
          }
          if (pointwise) {
            double* dxp = nullptr;
            bool dx_fresh = false;
            if (need_dx) {
              auto [buf, fresh] = in_c.grad_sink();
              dxp = buf.data();
              dx_fresh = fresh;  // every block below is written, so a fresh
                                 // buffer can be stored into directly
            }
            for (int64_t i = 0; i < n; ++i) {
              detail::ConstMatMap gmat(out_c.grad().data() + i * cout * hw, cout, hw);
              if (need_dk) {
                detail::MatMap dk(k_c.grad().data(), cout, ckk);
                detail::ConstMatMap xmat(in_c.data().data() + i * cin * hw, cin, hw);
                dk.noalias() += gmat * xmat.transpose();
              }
              if (need_dx) {
                detail::MatMap dx(dxp + i * cin * hw, cin, hw);
                if (dx_fresh)
                  dx.noalias() = kmat.transpose() * gmat;
                else
                  dx.noalias() += kmat.transpose() * gmat;
              }
            }
          } else if (need_dk || need_dx) {
            const size_t cols_len = static_cast<size_t>(ckk * hw);
            const bool rebuild = need_dk && !cols_cache;
            auto cols = std::make_unique_for_overwrite<double[]>(rebuild ? cols_len : 0);
            auto dcols = std::make_unique_for_overwrite<double[]>(need_dx ? cols_len : 0);
            for (int64_t i = 0; i < n; ++i) {
              detail::ConstMatMap gmat(out_c.grad().data() + i * cout * hw, cout, hw);
              if (need_dk) {
                const double* cp = cols_cache ? cols_cache.get() + i * ckk * hw : cols.get();
                if (rebuild)
                  detail::im2col(in_c.data().data() + i * cin * hw, cin, h, w, kh, kw, dilation,
                                 cols.get(), hw);
                detail::MatMap dk(k_c.grad().data(), cout, ckk);
                dk.noalias() += gmat * detail::ConstMatMap(cp, ckk, hw).transpose();
              }
              if (need_dx) {
                detail::MatMap dc(dcols.get(), ckk, hw);
                dc.noalias() = kmat.transpose() * gmat;
                detail::col2im_add(dcols.get(), cin, h, w, kh, kw, dilation,
                                   in_c.grad().data() + i * cin * hw, hw);
              }
            }
          }
        },
        "conv2d");
  }
  return out;
}

// Affine map: x [N,Din] with weight [Dout,Din], bias [Dout] -> [N,Dout].
inline Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::check(x.ndim() == 2, "linear: input must be [N,Din], got " + shape_str(x.shape()));
  detail::check(weight.ndim() == 2, "linear: weight must be [Dout,Din], got " + shape_str(weight.shape()));
  detail::check(bias.ndim() == 1, "linear: bias must be [Dout], got " + shape_str(bias.shape()));
  const int64_t n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  detail::check(weight.dim(1) == din, "linear: weight expects " + std::to_string(weight.dim(1)) +
                                          " inputs, x has " + std::to_string(din));
  detail::check(bias.dim(0) == dout, "linear: bias length " + std::to_string(bias.dim(0)) +
                                         " != outputs " + std::to_string(dout));
  detail::check_finite(x, "linear", "input");
  detail::check_finite(weight, "linear", "weight");
  detail::check_finite(bias, "linear", "bias");

  Tensor out = Tensor::uninitialized({n, dout});
  {
    detail::ConstMatMap xm(x.data().data(), n, din);
    detail::ConstMatMap wm(weight.data().data(), dout, din);
    detail::MatMap om(out.data().data(), n, dout);
    om.noalias() = xm * wm.transpose();
    om.rowwise() += detail::ConstVecMap(bias.data().data(), dout).transpose();
  }

  if (detail::grad_needed(g, {&x, &weight, &bias})) {
    out.set_requires_grad(true);
    Tensor x_c = x, w_c = weight, b_c = bias, out_c = out;
    g.record(
        {x, weight, bias}, out,
        [x_c, w_c, b_c, out_c, n, din, dout]() mutable {
          detail::ConstMatMap gm(out_c.grad().data(), n, dout);
          if (x_c.requires_grad()) {
            auto [dxs, fresh] = x_c.grad_sink();
            detail::MatMap dx(dxs.data(), n, din);
            detail::ConstMatMap wm(w_c.data().data(), dout, din);
            if (fresh)
              dx.noalias() = gm * wm;
            else
              dx.noalias() += gm * wm;
          }
          if (w_c.requires_grad()) {
            detail::MatMap dw(w_c.grad().data(), dout, din);
            detail::ConstMatMap xm(x_c.data().data(), n, din);
            dw.noalias() += gm.transpose() * xm;
          }
          if (b_c.requires_grad()) {
            // Row-order accumulation for the same bit-reproducibility reason
            // as the conv2d bias gradient.
            double* db = b_c.grad().data();
            const double* gp = out_c.grad().data();
            for (int64_t r = 0; r < n; ++r)
              for (int64_t c = 0; c < dout; ++c) db[c] += gp[r * dout + c];
          }
        },
        "linear");
  }
  return out;
}

namespace detail {

// Shared scaffolding for elementwise unary ops: y[i] = f(x[i]) with
// dx[i] += dy[i] * dfdx(i) where dfdx may read captured tensors.
template <typename Fwd, typename Bwd>
Tensor unary_elementwise(Graph& g, const Tensor& x, const char* name, Fwd fwd, Bwd make_bwd) {
  Tensor out = Tensor::uninitialized(x.shape());
  fwd(x.data().data(), out.data().data(), x.numel());
  if (detail::grad_needed(g, {&x})) {
    out.set_requires_grad(true);
    g.record({x}, out, make_bwd(x, out), name);
  }
  return out;
}

}  // namespace detail

inline Tensor sigmoid(Graph& g, const Tensor& x) {
  return detail::unary_elementwise(
      g, x, "sigmoid", [](const double* in, double* o, int64_t n) { detail::sigmoid_kernel(in, o, n); },
      [](Tensor x, Tensor out) {
        return [x, out]() mutable {
          auto go = out.grad();
          auto s = out.data();
          auto [dx, fresh] = x.grad_sink();
          if (fresh)
            for (int64_t i = 0; i < x.numel(); ++i) dx[i] = go[i] * s[i] * (1.0 - s[i]);
          else
            for (int64_t i = 0; i < x.numel(); ++i) dx[i] += go[i] * s[i] * (1.0 - s[i]);
        };
      });
}

inline Tensor leaky_relu(Graph& g, const Tensor& x, double negative_slope = 0.1) {
  return detail::unary_elementwise(
      g, x, "leaky_relu",
      [negative_slope](const double* in, double* o, int64_t n) {
        detail::leaky_relu_kernel(in, o, n, negative_slope);
      },
      [negative_slope](Tensor x, Tensor out) {
        return [x, out, negative_slope]() mutable {
          auto go = out.grad();
          auto xv = x.data();
          auto [dx, fresh] = x.grad_sink();
          if (fresh)
            for (int64_t i = 0; i < x.numel(); ++i)
              dx[i] = go[i] * (xv[i] >= 0.0 ? 1.0 : negative_slope);
          else
            for (int64_t i = 0; i < x.numel(); ++i)
              dx[i] += go[i] * (xv[i] >= 0.0 ? 1.0 : negative_slope);
        };
      });
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(Graph& g, const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                          Bwd make_bwd) {
  detail::check_same_shape(a, b, name);
  Tensor out = Tensor::uninitialized(a.shape());
  fwd(a.data().data(), b.data().data(), out.data().data(), a.numel());
  if (detail::grad_needed(g, {&a, &b})) {
    out.set_requires_grad(true);
    g.record({a, b}, out, make_bwd(a, b, out), name);
  }
  return out;
}

}  // namespace detail

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      g, a, b, "mul",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
      },
      [](Tensor a, Tensor b, Tensor out) {
        return [a, b, out]() mutable {
          auto go = out.grad();
          if (a.requires_grad()) {
            auto [da, fresh] = a.grad_sink();
            auto bv = b.data();
            if (fresh)
              for (int64_t i = 0; i < a.numel(); ++i) da[i] = go[i] * bv[i];
            else
              for (int64_t i = 0; i < a.numel(); ++i) da[i] += go[i] * bv[i];
          }
          if (b.requires_grad()) {
            auto [db, fresh] = b.grad_sink();
            auto av = a.data();
            if (fresh)
              for (int64_t i = 0; i < b.numel(); ++i) db[i] = go[i] * av[i];
            else
              for (int64_t i = 0; i < b.numel(); ++i) db[i] += go[i] * av[i];
          }
        };
      });
}

// Multiplicative emphasis out = x * (1 + m), fused so the intermediate
// (1 + m) tensor never materializes.  With m identically zero the result is
// x * 1.0, i.e. bitwise equal to x.
inline Tensor modulate(Graph& g, const Tensor& x, const Tensor& m) {
  return detail::binary_elementwise(
      g, x, m, "modulate",
      [](const double* xv, const double* mv, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = xv[i] * (1.0 + mv[i]);
      },
      [](Tensor x, Tensor m, Tensor out) {
        return [x, m, out]() mutable {
          auto go = out.grad();
          if (x.requires_grad()) {
            auto [dx, fresh] = x.grad_sink();
            auto mv = m.data();
            if (fresh)
              for (int64_t i = 0; i < x.numel(); ++i) dx[i] = go[i] * (1.0 + mv[i]);
            else
              for (int64_t i = 0; i < x.numel(); ++i) dx[i] += go[i] * (1.0 + mv[i]);
          }
          if (m.requires_grad()) {
            auto [dm, fresh] = m.grad_sink();
            auto xv = x.data();
            if (fresh)
              for (int64_t i = 0; i < m.numel(); ++i) dm[i] = go[i] * xv[i];
            else
              for (int64_t i = 0; i < m.numel(); ++i) dm[i] += go[i] * xv[i];
          }
        };
      });
}

// Pooled emphasis: spatial mean of x * (1 + m) per channel, [N,C,H,W] -> [N,C].
// Each plane's product is materialized into a small scratch row and then
// summed with the same sequential loop global_avg_pool uses, so the result is
// bitwise identical to global_avg_pool(modulate(x, m)) — the store forces the
// per-element product to round to a double exactly like the two-op chain does
// (a fused multiply-add straight into the accumulator would not).  The payoff
// is in backward: the full-resolution product never needs a gradient sweep.
inline Tensor attention_pool(Graph& g, const Tensor& x, const Tensor& m) {
  detail::check(x.ndim() == 4,
                "attention_pool: input must be [N,C,H,W], got " + shape_str(x.shape()));
  detail::check_same_shape(x, m, "attention_pool");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out = Tensor::uninitialized({n, c});
  {
    auto xv = x.data();
    auto mv = m.data();
    auto ov = out.data();
    auto row = std::make_unique_for_overwrite<double[]>(static_cast<size_t>(hw));
    for (int64_t i = 0; i < n * c; ++i) {
      const double* fp = xv.data() + i * hw;
      const double* mp = mv.data() + i * hw;
      for (int64_t p = 0; p < hw; ++p) row[p] = fp[p] * (1.0 + mp[p]);
      double acc = 0.0;
      for (int64_t p = 0; p < hw; ++p) acc += row[p];
      ov[i] = acc / static_cast<double>(hw);
    }
  }
  if (detail::grad_needed(g, {&x, &m})) {
    out.set_requires_grad(true);
    Tensor x_c = x, m_c = m, out_c = out;
    g.record(
        {x, m}, out,
        [x_c, m_c, out_c, n, c, hw]() mutable {
          auto go = out_c.grad();
          auto xv = x_c.data();
          auto mv = m_c.data();
          const double inv = 1.0 / static_cast<double>(hw);
          const bool need_dx = x_c.requires_grad();
          const bool need_dm = m_c.requires_grad();
          double* dxp = nullptr;
          double* dmp = nullptr;
          bool fx = false, fm = false;
          if (need_dx) {
            auto [buf, fresh] = x_c.grad_sink();
            dxp = buf.data();
            fx = fresh;
          }
          if (need_dm) {
            auto [buf, fresh] = m_c.grad_sink();
            dmp = buf.data();
            fm = fresh;
          }
          for (int64_t i = 0; i < n * c; ++i) {
            const double gi = go[i] * inv;
            const double* fp = xv.data() + i * hw;
            const double* mp = mv.data() + i * hw;
            if (need_dx) {
              double* d = dxp + i * hw;
              if (fx)
                for (int64_t p = 0; p < hw; ++p) d[p] = gi * (1.0 + mp[p]);
              else
                for (int64_t p = 0; p < hw; ++p) d[p] += gi * (1.0 + mp[p]);
            }
            if (need_dm) {
              double* d = dmp + i * hw;
              if (fm)
                for (int64_t p = 0; p < hw; ++p) d[p] = gi * fp[p];
              else
                for (int64_t p = 0; p < hw; ++p) d[p] += gi * fp[p];
            }
          }
        },
        "attention_pool");
  }
  return out;
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      g, a, b, "add",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
      },
      [](Tensor a, Tensor b, Tensor out) {
        return [a, b, out]() mutable {
          auto go = out.grad();
          if (a.requires_grad()) {
            auto da = a.grad();
            for (int64_t i = 0; i < a.numel(); ++i) da[i] += go[i];
          }
          if (b.requires_grad()) {
            auto db = b.grad();
            for (int64_t i = 0; i < b.numel(); ++i) db[i] += go[i];
          }
        };
      });
}

inline Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      g, a, b, "sub",
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
      },
      [](Tensor a, Tensor b, Tensor out) {
        return [a, b, out]() mutable {
          auto go = out.grad();
          if (a.requires_grad()) {
            auto da = a.grad();
            for (int64_t i = 0; i < a.numel(); ++i) da[i] += go[i];
          }
          if (b.requires_grad()) {
            auto db = b.grad();
            for (int64_t i = 0; i < b.numel(); ++i) db[i] -= go[i];
          }
        };
      });
}

inline Tensor add_scalar(Graph& g, const Tensor& x, double value) {
  return detail::unary_elementwise(
      g, x, "add_scalar",
      [value](const double* in, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = in[i] + value;
      },
      [](Tensor x, Tensor out) {
        return [x, out]() mutable {
          auto go = out.grad();
          auto dx = x.grad();
          for (int64_t i = 0; i < x.numel(); ++i) dx[i] += go[i];
        };
      });
}

inline Tensor scale(Graph& g, const Tensor& x, double value) {
  return detail::unary_elementwise(
      g, x, "scale",
      [value](const double* in, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = in[i] * value;
      },
      [value](Tensor x, Tensor out) {
        return [x, out, value]() mutable {
          auto go = out.grad();
          auto dx = x.grad();
          for (int64_t i = 0; i < x.numel(); ++i) dx[i] += go[i] * value;
        };
      });
}

// Spatial mean: [N,C,H,W] -> [N,C].
inline Tensor global_avg_pool(Graph& g, const Tensor& x) {
  detail::check(x.ndim() == 4, "global_avg_pool: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out = Tensor::uninitialized({n, c});
  {
    auto xv = x.data();
    auto ov = out.data();
    for (int64_t i = 0; i < n * c; ++i) {
      double acc = 0.0;
      const double* plane = xv.data() + i * hw;
      for (int64_t p = 0; p < hw; ++p) acc += plane[p];
      ov[i] = acc / static_cast<double>(hw);
    }
  }
  if (detail::grad_needed(g, {&x})) {
    out.set_requires_grad(true);
    Tensor x_c = x, out_c = out;
    g.record(
        {x}, out,
        [x_c, out_c, n, c, hw]() mutable {
          auto go = out_c.grad();
          auto [dx, fresh] = x_c.grad_sink();
          const double inv = 1.0 / static_cast<double>(hw);
          for (int64_t i = 0; i < n * c; ++i) {
            const double gi = go[i] * inv;
            double* plane = dx.data() + i * hw;
            if (fresh)
              for (int64_t p = 0; p < hw; ++p) plane[p] = gi;
            else
              for (int64_t p = 0; p < hw; ++p) plane[p] += gi;
          }
        },
        "global_avg_pool");
  }
  return out;
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor reduction(Graph& g, const Tensor& x, const char* name, Fwd fwd, Bwd bwd_scale) {
  double acc = fwd(x.data());
  Tensor out = Tensor::scalar(acc);
  if (detail::grad_needed(g, {&x})) {
    out.set_requires_grad(true);
    Tensor x_c = x, out_c = out;
    g.record(
        {x}, out,
        [x_c, out_c, bwd_scale]() mutable {
          const double go = out_c.grad()[0];
          auto xv = x_c.data();
          auto [dx, fresh] = x_c.grad_sink();
          if (fresh)
            for (int64_t i = 0; i < x_c.numel(); ++i) dx[i] = go * bwd_scale(xv[i], x_c.numel());
          else
            for (int64_t i = 0; i < x_c.numel(); ++i) dx[i] += go * bwd_scale(xv[i], x_c.numel());
        },
        name);
  }
  return out;
}

}  // namespace detail

inline Tensor sum(Graph& g, const Tensor& x) {
  return detail::reduction(
      g, x, "sum",
      [](std::span<const double> v) {
        double acc = 0.0;
        for (double e : v) acc += e;
        return acc;
      },
      [](double, int64_t) { return 1.0; });
}

inline Tensor mean(Graph& g, const Tensor& x) {
  return detail::reduction(
      g, x, "mean",
      [](std::span<const double> v) {
        double acc = 0.0;
        for (double e : v) acc += e;
        return acc / static_cast<double>(v.size());
      },
      [](double, int64_t n) { return 1.0 / static_cast<double>(n); });
}

// Sum of absolute values; the subgradient at 0 is taken as 0.
inline Tensor l1_norm(Graph& g, const Tensor& x) {
  return detail::reduction(
      g, x, "l1_norm",
      [](std::span<const double> v) {
        double acc = 0.0;
        for (double e : v) acc += std::abs(e);
        return acc;
      },
      [](double xi, int64_t) { return xi > 0.0 ? 1.0 : (xi < 0.0 ? -1.0 : 0.0); });
}

// Same data, new shape (element count must match).
inline Tensor reshape(Graph& g, const Tensor& x, Shape shape) {
  detail::check_shape_valid(shape);
  detail::check(shape_numel(shape) == x.numel(),
                "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor out = Tensor::uninitialized(std::move(shape));
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (detail::grad_needed(g, {&x})) {
    out.set_requires_grad(true);
    Tensor x_c = x, out_c = out;
    g.record(
        {x}, out,
        [x_c, out_c]() mutable {
          auto go = out_c.grad();
          auto dx = x_c.grad();
          for (int64_t i = 0; i < x_c.numel(); ++i) dx[i] += go[i];
        },
        "reshape");
  }
  return out;
}

// K tensors of shape [N] become the columns of an [N,K] matrix.
inline Tensor stack_columns(Graph& g, const std::vector<Tensor>& columns) {
  detail::check(!columns.empty(), "stack_columns: no columns given");
  const int64_t n = columns[0].dim(0);
  const int64_t k = static_cast<int64_t>(columns.size());
  for (const Tensor& c : columns)
    detail::check(c.ndim() == 1 && c.dim(0) == n,
                  "stack_columns: every column must be [" + std::to_string(n) + "], got " +
                      shape_str(c.shape()));
  Tensor out = Tensor::uninitialized({n, k});
  {
    auto ov = out.data();
    for (int64_t j = 0; j < k; ++j) {
      auto cv = columns[j].data();
      for (int64_t i = 0; i < n; ++i) ov[i * k + j] = cv[i];
    }
  }
  bool any_grad = false;
  for (const Tensor& c : columns) any_grad |= c.requires_grad();
  if (g.recording() && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> cols_c = columns;
    Tensor out_c = out;
    g.record(
        cols_c, out,
        [cols_c, out_c, n, k]() mutable {
          auto go = out_c.grad();
          for (int64_t j = 0; j < k; ++j) {
            if (!cols_c[j].requires_grad()) continue;
            auto dc = cols_c[j].grad();
            for (int64_t i = 0; i < n; ++i) dc[i] += go[i * k + j];
          }
        },
        "stack_columns");
  }
  return out;
}

}  // namespace mcam
