#include "fhseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>

#include "fhseg/errors.hpp"

namespace fhseg::ops {

namespace {

void check_rank4(const TensorPtr& t, const char* name) {
  if (!t) throw ContractError(std::string(name) + " is null");
  if (t->ndim() != 4) {
    throw ShapeError(std::string(name) + " must be rank 4, got " + t->shape_str());
  }
}

// Accumulate src into dst's grad buffer, allocating on first touch.
inline double* grad_of(const TensorPtr& t) {
  t->ensure_grad();
  return t->grad.data();
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TensorPtr conv2d(Graph& g, const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, int stride, int padding) {
  check_rank4(input, "conv2d input");
  check_rank4(kernel, "conv2d kernel");
  if (!bias || bias->ndim() != 1) throw ShapeError("conv2d bias must be rank 1");
  const int B = input->dim(0), Cin = input->dim(1), H = input->dim(2), W = input->dim(3);
  const int Cout = kernel->dim(0), Kc = kernel->dim(1), Kh = kernel->dim(2), Kw = kernel->dim(3);
  if (Kh != Kw) throw ShapeError("conv2d kernel must be square, got " + kernel->shape_str());
  const int K = Kh;
  if (K % 2 == 0) throw ConfigError("conv2d kernel size must be odd, got " + std::to_string(K));
  if (Kc != Cin) {
    throw ShapeError("conv2d channel mismatch: input " + input->shape_str() + " vs kernel " +
                     kernel->shape_str());
  }
  if (bias->dim(0) != Cout) {
    throw ShapeError("conv2d bias length " + bias->shape_str() + " must match Cout " +
                     std::to_string(Cout));
  }
  if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
  if (padding < 0) throw ConfigError("conv2d padding must be >= 0");
  if (H + 2 * padding < K || W + 2 * padding < K) {
    throw ShapeError("conv2d input " + input->shape_str() + " smaller than kernel with padding " +
                     std::to_string(padding));
  }
  if ((H + 2 * padding - K) % stride != 0 || (W + 2 * padding - K) % stride != 0) {
    throw ConfigError("conv2d output extent does not divide exactly: stride " +
                      std::to_string(stride));
  }
  const int Ho = (H + 2 * padding - K) / stride + 1;
  const int Wo = (W + 2 * padding - K) / stride + 1;

  std::vector<double> values(static_cast<std::size_t>(B) * Cout * Ho * Wo);
  const double* in = input->data.data();
  const double* ker = kernel->data.data();
  const double* bs = bias->data.data();
  const int s = stride, p = padding;

  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Cout; ++co) {
      double* oplane = values.data() + (static_cast<std::size_t>(b) * Cout + co) * Ho * Wo;
      std::fill(oplane, oplane + static_cast<std::size_t>(Ho) * Wo, bs[co]);
      for (int ci = 0; ci < Cin; ++ci) {
        const double* iplane = in + (static_cast<std::size_t>(b) * Cin + ci) * H * W;
        const double* kbase = ker + (static_cast<std::size_t>(co) * Cin + ci) * K * K;
        for (int kh = 0; kh < K; ++kh) {
          for (int kw = 0; kw < K; ++kw) {
            const double wv = kbase[kh * K + kw];
            if (wv == 0.0) continue;
            // ow range with 0 <= ow*s - p + kw < W
            const int lo = std::max(0, (p - kw + s - 1) / s);
            const int hi = std::min(Wo - 1, (W - 1 + p - kw) / s);
            if (lo > hi) continue;
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * s - p + kh;
              if (ih < 0 || ih >= H) continue;
              const double* irow = iplane + static_cast<std::size_t>(ih) * W;
              double* orow = oplane + static_cast<std::size_t>(oh) * Wo;
              if (s == 1) {
                const double* ip = irow + (kw - p);
                for (int ow = lo; ow <= hi; ++ow) orow[ow] += wv * ip[ow];
              } else {
                for (int ow = lo; ow <= hi; ++ow) orow[ow] += wv * irow[ow * s - p + kw];
              }
            }
          }
        }
      }
    }
  }

  auto bwd = [input, kernel, bias, B, Cin, Cout, H, W, Ho, Wo, K, s, p](const Tensor& out) {
    const double* go = out.grad.data();
    const double* in = input->data.data();
    const double* ker = kernel->data.data();
    const bool need_in = input->requires_grad;
    const bool need_ker = kernel->requires_grad;
    double* din = need_in ? grad_of(input) : nullptr;
    double* dker = need_ker ? grad_of(kernel) : nullptr;

    if (bias->requires_grad) {
      double* db = grad_of(bias);
      for (int b = 0; b < B; ++b) {
        for (int co = 0; co < Cout; ++co) {
          const double* gplane = go + (static_cast<std::size_t>(b) * Cout + co) * Ho * Wo;
          double acc = 0.0;
          for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) acc += gplane[i];
          db[co] += acc;
        }
      }
    }
    if (!need_in && !need_ker) return;

    for (int b = 0; b < B; ++b) {
      for (int co = 0; co < Cout; ++co) {
        const double* gplane = go + (static_cast<std::size_t>(b) * Cout + co) * Ho * Wo;
        for (int ci = 0; ci < Cin; ++ci) {
          const double* iplane = in + (static_cast<std::size_t>(b) * Cin + ci) * H * W;
          double* dplane = need_in ? din + (static_cast<std::size_t>(b) * Cin + ci) * H * W : nullptr;
          const std::size_t koff = (static_cast<std::size_t>(co) * Cin + ci) * K * K;
          for (int kh = 0; kh < K; ++kh) {
            for (int kw = 0; kw < K; ++kw) {
              const double wv = ker[koff + kh * K + kw];
              const int lo = std::max(0, (p - kw + s - 1) / s);
              const int hi = std::min(Wo - 1, (W - 1 + p - kw) / s);
              if (lo > hi) continue;
              double wacc = 0.0;
              for (int oh = 0; oh < Ho; ++oh) {
                const int ih = oh * s - p + kh;
                if (ih < 0 || ih >= H) continue;
                const double* grow = gplane + static_cast<std::size_t>(oh) * Wo;
                const double* irow = iplane + static_cast<std::size_t>(ih) * W;
                if (need_in) {
                  double* drow = dplane + static_cast<std::size_t>(ih) * W;
                  if (s == 1) {
                    double* dp = drow + (kw - p);
                    const double* ip = irow + (kw - p);
                    if (need_ker) {
                      for (int ow = lo; ow <= hi; ++ow) {
                        dp[ow] += wv * grow[ow];
                        wacc += grow[ow] * ip[ow];
                      }
                    } else {
                      for (int ow = lo; ow <= hi; ++ow) dp[ow] += wv * grow[ow];
                    }
                  } else {
                    for (int ow = lo; ow <= hi; ++ow) {
                      const int iw = ow * s - p + kw;
                      drow[iw] += wv * grow[ow];
                      if (need_ker) wacc += grow[ow] * irow[iw];
                    }
                  }
                } else {  // kernel grad only
                  if (s == 1) {
                    const double* ip = irow + (kw - p);
                    for (int ow = lo; ow <= hi; ++ow) wacc += grow[ow] * ip[ow];
                  } else {
                    for (int ow = lo; ow <= hi; ++ow) wacc += grow[ow] * irow[ow * s - p + kw];
                  }
                }
              }
              if (need_ker) dker[koff + kh * K + kw] += wacc;
            }
          }
        }
      }
    }
  };

  return g.emit({B, Cout, Ho, Wo}, std::move(values), {input, kernel, bias}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// batch_norm
// ---------------------------------------------------------------------------

TensorPtr batch_norm(Graph& g, const TensorPtr& input, const TensorPtr& gamma,
                     const TensorPtr& beta, BatchNormState& state, double eps,
                     BnMode mode) {
  check_rank4(input, "batch_norm input");
  if (eps <= 0.0) throw ConfigError("batch_norm eps must be > 0");
  const int B = input->dim(0), C = input->dim(1), H = input->dim(2), W = input->dim(3);
  if (!gamma || gamma->ndim() != 1 || gamma->dim(0) != C ||
      !beta || beta->ndim() != 1 || beta->dim(0) != C) {
    throw ShapeError("batch_norm gamma/beta must be rank-1 of length " + std::to_string(C));
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const std::size_t n = static_cast<std::size_t>(B) * plane;
  if (mode != BnMode::eval && n < 2) {
    throw ConfigError("batch_norm in train mode needs at least 2 values per channel");
  }
  if (state.running_mean.empty()) {
    state.running_mean.assign(static_cast<std::size_t>(C), 0.0);
    state.running_var.assign(static_cast<std::size_t>(C), 1.0);
  }
  if (state.running_mean.size() != static_cast<std::size_t>(C)) {
    throw ShapeError("batch_norm running stats sized for " +
                     std::to_string(state.running_mean.size()) + " channels, input has " +
                     std::to_string(C));
  }

  const double* in = input->data.data();
  std::vector<double> mean(static_cast<std::size_t>(C)), invstd(static_cast<std::size_t>(C));
  if (mode == BnMode::eval) {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<std::size_t>(c)] = state.running_mean[static_cast<std::size_t>(c)];
      invstd[static_cast<std::size_t>(c)] =
          1.0 / std::sqrt(state.running_var[static_cast<std::size_t>(c)] + eps);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* ip = in + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += ip[i];
      }
      const double mu = acc / static_cast<double>(n);
      double vacc = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* ip = in + (static_cast<std::size_t>(b) * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = ip[i] - mu;
          vacc += d * d;
        }
      }
      const double var = vacc / static_cast<double>(n);  // biased
      mean[static_cast<std::size_t>(c)] = mu;
      invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
      if (mode == BnMode::train) {
        const double m = state.momentum;
        state.running_mean[static_cast<std::size_t>(c)] =
            (1.0 - m) * state.running_mean[static_cast<std::size_t>(c)] + m * mu;
        state.running_var[static_cast<std::size_t>(c)] =
            (1.0 - m) * state.running_var[static_cast<std::size_t>(c)] + m * var;
      }
    }
  }

  // xhat is shared by forward and backward.
  auto xhat = std::make_shared<std::vector<double>>(input->numel());
  std::vector<double> values(input->numel());
  const double* gm = gamma->data.data();
  const double* bt = beta->data.data();
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const double mu = mean[static_cast<std::size_t>(c)];
      const double is = invstd[static_cast<std::size_t>(c)];
      const double gmv = gm[c], btv = bt[c];
      const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (in[off + i] - mu) * is;
        (*xhat)[off + i] = xh;
        values[off + i] = gmv * xh + btv;
      }
    }
  }

  const bool batch_stats = (mode != BnMode::eval);
  auto bwd = [input, gamma, beta, xhat, invstd, B, C, plane, n, batch_stats](const Tensor& out) {
    const double* go = out.grad.data();
    const double* gm = gamma->data.data();
    // Per-channel reductions are needed for dgamma/dbeta and for the
    // batch-statistics correction in dx.
    std::vector<double> sum_g(static_cast<std::size_t>(C), 0.0);
    std::vector<double> sum_gx(static_cast<std::size_t>(C), 0.0);
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
        double s0 = 0.0, s1 = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          s0 += go[off + i];
          s1 += go[off + i] * (*xhat)[off + i];
        }
        sum_g[static_cast<std::size_t>(c)] += s0;
        sum_gx[static_cast<std::size_t>(c)] += s1;
      }
    }
    if (gamma->requires_grad) {
      double* dg = grad_of(gamma);
      for (int c = 0; c < C; ++c) dg[c] += sum_gx[static_cast<std::size_t>(c)];
    }
    if (beta->requires_grad) {
      double* db = grad_of(beta);
      for (int c = 0; c < C; ++c) db[c] += sum_g[static_cast<std::size_t>(c)];
    }
    if (!input->requires_grad) return;
    double* din = grad_of(input);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const double gis = gm[c] * invstd[static_cast<std::size_t>(c)];
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * plane;
        if (batch_stats) {
          const double mg = sum_g[static_cast<std::size_t>(c)] * inv_n;
          const double mgx = sum_gx[static_cast<std::size_t>(c)] * inv_n;
          for (std::size_t i = 0; i < plane; ++i) {
            din[off + i] += gis * (go[off + i] - mg - (*xhat)[off + i] * mgx);
          }
        } else {
          for (std::size_t i = 0; i < plane; ++i) din[off + i] += gis * go[off + i];
        }
      }
    }
  };

  return g.emit({B, C, H, W}, std::move(values), {input, gamma, beta}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// pointwise activations
// ---------------------------------------------------------------------------

TensorPtr relu(Graph& g, const TensorPtr& x) {
  if (!x) throw ContractError("relu input is null");
  std::vector<double> values(x->numel());
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
  }
  if (g.tracing_branches()) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      g.fold_branch(x->data[i] > 0.0 ? 1u : 0u);
    }
  }
  auto bwd = [x](const Tensor& out) {
    if (!x->requires_grad) return;
    double* dx = grad_of(x);
    const double* go = out.grad.data();
    for (std::size_t i = 0; i < x->data.size(); ++i) {
      if (x->data[i] > 0.0) dx[i] += go[i];
    }
  };
  return g.emit(x->shape, std::move(values), {x}, std::move(bwd));
}

TensorPtr sigmoid(Graph& g, const TensorPtr& x) {
  if (!x) throw ContractError("sigmoid input is null");
  std::vector<double> values(x->numel());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = x->data[i];
    // Two-sided form avoids overflow in exp for large |v|.
    values[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto bwd = [x](const Tensor& out) {
    if (!x->requires_grad) return;
    double* dx = grad_of(x);
    const double* go = out.grad.data();
    const double* y = out.data.data();
    for (std::size_t i = 0; i < x->data.size(); ++i) {
      dx[i] += go[i] * y[i] * (1.0 - y[i]);
    }
  };
  return g.emit(x->shape, std::move(values), {x}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

namespace {

// Source taps for 1-D bilinear interpolation with half-pixel centers.
struct BilinearAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

BilinearAxis bilinear_axis(int out_extent, int factor, int in_extent) {
  BilinearAxis ax;
  ax.i0.resize(static_cast<std::size_t>(out_extent));
  ax.i1.resize(static_cast<std::size_t>(out_extent));
  ax.w1.resize(static_cast<std::size_t>(out_extent));
  for (int o = 0; o < out_extent; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(src);
    if (i0 > in_extent - 1) i0 = in_extent - 1;
    const int i1 = std::min(i0 + 1, in_extent - 1);
    ax.i0[static_cast<std::size_t>(o)] = i0;
    ax.i1[static_cast<std::size_t>(o)] = i1;
    ax.w1[static_cast<std::size_t>(o)] = src - i0;
  }
  return ax;
}

}  // namespace

TensorPtr upsample(Graph& g, const TensorPtr& x, int factor, UpsampleMethod method) {
  check_rank4(x, "upsample input");
  if (factor < 1) throw ConfigError("upsample factor must be >= 1");
  const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  const int Ho = H * factor, Wo = W * factor;
  std::vector<double> values(static_cast<std::size_t>(B) * C * Ho * Wo);
  const double* in = x->data.data();

  if (method == UpsampleMethod::nearest) {
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        const double* ip = in + (static_cast<std::size_t>(b) * C + c) * H * W;
        double* op = values.data() + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          const double* irow = ip + static_cast<std::size_t>(oy / factor) * W;
          double* orow = op + static_cast<std::size_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) orow[ox] = irow[ox / factor];
        }
      }
    }
    auto bwd = [x, B, C, H, W, Ho, Wo, factor](const Tensor& out) {
      if (!x->requires_grad) return;
      double* dx = grad_of(x);
      const double* go = out.grad.data();
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          double* dp = dx + (static_cast<std::size_t>(b) * C + c) * H * W;
          const double* gp = go + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
          for (int oy = 0; oy < Ho; ++oy) {
            double* drow = dp + static_cast<std::size_t>(oy / factor) * W;
            const double* grow = gp + static_cast<std::size_t>(oy) * Wo;
            for (int ox = 0; ox < Wo; ++ox) drow[ox / factor] += grow[ox];
          }
        }
      }
    };
    return g.emit({B, C, Ho, Wo}, std::move(values), {x}, std::move(bwd));
  }

  const auto ay = bilinear_axis(Ho, factor, H);
  const auto axx = bilinear_axis(Wo, factor, W);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const double* ip = in + (static_cast<std::size_t>(b) * C + c) * H * W;
      double* op = values.data() + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
      for (int oy = 0; oy < Ho; ++oy) {
        const double* r0 = ip + static_cast<std::size_t>(ay.i0[static_cast<std::size_t>(oy)]) * W;
        const double* r1 = ip + static_cast<std::size_t>(ay.i1[static_cast<std::size_t>(oy)]) * W;
        const double wy1 = ay.w1[static_cast<std::size_t>(oy)];
        double* orow = op + static_cast<std::size_t>(oy) * Wo;
        for (int ox = 0; ox < Wo; ++ox) {
          const int x0 = axx.i0[static_cast<std::size_t>(ox)];
          const int x1 = axx.i1[static_cast<std::size_t>(ox)];
          const double wx1 = axx.w1[static_cast<std::size_t>(ox)];
          const double top = r0[x0] * (1.0 - wx1) + r0[x1] * wx1;
          const double bot = r1[x0] * (1.0 - wx1) + r1[x1] * wx1;
          orow[ox] = top * (1.0 - wy1) + bot * wy1;
        }
      }
    }
  }
  auto bwd = [x, ay, axx, B, C, H, W, Ho, Wo](const Tensor& out) {
    if (!x->requires_grad) return;
    double* dx = grad_of(x);
    const double* go = out.grad.data();
    for (int b = 0; b < B; ++b) {
      for (int c = 0; c < C; ++c) {
        double* dp = dx + (static_cast<std::size_t>(b) * C + c) * H * W;
        const double* gp = go + (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
          double* d0 = dp + static_cast<std::size_t>(ay.i0[static_cast<std::size_t>(oy)]) * W;
          double* d1 = dp + static_cast<std::size_t>(ay.i1[static_cast<std::size_t>(oy)]) * W;
          const double wy1 = ay.w1[static_cast<std::size_t>(oy)];
          const double* grow = gp + static_cast<std::size_t>(oy) * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            const int x0 = axx.i0[static_cast<std::size_t>(ox)];
            const int x1 = axx.i1[static_cast<std::size_t>(ox)];
            const double wx1 = axx.w1[static_cast<std::size_t>(ox)];
            const double gv = grow[ox];
            d0[x0] += gv * (1.0 - wy1) * (1.0 - wx1);
            d0[x1] += gv * (1.0 - wy1) * wx1;
            d1[x0] += gv * wy1 * (1.0 - wx1);
            d1[x1] += gv * wy1 * wx1;
          }
        }
      }
    }
  };
  return g.emit({B, C, Ho, Wo}, std::move(values), {x}, std::move(bwd));
}

TensorPtr downsample(Graph& g, const TensorPtr& x, int factor) {
  check_rank4(x, "downsample input");
  if (factor < 1) throw ConfigError("downsample factor must be >= 1");
  const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  if (H % factor != 0 || W % factor != 0) {
    throw ShapeError("downsample extents " + x->shape_str() + " not divisible by factor " +
                     std::to_string(factor));
  }
  const int Ho = H / factor, Wo = W / factor;
  std::vector<double> values(static_cast<std::size_t>(B) * C * Ho * Wo);
  // Flat index of the winning element per output; ties go to the first max in
  // row-major window order (strict > below keeps the first).
  auto argmax = std::make_shared<std::vector<std::size_t>>(values.size());
  const double* in = x->data.data();
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const std::size_t ioff = (static_cast<std::size_t>(b) * C + c) * H * W;
      const std::size_t ooff = (static_cast<std::size_t>(b) * C + c) * Ho * Wo;
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_idx = 0;
          for (int ky = 0; ky < factor; ++ky) {
            const std::size_t row = ioff + static_cast<std::size_t>(oy * factor + ky) * W;
            for (int kx = 0; kx < factor; ++kx) {
              const std::size_t idx = row + static_cast<std::size_t>(ox * factor + kx);
              if (in[idx] > best) {
                best = in[idx];
                best_idx = idx;
              }
            }
          }
          values[ooff + static_cast<std::size_t>(oy) * Wo + ox] = best;
          (*argmax)[ooff + static_cast<std::size_t>(oy) * Wo + ox] = best_idx;
        }
      }
    }
  }
  if (g.tracing_branches()) {
    for (const std::size_t idx : *argmax) g.fold_branch(static_cast<std::uint64_t>(idx));
  }
  auto bwd = [x, argmax](const Tensor& out) {
    if (!x->requires_grad) return;
    double* dx = grad_of(x);
    const double* go = out.grad.data();
    for (std::size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += go[i];
  };
  return g.emit({B, C, Ho, Wo}, std::move(values), {x}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// concat / slice
// ---------------------------------------------------------------------------

TensorPtr concat(Graph& g, const std::vector<TensorPtr>& inputs) {
  if (inputs.empty()) throw ContractError("concat needs at least one input");
  check_rank4(inputs[0], "concat input");
  const int B = inputs[0]->dim(0), H = inputs[0]->dim(2), W = inputs[0]->dim(3);
  int Ctotal = 0;
  for (const auto& t : inputs) {
    check_rank4(t, "concat input");
    if (t->dim(0) != B || t->dim(2) != H || t->dim(3) != W) {
      throw ShapeError("concat inputs must share B,H,W: " + inputs[0]->shape_str() + " vs " +
                       t->shape_str());
    }
    Ctotal += t->dim(1);
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> values(static_cast<std::size_t>(B) * Ctotal * plane);
  int coff = 0;
  for (const auto& t : inputs) {
    const int C = t->dim(1);
    for (int b = 0; b < B; ++b) {
      const double* src = t->data.data() + static_cast<std::size_t>(b) * C * plane;
      double* dst = values.data() + (static_cast<std::size_t>(b) * Ctotal + coff) * plane;
      std::copy(src, src + static_cast<std::size_t>(C) * plane, dst);
    }
    coff += C;
  }
  auto parts = inputs;  // captured copy keeps channel layout stable
  auto bwd = [parts, B, Ctotal, plane](const Tensor& out) {
    const double* go = out.grad.data();
    int coff = 0;
    for (const auto& t : parts) {
      const int C = t->dim(1);
      if (t->requires_grad) {
        double* dt = grad_of(t);
        for (int b = 0; b < B; ++b) {
          const double* src = go + (static_cast<std::size_t>(b) * Ctotal + coff) * plane;
          double* dst = dt + static_cast<std::size_t>(b) * C * plane;
          for (std::size_t i = 0; i < static_cast<std::size_t>(C) * plane; ++i) dst[i] += src[i];
        }
      }
      coff += C;
    }
  };
  return g.emit({B, Ctotal, H, W}, std::move(values), inputs, std::move(bwd));
}

TensorPtr slice_channels(Graph& g, const TensorPtr& x, int c0, int c1) {
  check_rank4(x, "slice_channels input");
  const int B = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  if (c0 < 0 || c1 <= c0 || c1 > C) {
    throw ShapeError("slice_channels range [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") invalid for " + x->shape_str());
  }
  const int Cs = c1 - c0;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> values(static_cast<std::size_t>(B) * Cs * plane);
  for (int b = 0; b < B; ++b) {
    const double* src = x->data.data() + (static_cast<std::size_t>(b) * C + c0) * plane;
    double* dst = values.data() + static_cast<std::size_t>(b) * Cs * plane;
    std::copy(src, src + static_cast<std::size_t>(Cs) * plane, dst);
  }
  auto bwd = [x, B, C, c0, Cs, plane](const Tensor& out) {
    if (!x->requires_grad) return;
    double* dx = grad_of(x);
    const double* go = out.grad.data();
    for (int b = 0; b < B; ++b) {
      double* dst = dx + (static_cast<std::size_t>(b) * C + c0) * plane;
      const double* src = go + static_cast<std::size_t>(b) * Cs * plane;
      for (std::size_t i = 0; i < static_cast<std::size_t>(Cs) * plane; ++i) dst[i] += src[i];
    }
  };
  return g.emit({B, Cs, H, W}, std::move(values), {x}, std::move(bwd));
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b) {
  if (!a || !b) throw ContractError("mul input is null");
  if (a->same_shape(*b)) {
    std::vector<double> values(a->numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = a->data[i] * b->data[i];
    auto bwd = [a, b](const Tensor& out) {
      const double* go = out.grad.data();
      if (a->requires_grad) {
        double* da = grad_of(a);
        for (std::size_t i = 0; i < a->data.size(); ++i) da[i] += go[i] * b->data[i];
      }
      if (b->requires_grad) {
        double* db = grad_of(b);
        for (std::size_t i = 0; i < b->data.size(); ++i) db[i] += go[i] * a->data[i];
      }
    };
    return g.emit(a->shape, std::move(values), {a, b}, std::move(bwd));
  }

  // Broadcast case: a [B,C,H,W], b [B,1,H,W].
  if (a->ndim() != 4 || b->ndim() != 4 || b->dim(1) != 1 || a->dim(0) != b->dim(0) ||
      a->dim(2) != b->dim(2) || a->dim(3) != b->dim(3)) {
    throw ShapeError("mul shapes incompatible: " + a->shape_str() + " vs " + b->shape_str());
  }
  const int B = a->dim(0), C = a->dim(1), H = a->dim(2), W = a->dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<double> values(a->numel());
  for (int bb = 0; bb < B; ++bb) {
    const double* bp = b->data.data() + static_cast<std::size_t>(bb) * plane;
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(bb) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) values[off + i] = a->data[off + i] * bp[i];
    }
  }
  auto bwd = [a, b, B, C, plane](const Tensor& out) {
    const double* go = out.grad.data();
    if (a->requires_grad) {
      double* da = grad_of(a);
      for (int bb = 0; bb < B; ++bb) {
        const double* bp = b->data.data() + static_cast<std::size_t>(bb) * plane;
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(bb) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) da[off + i] += go[off + i] * bp[i];
        }
      }
    }
    if (b->requires_grad) {
      double* db = grad_of(b);
      for (int bb = 0; bb < B; ++bb) {
        double* dbp = db + static_cast<std::size_t>(bb) * plane;
        for (int c = 0; c < C; ++c) {
          const std::size_t off = (static_cast<std::size_t>(bb) * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) dbp[i] += go[off + i] * a->data[off + i];
        }
      }
    }
  };
  return g.emit(a->shape, std::move(values), {a, b}, std::move(bwd));
}

TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b) {
  if (!a || !b) throw ContractError("add input is null");
  if (!a->same_shape(*b)) {
    throw ShapeError("add shapes differ: " + a->shape_str() + " vs " + b->shape_str());
  }
  std::vector<double> values(a->numel());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = a->data[i] + b->data[i];
  auto bwd = [a, b](const Tensor& out) {
    const double* go = out.grad.data();
    if (a->requires_grad) {
      double* da = grad_of(a);
      for (std::size_t i = 0; i < a->data.size(); ++i) da[i] += go[i];
    }
    if (b->requires_grad) {
      double* db = grad_of(b);
      for (std::size_t i = 0; i < b->data.size(); ++i) db[i] += go[i];
    }
  };
  return g.emit(a->shape, std::move(values), {a, b}, std::move(bwd));
}

TensorPtr sum(Graph& g, const TensorPtr& x) {
  if (!x) throw ContractError("sum input is null");
  double acc = 0.0;
  for (double v : x->data) acc += v;
  auto bwd = [x](const Tensor& out) {
    if (!x->requires_grad) return;
    double* dx = grad_of(x);
    const double gv = out.grad[0];
    for (std::size_t i = 0; i < x->data.size(); ++i) dx[i] += gv;
  };
  return g.emit({1}, {acc}, {x}, std::move(bwd));
}

TensorPtr detach(const TensorPtr& x) {
  if (!x) throw ContractError("detach input is null");
  auto t = std::make_shared<Tensor>();
  t->shape = x->shape;
  t->data = x->data;
  t->requires_grad = false;
  return t;
}

}  // namespace fhseg::ops
