#include "nanoflow/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "nanoflow/errors.hpp"

namespace nf {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

// Returns the tape to record on, or nullptr when no operand needs a gradient.
GradTape* tracking(std::initializer_list<const Tensor*> inputs) {
  GradTape* tape = GradTape::active();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return tape;
  return nullptr;
}

Tensor finish(Shape shape, std::vector<double> values, const char* op, GradTape* tape) {
  check_finite(values, op);
  Tensor out = make_result(std::move(shape), std::move(values));
  if (tape) out.impl()->requires_grad = true;
  return out;
}

std::vector<double>* grad_of(const ImplPtr& p) { return p->requires_grad ? &p->grad_buffer() : nullptr; }

}  // namespace

// ---------------------------------------------------------------------------
// matmul / transpose / logabsdet

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  GradTape* tape = tracking({&a, &b});
  Tensor res = finish({m, n}, std::move(out), "matmul", tape);
  if (tape) {
    tape->record([ai = a.impl(), bi = b.impl(), oi = res.impl(), m, k, n] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (auto* ga = grad_of(ai)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = bi->data.data() + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * brow[j];
            (*ga)[i * k + p] += s;
          }
      }
      if (auto* gb = grad_of(bi)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ai->data[i * k + p];
            double* gbrow = gb->data() + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * g[i * n + j];
          }
      }
    });
  }
  return res;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose needs a 2-D tensor, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  GradTape* tape = tracking({&a});
  Tensor res = finish({c, r}, std::move(out), "transpose", tape);
  if (tape) {
    tape->record([ai = a.impl(), oi = res.impl(), r, c] {
      if (oi->grad.empty()) return;
      auto& ga = ai->grad_buffer();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += oi->grad[j * r + i];
    });
  }
  return res;
}

namespace linalg {

bool lu_decompose(std::span<const double> a, std::size_t n, LU& out) {
  out.n = n;
  out.lu.assign(a.begin(), a.end());
  out.perm.resize(n);
  out.sign = 1;
  for (std::size_t i = 0; i < n; ++i) out.perm[i] = i;
  auto& m = out.lu;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    double best = std::abs(m[col * n + col]);
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m[r * n + col]) > best) {
        best = std::abs(m[r * n + col]);
        piv = r;
      }
    if (best == 0.0) return false;
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m[piv * n + j], m[col * n + j]);
      std::swap(out.perm[piv], out.perm[col]);
      out.sign = -out.sign;
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = m[r * n + col] / m[col * n + col];
      m[r * n + col] = f;
      for (std::size_t j = col + 1; j < n; ++j) m[r * n + j] -= f * m[col * n + j];
    }
  }
  return true;
}

double lu_logabsdet(const LU& lu) {
  double s = 0.0;
  for (std::size_t i = 0; i < lu.n; ++i) s += std::log(std::abs(lu.lu[i * lu.n + i]));
  return s;
}

std::vector<double> lu_inverse(const LU& lu) {
  const std::size_t n = lu.n;
  std::vector<double> inv(n * n, 0.0);
  std::vector<double> col(n);
  for (std::size_t c = 0; c < n; ++c) {
    // Solve A x = e_c with P A = L U.
    for (std::size_t i = 0; i < n; ++i) col[i] = (lu.perm[i] == c) ? 1.0 : 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) col[i] -= lu.lu[i * n + j] * col[j];
    for (std::size_t ii = n; ii-- > 0;) {
      for (std::size_t j = ii + 1; j < n; ++j) col[ii] -= lu.lu[ii * n + j] * col[j];
      col[ii] /= lu.lu[ii * n + ii];
    }
    for (std::size_t i = 0; i < n; ++i) inv[i * n + c] = col[i];
  }
  return inv;
}

std::vector<double> inverse(std::span<const double> a, std::size_t n) {
  LU lu;
  if (!lu_decompose(a, n, lu)) throw DomainError("matrix is singular");
  return lu_inverse(lu);
}

}  // namespace linalg

Tensor logabsdet(const Tensor& w) {
  if (w.rank() != 2 || w.dim(0) != w.dim(1))
    throw DimensionError("logabsdet needs a square matrix, got " + shape_str(w.shape()));
  const std::size_t n = w.dim(0);
  linalg::LU lu;
  if (!linalg::lu_decompose(w.data(), n, lu)) throw DomainError("logabsdet of a singular matrix");
  GradTape* tape = tracking({&w});
  Tensor res = finish({1}, {linalg::lu_logabsdet(lu)}, "logabsdet", tape);
  if (tape) {
    tape->record([wi = w.impl(), oi = res.impl(), n, lu = std::move(lu)] {
      if (oi->grad.empty()) return;
      const double g = oi->grad[0];
      const auto inv = linalg::lu_inverse(lu);
      auto& gw = wi->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) gw[i * n + j] += g * inv[j * n + i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// convolution

namespace {

struct ConvGeometry {
  std::size_t B, H, W, Ci, Co, kh, kw;
  std::vector<std::ptrdiff_t> off_h, off_w;
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& k, const ConvOptions& o) {
  if (x.rank() != 4 || k.rank() != 4)
    throw DimensionError("conv2d expects x [B,H,W,C] and kernel [kh,kw,Cin,Cout]");
  if (x.dim(3) != k.dim(2))
    throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(k.shape()));
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(3), k.dim(0), k.dim(1), {}, {}};
  if (g.kw % 2 == 0) throw DimensionError("conv2d kernel width must be odd");
  if (o.pad_h == Padding::Same && g.kh % 2 == 0)
    throw DimensionError("conv2d kernel height must be odd for same padding");
  const auto dh = static_cast<std::ptrdiff_t>(o.dilation_h);
  const auto dw = static_cast<std::ptrdiff_t>(o.dilation_w);
  const auto kh = static_cast<std::ptrdiff_t>(g.kh);
  const auto kw = static_cast<std::ptrdiff_t>(g.kw);
  for (std::ptrdiff_t i = 0; i < kh; ++i)
    g.off_h.push_back(o.pad_h == Padding::Causal ? (i - (kh - 1)) * dh : (i - (kh - 1) / 2) * dh);
  for (std::ptrdiff_t j = 0; j < kw; ++j) g.off_w.push_back((j - (kw - 1) / 2) * dw);
  return g;
}

// Calls fn(out_pos, in_pos, tap) for every valid (output, input, tap) triple in
// the fixed order taps-outer per output position.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const auto H = static_cast<std::ptrdiff_t>(g.H);
  const auto W = static_cast<std::ptrdiff_t>(g.W);
  for (std::size_t b = 0; b < g.B; ++b)
    for (std::ptrdiff_t oh = 0; oh < H; ++oh)
      for (std::ptrdiff_t ow = 0; ow < W; ++ow) {
        const std::size_t opos = (b * g.H + oh) * g.W + ow;
        for (std::size_t th = 0; th < g.kh; ++th) {
          const std::ptrdiff_t ih = oh + g.off_h[th];
          if (ih < 0 || ih >= H) continue;
          for (std::size_t tw = 0; tw < g.kw; ++tw) {
            const std::ptrdiff_t iw = ow + g.off_w[tw];
            if (iw < 0 || iw >= W) continue;
            fn(opos, (b * g.H + ih) * g.W + iw, th * g.kw + tw);
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const ConvOptions& opts) {
  const ConvGeometry g = conv_geometry(x, kernel, opts);
  std::vector<double> out(g.B * g.H * g.W * g.Co, 0.0);
  const double* px = x.data().data();
  const double* pk = kernel.data().data();
  const std::size_t Ci = g.Ci, Co = g.Co;
  for_each_tap(g, [&](std::size_t opos, std::size_t ipos, std::size_t tap) {
    const double* in = px + ipos * Ci;
    const double* kt = pk + tap * Ci * Co;
    double* o = out.data() + opos * Co;
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const double a = in[ci];
      const double* kr = kt + ci * Co;
      for (std::size_t co = 0; co < Co; ++co) o[co] += a * kr[co];
    }
  });
  GradTape* tape = tracking({&x, &kernel});
  Tensor res = finish({g.B, g.H, g.W, g.Co}, std::move(out), "conv2d", tape);
  if (tape) {
    tape->record([xi = x.impl(), ki = kernel.impl(), oi = res.impl(), g] {
      if (oi->grad.empty()) return;
      const std::size_t Ci = g.Ci, Co = g.Co;
      const double* go_all = oi->grad.data();
      double* gx = xi->requires_grad ? xi->grad_buffer().data() : nullptr;
      double* gk = ki->requires_grad ? ki->grad_buffer().data() : nullptr;
      const double* px = xi->data.data();
      // per-tap transpose [Co, Ci] so the input-gradient loop is an axpy
      const std::size_t taps = g.kh * g.kw;
      std::vector<double> kt_all(gx ? taps * Ci * Co : 0);
      for (std::size_t t = 0; gx && t < taps; ++t)
        for (std::size_t ci = 0; ci < Ci; ++ci)
          for (std::size_t co = 0; co < Co; ++co) kt_all[(t * Co + co) * Ci + ci] = ki->data[(t * Ci + ci) * Co + co];
      for_each_tap(g, [&](std::size_t opos, std::size_t ipos, std::size_t tap) {
        const double* go = go_all + opos * Co;
        if (gx) {
          double* gi = gx + ipos * Ci;
          const double* kt = kt_all.data() + tap * Co * Ci;
          for (std::size_t co = 0; co < Co; ++co) {
            const double a = go[co];
            const double* kr = kt + co * Ci;
            for (std::size_t ci = 0; ci < Ci; ++ci) gi[ci] += a * kr[ci];
          }
        }
        if (gk) {
          const double* in = px + ipos * Ci;
          double* gkt = gk + tap * Ci * Co;
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double a = in[ci];
            double* gkr = gkt + ci * Co;
            for (std::size_t co = 0; co < Co; ++co) gkr[co] += a * go[co];
          }
        }
      });
    });
  }
  return res;
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t dilation, Padding pad) {
  if (x.rank() != 3 || kernel.rank() != 3)
    throw DimensionError("conv1d expects x [B,L,C] and kernel [k,Cin,Cout]");
  Tensor x4 = reshape(x, {x.dim(0), x.dim(1), 1, x.dim(2)});
  Tensor k4 = reshape(kernel, {kernel.dim(0), 1, kernel.dim(1), kernel.dim(2)});
  Tensor y = conv2d(x4, k4, ConvOptions{dilation, 1, pad});
  return reshape(y, {x.dim(0), x.dim(1), kernel.dim(2)});
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

const char* unary_name(UnaryOp op) {
  switch (op) {
    case UnaryOp::Exp: return "exp";
    case UnaryOp::Log: return "log";
    case UnaryOp::Tanh: return "tanh";
    case UnaryOp::Sigmoid: return "sigmoid";
    case UnaryOp::Neg: return "neg";
    case UnaryOp::Relu: return "relu";
    case UnaryOp::Softplus: return "softplus";
    case UnaryOp::Sqrt: return "sqrt";
    case UnaryOp::Square: return "square";
  }
  return "unary";
}

double softplus_scalar(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor unary(UnaryOp op, const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  switch (op) {
    case UnaryOp::Exp:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
      break;
    case UnaryOp::Log:
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (!(in[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(in[i]));
        out[i] = std::log(in[i]);
      }
      break;
    case UnaryOp::Tanh:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::tanh(in[i]);
      break;
    case UnaryOp::Sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = sigmoid_scalar(in[i]);
      break;
    case UnaryOp::Neg:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = -in[i];
      break;
    case UnaryOp::Relu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case UnaryOp::Softplus:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = softplus_scalar(in[i]);
      break;
    case UnaryOp::Sqrt:
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] < 0.0) throw DomainError("sqrt of negative value " + std::to_string(in[i]));
        out[i] = std::sqrt(in[i]);
      }
      break;
    case UnaryOp::Square:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * in[i];
      break;
  }
  GradTape* tape = tracking({&x});
  Tensor res = finish(x.shape(), std::move(out), unary_name(op), tape);
  if (tape) {
    tape->record([op, xi = x.impl(), oi = res.impl()] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      const auto& g = oi->grad;
      const auto& xv = xi->data;
      const auto& y = oi->data;
      const std::size_t n = xv.size();
      switch (op) {
        case UnaryOp::Exp:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i];
          break;
        case UnaryOp::Log:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / xv[i];
          break;
        case UnaryOp::Tanh:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
          break;
        case UnaryOp::Sigmoid:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
          break;
        case UnaryOp::Neg:
          for (std::size_t i = 0; i < n; ++i) gx[i] -= g[i];
          break;
        case UnaryOp::Relu:
          for (std::size_t i = 0; i < n; ++i)
            if (xv[i] > 0.0) gx[i] += g[i];
          break;
        case UnaryOp::Softplus:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * sigmoid_scalar(xv[i]);
          break;
        case UnaryOp::Sqrt:
          for (std::size_t i = 0; i < n; ++i) gx[i] += y[i] > 0.0 ? g[i] * 0.5 / y[i] : 0.0;
          break;
        case UnaryOp::Square:
          for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * 2.0 * xv[i];
          break;
      }
    });
  }
  return res;
}

namespace {

// Visits (i, i % nb) for i < n without a per-element division; nb divides n.
template <class F>
void for_broadcast(std::size_t n, std::size_t nb, F&& f) {
  if (nb == n) {
    for (std::size_t i = 0; i < n; ++i) f(i, i);
  } else if (nb == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i, 0);
  } else {
    for (std::size_t base = 0; base < n; base += nb)
      for (std::size_t j = 0; j < nb; ++j) f(base + j, j);
  }
}

}  // namespace

Tensor binary(BinaryOp op, const Tensor& a, const Tensor& b) {
  const std::size_t n = a.numel(), nb = b.numel();
  bool ok = a.shape() == b.shape() || nb == 1;
  if (!ok && b.rank() == 1 && a.rank() >= 1 && a.shape().back() == nb) ok = true;
  if (!ok && b.rank() == a.rank() && b.dim(0) == 1 &&
      std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
    ok = true;
  if (!ok)
    throw DimensionError("binary op cannot broadcast " + shape_str(b.shape()) + " onto " +
                         shape_str(a.shape()));
  // Every admitted broadcast maps element i of a to element i % nb of b.
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::vector<double> out(n);
  const char* name = "add";
  switch (op) {
    case BinaryOp::Add:
      for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { out[i] = pa[i] + pb[j]; });
      break;
    case BinaryOp::Sub:
      name = "sub";
      for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { out[i] = pa[i] - pb[j]; });
      break;
    case BinaryOp::Mul:
      name = "mul";
      for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { out[i] = pa[i] * pb[j]; });
      break;
    case BinaryOp::Div:
      name = "div";
      for (std::size_t j = 0; j < nb; ++j)
        if (pb[j] == 0.0) throw DomainError("division by zero");
      for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { out[i] = pa[i] / pb[j]; });
      break;
  }
  GradTape* tape = tracking({&a, &b});
  Tensor res = finish(a.shape(), std::move(out), name, tape);
  if (tape) {
    tape->record([op, ai = a.impl(), bi = b.impl(), oi = res.impl(), n, nb] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      auto* ga = grad_of(ai);
      auto* gb = grad_of(bi);
      const auto& av = ai->data;
      const auto& bv = bi->data;
      switch (op) {
        case BinaryOp::Add:
          if (ga) for_broadcast(n, nb, [&](std::size_t i, std::size_t) { (*ga)[i] += g[i]; });
          if (gb) for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { (*gb)[j] += g[i]; });
          break;
        case BinaryOp::Sub:
          if (ga) for_broadcast(n, nb, [&](std::size_t i, std::size_t) { (*ga)[i] += g[i]; });
          if (gb) for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { (*gb)[j] -= g[i]; });
          break;
        case BinaryOp::Mul:
          if (ga) for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { (*ga)[i] += g[i] * bv[j]; });
          if (gb) for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { (*gb)[j] += g[i] * av[i]; });
          break;
        case BinaryOp::Div:
          if (ga) for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { (*ga)[i] += g[i] / bv[j]; });
          if (gb)
            for_broadcast(n, nb, [&](std::size_t i, std::size_t j) { (*gb)[j] -= g[i] * av[i] / (bv[j] * bv[j]); });
          break;
      }
    });
  }
  return res;
}

Tensor add_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += s;
  GradTape* tape = tracking({&x});
  Tensor res = finish(x.shape(), std::move(out), "add_scalar", tape);
  if (tape) {
    tape->record([xi = x.impl(), oi = res.impl()] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
    });
  }
  return res;
}

Tensor mul_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= s;
  GradTape* tape = tracking({&x});
  Tensor res = finish(x.shape(), std::move(out), "mul_scalar", tape);
  if (tape) {
    tape->record([xi = x.impl(), oi = res.impl(), s] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * oi->grad[i];
    });
  }
  return res;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = std::clamp(v, lo, hi);
  GradTape* tape = tracking({&x});
  Tensor res = finish(x.shape(), std::move(out), "clamp", tape);
  if (tape) {
    tape->record([xi = x.impl(), oi = res.impl(), lo, hi] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i)
        if (xi->data[i] >= lo && xi->data[i] <= hi) gx[i] += oi->grad[i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// structural

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d)
      if (d != axis && p.dim(d) != first[d])
        throw DimensionError("concat shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(first));
    total += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * len, len, out.data() + o * total * inner + offset * inner);
    offset += p.dim(axis);
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  GradTape* tape = any ? GradTape::active() : nullptr;
  Tensor res = finish(std::move(out_shape), std::move(out), "concat", tape);
  if (tape) {
    std::vector<ImplPtr> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    tape->record([impls = std::move(impls), offsets = std::move(offsets), oi = res.impl(), outer, inner,
                  total, axis] {
      if (oi->grad.empty()) return;
      for (std::size_t k = 0; k < impls.size(); ++k) {
        if (!impls[k]->requires_grad) continue;
        auto& gp = impls[k]->grad_buffer();
        const std::size_t len = impls[k]->shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = oi->grad.data() + o * total * inner + offsets[k] * inner;
          double* dst = gp.data() + o * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return res;
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, std::span<const std::size_t> sizes) {
  if (axis >= x.rank()) throw DimensionError("split axis out of range");
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (total != x.dim(axis))
    throw DimensionError("split sizes sum to " + std::to_string(total) + ", axis has " +
                         std::to_string(x.dim(axis)));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  GradTape* tape = tracking({&x});
  std::vector<Tensor> out;
  std::size_t offset = 0;
  for (auto s : sizes) {
    Shape shp = x.shape();
    shp[axis] = s;
    std::vector<double> v(outer * s * inner);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.data().data() + o * total * inner + offset * inner, s * inner, v.data() + o * s * inner);
    Tensor part = finish(std::move(shp), std::move(v), "split", tape);
    if (tape) {
      tape->record([xi = x.impl(), oi = part.impl(), outer, inner, total, offset, s] {
        if (oi->grad.empty()) return;
        auto& gx = xi->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          double* dst = gx.data() + o * total * inner + offset * inner;
          const double* src = oi->grad.data() + o * s * inner;
          for (std::size_t i = 0; i < s * inner; ++i) dst[i] += src[i];
        }
      });
    }
    out.push_back(std::move(part));
    offset += s;
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  GradTape* tape = tracking({&x});
  Tensor res = make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (tape) {
    res.impl()->requires_grad = true;
    tape->record([xi = x.impl(), oi = res.impl()] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
    });
  }
  return res;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  GradTape* tape = tracking({&x});
  Tensor res = finish({1}, {s}, "sum", tape);
  if (tape) {
    tape->record([xi = x.impl(), oi = res.impl()] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      for (auto& g : gx) g += oi->grad[0];
    });
  }
  return res;
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_except_batch(const Tensor& x) {
  const std::size_t B = x.dim(0);
  const std::size_t per = x.numel() / B;
  std::vector<double> out(B, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < per; ++i) out[b] += x.data()[b * per + i];
  GradTape* tape = tracking({&x});
  Tensor res = finish({B}, std::move(out), "sum_except_batch", tape);
  if (tape) {
    tape->record([xi = x.impl(), oi = res.impl(), B, per] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < per; ++i) gx[b * per + i] += oi->grad[b];
    });
  }
  return res;
}

Tensor gather(const Tensor& x, Shape out_shape, GatherIndex source) {
  const auto& src = *source;
  if (src.size() != shape_numel(out_shape))
    throw DimensionError("gather index size does not match output shape " + shape_str(out_shape));
  const auto n = static_cast<std::ptrdiff_t>(x.numel());
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] >= n) throw DimensionError("gather index out of range");
    out[i] = src[i] >= 0 ? x.data()[static_cast<std::size_t>(src[i])] : 0.0;
  }
  GradTape* tape = tracking({&x});
  Tensor res = finish(std::move(out_shape), std::move(out), "gather", tape);
  if (tape) {
    tape->record([xi = x.impl(), oi = res.impl(), source] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      const auto& s = *source;
      for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i] >= 0) gx[static_cast<std::size_t>(s[i])] += oi->grad[i];
    });
  }
  return res;
}

Tensor softmax_last(const Tensor& x) {
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.numel() / m;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * m;
    double* o = out.data() + r * m;
    const double mx = *std::max_element(in, in + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < m; ++j) o[j] /= s;
  }
  GradTape* tape = tracking({&x});
  Tensor res = finish(x.shape(), std::move(out), "softmax", tape);
  if (tape) {
    tape->record([xi = x.impl(), oi = res.impl(), m, rows] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = oi->data.data() + r * m;
        const double* g = oi->grad.data() + r * m;
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += y[j] * (g[j] - dot);
      }
    });
  }
  return res;
}

Tensor cumsum_last(const Tensor& x) {
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.numel() / m;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = (s += x.data()[r * m + j]);
  }
  GradTape* tape = tracking({&x});
  Tensor res = finish(x.shape(), std::move(out), "cumsum", tape);
  if (tape) {
    tape->record([xi = x.impl(), oi = res.impl(), m, rows] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = m; j-- > 0;) gx[r * m + j] += (s += oi->grad[r * m + j]);
      }
    });
  }
  return res;
}

Tensor take_last(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t m = x.shape().back();
  const std::size_t rows = x.numel() / m;
  if (index.size() != rows) throw DimensionError("take_last needs one index per row");
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= m) throw DimensionError("take_last index out of range");
    out[r] = x.data()[r * m + index[r]];
  }
  Shape shp(x.shape().begin(), x.shape().end() - 1);
  if (shp.empty()) shp = {1};
  GradTape* tape = tracking({&x});
  Tensor res = finish(std::move(shp), std::move(out), "take_last", tape);
  if (tape) {
    tape->record([xi = x.impl(), oi = res.impl(), idx = std::vector<std::size_t>(index.begin(), index.end()), m] {
      if (oi->grad.empty()) return;
      auto& gx = xi->grad_buffer();
      for (std::size_t r = 0; r < idx.size(); ++r) gx[r * m + idx[r]] += oi->grad[r];
    });
  }
  return res;
}

Tensor where(std::span<const unsigned char> mask, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || mask.size() != a.numel())
    throw DimensionError("where needs equal shapes and a full mask");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? a.data()[i] : b.data()[i];
  GradTape* tape = tracking({&a, &b});
  Tensor res = finish(a.shape(), std::move(out), "where", tape);
  if (tape) {
    tape->record([ai = a.impl(), bi = b.impl(), oi = res.impl(),
                  m = std::vector<unsigned char>(mask.begin(), mask.end())] {
      if (oi->grad.empty()) return;
      auto* ga = grad_of(ai);
      auto* gb = grad_of(bi);
      for (std::size_t i = 0; i < m.size(); ++i) {
        if (m[i]) {
          if (ga) (*ga)[i] += oi->grad[i];
        } else if (gb) {
          (*gb)[i] += oi->grad[i];
        }
      }
    });
  }
  return res;
}

}  // namespace nf
