#include "ftfoot/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace ftfoot::diff {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

void require_rank(const Tensor& t, int rank, const char* where) {
  if (t.rank() != rank) {
    fail(std::string(where) + ": expected rank " + std::to_string(rank) + ", got shape " + shape_str(t));
  }
}

int floor_div(int a, int b) {
  int q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

int ceil_div(int a, int b) { return floor_div(a + b - 1, b); }

// Output indices o with 0 <= o*stride - pad + d < limit, clipped to [0, out_n).
void valid_out_range(int d, int stride, int pad, int limit, int out_n, int& lo, int& hi) {
  lo = std::max(0, ceil_div(pad - d, stride));
  hi = std::min(out_n - 1, floor_div(limit - 1 + pad - d, stride));
}

// ---- conv2d kernels ------------------------------------------------------

Tensor conv2d_fwd(const Tensor& x, const Tensor& k, const Tensor& b, int s, int p) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h + 2 * p - kh) / s + 1;
  const int ow = (w + 2 * p - kw) / s + 1;
  Tensor out({cout, oh, ow});
  for (int co = 0; co < cout; ++co) {
    double* op = out.data() + static_cast<int64_t>(co) * oh * ow;
    const double bias = b[co];
    for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) op[i] = bias;
    for (int ci = 0; ci < cin; ++ci) {
      const double* xp = x.data() + static_cast<int64_t>(ci) * h * w;
      const double* kp = k.data() + (static_cast<int64_t>(co) * cin + ci) * kh * kw;
      for (int di = 0; di < kh; ++di) {
        int oi_lo, oi_hi;
        valid_out_range(di, s, p, h, oh, oi_lo, oi_hi);
        for (int dj = 0; dj < kw; ++dj) {
          const double kv = kp[di * kw + dj];
          int oj_lo, oj_hi;
          valid_out_range(dj, s, p, w, ow, oj_lo, oj_hi);
          for (int oi = oi_lo; oi <= oi_hi; ++oi) {
            const double* row = xp + static_cast<int64_t>(oi * s - p + di) * w + (-p + dj);
            double* orow = op + static_cast<int64_t>(oi) * ow;
            for (int oj = oj_lo; oj <= oj_hi; ++oj) orow[oj] += kv * row[static_cast<int64_t>(oj) * s];
          }
        }
      }
    }
  }
  return out;
}

void conv2d_bwd_input(Tensor& gx, const Tensor& k, const Tensor& g, int s, int p) {
  const int cin = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
  const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = g.dim(1), ow = g.dim(2);
  for (int co = 0; co < cout; ++co) {
    const double* gp = g.data() + static_cast<int64_t>(co) * oh * ow;
    for (int ci = 0; ci < cin; ++ci) {
      double* xp = gx.data() + static_cast<int64_t>(ci) * h * w;
      const double* kp = k.data() + (static_cast<int64_t>(co) * cin + ci) * kh * kw;
      for (int di = 0; di < kh; ++di) {
        int oi_lo, oi_hi;
        valid_out_range(di, s, p, h, oh, oi_lo, oi_hi);
        for (int dj = 0; dj < kw; ++dj) {
          const double kv = kp[di * kw + dj];
          int oj_lo, oj_hi;
          valid_out_range(dj, s, p, w, ow, oj_lo, oj_hi);
          for (int oi = oi_lo; oi <= oi_hi; ++oi) {
            double* row = xp + static_cast<int64_t>(oi * s - p + di) * w + (-p + dj);
            const double* grow = gp + static_cast<int64_t>(oi) * ow;
            for (int oj = oj_lo; oj <= oj_hi; ++oj) row[static_cast<int64_t>(oj) * s] += kv * grow[oj];
          }
        }
      }
    }
  }
}

void conv2d_bwd_kernel(Tensor& gk, const Tensor& x, const Tensor& g, int s, int p) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = gk.dim(0), kh = gk.dim(2), kw = gk.dim(3);
  const int oh = g.dim(1), ow = g.dim(2);
  for (int co = 0; co < cout; ++co) {
    const double* gp = g.data() + static_cast<int64_t>(co) * oh * ow;
    for (int ci = 0; ci < cin; ++ci) {
      const double* xp = x.data() + static_cast<int64_t>(ci) * h * w;
      double* kp = gk.data() + (static_cast<int64_t>(co) * cin + ci) * kh * kw;
      for (int di = 0; di < kh; ++di) {
        int oi_lo, oi_hi;
        valid_out_range(di, s, p, h, oh, oi_lo, oi_hi);
        for (int dj = 0; dj < kw; ++dj) {
          int oj_lo, oj_hi;
          valid_out_range(dj, s, p, w, ow, oj_lo, oj_hi);
          double acc = 0.0;
          for (int oi = oi_lo; oi <= oi_hi; ++oi) {
            const double* row = xp + static_cast<int64_t>(oi * s - p + di) * w + (-p + dj);
            const double* grow = gp + static_cast<int64_t>(oi) * ow;
            for (int oj = oj_lo; oj <= oj_hi; ++oj) acc += grow[oj] * row[static_cast<int64_t>(oj) * s];
          }
          kp[di * kw + dj] += acc;
        }
      }
    }
  }
}

void conv2d_bwd_bias(Tensor& gb, const Tensor& g) {
  const int cout = g.dim(0);
  const int64_t plane = static_cast<int64_t>(g.dim(1)) * g.dim(2);
  for (int co = 0; co < cout; ++co) {
    const double* gp = g.data() + co * plane;
    double acc = 0.0;
    for (int64_t i = 0; i < plane; ++i) acc += gp[i];
    gb[co] += acc;
  }
}

// ---- deconv2d kernels ----------------------------------------------------
// out[cb, oi*s-p+di, oj*s-p+dj] += x[ca, oi, oj] * k[ca, cb, di, dj]
// which is the adjoint of conv2d with the same kernel tensor.

Tensor deconv2d_fwd(const Tensor& x, const Tensor& k, const Tensor& b, int s, int p) {
  const int ca_n = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cb_n = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h - 1) * s + kh - 2 * p;
  const int ow = (w - 1) * s + kw - 2 * p;
  Tensor out({cb_n, oh, ow});
  for (int cb = 0; cb < cb_n; ++cb) {
    double* op = out.data() + static_cast<int64_t>(cb) * oh * ow;
    const double bias = b[cb];
    for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) op[i] = bias;
  }
  for (int ca = 0; ca < ca_n; ++ca) {
    const double* xp = x.data() + static_cast<int64_t>(ca) * h * w;
    for (int cb = 0; cb < cb_n; ++cb) {
      double* op = out.data() + static_cast<int64_t>(cb) * oh * ow;
      const double* kp = k.data() + (static_cast<int64_t>(ca) * cb_n + cb) * kh * kw;
      for (int di = 0; di < kh; ++di) {
        int i_lo, i_hi;
        valid_out_range(di, s, p, oh, h, i_lo, i_hi);
        for (int dj = 0; dj < kw; ++dj) {
          const double kv = kp[di * kw + dj];
          int j_lo, j_hi;
          valid_out_range(dj, s, p, ow, w, j_lo, j_hi);
          for (int i = i_lo; i <= i_hi; ++i) {
            const double* xrow = xp + static_cast<int64_t>(i) * w;
            double* orow = op + static_cast<int64_t>(i * s - p + di) * ow + (-p + dj);
            for (int j = j_lo; j <= j_hi; ++j) orow[static_cast<int64_t>(j) * s] += kv * xrow[j];
          }
        }
      }
    }
  }
  return out;
}

void deconv2d_bwd_input(Tensor& gx, const Tensor& k, const Tensor& g, int s, int p) {
  const int ca_n = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
  const int cb_n = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const int oh = g.dim(1), ow = g.dim(2);
  for (int ca = 0; ca < ca_n; ++ca) {
    double* xp = gx.data() + static_cast<int64_t>(ca) * h * w;
    for (int cb = 0; cb < cb_n; ++cb) {
      const double* gp = g.data() + static_cast<int64_t>(cb) * oh * ow;
      const double* kp = k.data() + (static_cast<int64_t>(ca) * cb_n + cb) * kh * kw;
      for (int di = 0; di < kh; ++di) {
        int i_lo, i_hi;
        valid_out_range(di, s, p, oh, h, i_lo, i_hi);
        for (int dj = 0; dj < kw; ++dj) {
          const double kv = kp[di * kw + dj];
          int j_lo, j_hi;
          valid_out_range(dj, s, p, ow, w, j_lo, j_hi);
          for (int i = i_lo; i <= i_hi; ++i) {
            double* xrow = xp + static_cast<int64_t>(i) * w;
            const double* grow = gp + static_cast<int64_t>(i * s - p + di) * ow + (-p + dj);
            for (int j = j_lo; j <= j_hi; ++j) xrow[j] += kv * grow[static_cast<int64_t>(j) * s];
          }
        }
      }
    }
  }
}

void deconv2d_bwd_kernel(Tensor& gk, const Tensor& x, const Tensor& g, int s, int p) {
  const int ca_n = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cb_n = gk.dim(1), kh = gk.dim(2), kw = gk.dim(3);
  const int oh = g.dim(1), ow = g.dim(2);
  for (int ca = 0; ca < ca_n; ++ca) {
    const double* xp = x.data() + static_cast<int64_t>(ca) * h * w;
    for (int cb = 0; cb < cb_n; ++cb) {
      const double* gp = g.data() + static_cast<int64_t>(cb) * oh * ow;
      double* kp = gk.data() + (static_cast<int64_t>(ca) * cb_n + cb) * kh * kw;
      for (int di = 0; di < kh; ++di) {
        int i_lo, i_hi;
        valid_out_range(di, s, p, oh, h, i_lo, i_hi);
        for (int dj = 0; dj < kw; ++dj) {
          int j_lo, j_hi;
          valid_out_range(dj, s, p, ow, w, j_lo, j_hi);
          double acc = 0.0;
          for (int i = i_lo; i <= i_hi; ++i) {
            const double* xrow = xp + static_cast<int64_t>(i) * w;
            const double* grow = gp + static_cast<int64_t>(i * s - p + di) * ow + (-p + dj);
            for (int j = j_lo; j <= j_hi; ++j) acc += xrow[j] * grow[static_cast<int64_t>(j) * s];
          }
          kp[di * kw + dj] += acc;
        }
      }
    }
  }
}

}  // namespace

// ---- elementwise ---------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const int ai = a.id(), bi = b.id();
  const bool req = t.requires_grad(ai) || t.requires_grad(bi);
  return t.make(std::move(out), req, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_mut(ai);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_mut(bi);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const int ai = a.id(), bi = b.id();
  const bool req = t.requires_grad(ai) || t.requires_grad(bi);
  return t.make(std::move(out), req, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_mut(ai);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_mut(bi);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const int ai = a.id(), bi = b.id();
  const bool req = t.requires_grad(ai) || t.requires_grad(bi);
  return t.make(std::move(out), req, [ai, bi](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_mut(ai);
      const Tensor& bv2 = tp.value(bi);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_mut(bi);
      const Tensor& av = tp.value(ai);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  Tape& t = *a.tape();
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= c;
  const int ai = a.id();
  return t.make(std::move(out), t.requires_grad(ai), [ai, c](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (!tp.requires_grad(ai)) return;
    Tensor& ga = tp.grad_mut(ai);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

Var scale_by(Var a, Var s) {
  Tape& t = same_tape(a, s);
  require(s.value().size() == 1, "scale_by: scale must have shape (1), got " + shape_str(s.value()));
  const double sv = s.value()[0];
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= sv;
  const int ai = a.id(), si = s.id();
  const bool req = t.requires_grad(ai) || t.requires_grad(si);
  return t.make(std::move(out), req, [ai, si](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad_mut(ai);
      const double sv2 = tp.value(si)[0];
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += sv2 * g[i];
    }
    if (tp.requires_grad(si)) {
      const Tensor& av = tp.value(ai);
      double acc = 0.0;
      for (int64_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      tp.grad_mut(si)[0] += acc;
    }
  });
}

Var relu(Var a) {
  Tape& t = *a.tape();
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  const int ai = a.id();
  return t.make(std::move(out), t.requires_grad(ai), [ai](Tape& tp, int self) {
    if (!tp.requires_grad(ai)) return;
    const Tensor& g = tp.grad(self);
    const Tensor& av = tp.value(ai);
    Tensor& ga = tp.grad_mut(ai);
    for (int64_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape();
  Tensor out = a.value();
  for (int64_t i = 0; i < out.size(); ++i) {
    const double x = out[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  const int ai = a.id();
  return t.make(std::move(out), t.requires_grad(ai), [ai](Tape& tp, int self) {
    if (!tp.requires_grad(ai)) return;
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad_mut(ai);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

// ---- shape plumbing ------------------------------------------------------

Var reshape(Var x, std::vector<int> shape) {
  Tape& t = *x.tape();
  Tensor out(shape, std::vector<double>(x.value().data(), x.value().data() + x.value().size()));
  require(out.size() == x.value().size(),
          "reshape: size mismatch " + shape_str(x.value()) + " -> " + shape_str(shape));
  const int xi = x.id();
  return t.make(std::move(out), t.requires_grad(xi), [xi](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad_mut(xi);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var concat_ch(const std::vector<Var>& xs) {
  require(!xs.empty(), "concat_ch: no inputs");
  Tape& t = *xs[0].tape();
  const int h = xs[0].value().dim(1), w = xs[0].value().dim(2);
  int ctot = 0;
  bool req = false;
  for (const Var& v : xs) {
    require_rank(v.value(), 3, "concat_ch");
    require(v.value().dim(1) == h && v.value().dim(2) == w,
            "concat_ch: spatial mismatch " + shape_str(v.value()) + " vs " + shape_str(xs[0].value()));
    ctot += v.value().dim(0);
    req = req || t.requires_grad(v.id());
  }
  Tensor out({ctot, h, w});
  const int64_t plane = static_cast<int64_t>(h) * w;
  int64_t off = 0;
  std::vector<int> ids;
  std::vector<int> chans;
  for (const Var& v : xs) {
    const int64_t n = v.value().size();
    std::memcpy(out.data() + off, v.value().data(), static_cast<size_t>(n) * sizeof(double));
    off += n;
    ids.push_back(v.id());
    chans.push_back(v.value().dim(0));
  }
  return t.make(std::move(out), req, [ids, chans, plane](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    int64_t off2 = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      const int64_t n = chans[i] * plane;
      if (tp.requires_grad(ids[i])) {
        Tensor& gx = tp.grad_mut(ids[i]);
        for (int64_t j = 0; j < n; ++j) gx[j] += g[off2 + j];
      }
      off2 += n;
    }
  });
}

Var slice_ch(Var x, int c0, int c1) {
  Tape& t = *x.tape();
  require_rank(x.value(), 3, "slice_ch");
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  require(0 <= c0 && c0 < c1 && c1 <= c, "slice_ch: bad channel range");
  const int64_t plane = static_cast<int64_t>(h) * w;
  Tensor out({c1 - c0, h, w});
  std::memcpy(out.data(), x.value().data() + c0 * plane, static_cast<size_t>((c1 - c0) * plane) * sizeof(double));
  const int xi = x.id();
  return t.make(std::move(out), t.requires_grad(xi), [xi, c0, plane](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad_mut(xi);
    const int64_t base = c0 * plane;
    for (int64_t i = 0; i < g.size(); ++i) gx[base + i] += g[i];
  });
}

Var mul_bc_ch(Var x, Var m) {
  Tape& t = same_tape(x, m);
  require_rank(x.value(), 3, "mul_bc_ch");
  require_rank(m.value(), 3, "mul_bc_ch");
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  require(m.value().dim(0) == 1 && m.value().dim(1) == h && m.value().dim(2) == w,
          "mul_bc_ch: mask shape " + shape_str(m.value()) + " does not broadcast over " + shape_str(x.value()));
  const int64_t plane = static_cast<int64_t>(h) * w;
  Tensor out = x.value();
  const double* mp = m.value().data();
  for (int ch = 0; ch < c; ++ch) {
    double* op = out.data() + ch * plane;
    for (int64_t i = 0; i < plane; ++i) op[i] *= mp[i];
  }
  const int xi = x.id(), mi = m.id();
  const bool req = t.requires_grad(xi) || t.requires_grad(mi);
  return t.make(std::move(out), req, [xi, mi, c, plane](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_mut(xi);
      const double* mp2 = tp.value(mi).data();
      for (int ch = 0; ch < c; ++ch) {
        double* gp = gx.data() + ch * plane;
        const double* go = g.data() + ch * plane;
        for (int64_t i = 0; i < plane; ++i) gp[i] += go[i] * mp2[i];
      }
    }
    if (tp.requires_grad(mi)) {
      Tensor& gm = tp.grad_mut(mi);
      const Tensor& xv = tp.value(xi);
      for (int ch = 0; ch < c; ++ch) {
        const double* xp = xv.data() + ch * plane;
        const double* go = g.data() + ch * plane;
        for (int64_t i = 0; i < plane; ++i) gm[i] += go[i] * xp[i];
      }
    }
  });
}

Var permute_chw_to_hwab(Var x, int a, int b) {
  Tape& t = *x.tape();
  require_rank(x.value(), 3, "permute_chw_to_hwab");
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  require(c == a * b, "permute_chw_to_hwab: channel count " + std::to_string(c) + " != " + std::to_string(a) + "*" +
                          std::to_string(b));
  Tensor out({h, w, a, b});
  const int64_t plane = static_cast<int64_t>(h) * w;
  const double* xp = x.value().data();
  double* op = out.data();
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const int64_t base = (static_cast<int64_t>(i) * w + j) * c;
      for (int ch = 0; ch < c; ++ch) op[base + ch] = xp[ch * plane + i * static_cast<int64_t>(w) + j];
    }
  }
  const int xi = x.id();
  return t.make(std::move(out), t.requires_grad(xi), [xi, c, h, w, plane](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad_mut(xi);
    const double* gp = g.data();
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const int64_t base = (static_cast<int64_t>(i) * w + j) * c;
        for (int ch = 0; ch < c; ++ch) gx[ch * plane + i * static_cast<int64_t>(w) + j] += gp[base + ch];
      }
    }
  });
}

// ---- convolution family --------------------------------------------------

Var conv2d(Var x, Var kernel, Var bias, int stride, int padding) {
  Tape& t = same_tape(x, kernel);
  same_tape(kernel, bias);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  const Tensor& bv = bias.value();
  require_rank(xv, 3, "conv2d input");
  require_rank(kv, 4, "conv2d kernel");
  require(kv.dim(1) == xv.dim(0),
          "conv2d: kernel in_channels mismatch, kernel " + shape_str(kv) + " vs input " + shape_str(xv));
  require(kv.dim(2) == kv.dim(3), "conv2d: kernel must be square, got " + shape_str(kv));
  require(kv.dim(2) % 2 == 1, "conv2d: kernel size must be odd, got " + shape_str(kv));
  require(bv.rank() == 1 && bv.dim(0) == kv.dim(0),
          "conv2d: bias shape " + shape_str(bv) + " does not match kernel " + shape_str(kv));
  require(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
  const int k = kv.dim(2);
  require(xv.dim(1) + 2 * padding >= k && xv.dim(2) + 2 * padding >= k,
          "conv2d: input " + shape_str(xv) + " smaller than kernel " + shape_str(kv));
  Tensor out = conv2d_fwd(xv, kv, bv, stride, padding);
  const int xi = x.id(), ki = kernel.id(), bi = bias.id();
  const bool req = t.requires_grad(xi) || t.requires_grad(ki) || t.requires_grad(bi);
  return t.make(std::move(out), req, [xi, ki, bi, stride, padding](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(xi)) conv2d_bwd_input(tp.grad_mut(xi), tp.value(ki), g, stride, padding);
    if (tp.requires_grad(ki)) conv2d_bwd_kernel(tp.grad_mut(ki), tp.value(xi), g, stride, padding);
    if (tp.requires_grad(bi)) conv2d_bwd_bias(tp.grad_mut(bi), g);
  });
}

Var deconv2d(Var x, Var kernel, Var bias, int stride, int padding) {
  Tape& t = same_tape(x, kernel);
  same_tape(kernel, bias);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  const Tensor& bv = bias.value();
  require_rank(xv, 3, "deconv2d input");
  require_rank(kv, 4, "deconv2d kernel");
  require(stride == 1 || stride == 2, "deconv2d: stride must be 1 or 2");
  require(kv.dim(0) == xv.dim(0),
          "deconv2d: kernel in_channels mismatch, kernel " + shape_str(kv) + " vs input " + shape_str(xv));
  require(kv.dim(2) == kv.dim(3), "deconv2d: kernel must be square, got " + shape_str(kv));
  require(bv.rank() == 1 && bv.dim(0) == kv.dim(1),
          "deconv2d: bias shape " + shape_str(bv) + " does not match kernel " + shape_str(kv));
  const int k = kv.dim(2);
  require((xv.dim(1) - 1) * stride + k - 2 * padding >= 1, "deconv2d: empty output");
  Tensor out = deconv2d_fwd(xv, kv, bv, stride, padding);
  const int xi = x.id(), ki = kernel.id(), bi = bias.id();
  const bool req = t.requires_grad(xi) || t.requires_grad(ki) || t.requires_grad(bi);
  return t.make(std::move(out), req, [xi, ki, bi, stride, padding](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(xi)) deconv2d_bwd_input(tp.grad_mut(xi), tp.value(ki), g, stride, padding);
    if (tp.requires_grad(ki)) deconv2d_bwd_kernel(tp.grad_mut(ki), tp.value(xi), g, stride, padding);
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad_mut(bi);
      const int cb_n = g.dim(0);
      const int64_t plane = static_cast<int64_t>(g.dim(1)) * g.dim(2);
      for (int cb = 0; cb < cb_n; ++cb) {
        const double* gp = g.data() + cb * plane;
        double acc = 0.0;
        for (int64_t i = 0; i < plane; ++i) acc += gp[i];
        gb[cb] += acc;
      }
    }
  });
}

Var spatially_variant_conv(Var x, Var filters) {
  Tape& t = same_tape(x, filters);
  const Tensor& xv = x.value();
  const Tensor& fv = filters.value();
  require_rank(xv, 3, "spatially_variant_conv input");
  require_rank(fv, 4, "spatially_variant_conv filters");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  require(fv.dim(0) == h && fv.dim(1) == w,
          "spatially_variant_conv: filter grid " + shape_str(fv) + " does not match input " + shape_str(xv));
  require(fv.dim(2) == fv.dim(3), "spatially_variant_conv: filters must be square, got " + shape_str(fv));
  const int k = fv.dim(2);
  require(k % 2 == 1, "spatially_variant_conv: k must be odd, got " + std::to_string(k));
  const int r = k / 2;

  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = xv.data() + static_cast<int64_t>(ch) * h * w;
    double* op = out.data() + static_cast<int64_t>(ch) * h * w;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const double* fp = fv.data() + ((static_cast<int64_t>(i) * w + j) * k) * k;
        double acc = 0.0;
        for (int di = 0; di < k; ++di) {
          const int ii = i + di - r;
          if (ii < 0 || ii >= h) continue;
          for (int dj = 0; dj < k; ++dj) {
            const int jj = j + dj - r;
            if (jj < 0 || jj >= w) continue;
            acc += fp[di * k + dj] * xp[static_cast<int64_t>(ii) * w + jj];
          }
        }
        op[static_cast<int64_t>(i) * w + j] = acc;
      }
    }
  }
  const int xi = x.id(), fi = filters.id();
  const bool req = t.requires_grad(xi) || t.requires_grad(fi);
  return t.make(std::move(out), req, [xi, fi, c, h, w, k, r](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& xv2 = tp.value(xi);
    const Tensor& fv2 = tp.value(fi);
    const int64_t plane = static_cast<int64_t>(h) * w;
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.grad_mut(xi);
      for (int ch = 0; ch < c; ++ch) {
        double* gxp = gx.data() + ch * plane;
        const double* gp = g.data() + ch * plane;
        for (int i = 0; i < h; ++i) {
          for (int j = 0; j < w; ++j) {
            const double gv = gp[static_cast<int64_t>(i) * w + j];
            if (gv == 0.0) continue;
            const double* fp = fv2.data() + ((static_cast<int64_t>(i) * w + j) * k) * k;
            for (int di = 0; di < k; ++di) {
              const int ii = i + di - r;
              if (ii < 0 || ii >= h) continue;
              for (int dj = 0; dj < k; ++dj) {
                const int jj = j + dj - r;
                if (jj < 0 || jj >= w) continue;
                gxp[static_cast<int64_t>(ii) * w + jj] += gv * fp[di * k + dj];
              }
            }
          }
        }
      }
    }
    if (tp.requires_grad(fi)) {
      Tensor& gf = tp.grad_mut(fi);
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          double* gfp = gf.data() + ((static_cast<int64_t>(i) * w + j) * k) * k;
          for (int ch = 0; ch < c; ++ch) {
            const double gv = g.data()[ch * plane + static_cast<int64_t>(i) * w + j];
            if (gv == 0.0) continue;
            const double* xp = xv2.data() + ch * plane;
            for (int di = 0; di < k; ++di) {
              const int ii = i + di - r;
              if (ii < 0 || ii >= h) continue;
              for (int dj = 0; dj < k; ++dj) {
                const int jj = j + dj - r;
                if (jj < 0 || jj >= w) continue;
                gfp[di * k + dj] += gv * xp[static_cast<int64_t>(ii) * w + jj];
              }
            }
          }
        }
      }
    }
  });
}

Var pointwise_dynamic_conv(Var x, Var filters) {
  Tape& t = same_tape(x, filters);
  const Tensor& xv = x.value();
  const Tensor& fv = filters.value();
  require_rank(xv, 3, "pointwise_dynamic_conv input");
  require_rank(fv, 4, "pointwise_dynamic_conv filters");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  require(fv.dim(0) == h && fv.dim(1) == w,
          "pointwise_dynamic_conv: filter grid " + shape_str(fv) + " does not match input " + shape_str(xv));
  require(fv.dim(3) == c,
          "pointwise_dynamic_conv: filter in_channels " + shape_str(fv) + " vs input " + shape_str(xv));
  const int co = fv.dim(2);
  const int64_t plane = static_cast<int64_t>(h) * w;

  Tensor out({co, h, w});
  std::vector<double> col(static_cast<size_t>(c));
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const int64_t px = static_cast<int64_t>(i) * w + j;
      for (int ci = 0; ci < c; ++ci) col[static_cast<size_t>(ci)] = xv.data()[ci * plane + px];
      const double* fp = fv.data() + px * co * c;
      for (int u = 0; u < co; ++u) {
        double acc = 0.0;
        for (int ci = 0; ci < c; ++ci) acc += fp[u * c + ci] * col[static_cast<size_t>(ci)];
        out.data()[u * plane + px] = acc;
      }
    }
  }
  const int xi = x.id(), fi = filters.id();
  const bool req = t.requires_grad(xi) || t.requires_grad(fi);
  return t.make(std::move(out), req, [xi, fi, c, co, h, w, plane](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    const Tensor& xv2 = tp.value(xi);
    const Tensor& fv2 = tp.value(fi);
    const bool need_x = tp.requires_grad(xi);
    const bool need_f = tp.requires_grad(fi);
    Tensor* gx = need_x ? &tp.grad_mut(xi) : nullptr;
    Tensor* gf = need_f ? &tp.grad_mut(fi) : nullptr;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const int64_t px = static_cast<int64_t>(i) * w + j;
        const double* fp = fv2.data() + px * co * c;
        for (int u = 0; u < co; ++u) {
          const double gv = g.data()[u * plane + px];
          if (gv == 0.0) continue;
          if (need_x) {
            for (int ci = 0; ci < c; ++ci) gx->data()[ci * plane + px] += gv * fp[u * c + ci];
          }
          if (need_f) {
            double* gfp = gf->data() + px * co * c + u * c;
            for (int ci = 0; ci < c; ++ci) gfp[ci] += gv * xv2.data()[ci * plane + px];
          }
        }
      }
    }
  });
}

// ---- dense linear algebra ------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul lhs");
  require_rank(bv, 2, "matmul rhs");
  require(av.dim(1) == bv.dim(0), "matmul: inner dims " + shape_str(av) + " vs " + shape_str(bv));
  const int m = av.dim(0), kk = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double* orow = out.data() + static_cast<int64_t>(i) * n;
    const double* arow = av.data() + static_cast<int64_t>(i) * kk;
    for (int k2 = 0; k2 < kk; ++k2) {
      const double aik = arow[k2];
      const double* brow = bv.data() + static_cast<int64_t>(k2) * n;
      for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  const int ai = a.id(), bi = b.id();
  const bool req = t.requires_grad(ai) || t.requires_grad(bi);
  return t.make(std::move(out), req, [ai, bi, m, kk, n](Tape& tp, int self) {
    const Tensor& g = tp.grad(self);
    if (tp.requires_grad(ai)) {
      // ga += g * b^T
      Tensor& ga = tp.grad_mut(ai);
      const Tensor& bv2 = tp.value(bi);
      for (int i = 0; i < m; ++i) {
        double* garow = ga.data() + static_cast<int64_t>(i) * kk;
        const double* grow = g.data() + static_cast<int64_t>(i) * n;
        for (int k2 = 0; k2 < kk; ++k2) {
          const double* brow = bv2.data() + static_cast<int64_t>(k2) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
          garow[k2] += acc;
        }
      }
    }
    if (tp.requires_grad(bi)) {
      // gb += a^T * g
      Tensor& gb = tp.grad_mut(bi);
      const Tensor& av2 = tp.value(ai);
      for (int k2 = 0; k2 < kk; ++k2) {
        double* gbrow = gb.data() + static_cast<int64_t>(k2) * n;
        for (int i = 0; i < m; ++i) {
          const double aik = av2.data()[static_cast<int64_t>(i) * kk + k2];
          if (aik == 0.0) continue;
          const double* grow = g.data() + static_cast<int64_t>(i) * n;
          for (int j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
        }
      }
    }
  });
}

Var transpose2d(Var a) {
  Tape& t = *a.tape();
  const Tensor& av = a.value();
  require_rank(av, 2, "transpose2d");
  const int m = av.dim(0), n = av.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  }
  const int ai = a.id();
  return t.make(std::move(out), t.requires_grad(ai), [ai, m, n](Tape& tp, int self) {
    if (!tp.requires_grad(ai)) return;
    const Tensor& g = tp.grad(self);
    Tensor& ga = tp.grad_mut(ai);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
    }
  });
}

// ---- softmax ---------------------------------------------------------------

Var softmax(Var x, int axis) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  require(axis >= 0 && axis < xv.rank(),
          "softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(xv));
  const int n = xv.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);

  Tensor out = xv;
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      double* base = out.data() + o * n * inner + in;
      double mx = base[0];
      for (int i = 1; i < n; ++i) mx = std::max(mx, base[static_cast<int64_t>(i) * inner]);
      double sum = 0.0;
      for (int i = 0; i < n; ++i) {
        double& v = base[static_cast<int64_t>(i) * inner];
        v = std::exp(v - mx);
        sum += v;
      }
      for (int i = 0; i < n; ++i) base[static_cast<int64_t>(i) * inner] /= sum;
    }
  }
  const int xi = x.id();
  return t.make(std::move(out), t.requires_grad(xi), [xi, n, outer, inner](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad(self);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_mut(xi);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * n * inner + in;
        double dot = 0.0;
        for (int i = 0; i < n; ++i) {
          const int64_t idx = base + static_cast<int64_t>(i) * inner;
          dot += g[idx] * y[idx];
        }
        for (int i = 0; i < n; ++i) {
          const int64_t idx = base + static_cast<int64_t>(i) * inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

// ---- resampling ------------------------------------------------------------

Var avg_pool2d(Var x, int factor) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  require_rank(xv, 3, "avg_pool2d");
  require(factor >= 1, "avg_pool2d: factor must be >= 1");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  require(h % factor == 0 && w % factor == 0,
          "avg_pool2d: extents " + shape_str(xv) + " not divisible by " + std::to_string(factor));
  const int oh = h / factor, ow = w / factor;
  const double inv = 1.0 / (factor * factor);
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = xv.data() + static_cast<int64_t>(ch) * h * w;
    double* op = out.data() + static_cast<int64_t>(ch) * oh * ow;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int di = 0; di < factor; ++di) {
          const double* row = xp + static_cast<int64_t>(i * factor + di) * w + j * factor;
          for (int dj = 0; dj < factor; ++dj) acc += row[dj];
        }
        op[static_cast<int64_t>(i) * ow + j] = acc * inv;
      }
    }
  }
  const int xi = x.id();
  return t.make(std::move(out), t.requires_grad(xi), [xi, c, h, w, oh, ow, factor, inv](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad_mut(xi);
    for (int ch = 0; ch < c; ++ch) {
      double* gxp = gx.data() + static_cast<int64_t>(ch) * h * w;
      const double* gp = g.data() + static_cast<int64_t>(ch) * oh * ow;
      for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
          const double gv = gp[static_cast<int64_t>(i) * ow + j] * inv;
          for (int di = 0; di < factor; ++di) {
            double* row = gxp + static_cast<int64_t>(i * factor + di) * w + j * factor;
            for (int dj = 0; dj < factor; ++dj) row[dj] += gv;
          }
        }
      }
    }
  });
}

namespace {
struct LerpTap {
  int i0, i1;
  double w0, w1;
};

LerpTap lerp_tap(int o, int in_n, int out_n) {
  const double scale = static_cast<double>(in_n) / out_n;
  const double src = (o + 0.5) * scale - 0.5;
  const int i0 = static_cast<int>(std::floor(src));
  const double frac = src - i0;
  LerpTap tap;
  tap.i0 = std::clamp(i0, 0, in_n - 1);
  tap.i1 = std::clamp(i0 + 1, 0, in_n - 1);
  tap.w0 = 1.0 - frac;
  tap.w1 = frac;
  return tap;
}
}  // namespace

Var upsample_bilinear(Var x, int out_h, int out_w) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  require_rank(xv, 3, "upsample_bilinear");
  require(out_h >= 1 && out_w >= 1, "upsample_bilinear: bad output extents");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  std::vector<LerpTap> ti(static_cast<size_t>(out_h)), tj(static_cast<size_t>(out_w));
  for (int i = 0; i < out_h; ++i) ti[static_cast<size_t>(i)] = lerp_tap(i, h, out_h);
  for (int j = 0; j < out_w; ++j) tj[static_cast<size_t>(j)] = lerp_tap(j, w, out_w);

  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = xv.data() + static_cast<int64_t>(ch) * h * w;
    double* op = out.data() + static_cast<int64_t>(ch) * out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      const LerpTap& a = ti[static_cast<size_t>(i)];
      for (int j = 0; j < out_w; ++j) {
        const LerpTap& b = tj[static_cast<size_t>(j)];
        op[static_cast<int64_t>(i) * out_w + j] =
            a.w0 * (b.w0 * xp[static_cast<int64_t>(a.i0) * w + b.i0] + b.w1 * xp[static_cast<int64_t>(a.i0) * w + b.i1]) +
            a.w1 * (b.w0 * xp[static_cast<int64_t>(a.i1) * w + b.i0] + b.w1 * xp[static_cast<int64_t>(a.i1) * w + b.i1]);
      }
    }
  }
  const int xi = x.id();
  return t.make(std::move(out), t.requires_grad(xi), [xi, c, h, w, out_h, out_w, ti, tj](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad_mut(xi);
    for (int ch = 0; ch < c; ++ch) {
      double* gxp = gx.data() + static_cast<int64_t>(ch) * h * w;
      const double* gp = g.data() + static_cast<int64_t>(ch) * out_h * out_w;
      for (int i = 0; i < out_h; ++i) {
        const LerpTap& a = ti[static_cast<size_t>(i)];
        for (int j = 0; j < out_w; ++j) {
          const LerpTap& b = tj[static_cast<size_t>(j)];
          const double gv = gp[static_cast<int64_t>(i) * out_w + j];
          gxp[static_cast<int64_t>(a.i0) * w + b.i0] += gv * a.w0 * b.w0;
          gxp[static_cast<int64_t>(a.i0) * w + b.i1] += gv * a.w0 * b.w1;
          gxp[static_cast<int64_t>(a.i1) * w + b.i0] += gv * a.w1 * b.w0;
          gxp[static_cast<int64_t>(a.i1) * w + b.i1] += gv * a.w1 * b.w1;
        }
      }
    }
  });
}

Var l2_normalize_ch(Var x, double eps) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  require_rank(xv, 3, "l2_normalize_ch");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const int64_t plane = static_cast<int64_t>(h) * w;
  Tensor out({c, h, w});
  for (int64_t px = 0; px < plane; ++px) {
    double sq = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      const double v = xv.data()[ch * plane + px];
      sq += v * v;
    }
    const double r = std::max(std::sqrt(sq), eps);
    for (int ch = 0; ch < c; ++ch) out.data()[ch * plane + px] = xv.data()[ch * plane + px] / r;
  }
  const int xi = x.id();
  return t.make(std::move(out), t.requires_grad(xi), [xi, c, plane, eps](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad(self);
    const Tensor& xv2 = tp.value(xi);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_mut(xi);
    for (int64_t px = 0; px < plane; ++px) {
      double sq = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double v = xv2.data()[ch * plane + px];
        sq += v * v;
      }
      const double nrm = std::sqrt(sq);
      if (nrm > eps) {
        double dot = 0.0;
        for (int ch = 0; ch < c; ++ch) dot += g.data()[ch * plane + px] * y.data()[ch * plane + px];
        for (int ch = 0; ch < c; ++ch) {
          gx.data()[ch * plane + px] += (g.data()[ch * plane + px] - y.data()[ch * plane + px] * dot) / nrm;
        }
      } else {
        for (int ch = 0; ch < c; ++ch) gx.data()[ch * plane + px] += g.data()[ch * plane + px] / eps;
      }
    }
  });
}

// ---- reductions ------------------------------------------------------------

Var sum_all(Var x) {
  Tape& t = *x.tape();
  double acc = 0.0;
  for (int64_t i = 0; i < x.value().size(); ++i) acc += x.value()[i];
  const int xi = x.id();
  return t.make(Tensor({1}, {acc}), t.requires_grad(xi), [xi](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const double gv = tp.grad(self)[0];
    Tensor& gx = tp.grad_mut(xi);
    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += gv;
  });
}

Var mean_all(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum_all(x), 1.0 / n);
}

// ---- spatial transforms ----------------------------------------------------

namespace {
// Shared kernel: map an output pixel (i, j) to its source pixel, or -1.
template <typename Fn>
void for_each_target(const TransformSpec& tr, int h, int w, Fn&& fn) {
  switch (tr.kind) {
    case TransformSpec::Kind::kIdentity:
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) fn(i, j, i, j);
      break;
    case TransformSpec::Kind::kHorizontalFlip:
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) fn(i, j, i, w - 1 - j);
      break;
    case TransformSpec::Kind::kTranslate:
      for (int i = 0; i < h; ++i) {
        const int si = i - tr.dy;
        for (int j = 0; j < w; ++j) {
          const int sj = j - tr.dx;
          if (si >= 0 && si < h && sj >= 0 && sj < w) {
            fn(i, j, si, sj);
          } else {
            fn(i, j, -1, -1);
          }
        }
      }
      break;
  }
}

void check_translate_bound(const TransformSpec& tr, int h, int w) {
  if (tr.kind != TransformSpec::Kind::kTranslate) return;
  if (std::abs(tr.dx) > w / 10 || std::abs(tr.dy) > h / 10) {
    fail("transform: translation (" + std::to_string(tr.dx) + "," + std::to_string(tr.dy) +
         ") exceeds 10% of extents " + std::to_string(w) + "x" + std::to_string(h));
  }
}
}  // namespace

std::pair<Tensor, Tensor> transform_tensor(const Tensor& x, const TransformSpec& tr) {
  if (x.rank() != 3) fail("transform: expected c x h x w, got " + shape_str(x));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  check_translate_bound(tr, h, w);
  Tensor out({c, h, w});
  Tensor valid = Tensor::full({1, h, w}, 1.0);
  const int64_t plane = static_cast<int64_t>(h) * w;
  for_each_target(tr, h, w, [&](int i, int j, int si, int sj) {
    const int64_t dst = static_cast<int64_t>(i) * w + j;
    if (si < 0) {
      valid[dst] = 0.0;
      return;
    }
    const int64_t src = static_cast<int64_t>(si) * w + sj;
    for (int ch = 0; ch < c; ++ch) out.data()[ch * plane + dst] = x.data()[ch * plane + src];
  });
  return {std::move(out), std::move(valid)};
}

std::pair<Var, Tensor> transform_apply(Var x, const TransformSpec& tr) {
  Tape& t = *x.tape();
  auto [out, valid] = transform_tensor(x.value(), tr);
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const int xi = x.id();
  Var y = t.make(std::move(out), t.requires_grad(xi), [xi, tr, c, h, w](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.grad(self);
    Tensor& gx = tp.grad_mut(xi);
    const int64_t plane = static_cast<int64_t>(h) * w;
    for_each_target(tr, h, w, [&](int i, int j, int si, int sj) {
      if (si < 0) return;
      const int64_t dst = static_cast<int64_t>(i) * w + j;
      const int64_t src = static_cast<int64_t>(si) * w + sj;
      for (int ch = 0; ch < c; ++ch) gx.data()[ch * plane + src] += g.data()[ch * plane + dst];
    });
  });
  return {y, std::move(valid)};
}

// ---- losses ----------------------------------------------------------------

Var masked_sq_diff_mean(Var a, Var b, const Tensor& valid, bool* empty_flag) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "masked_sq_diff_mean");
  const Tensor& av = a.value();
  require_rank(av, 3, "masked_sq_diff_mean");
  const int c = av.dim(0), h = av.dim(1), w = av.dim(2);
  if (valid.rank() != 3 || valid.dim(0) != 1 || valid.dim(1) != h || valid.dim(2) != w) {
    fail("masked_sq_diff_mean: mask shape " + shape_str(valid) + " vs input " + shape_str(av));
  }
  const int64_t plane = static_cast<int64_t>(h) * w;
  double count = 0.0;
  for (int64_t i = 0; i < plane; ++i) count += valid[i] != 0.0 ? 1.0 : 0.0;
  if (empty_flag) *empty_flag = count == 0.0;
  if (count == 0.0) return t.constant(Tensor({1}, {0.0}));

  const Tensor& bv = b.value();
  double acc = 0.0;
  for (int ch = 0; ch < c; ++ch) {
    for (int64_t i = 0; i < plane; ++i) {
      if (valid[i] == 0.0) continue;
      const double d = av.data()[ch * plane + i] - bv.data()[ch * plane + i];
      acc += d * d;
    }
  }
  const int ai = a.id(), bi = b.id();
  const bool req = t.requires_grad(ai) || t.requires_grad(bi);
  Tensor mask = valid;  // captured copy
  return t.make(Tensor({1}, {acc / count}), req, [ai, bi, mask, c, plane, count](Tape& tp, int self) {
    const double gv = tp.grad(self)[0] * 2.0 / count;
    const Tensor& av2 = tp.value(ai);
    const Tensor& bv2 = tp.value(bi);
    const bool need_a = tp.requires_grad(ai);
    const bool need_b = tp.requires_grad(bi);
    Tensor* ga = need_a ? &tp.grad_mut(ai) : nullptr;
    Tensor* gb = need_b ? &tp.grad_mut(bi) : nullptr;
    for (int ch = 0; ch < c; ++ch) {
      for (int64_t i = 0; i < plane; ++i) {
        if (mask[i] == 0.0) continue;
        const double d = gv * (av2.data()[ch * plane + i] - bv2.data()[ch * plane + i]);
        if (need_a) ga->data()[ch * plane + i] += d;
        if (need_b) gb->data()[ch * plane + i] -= d;
      }
    }
  });
}

Var weighted_bce(Var p, const Tensor& y, const Tensor& valid, double w_pos, double w_neg, bool* empty_flag) {
  Tape& t = *p.tape();
  const Tensor& pv = p.value();
  require_rank(pv, 3, "weighted_bce");
  require(pv.dim(0) == 1, "weighted_bce: expected 1 x h x w probabilities, got " + shape_str(pv));
  require_same_shape(pv, y, "weighted_bce labels");
  require_same_shape(pv, valid, "weighted_bce valid mask");
  constexpr double kLo = 1e-7, kHi = 1.0 - 1e-7;

  double count = 0.0;
  for (int64_t i = 0; i < valid.size(); ++i) count += valid[i] != 0.0 ? 1.0 : 0.0;
  if (empty_flag) *empty_flag = count == 0.0;
  if (count == 0.0) return t.constant(Tensor({1}, {0.0}));

  double acc = 0.0;
  for (int64_t i = 0; i < pv.size(); ++i) {
    if (valid[i] == 0.0) continue;
    const double pc = std::clamp(pv[i], kLo, kHi);
    acc += -(w_pos * y[i] * std::log(pc) + w_neg * (1.0 - y[i]) * std::log(1.0 - pc));
  }
  const int pi = p.id();
  Tensor yc = y, vc = valid;
  return t.make(Tensor({1}, {acc / count}), t.requires_grad(pi),
                [pi, yc, vc, w_pos, w_neg, count](Tape& tp, int self) {
                  if (!tp.requires_grad(pi)) return;
                  const double gv = tp.grad(self)[0] / count;
                  const Tensor& pv2 = tp.value(pi);
                  Tensor& gp = tp.grad_mut(pi);
                  for (int64_t i = 0; i < pv2.size(); ++i) {
                    if (vc[i] == 0.0) continue;
                    if (pv2[i] <= kLo || pv2[i] >= kHi) continue;  // clamped: zero slope
                    gp[i] += gv * (-w_pos * yc[i] / pv2[i] + w_neg * (1.0 - yc[i]) / (1.0 - pv2[i]));
                  }
                });
}

}  // namespace ftfoot::diff
