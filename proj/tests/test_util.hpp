#pragma once

#include <cmath>

#include "ftfoot/ops.hpp"
#include "ftfoot/rng.hpp"
#include "ftfoot/tape.hpp"
#include "ftfoot/tensor.hpp"

namespace testutil {

using ftfoot::Rng;
using ftfoot::Tensor;

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Independent nested-loop cross-correlation, the reference for conv2d.
// x: cin x h x w, k: cout x cin x kh x kw.
inline Tensor conv2d_reference(const Tensor& x, const Tensor& k, const Tensor& b, int s, int p) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h + 2 * p - kh) / s + 1;
  const int ow = (w + 2 * p - kw) / s + 1;
  Tensor out({cout, oh, ow});
  for (int co = 0; co < cout; ++co) {
    for (int oi = 0; oi < oh; ++oi) {
      for (int oj = 0; oj < ow; ++oj) {
        double acc = b[co];
        for (int ci = 0; ci < cin; ++ci) {
          for (int di = 0; di < kh; ++di) {
            for (int dj = 0; dj < kw; ++dj) {
              const int ii = oi * s - p + di;
              const int jj = oj * s - p + dj;
              if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
              acc += x.at(ci, ii, jj) * k.at(co, ci, di, dj);
            }
          }
        }
        out.at(co, oi, oj) = acc;
      }
    }
  }
  return out;
}

// Per-pixel dense dynamic convolution: kdense[i][j] is cout x cin x k x k.
// This is the undecomposed form the decomposed pair must reproduce.
inline Tensor dense_dynamic_conv_reference(const Tensor& x, const Tensor& kdense) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = kdense.dim(2);
  const int k = kdense.dim(5);
  const int r = k / 2;
  Tensor out({cout, h, w});
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (int ci = 0; ci < cin; ++ci) {
          for (int di = 0; di < k; ++di) {
            for (int dj = 0; dj < k; ++dj) {
              const int ii = i + di - r;
              const int jj = j + dj - r;
              if (ii < 0 || ii >= h || jj < 0 || jj >= w) continue;
              const int64_t idx =
                  ((((static_cast<int64_t>(i) * w + j) * cout + co) * cin + ci) * k + di) * k + dj;
              acc += kdense[idx] * x.at(ci, ii, jj);
            }
          }
        }
        out.at(co, i, j) = acc;
      }
    }
  }
  return out;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(std::move(shape), rng, lo, hi);
}

}  // namespace testutil
