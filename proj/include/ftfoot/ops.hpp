#pragma once

#include <utility>
#include <vector>

#include "ftfoot/tape.hpp"

namespace ftfoot {

// Parameters of a standard convolution. kernel is out_ch x in_ch x k x k,
// bias is out_ch. deconv2d reads the same layout adjointly: kernel dim 0 is
// its input channel count and dim 1 its output channel count.
struct ConvParams {
  Tensor kernel;
  Tensor bias;
  int stride = 1;
  int padding = 0;
};

// Spatial transform used by the self-supervision losses.
struct TransformSpec {
  enum class Kind { kIdentity, kHorizontalFlip, kTranslate };
  Kind kind = Kind::kIdentity;
  int dx = 0;  // pixels, translate only; positive shifts content right
  int dy = 0;  // positive shifts content down

  static TransformSpec identity() { return {}; }
  static TransformSpec horizontal_flip() { return {Kind::kHorizontalFlip, 0, 0}; }
  static TransformSpec translate(int dx, int dy) { return {Kind::kTranslate, dx, dy}; }
};

}  // namespace ftfoot

namespace ftfoot::diff {

// elementwise
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var scale_by(Var a, Var s);  // s has shape {1}
Var relu(Var a);
Var sigmoid(Var a);

// shape plumbing
Var reshape(Var x, std::vector<int> shape);
Var concat_ch(const std::vector<Var>& xs);
Var slice_ch(Var x, int c0, int c1);
Var mul_bc_ch(Var x, Var m);  // x: c x h x w, m: 1 x h x w broadcast over c
Var permute_chw_to_hwab(Var x, int a, int b);  // (a*b) x h x w -> h x w x a x b

// convolution family
Var conv2d(Var x, Var kernel, Var bias, int stride, int padding);
Var deconv2d(Var x, Var kernel, Var bias, int stride, int padding);
Var spatially_variant_conv(Var x, Var filters);   // filters: h x w x k x k
Var pointwise_dynamic_conv(Var x, Var filters);   // filters: h x w x c' x c

// dense linear algebra
Var matmul(Var a, Var b);
Var transpose2d(Var a);

Var softmax(Var x, int axis);

// resampling
Var avg_pool2d(Var x, int factor);
Var upsample_bilinear(Var x, int out_h, int out_w);

Var l2_normalize_ch(Var x, double eps = 1e-12);

// reductions
Var sum_all(Var x);
Var mean_all(Var x);

// Applies tr spatially to a c x h x w map. Returns the transformed map and a
// 1 x h x w validity mask (0 on zero-filled pixels introduced by translation).
std::pair<Var, Tensor> transform_apply(Var x, const TransformSpec& tr);
std::pair<Tensor, Tensor> transform_tensor(const Tensor& x, const TransformSpec& tr);

// mean over valid pixels of the squared channel-norm of (a - b).
// valid is 1 x h x w; if it is all zero the result is 0 and *empty_flag set.
Var masked_sq_diff_mean(Var a, Var b, const Tensor& valid, bool* empty_flag = nullptr);

// mean over valid pixels of -[w_pos*y*log p + w_neg*(1-y)*log(1-p)],
// p clamped to [1e-7, 1-1e-7]. p, y, valid are 1 x h x w.
Var weighted_bce(Var p, const Tensor& y, const Tensor& valid, double w_pos = 1.0, double w_neg = 0.1,
                 bool* empty_flag = nullptr);

}  // namespace ftfoot::diff
