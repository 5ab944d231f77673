#pragma once

#include <string>
#include <tuple>
#include <vector>

#include "ftfoot/geometry.hpp"
#include "ftfoot/ops.hpp"
#include "ftfoot/params.hpp"
#include "ftfoot/rng.hpp"

namespace ftfoot::gfn {

using diff::Var;

struct GfnConfig {
  int num_stages = 4;
  std::vector<int> channels = {32, 64, 128, 256};  // finest -> coarsest stage
  int guide_k = 3;
  std::vector<int> strides = {1, 2, 2, 2};

  void validate() const;
  int downsample_factor() const;  // product of strides
};

// Per-pixel decomposed dynamic filters: spatial K' and pointwise K''.
struct DynamicFilterPair {
  Var spatial;    // h x w x k x k, taps softmax-normalized per pixel
  Var pointwise;  // h x w x c' x c
};

struct ConfidenceMap {
  Var weights;  // 2 x h x w, channels sum to 1 per pixel
};

// ---- layers ----------------------------------------------------------------

struct Conv2dLayer {
  std::string weight, bias;
  int stride = 1, padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int k, int stride, int padding,
              Rng& rng);
  static Conv2dLayer zero_init(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
                               int padding);
  Var operator()(Binding& bind, Var x) const;
};

struct Deconv2dLayer {
  std::string weight, bias;
  int stride = 1, padding = 0;

  Deconv2dLayer() = default;
  Deconv2dLayer(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int k, int stride, int padding,
                Rng& rng);
  Var operator()(Binding& bind, Var x) const;
};

// Two 3x3 convolutions with an identity shortcut (1x1 projection when the
// channel count or resolution changes).
struct ResBlock {
  Conv2dLayer conv1, conv2;
  Conv2dLayer proj;
  bool has_proj = false;

  ResBlock() = default;
  ResBlock(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int stride, Rng& rng);
  Var operator()(Binding& bind, Var x) const;
};

// Fuses a guidance image with a convolve image through per-pixel dynamic
// filters. Starts as an identity map on the convolve image: the spatial head
// emits a centered delta and the pointwise head an identity matrix.
class GuideFilterLayer {
 public:
  GuideFilterLayer() = default;
  GuideFilterLayer(ParamSet& ps, const std::string& name, int channels, int k, Rng& rng);

  // conf = softmax(conv(concat(x_g, x_c))); weighted inputs x_g*conf[0], x_c*conf[1]
  std::tuple<Var, Var, ConfidenceMap> confidence_gate(Binding& bind, Var x_g, Var x_c) const;
  DynamicFilterPair generate_filters(Binding& bind, Var xg_w, Var xc_w) const;
  // full layer: gate -> filters -> K' then K'' applied to the original x_c
  Var operator()(Binding& bind, Var x_g, Var x_c) const;

  int channels() const { return channels_; }
  int k() const { return k_; }

 private:
  int channels_ = 0, k_ = 0;
  Conv2dLayer conf_conv_;
  Conv2dLayer spatial_head_;
  Conv2dLayer pointwise_head_;
};

// ---- networks --------------------------------------------------------------

struct ExtractionOutput {
  Var p_sn;               // 3 x h x w, unit-norm per pixel
  std::vector<Var> feats;  // decoder outputs, coarse -> fine
};

// Residual encoder + deconvolution decoder with concatenation skips;
// emits the surface-normal image and the per-stage decoder features.
class ExtractionNet {
 public:
  ExtractionNet() = default;
  ExtractionNet(ParamSet& ps, const GfnConfig& cfg, Rng& rng);

  ExtractionOutput forward(Binding& bind, const Tensor& rgbd) const;  // rgbd: 4 x h x w

  const std::vector<int>& feat_channels() const { return feat_channels_; }

 private:
  GfnConfig cfg_;
  std::vector<ResBlock> encoder_;
  std::vector<Deconv2dLayer> decoder_;
  Conv2dLayer normal_head_;
  std::vector<int> feat_channels_;
};

// Chain of residual blocks over p_sn producing guidance features; each stage
// applies a guide filter layer to the channel-projected decoder feature at
// the matching resolution, climbing back to full resolution.
class FusionNet {
 public:
  FusionNet() = default;
  FusionNet(ParamSet& ps, const GfnConfig& cfg, const std::vector<int>& feat_channels, Rng& rng);

  Var forward(Binding& bind, Var p_sn, const std::vector<Var>& feats) const;

  int out_channels() const { return stage_channels_.empty() ? 0 : stage_channels_.back(); }
  const std::vector<GuideFilterLayer>& guide_layers() const { return guide_layers_; }

 private:
  GfnConfig cfg_;
  std::vector<int> stage_channels_;
  Conv2dLayer input_proj_;
  std::vector<ResBlock> guidance_blocks_;
  std::vector<Conv2dLayer> convolve_projs_;
  std::vector<GuideFilterLayer> guide_layers_;
};

// ---- helpers ----------------------------------------------------------------

// 4-channel network input: rgb stacked with inverse depth clipped to [0,1]
// (invalid depth pixels become 0).
Tensor make_rgbd_input(const RgbdFrame& frame);

// Mean over valid pixels of the squared normal difference.
Var surface_normal_loss(Var p_sn, const SurfaceNormalImage& gt, bool* empty_flag = nullptr);

}  // namespace ftfoot::gfn
