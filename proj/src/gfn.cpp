#include "ftfoot/gfn.hpp"

#include <cmath>
#include <stdexcept>

namespace ftfoot::gfn {

using namespace ftfoot::diff;

void GfnConfig::validate() const {
  if (num_stages < 2) throw std::invalid_argument("GfnConfig: num_stages must be >= 2");
  if (static_cast<int>(channels.size()) != num_stages || static_cast<int>(strides.size()) != num_stages) {
    throw std::invalid_argument("GfnConfig: channels/strides must have num_stages entries");
  }
  for (int c : channels) {
    if (c <= 0) throw std::invalid_argument("GfnConfig: channels must be positive");
  }
  if (strides[0] != 1) throw std::invalid_argument("GfnConfig: first stage stride must be 1");
  for (size_t i = 1; i < strides.size(); ++i) {
    if (strides[i] != 2) throw std::invalid_argument("GfnConfig: downsampling stages must have stride 2");
  }
  if (guide_k < 1 || guide_k % 2 == 0) throw std::invalid_argument("GfnConfig: guide_k must be odd");
}

int GfnConfig::downsample_factor() const {
  int f = 1;
  for (int s : strides) f *= s;
  return f;
}

// ---- layers ----------------------------------------------------------------

namespace {
Tensor fan_in_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}
}  // namespace

Conv2dLayer::Conv2dLayer(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
                         int padding, Rng& rng)
    : weight(name + ".weight"), bias(name + ".bias"), stride(stride), padding(padding) {
  ps.create(weight, fan_in_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng));
  ps.create(bias, Tensor({out_ch}));
}

Conv2dLayer Conv2dLayer::zero_init(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
                                   int padding) {
  Conv2dLayer layer;
  layer.weight = name + ".weight";
  layer.bias = name + ".bias";
  layer.stride = stride;
  layer.padding = padding;
  ps.create(layer.weight, Tensor({out_ch, in_ch, k, k}));
  ps.create(layer.bias, Tensor({out_ch}));
  return layer;
}

Var Conv2dLayer::operator()(Binding& bind, Var x) const {
  return conv2d(x, bind.get(weight), bind.get(bias), stride, padding);
}

Deconv2dLayer::Deconv2dLayer(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int k, int stride,
                             int padding, Rng& rng)
    : weight(name + ".weight"), bias(name + ".bias"), stride(stride), padding(padding) {
  // deconv kernel layout: in_ch x out_ch x k x k
  ps.create(weight, fan_in_uniform({in_ch, out_ch, k, k}, in_ch * k * k, rng));
  ps.create(bias, Tensor({out_ch}));
}

Var Deconv2dLayer::operator()(Binding& bind, Var x) const {
  return deconv2d(x, bind.get(weight), bind.get(bias), stride, padding);
}

ResBlock::ResBlock(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int stride, Rng& rng) {
  conv1 = Conv2dLayer(ps, name + ".conv1", in_ch, out_ch, 3, stride, 1, rng);
  conv2 = Conv2dLayer(ps, name + ".conv2", out_ch, out_ch, 3, 1, 1, rng);
  has_proj = in_ch != out_ch || stride != 1;
  if (has_proj) proj = Conv2dLayer(ps, name + ".proj", in_ch, out_ch, 1, stride, 0, rng);
}

Var ResBlock::operator()(Binding& bind, Var x) const {
  Var y = conv2(bind, relu(conv1(bind, x)));
  Var shortcut = has_proj ? proj(bind, x) : x;
  return relu(add(y, shortcut));
}

GuideFilterLayer::GuideFilterLayer(ParamSet& ps, const std::string& name, int channels, int k, Rng& rng)
    : channels_(channels), k_(k) {
  (void)rng;
  conf_conv_ = Conv2dLayer::zero_init(ps, name + ".conf", 2 * channels, 2, 3, 1, 1);
  spatial_head_ = Conv2dLayer::zero_init(ps, name + ".spatial", 2 * channels, k * k, 3, 1, 1);
  pointwise_head_ = Conv2dLayer::zero_init(ps, name + ".pointwise", 2 * channels, channels * channels, 1, 1, 0);
  // identity start: delta spatial filter, identity channel mixing
  Tensor& sb = ps.get(spatial_head_.bias);
  sb[(k / 2) * k + (k / 2)] = 40.0;  // softmax(40 vs 0) is a delta to ~4e-18
  Tensor& pb = ps.get(pointwise_head_.bias);
  for (int u = 0; u < channels; ++u) pb[static_cast<int64_t>(u) * channels + u] = 1.0;
}

std::tuple<Var, Var, ConfidenceMap> GuideFilterLayer::confidence_gate(Binding& bind, Var x_g, Var x_c) const {
  require_same_shape(x_g.value(), x_c.value(), "confidence_gate");
  Var conf = softmax(conf_conv_(bind, concat_ch({x_g, x_c})), 0);
  Var xg_w = mul_bc_ch(x_g, slice_ch(conf, 0, 1));
  Var xc_w = mul_bc_ch(x_c, slice_ch(conf, 1, 2));
  return {xg_w, xc_w, ConfidenceMap{conf}};
}

DynamicFilterPair GuideFilterLayer::generate_filters(Binding& bind, Var xg_w, Var xc_w) const {
  require_same_shape(xg_w.value(), xc_w.value(), "generate_filters");
  Var z = concat_ch({xg_w, xc_w});
  Var spatial_logits = spatial_head_(bind, z);                     // k*k x h x w
  Var spatial = permute_chw_to_hwab(softmax(spatial_logits, 0), k_, k_);
  Var pw = permute_chw_to_hwab(pointwise_head_(bind, z), channels_, channels_);
  return {spatial, pw};
}

Var GuideFilterLayer::operator()(Binding& bind, Var x_g, Var x_c) const {
  auto [xg_w, xc_w, conf] = confidence_gate(bind, x_g, x_c);
  DynamicFilterPair filters = generate_filters(bind, xg_w, xc_w);
  // the generated filters convolve the original convolve image
  return pointwise_dynamic_conv(spatially_variant_conv(x_c, filters.spatial), filters.pointwise);
}

// ---- extraction network ------------------------------------------------------

ExtractionNet::ExtractionNet(ParamSet& ps, const GfnConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int n = cfg_.num_stages;
  const auto& ch = cfg_.channels;
  for (int i = 0; i < n; ++i) {
    const int in_ch = i == 0 ? 4 : ch[i - 1];
    encoder_.emplace_back(ps, "extraction.enc" + std::to_string(i + 1), in_ch, ch[i], cfg_.strides[i], rng);
  }
  // decoder block i (1-based): input concat(e_{n-i+2}, d_{i-1}) except the first
  for (int i = 1; i <= n; ++i) {
    int in_ch, out_ch, k, stride, pad;
    if (i == 1) {
      in_ch = ch[n - 1];
      out_ch = ch[n - 2];
      k = 3;
      stride = 1;
      pad = 1;
    } else {
      const int enc_ch = ch[n - i + 1];
      const int prev_ch = feat_channels_.back();
      in_ch = enc_ch + prev_ch;
      out_ch = ch[std::max(0, n - 1 - i)];
      k = 2;
      stride = 2;
      pad = 0;
    }
    decoder_.emplace_back(ps, "extraction.dec" + std::to_string(i), in_ch, out_ch, k, stride, pad, rng);
    feat_channels_.push_back(out_ch);
  }
  normal_head_ = Conv2dLayer(ps, "extraction.normal_head", feat_channels_.back(), 3, 3, 1, 1, rng);
}

ExtractionOutput ExtractionNet::forward(Binding& bind, const Tensor& rgbd) const {
  if (rgbd.rank() != 3 || rgbd.dim(0) != 4) {
    throw std::invalid_argument("extraction_forward: input must be 4xhxw, got " + shape_str(rgbd));
  }
  const int factor = cfg_.downsample_factor();
  if (rgbd.dim(1) % factor != 0 || rgbd.dim(2) % factor != 0) {
    throw std::invalid_argument("extraction_forward: extents " + shape_str(rgbd) + " not divisible by " +
                                std::to_string(factor));
  }
  const int n = cfg_.num_stages;
  Var x = bind.tape().constant(rgbd);
  std::vector<Var> enc;
  enc.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    x = encoder_[static_cast<size_t>(i)](bind, x);
    enc.push_back(x);
  }
  ExtractionOutput out;
  Var d = decoder_[0](bind, enc.back());
  d = relu(d);
  out.feats.push_back(d);
  for (int i = 2; i <= n; ++i) {
    Var skip = enc[static_cast<size_t>(n - i + 1)];
    Var in = concat_ch({skip, d});
    d = relu(decoder_[static_cast<size_t>(i - 1)](bind, in));
    out.feats.push_back(d);
  }
  out.p_sn = l2_normalize_ch(normal_head_(bind, d));
  return out;
}

// ---- fusion network ----------------------------------------------------------

FusionNet::FusionNet(ParamSet& ps, const GfnConfig& cfg, const std::vector<int>& feat_channels, Rng& rng)
    : cfg_(cfg) {
  cfg_.validate();
  const int n = cfg_.num_stages;
  if (static_cast<int>(feat_channels.size()) != n) {
    throw std::invalid_argument("FusionNet: expected one decoder feature per stage");
  }
  stage_channels_ = feat_channels;  // guide layers match the convolve widths
  input_proj_ = Conv2dLayer(ps, "fusion.input_proj", 3, stage_channels_[0], 1, 1, 0, rng);
  for (int i = 0; i < n; ++i) {
    const int in_ch = i == 0 ? stage_channels_[0] : stage_channels_[i - 1];
    guidance_blocks_.emplace_back(ps, "fusion.stage" + std::to_string(i + 1) + ".res", in_ch, stage_channels_[i], 1,
                                  rng);
    convolve_projs_.emplace_back(ps, "fusion.stage" + std::to_string(i + 1) + ".proj", feat_channels[i],
                                 stage_channels_[i], 1, 1, 0, rng);
    guide_layers_.emplace_back(ps, "fusion.stage" + std::to_string(i + 1) + ".gfl", stage_channels_[i], cfg_.guide_k,
                               rng);
  }
}

Var FusionNet::forward(Binding& bind, Var p_sn, const std::vector<Var>& feats) const {
  const int n = cfg_.num_stages;
  if (static_cast<int>(feats.size()) != n) {
    throw std::invalid_argument("fusion_forward: expected " + std::to_string(n) + " features, got " +
                                std::to_string(feats.size()));
  }
  const int h = p_sn.value().dim(1), w = p_sn.value().dim(2);
  const int factor = cfg_.downsample_factor();
  Var g = input_proj_(bind, factor > 1 ? avg_pool2d(p_sn, factor) : p_sn);
  Var y;
  for (int i = 0; i < n; ++i) {
    const Var& feat = feats[static_cast<size_t>(i)];
    const int fh = feat.value().dim(1), fw = feat.value().dim(2);
    const int gh = i == 0 ? g.value().dim(1) : 2 * y.value().dim(1);
    if (fh != gh) {
      throw std::invalid_argument("fusion_forward: stage " + std::to_string(i + 1) + " resolution mismatch, feature " +
                                  shape_str(feat.value()) + " vs guidance grid " + std::to_string(gh));
    }
    Var stage_in = i == 0 ? g : upsample_bilinear(y, fh, fw);
    Var guidance = guidance_blocks_[static_cast<size_t>(i)](bind, stage_in);
    Var convolve = convolve_projs_[static_cast<size_t>(i)](bind, feat);
    y = guide_layers_[static_cast<size_t>(i)](bind, guidance, convolve);
  }
  if (y.value().dim(1) != h || y.value().dim(2) != w) {
    throw std::invalid_argument("fusion_forward: final stage resolution " + shape_str(y.value()) +
                                " does not reach input resolution");
  }
  return y;
}

// ---- helpers -------------------------------------------------------------------

Tensor make_rgbd_input(const RgbdFrame& frame) {
  const int h = frame.height(), w = frame.width();
  Tensor in({4, h, w});
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int64_t i = 0; i < 3 * plane; ++i) in[i] = frame.rgb[i];
  for (int64_t i = 0; i < plane; ++i) {
    const double d = frame.depth[i];
    in[3 * plane + i] = d > 0.0 ? std::min(1.0 / d, 1.0) : 0.0;
  }
  return in;
}

Var surface_normal_loss(Var p_sn, const SurfaceNormalImage& gt, bool* empty_flag) {
  Var gtv = p_sn.tape()->constant(gt.normals);
  return masked_sq_diff_mean(p_sn, gtv, gt.validity, empty_flag);
}

}  // namespace ftfoot::gfn
