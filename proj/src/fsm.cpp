#include "ftfoot/fsm.hpp"

#include <cmath>
#include <stdexcept>

namespace ftfoot::fsm {

using namespace ftfoot::diff;

Var affinity_matrix(Var f, int cap) {
  const Tensor& fv = f.value();
  if (fv.rank() != 2) throw std::invalid_argument("affinity_matrix: expected c x n features, got " + shape_str(fv));
  const int n = fv.dim(1);
  if (n > cap) {
    throw std::invalid_argument("affinity_matrix: n=" + std::to_string(n) + " exceeds cap " + std::to_string(cap) +
                                " (affinity memory is O(n^2))");
  }
  return softmax(matmul(transpose2d(f), f), 1);
}

Var random_walk(Var f, Var a, Var alpha) {
  const Tensor& fv = f.value();
  const Tensor& av = a.value();
  if (fv.rank() != 2) throw std::invalid_argument("random_walk: expected n x c features, got " + shape_str(fv));
  if (av.rank() != 2 || av.dim(0) != av.dim(1) || av.dim(0) != fv.dim(0)) {
    throw std::invalid_argument("random_walk: affinity " + shape_str(av) + " does not match features " +
                                shape_str(fv));
  }
  return add(scale_by(matmul(a, f), alpha), f);
}

FsmHead::FsmHead(ParamSet& ps, const FsmConfig& cfg, int in_channels, Rng& rng) : cfg_(cfg) {
  head_ = gfn::Conv2dLayer(ps, "fsm.head", in_channels, 1, cfg.head_k, 1, cfg.head_k / 2, rng);
  alpha_name_ = "fsm.alpha";
  ps.create(alpha_name_, Tensor({1}, {cfg.alpha_init}));
}

FsmHead::Output FsmHead::forward(Binding& bind, Var fx, bool use_rw) const {
  const Tensor& v = fx.value();
  if (v.rank() != 3) throw std::invalid_argument("fsm_forward: expected c x h x w, got " + shape_str(v));
  const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  int factor = 1;
  while ((h / factor) > cfg_.downsample_target && (h % (factor * 2)) == 0 && (w % (factor * 2)) == 0) factor *= 2;
  const int hd = h / factor, wd = w / factor;
  const int n = hd * wd;
  if (n > cfg_.affinity_cap) {
    throw std::invalid_argument("fsm_forward: downsampled grid " + std::to_string(hd) + "x" + std::to_string(wd) +
                                " exceeds affinity cap " + std::to_string(cfg_.affinity_cap));
  }

  Var pooled = factor > 1 ? avg_pool2d(fx, factor) : fx;
  Var prop = pooled;
  if (use_rw) {
    // normalized features bound the Gram logits; the walk itself propagates
    // the raw features
    Var normed = l2_normalize_ch(pooled);
    Var a = affinity_matrix(reshape(normed, {c, n}), cfg_.affinity_cap);
    Var fmat = transpose2d(reshape(pooled, {c, n}));
    Var fprop = random_walk(fmat, a, bind.get(alpha_name_));
    prop = reshape(transpose2d(fprop), {c, hd, wd});
  }

  Output out;
  out.hd = hd;
  out.wd = wd;
  out.feat_ss = cfg_.ss_on_post_rw ? prop : pooled;
  Var up = factor > 1 ? upsample_bilinear(prop, h, w) : prop;
  out.p_trav = sigmoid(head_(bind, up));
  return out;
}

Var footprint_bce(Var p_trav, const FootprintMask& footprint, bool* empty_flag) {
  return weighted_bce(p_trav, footprint.mask, footprint.valid, 1.0, 0.1, empty_flag);
}

Var self_supervised_loss_from(const Model& model, Binding& bind, const Model::Forward& fwd, const Tensor& rgbd,
                              const TransformSpec& tr, bool use_rw, bool* empty_flag) {
  const int h = rgbd.dim(1);
  const int factor = h / fwd.hd;
  TransformSpec tr_d = tr;
  if (tr.kind == TransformSpec::Kind::kTranslate) {
    tr_d.dx = static_cast<int>(std::lround(static_cast<double>(tr.dx) / factor));
    tr_d.dy = static_cast<int>(std::lround(static_cast<double>(tr.dy) / factor));
  }
  auto [transformed, valid] = transform_apply(fwd.feat_ss, tr_d);
  Tensor rgbd_tr = transform_tensor(rgbd, tr).first;
  Model::Forward fwd_tr = model.forward(bind, rgbd_tr, use_rw);
  return masked_sq_diff_mean(transformed, fwd_tr.feat_ss, valid, empty_flag);
}

Var self_supervised_loss(const Model& model, Binding& bind, const Tensor& rgbd, const TransformSpec& tr,
                         bool use_rw, bool* empty_flag) {
  Model::Forward fwd = model.forward(bind, rgbd, use_rw);
  return self_supervised_loss_from(model, bind, fwd, rgbd, tr, use_rw, empty_flag);
}

Var total_loss(const Model& model, Binding& bind, const RgbdFrame& frame, const FootprintMask& footprint,
               const SurfaceNormalImage& gt_normals, const TransformSpec& tr, const LossWeights& weights,
               LossBreakdown* breakdown) {
  Tape& tape = bind.tape();
  const Tensor rgbd = gfn::make_rgbd_input(frame);
  LossBreakdown bd;

  std::optional<Var> total;
  auto accumulate = [&](Var term, double weight) {
    Var scaled = scale(term, weight);
    total = total ? add(*total, scaled) : scaled;
  };

  std::optional<Model::Forward> fwd;
  if (weights.ce != 0.0 || weights.sn != 0.0 || weights.ss != 0.0) fwd = model.forward(bind, rgbd, true);
  if (weights.ce != 0.0) {
    Var ce = footprint_bce(fwd->p_trav, footprint, &bd.ce_empty);
    bd.ce = ce.value()[0];
    accumulate(ce, weights.ce);
  }
  if (weights.sn != 0.0) {
    Var sn = gfn::surface_normal_loss(fwd->p_sn, gt_normals, &bd.sn_empty);
    bd.sn = sn.value()[0];
    accumulate(sn, weights.sn);
  }
  if (weights.ss != 0.0) {
    Var ss = self_supervised_loss_from(model, bind, *fwd, rgbd, tr, true, &bd.ss_empty);
    bd.ss = ss.value()[0];
    accumulate(ss, weights.ss);
  }
  Var result = total ? *total : tape.constant(Tensor({1}, {0.0}));
  bd.total = result.value()[0];
  if (breakdown) *breakdown = bd;
  return result;
}

}  // namespace ftfoot::fsm

namespace ftfoot {

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.gfn.validate();
  Rng rng(cfg_.init_seed);
  extraction_ = gfn::ExtractionNet(params_, cfg_.gfn, rng);
  fusion_ = gfn::FusionNet(params_, cfg_.gfn, extraction_.feat_channels(), rng);
  head_ = fsm::FsmHead(params_, cfg_.fsm, fusion_.out_channels(), rng);
}

Model::Forward Model::forward(Binding& bind, const Tensor& rgbd, bool use_rw) const {
  Forward out;
  gfn::ExtractionOutput ext = extraction_.forward(bind, rgbd);
  out.p_sn = ext.p_sn;
  out.feats = ext.feats;
  out.fx = fusion_.forward(bind, ext.p_sn, ext.feats);
  fsm::FsmHead::Output head = head_.forward(bind, out.fx, use_rw);
  out.p_trav = head.p_trav;
  out.feat_ss = head.feat_ss;
  out.hd = head.hd;
  out.wd = head.wd;
  return out;
}

Model::Prediction Model::predict(const RgbdFrame& frame) const {
  diff::Tape tape;
  Binding bind(tape, const_cast<ParamSet&>(params_), /*trainable=*/false);
  Forward fwd = forward(bind, gfn::make_rgbd_input(frame), cfg_.fsm.rw_at_inference);
  return {fwd.p_sn.value(), fwd.p_trav.value()};
}

}  // namespace ftfoot
