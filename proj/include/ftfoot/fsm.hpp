#pragma once

#include <optional>

#include "ftfoot/gfn.hpp"

namespace ftfoot::fsm {

using diff::Var;

struct FsmConfig {
  int downsample_target = 32;  // affinity grid edge length (h_d = w_d)
  int affinity_cap = 4096;     // maximum node count n = h_d * w_d
  bool rw_at_inference = true;
  bool ss_on_post_rw = true;   // consistency loss on the post-random-walk features
  double alpha_init = 0.5;
  int head_k = 3;
};

// A = softmax(F^T F) over spatial positions; F is c x n. Rows sum to 1.
Var affinity_matrix(Var f, int cap = 4096);

// F' = alpha * A * F + F; F is n x c, alpha has shape {1}. Gradients flow
// through A when it was built from the same F.
Var random_walk(Var f, Var a, Var alpha);

// Random walk over downsampled, per-position-normalized features followed by
// a convolutional head with logistic squashing.
class FsmHead {
 public:
  FsmHead() = default;
  FsmHead(ParamSet& ps, const FsmConfig& cfg, int in_channels, Rng& rng);

  struct Output {
    Var p_trav;   // 1 x h x w in (0,1)
    Var feat_ss;  // c x h_d x w_d features the consistency loss compares
    int hd = 0, wd = 0;
  };
  Output forward(Binding& bind, Var fx, bool use_rw) const;

  const FsmConfig& config() const { return cfg_; }

 private:
  FsmConfig cfg_;
  gfn::Conv2dLayer head_;
  std::string alpha_name_;
};

}  // namespace ftfoot::fsm

namespace ftfoot {

struct ModelConfig {
  gfn::GfnConfig gfn;
  fsm::FsmConfig fsm;
  uint64_t init_seed = 1;
};

// Extraction network -> fusion network -> footprint supervision head.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  struct Forward {
    diff::Var p_sn;
    std::vector<diff::Var> feats;
    diff::Var fx;
    diff::Var p_trav;
    diff::Var feat_ss;
    int hd = 0, wd = 0;
  };
  Forward forward(Binding& bind, const Tensor& rgbd, bool use_rw) const;
  Forward forward(Binding& bind, const Tensor& rgbd) const {
    return forward(bind, rgbd, cfg_.fsm.rw_at_inference);
  }

  struct Prediction {
    Tensor p_sn;
    Tensor p_trav;
  };
  Prediction predict(const RgbdFrame& frame) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  const gfn::ExtractionNet& extraction() const { return extraction_; }
  const gfn::FusionNet& fusion() const { return fusion_; }
  const fsm::FsmHead& head() const { return head_; }

 private:
  ModelConfig cfg_;
  ParamSet params_;
  gfn::ExtractionNet extraction_;
  gfn::FusionNet fusion_;
  fsm::FsmHead head_;
};

namespace fsm {

// L_ss = dist(Tr(F(x)), F(Tr(x))) on the downsampled feature grid, with the
// translation offsets scaled to that grid. Runs the model twice on a shared
// binding so parameter gradients accumulate across both branches.
Var self_supervised_loss(const Model& model, Binding& bind, const Tensor& rgbd, const TransformSpec& tr,
                         bool use_rw, bool* empty_flag = nullptr);

// Variant reusing an already-computed forward pass for the untransformed input.
Var self_supervised_loss_from(const Model& model, Binding& bind, const Model::Forward& fwd, const Tensor& rgbd,
                              const TransformSpec& tr, bool use_rw, bool* empty_flag = nullptr);

// Weighted cross-entropy between p_trav and the footprint (weights 1 / 0.1).
Var footprint_bce(Var p_trav, const FootprintMask& footprint, bool* empty_flag = nullptr);

struct LossWeights {
  double ce = 1.0;
  double ss = 0.1;
  double sn = 1.0;
};

struct LossBreakdown {
  double total = 0.0, ce = 0.0, ss = 0.0, sn = 0.0;
  bool ss_empty = false, sn_empty = false, ce_empty = false;
};

// lambda_ce * footprint_bce + lambda_ss * self_supervised_loss + lambda_sn *
// surface_normal_loss; zero-weight components are skipped entirely.
Var total_loss(const Model& model, Binding& bind, const RgbdFrame& frame, const FootprintMask& footprint,
               const SurfaceNormalImage& gt_normals, const TransformSpec& tr, const LossWeights& weights,
               LossBreakdown* breakdown = nullptr);

}  // namespace fsm
}  // namespace ftfoot
