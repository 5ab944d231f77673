#include <cmath>

#include "doctest.h"
#include "ftfoot/fsm.hpp"
#include "ftfoot/gradcheck.hpp"
#include "test_util.hpp"

using namespace ftfoot;
using namespace ftfoot::diff;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

ModelConfig tiny_model_cfg() {
  ModelConfig cfg;
  cfg.gfn.num_stages = 4;
  cfg.gfn.channels = {4, 6, 8, 10};
  cfg.gfn.strides = {1, 2, 2, 2};
  cfg.fsm.downsample_target = 16;
  cfg.init_seed = 99;
  return cfg;
}

RgbdFrame random_frame(int h, int w, Rng& rng) {
  RgbdFrame f;
  f.rgb = testutil::random_tensor({3, h, w}, rng, 0.0, 1.0);
  f.depth = testutil::random_tensor({1, h, w}, rng, 1.0, 8.0);
  f.intrinsics = {static_cast<double>(w), static_cast<double>(w), w / 2.0 - 0.5, h / 2.0 - 0.5};
  f.pose.translation = {0, 0, 1.5};
  return f;
}

}  // namespace

TEST_CASE("affinity_matrix") {
  SUBCASE("constant features give the uniform matrix") {
    Tape t;
    Var a = fsm::affinity_matrix(t.leaf(Tensor::full({2, 5}, 0.7)));
    for (int64_t i = 0; i < a.value().size(); ++i) CHECK(a.value()[i] == doctest::Approx(0.2).epsilon(1e-12));
  }
  SUBCASE("n=2 worked example") {
    Tape t;
    // F = [1, 2] as one channel over two positions; F^T F = [[1,2],[2,4]]
    Var a = fsm::affinity_matrix(t.leaf(Tensor({1, 2}, {1.0, 2.0})));
    // closed form at double precision
    const double r0 = std::exp(1.0) + std::exp(2.0);
    const double r1 = std::exp(2.0) + std::exp(4.0);
    CHECK(std::fabs(a.value().at(0, 0) - std::exp(1.0) / r0) <= 1e-12);
    CHECK(std::fabs(a.value().at(0, 1) - std::exp(2.0) / r0) <= 1e-12);
    CHECK(std::fabs(a.value().at(1, 0) - std::exp(2.0) / r1) <= 1e-12);
    CHECK(std::fabs(a.value().at(1, 1) - std::exp(4.0) / r1) <= 1e-12);
    // the published approximations
    CHECK(a.value().at(0, 0) == doctest::Approx(0.2689).epsilon(1e-3));
    CHECK(a.value().at(0, 1) == doctest::Approx(0.7311).epsilon(1e-3));
    CHECK(a.value().at(1, 0) == doctest::Approx(0.1192).epsilon(1e-3));
    CHECK(a.value().at(1, 1) == doctest::Approx(0.8808).epsilon(1e-3));
  }
  SUBCASE("rows sum to one for random features") {
    Rng rng(21);
    Tape t;
    Var a = fsm::affinity_matrix(t.leaf(random_tensor({3, 7}, rng, -2.0, 2.0)));
    for (int i = 0; i < 7; ++i) {
      double s = 0.0;
      for (int j = 0; j < 7; ++j) {
        s += a.value().at(i, j);
        CHECK(a.value().at(i, j) > 0.0);
        CHECK(a.value().at(i, j) < 1.0);
      }
      CHECK(std::fabs(s - 1.0) <= 1e-9);
    }
  }
  SUBCASE("node cap is enforced before allocation") {
    Tape t;
    CHECK_THROWS_AS(fsm::affinity_matrix(t.leaf(Tensor({1, 5000})), 4096), std::invalid_argument);
  }
}

TEST_CASE("random_walk") {
  SUBCASE("alpha = 0 is the identity") {
    Rng rng(23);
    Tape t;
    Tensor fv = random_tensor({6, 3}, rng);
    Var f = t.leaf(fv);
    Var a = fsm::affinity_matrix(transpose2d(f));
    Var out = fsm::random_walk(f, a, t.leaf(Tensor({1}, {0.0})));
    CHECK(max_abs_diff(out.value(), fv) == 0.0);
  }
  SUBCASE("constant features scale by (1 + alpha)") {
    Tape t;
    const double alpha = 0.7, v = 1.3;
    Var f = t.leaf(Tensor::full({5, 2}, v));
    Var a = fsm::affinity_matrix(transpose2d(f));
    Var out = fsm::random_walk(f, a, t.leaf(Tensor({1}, {alpha})));
    for (int64_t i = 0; i < out.value().size(); ++i) {
      CHECK(std::fabs(out.value()[i] - (1.0 + alpha) * v) <= 1e-12);
    }
  }
  SUBCASE("n=2 worked example") {
    Tape t;
    Var f = t.leaf(Tensor({2, 1}, {1.0, 2.0}));
    Var a = fsm::affinity_matrix(transpose2d(f));
    Var out = fsm::random_walk(f, a, t.leaf(Tensor({1}, {0.5})));
    // closed form
    const double a00 = std::exp(1.0) / (std::exp(1.0) + std::exp(2.0));
    const double a01 = std::exp(2.0) / (std::exp(1.0) + std::exp(2.0));
    const double a10 = std::exp(2.0) / (std::exp(2.0) + std::exp(4.0));
    const double a11 = std::exp(4.0) / (std::exp(2.0) + std::exp(4.0));
    CHECK(std::fabs(out.value()[0] - (0.5 * (a00 + 2.0 * a01) + 1.0)) <= 1e-6);
    CHECK(std::fabs(out.value()[1] - (0.5 * (a10 + 2.0 * a11) + 2.0)) <= 1e-6);
    CHECK(out.value()[0] == doctest::Approx(1.8655).epsilon(1e-3));
    CHECK(out.value()[1] == doctest::Approx(2.9404).epsilon(1e-3));
  }
  SUBCASE("shape mismatch rejected") {
    Tape t;
    CHECK_THROWS_AS(fsm::random_walk(t.leaf(Tensor({3, 2})), t.leaf(Tensor({4, 4})), t.leaf(Tensor({1}))),
                    std::invalid_argument);
  }
}

TEST_CASE("affinity + random walk pass grad_check") {
  Rng rng(29);
  auto fn = [](Tape& t, const std::vector<Var>& in) {
    Var a = fsm::affinity_matrix(transpose2d(in[0]));
    return fsm::random_walk(in[0], a, in[1]);
  };
  auto report = grad_check("affinity+random_walk", fn,
                           {{"features", random_tensor({6, 3}, rng)}, {"alpha", Tensor({1}, {0.5})}}, 1e-4);
  INFO(to_string(report));
  CHECK(report.passed);
}

TEST_CASE("footprint weighted cross entropy") {
  SUBCASE("closed forms for the 1 / 0.1 weights") {
    FootprintMask fp;
    fp.mask = Tensor({1, 1, 1}, {1.0});
    fp.valid = Tensor::full({1, 1, 1}, 1.0);
    Tape t;
    Var p = t.leaf(Tensor({1, 1, 1}, {0.9}));
    CHECK(std::fabs(fsm::footprint_bce(p, fp).value()[0] - (-std::log(0.9))) <= 1e-12);
    CHECK(fsm::footprint_bce(p, fp).value()[0] == doctest::Approx(0.10536).epsilon(1e-4));

    fp.mask = Tensor({1, 1, 1}, {0.0});
    Var p2 = t.leaf(Tensor({1, 1, 1}, {0.9}));
    CHECK(std::fabs(fsm::footprint_bce(p2, fp).value()[0] - (-0.1 * std::log(0.1))) <= 1e-12);
    CHECK(fsm::footprint_bce(p2, fp).value()[0] == doctest::Approx(0.23026).epsilon(1e-4));
  }
  SUBCASE("perfect prediction sits at the clamp floor") {
    FootprintMask fp;
    fp.mask = Tensor({1, 2, 2}, {1, 0, 0, 1});
    fp.valid = Tensor::full({1, 2, 2}, 1.0);
    Tape t;
    Var p = t.leaf(Tensor({1, 2, 2}, {1, 0, 0, 1}));
    CHECK(fsm::footprint_bce(p, fp).value()[0] < 1e-5);
  }
  SUBCASE("monotone in p on both label classes") {
    FootprintMask pos;
    pos.mask = Tensor({1, 1, 1}, {1.0});
    pos.valid = Tensor::full({1, 1, 1}, 1.0);
    FootprintMask neg = pos;
    neg.mask = Tensor({1, 1, 1}, {0.0});
    double prev_pos = 1e9, prev_neg = -1e9;
    for (double p = 0.05; p < 1.0; p += 0.05) {
      Tape t;
      const double lp = fsm::footprint_bce(t.leaf(Tensor({1, 1, 1}, {p})), pos).value()[0];
      const double ln = fsm::footprint_bce(t.leaf(Tensor({1, 1, 1}, {p})), neg).value()[0];
      CHECK(lp < prev_pos);
      CHECK(ln > prev_neg);
      prev_pos = lp;
      prev_neg = ln;
    }
  }
  SUBCASE("weighted_bce gradient") {
    Rng rng(31);
    Tensor y({1, 3, 3});
    for (int64_t i = 0; i < 9; ++i) y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    Tensor valid = Tensor::full({1, 3, 3}, 1.0);
    auto fn = [y, valid](Tape& t, const std::vector<Var>& in) { return weighted_bce(in[0], y, valid); };
    auto report = grad_check("weighted_bce", fn, {{"p", random_tensor({1, 3, 3}, rng, 0.2, 0.8)}}, 1e-4);
    INFO(to_string(report));
    CHECK(report.passed);
  }
}

TEST_CASE("fsm_forward") {
  Rng rng(37);
  ParamSet ps;
  fsm::FsmConfig cfg;
  cfg.downsample_target = 4;
  fsm::FsmHead head(ps, cfg, 3, rng);

  SUBCASE("output shape and (0,1) range") {
    Tape t;
    Binding bind(t, ps);
    auto out = head.forward(bind, t.leaf(random_tensor({3, 8, 8}, rng)), true);
    CHECK(out.p_trav.value().shape() == std::vector<int>{1, 8, 8});
    CHECK(out.hd == 4);
    for (int64_t i = 0; i < out.p_trav.value().size(); ++i) {
      CHECK(out.p_trav.value()[i] > 0.0);
      CHECK(out.p_trav.value()[i] < 1.0);
    }
  }
  SUBCASE("alpha = 0 equals the pipeline with the walk removed") {
    ps.get("fsm.alpha")[0] = 0.0;
    Tensor fx = random_tensor({3, 8, 8}, rng);
    Tape t;
    Binding bind(t, ps);
    auto with_rw = head.forward(bind, t.leaf(fx), true);
    auto without = head.forward(bind, t.leaf(fx), false);
    CHECK(max_abs_diff(with_rw.p_trav.value(), without.p_trav.value()) == 0.0);
    ps.get("fsm.alpha")[0] = cfg.alpha_init;
  }
  SUBCASE("gradient w.r.t. alpha passes grad_check") {
    Tensor head_w = ps.get("fsm.head.weight");
    Tensor head_b = ps.get("fsm.head.bias");
    auto fn = [head_w, head_b](Tape& t, const std::vector<Var>& in) {
      const int c = 3, hd = 4, n = 16;
      Var pooled = avg_pool2d(in[0], 2);
      Var normed = l2_normalize_ch(pooled);
      Var a = fsm::affinity_matrix(reshape(normed, {c, n}));
      Var fmat = transpose2d(reshape(pooled, {c, n}));
      Var prop = reshape(transpose2d(fsm::random_walk(fmat, a, in[1])), {c, hd, hd});
      Var up = upsample_bilinear(prop, 8, 8);
      return sigmoid(conv2d(up, t.constant(head_w), t.constant(head_b), 1, 1));
    };
    auto report = grad_check("fsm_forward", fn,
                             {{"fx", random_tensor({3, 8, 8}, rng)}, {"alpha", Tensor({1}, {0.5})}}, 1e-4);
    INFO(to_string(report));
    CHECK(report.passed);
  }
  SUBCASE("per-sample purity: processing order does not matter") {
    Tensor fx1 = random_tensor({3, 8, 8}, rng);
    Tensor fx2 = random_tensor({3, 8, 8}, rng);
    Tape t1;
    Binding b1(t1, ps);
    auto a1 = head.forward(b1, t1.leaf(fx1), true);
    auto a2 = head.forward(b1, t1.leaf(fx2), true);
    Tape t2;
    Binding b2(t2, ps);
    auto b_2 = head.forward(b2, t2.leaf(fx2), true);
    auto b_1 = head.forward(b2, t2.leaf(fx1), true);
    CHECK(max_abs_diff(a1.p_trav.value(), b_1.p_trav.value()) == 0.0);
    CHECK(max_abs_diff(a2.p_trav.value(), b_2.p_trav.value()) == 0.0);
  }
}

TEST_CASE("self_supervised_loss") {
  Rng rng(41);
  Model model(tiny_model_cfg());

  SUBCASE("identity transform gives exactly zero") {
    RgbdFrame f = random_frame(16, 16, rng);
    Tape t;
    Binding bind(t, model.params());
    Var loss = fsm::self_supervised_loss(model, bind, gfn::make_rgbd_input(f), TransformSpec::identity(), true);
    CHECK(loss.value()[0] == 0.0);
  }
  SUBCASE("constant-output model gives zero for any transform") {
    ModelConfig cfg = tiny_model_cfg();
    Model constant_model(cfg);
    for (auto& [name, t] : constant_model.params().tensors()) t.fill(0.0);
    constant_model.params().get("fsm.head.bias")[0] = 0.4;
    RgbdFrame f = random_frame(16, 16, rng);
    for (const auto& tr : {TransformSpec::horizontal_flip(), TransformSpec::translate(1, 0)}) {
      Tape t;
      Binding bind(t, constant_model.params());
      Var loss = fsm::self_supervised_loss(constant_model, bind, gfn::make_rgbd_input(f), tr, true);
      CHECK(loss.value()[0] == 0.0);
    }
  }
  SUBCASE("matches an independent two-pass recomputation") {
    RgbdFrame f = random_frame(16, 16, rng);
    const Tensor rgbd = gfn::make_rgbd_input(f);
    const TransformSpec tr = TransformSpec::horizontal_flip();
    Tape t;
    Binding bind(t, model.params());
    const double got = fsm::self_supervised_loss(model, bind, rgbd, tr, true).value()[0];

    // oracle: two independent forwards, transform on plain tensors
    Tape t2;
    Binding bind2(t2, model.params());
    Tensor feat1 = model.forward(bind2, rgbd, true).feat_ss.value();
    auto [feat1_tr, valid] = transform_tensor(feat1, tr);
    Tensor rgbd_tr = transform_tensor(rgbd, tr).first;
    Tape t3;
    Binding bind3(t3, model.params());
    Tensor feat2 = model.forward(bind3, rgbd_tr, true).feat_ss.value();
    double acc = 0.0, cnt = 0.0;
    const int c = feat1.dim(0);
    const int64_t plane = static_cast<int64_t>(feat1.dim(1)) * feat1.dim(2);
    for (int64_t px = 0; px < plane; ++px) {
      if (valid[px] == 0.0) continue;
      cnt += 1.0;
      for (int ch = 0; ch < c; ++ch) {
        const double d = feat1_tr[ch * plane + px] - feat2[ch * plane + px];
        acc += d * d;
      }
    }
    CHECK(std::fabs(got - acc / cnt) <= 1e-10);
  }
}

TEST_CASE("total_loss") {
  Rng rng(43);
  Model model(tiny_model_cfg());
  RgbdFrame frame = random_frame(16, 16, rng);
  FootprintMask fp;
  fp.mask = Tensor({1, 16, 16});
  for (int64_t i = 0; i < fp.mask.size(); ++i) fp.mask[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
  fp.valid = Tensor::full({1, 16, 16}, 1.0);
  SurfaceNormalImage gt;
  gt.normals = random_tensor({3, 16, 16}, rng);
  gt.validity = Tensor::full({1, 16, 16}, 1.0);
  const TransformSpec tr = TransformSpec::horizontal_flip();

  SUBCASE("all weights zero") {
    Tape t;
    Binding bind(t, model.params());
    Var loss = fsm::total_loss(model, bind, frame, fp, gt, tr, {0.0, 0.0, 0.0});
    CHECK(loss.value()[0] == 0.0);
  }
  SUBCASE("single term equals the bare loss") {
    Tape t;
    Binding bind(t, model.params());
    Var loss = fsm::total_loss(model, bind, frame, fp, gt, tr, {1.0, 0.0, 0.0});
    Tape t2;
    Binding bind2(t2, model.params());
    auto fwd = model.forward(bind2, gfn::make_rgbd_input(frame), true);
    Var ce = fsm::footprint_bce(fwd.p_trav, fp);
    CHECK(loss.value()[0] == ce.value()[0]);
  }
  SUBCASE("equals the weighted sum of independently computed components") {
    fsm::LossWeights w{0.8, 0.15, 1.2};
    fsm::LossBreakdown bd;
    Tape t;
    Binding bind(t, model.params());
    Var loss = fsm::total_loss(model, bind, frame, fp, gt, tr, w, &bd);
    CHECK(std::fabs(loss.value()[0] - (w.ce * bd.ce + w.ss * bd.ss + w.sn * bd.sn)) <= 1e-12);

    Tape t2;
    Binding bind2(t2, model.params());
    auto fwd = model.forward(bind2, gfn::make_rgbd_input(frame), true);
    const double ce = fsm::footprint_bce(fwd.p_trav, fp).value()[0];
    const double sn = gfn::surface_normal_loss(fwd.p_sn, gt).value()[0];
    Tape t3;
    Binding bind3(t3, model.params());
    const double ss =
        fsm::self_supervised_loss(model, bind3, gfn::make_rgbd_input(frame), tr, true).value()[0];
    CHECK(std::fabs(loss.value()[0] - (w.ce * ce + w.ss * ss + w.sn * sn)) <= 1e-12);
  }
}
