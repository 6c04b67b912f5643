// Acceptance runner: one PASS/FAIL line per criterion.
//
//   epcl_acceptance [--only 1,2,...] [--work DIR]
//
// Exit status is 0 only when every selected criterion passes.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "epcl/augmentation.hpp"
#include "epcl/config.hpp"
#include "epcl/eval_metrics.hpp"
#include "epcl/inference.hpp"
#include "epcl/losses.hpp"
#include "epcl/model.hpp"
#include "epcl/prototypes.hpp"
#include "epcl/trainer.hpp"
#include "epcl/uncertainty.hpp"
#include "oracles.hpp"
#include "tensor_util.hpp"

namespace fs = std::filesystem;
using namespace epcl;
using testutil::max_abs_diff;
using testutil::to_vec;

namespace {

// Held-out foreground Dice of the full configuration, measured on the first
// complete run of the end-to-end experiment below.
constexpr double kPinnedDice = 0.9912;
constexpr double kPinnedTolerance = 0.03;

struct Check {
  std::string name;
  bool ok;
  std::string detail;
};

class Checks {
 public:
  void add(std::string name, bool ok, std::string detail = {}) {
    items_.push_back({std::move(name), ok, std::move(detail)});
  }
  // Passes when `err` is finite and at most `tol`.
  void within(const std::string& name, double err, double tol) {
    std::ostringstream d;
    d << "max err " << err << " (tol " << tol << ")";
    add(name, std::isfinite(err) && err <= tol, d.str());
  }
  bool all() const {
    for (const auto& c : items_)
      if (!c.ok) return false;
    return !items_.empty();
  }
  const std::vector<Check>& items() const { return items_; }

 private:
  std::vector<Check> items_;
};

std::string fmt(double x, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << std::fixed << x;
  return s.str();
}

PredictionSet make_set(std::vector<torch::Tensor> heads) {
  PredictionSet s;
  s.head_probs = std::move(heads);
  s.mean_probs = torch::stack(s.head_probs, 0).mean(0);
  return s;
}

// ---- 1: equation oracles -------------------------------------------------------

Checks criterion_equations() {
  Checks out;
  std::mt19937_64 rng(11);
  constexpr double tol = 1e-6;
  double e_unc = 0, e_rel = 0, e_ref = 0, e_lp = 0, e_up = 0, e_fu = 0, e_fg = 0, e_sim = 0, e_sup = 0, e_con = 0,
         e_tot = 0;
  bool hard_ok = true;
  int trials = 0;
  for (int trial = 0; trial < 12; ++trial) {
    std::uniform_int_distribution<int> side(2, 6);
    const std::int64_t H = side(rng), W = side(rng), D = side(rng);
    const int N = 2, C = 2 + trial % 3, F = 3 + trial % 4, K = 4;
    const oracle::Dims dm{N, C, H * W * D};
    ++trials;

    // uncertainty and reliability
    std::vector<torch::Tensor> heads;
    std::vector<oracle::Vec> heads_v;
    for (int k = 0; k < K; ++k) {
      heads.push_back(testutil::random_probs(rng, {N, C, H, W, D}));
      heads_v.push_back(to_vec(heads.back()));
    }
    const auto set = make_set(heads);
    const auto pl = set.mean_probs;
    const auto pl_v = to_vec(pl);
    e_unc = std::max(e_unc, max_abs_diff(entropy_map(pl).data, oracle::entropy(pl_v, dm)));
    e_unc = std::max(e_unc, max_abs_diff(head_variance(set).data, oracle::head_variance(heads_v, dm)));
    e_unc = std::max(e_unc, max_abs_diff(dist_uncertainty_norm(set).data, oracle::dist_norm(heads_v, dm)));
    e_unc = std::max(e_unc, max_abs_diff(entropy_norm(entropy_map(pl)).data,
                                         oracle::entropy_norm(oracle::entropy(pl_v, dm), dm)));
    const auto j = juq(set, pl);
    const auto j_v = oracle::juq(heads_v, pl_v, dm);
    e_unc = std::max(e_unc, max_abs_diff(j.data, j_v));
    const auto r_verb = reliability_map(j, ReliabilityMode::VerbatimEq6);
    const auto r_mm = reliability_map(j, ReliabilityMode::MinMax);
    const auto rv = oracle::reliability_verbatim(j_v, dm);
    e_rel = std::max(e_rel, max_abs_diff(r_verb.data, rv));
    e_rel = std::max(e_rel, max_abs_diff(r_mm.data, oracle::reliability_minmax(j_v, dm)));
    const auto refined = refine_pseudo_labels(pl, r_verb);
    const auto refined_v = oracle::refine(pl_v, rv, dm);
    e_ref = std::max(e_ref, max_abs_diff(refined.refined, refined_v));
    hard_ok = hard_ok && testutil::to_ints(refined.hard) == oracle::argmax(refined_v, dm);

    // prototypes; the last trials leave the top class out of the labels
    const int label_classes = trial >= 9 ? C - 1 : C;
    const auto feats = testutil::random_normal(rng, {N, F, H, W, D});
    const auto feats2 = testutil::random_normal(rng, {N, F, H, W, D});
    const auto f_v = to_vec(feats), f2_v = to_vec(feats2);
    const auto labels = testutil::random_labels(rng, {N, H, W, D}, label_classes);
    const auto labels_i = testutil::to_ints(labels);
    const auto hard_i = testutil::to_ints(refined.hard);
    const auto rel = r_mm.data;
    const auto rel_v = to_vec(rel);

    const auto p_l = labeled_prototypes(feats, labels, C);
    const auto p_l_o = oracle::pooled(f_v, labels_i, nullptr, N, F, C, dm.v, 0.0);
    e_lp = std::max(e_lp, testutil::proto_diff(testutil::to_protos(p_l.vectors, p_l.valid), p_l_o));
    const auto p_u1 = unlabeled_prototypes(feats, refined.hard, rel, C);
    const auto p_u2 = unlabeled_prototypes(feats2, refined.hard, rel, C);
    const auto p_u1_o = oracle::pooled(f_v, hard_i, &rel_v, N, F, C, dm.v, oracle::kEps);
    const auto p_u2_o = oracle::pooled(f2_v, hard_i, &rel_v, N, F, C, dm.v, oracle::kEps);
    e_up = std::max(e_up, testutil::proto_diff(testutil::to_protos(p_u1.vectors, p_u1.valid), p_u1_o));
    e_up = std::max(e_up, testutil::proto_diff(testutil::to_protos(p_u2.vectors, p_u2.valid), p_u2_o));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double l1 = u01(rng), l2 = u01(rng), lam = u01(rng);
    const auto p_u = fuse_unlabeled(p_u1, p_u2, l1, l2);
    const auto p_u_o = oracle::combine(p_u1_o, p_u2_o, l1, l2);
    e_fu = std::max(e_fu, testutil::proto_diff(testutil::to_protos(p_u.vectors, p_u.valid), p_u_o));
    const auto g = fuse_global(p_l, p_u, lam);
    const auto g_o = oracle::fuse_global(p_l_o, p_u_o, lam);
    e_fg = std::max(e_fg, testutil::proto_diff(testutil::to_protos(g.vectors, g.valid), g_o));

    const double tau = 0.5 + u01(rng) * 1.5;
    const auto s_l = similarity_map(g, feats, tau);
    const auto s_l_o = oracle::similarity(g_o, f_v, N, F, dm.v, tau);
    e_sim = std::max({e_sim, max_abs_diff(s_l.data, s_l_o.first), max_abs_diff(s_l.probs, s_l_o.second)});
    const auto f_mid = (feats + feats2) / 2.0;
    const auto s_u = similarity_map(g, f_mid, tau);
    const auto s_u1 = similarity_map(g, feats, tau);
    const auto s_u2 = similarity_map(g, feats2, tau);
    const auto s_u_o = oracle::similarity(g_o, to_vec(f_mid), N, F, dm.v, tau);
    const auto s_u2_o = oracle::similarity(g_o, f2_v, N, F, dm.v, tau);

    // supervised losses
    const oracle::Vec onehot = oracle::one_hot(labels_i, dm);
    const auto sup = supervised_loss(set, labels, 2.0);
    const double o_ce = oracle::ce(heads_v[0], onehot, dm);
    const double o_dice = oracle::dice(heads_v[1], onehot, dm);
    const double o_focal = oracle::focal(heads_v[2], onehot, dm, 2.0);
    const double o_iou = oracle::iou(heads_v[3], onehot, dm);
    const double o_fused = oracle::ce(pl_v, onehot, dm);
    const double o_seg = (o_ce + o_dice + o_focal + o_iou) / 4.0 + o_fused;
    for (auto [a, b] : {std::pair{sup.l_ce, o_ce}, {sup.l_dice, o_dice}, {sup.l_focal, o_focal}, {sup.l_iou, o_iou},
                        {sup.l_fused, o_fused}, {sup.l_seg, o_seg}}) {
      e_sup = std::max(e_sup, std::abs(a.item<double>() - b));
    }

    // consistency losses in both reductions
    for (const auto red : {VoxelReduction::Sum, VoxelReduction::Mean}) {
      const bool sum = red == VoxelReduction::Sum;
      const auto con = consistency_losses(s_l.probs, s_u.probs, s_u1.probs, s_u2.probs, labels, refined.refined, red);
      const double o_lc = oracle::ce(s_l_o.second, onehot, dm);
      const double o_uc1 = oracle::ce(s_u_o.second, refined_v, dm, sum);
      const double o_uc2 = oracle::ce(s_l_o.second, refined_v, dm, sum) + oracle::ce(s_u2_o.second, refined_v, dm, sum);
      e_con = std::max({e_con, std::abs(con.l_lc.item<double>() - o_lc), std::abs(con.l_uc1.item<double>() - o_uc1),
                        std::abs(con.l_uc2.item<double>() - o_uc2)});
      const double t = total_loss(sup.l_seg, con.l_lc, con.l_uc1, con.l_uc2, lam).item<double>();
      e_tot = std::max(e_tot, std::abs(t - oracle::total(o_seg, o_lc, o_uc1, o_uc2, lam)));
    }
  }
  out.within("entropy / variance / normalised uncertainty / juq", e_unc, tol);
  out.within("reliability maps (both modes)", e_rel, tol);
  out.within("refined pseudo-labels", e_ref, tol);
  out.add("hard pseudo-labels equal oracle argmax", hard_ok);
  out.within("labelled prototypes", e_lp, tol);
  out.within("unlabelled prototypes", e_up, tol);
  out.within("unlabelled prototype fusion", e_fu, tol);
  out.within("global prototype fusion", e_fg, tol);
  out.within("cosine similarity and softmax", e_sim, tol);
  out.within("ce / dice / focal / iou / fused / seg", e_sup, tol);
  out.within("consistency losses", e_con, tol);
  out.within("total loss", e_tot, tol);
  out.add("trials", trials > 0, std::to_string(trials) + " random instances up to 6^3");
  return out;
}

// ---- 2: gradients --------------------------------------------------------------

double gradient_error(const torch::Tensor& x0, const std::function<torch::Tensor(const torch::Tensor&)>& f) {
  auto x = x0.clone().set_requires_grad(true);
  f(x).backward();
  const auto analytic = x.grad().clone();
  const double h = 1e-6;
  auto numeric = torch::zeros_like(x0);
  {
    torch::NoGradGuard no_grad;
    auto flat = x0.clone().reshape({-1});
    auto* g = numeric.reshape({-1}).data_ptr<double>();
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      const double keep = flat[i].item<double>();
      flat[i] = keep + h;
      const double up = f(flat.view(x0.sizes())).item<double>();
      flat[i] = keep - h;
      const double down = f(flat.view(x0.sizes())).item<double>();
      flat[i] = keep;
      g[i] = (up - down) / (2.0 * h);
    }
  }
  const double diff = (analytic - numeric).norm().item<double>();
  const double scale = std::max({analytic.norm().item<double>(), numeric.norm().item<double>(), 1e-12});
  return diff / scale;
}

Checks criterion_gradients() {
  Checks out;
  std::mt19937_64 rng(23);
  constexpr double tol = 1e-3;
  const auto logits = testutil::random_normal(rng, {2, 2, 2, 2, 2});
  const auto labels = testutil::random_labels(rng, {2, 2, 2, 2}, 2);
  const auto soft = testutil::random_probs(rng, {2, 2, 2, 2, 2}) * 0.5;
  auto probs = [](const torch::Tensor& x) { return torch::softmax(x, 1); };

  out.within("ce (hard targets)", gradient_error(logits, [&](const torch::Tensor& x) { return ce_loss(probs(x), labels); }), tol);
  out.within("ce (soft targets, voxel sum)",
             gradient_error(logits, [&](const torch::Tensor& x) { return ce_loss(probs(x), soft, VoxelReduction::Sum); }), tol);
  out.within("dice", gradient_error(logits, [&](const torch::Tensor& x) { return dice_loss(probs(x), labels); }), tol);
  out.within("focal", gradient_error(logits, [&](const torch::Tensor& x) { return focal_loss(probs(x), labels, 2.0); }), tol);
  out.within("iou", gradient_error(logits, [&](const torch::Tensor& x) { return iou_loss(probs(x), labels); }), tol);

  // Consistency terms as functions of the feature maps: prototypes and
  // similarity maps are rebuilt from the perturbed features each time.
  const int C = 2;
  const auto feats = testutil::random_normal(rng, {2, 3, 2, 2, 2});
  const auto hard = testutil::random_labels(rng, {2, 2, 2, 2}, C);
  const auto rel = torch::rand({2, 2, 2, 2}, torch::kDouble) + 0.1;
  const auto refined = soft * rel.unsqueeze(1);
  auto terms = [&](const torch::Tensor& f) {
    const auto f1 = f;
    const auto f2 = f.flip({2}) * 0.5 + 0.25;
    const auto p_l = labeled_prototypes(f, labels, C);
    const auto p_u = fuse_unlabeled(unlabeled_prototypes(f1, hard, rel, C), unlabeled_prototypes(f2, hard, rel, C), 1.0, 1.0);
    const auto g = fuse_global(p_l, p_u, 0.6);
    return consistency_losses(similarity_map(g, f, 1.0).probs, similarity_map(g, (f1 + f2) / 2.0, 1.0).probs,
                              similarity_map(g, f1, 1.0).probs, similarity_map(g, f2, 1.0).probs, labels, refined,
                              VoxelReduction::Sum);
  };
  out.within("labelled consistency", gradient_error(feats, [&](const torch::Tensor& f) { return terms(f).l_lc; }), tol);
  out.within("unlabelled consistency 1", gradient_error(feats, [&](const torch::Tensor& f) { return terms(f).l_uc1; }), tol);
  out.within("unlabelled consistency 2", gradient_error(feats, [&](const torch::Tensor& f) { return terms(f).l_uc2; }), tol);
  return out;
}

// ---- 3: invariants -------------------------------------------------------------

Checks criterion_invariants() {
  Checks out;
  std::mt19937_64 rng(37);

  bool entropy_ok = true, unit_ok = true, cos_ok = true, norm_ok = true;
  double worst_norm = 0.0;
  for (int C : {2, 3, 5}) {
    for (int trial = 0; trial < 4; ++trial) {
      std::vector<torch::Tensor> heads;
      for (int k = 0; k < 4; ++k) heads.push_back(testutil::random_probs(rng, {2, C, 5, 4, 3}, 1.0 + 4.0 * trial));
      const auto set = make_set(heads);
      const auto e = entropy_map(set.mean_probs).data;
      entropy_ok = entropy_ok && e.min().item<double>() >= 0.0 && e.max().item<double>() <= std::log(C) + 1e-12;
      const auto j = juq(set, set.mean_probs);
      for (const auto& m : {dist_uncertainty_norm(set).data, entropy_norm(entropy_map(set.mean_probs)).data, j.data,
                            reliability_map(j, ReliabilityMode::MinMax).data,
                            reliability_map(j, ReliabilityMode::VerbatimEq6).data}) {
        unit_ok = unit_ok && m.min().item<double>() >= 0.0 && m.max().item<double>() <= 1.0;
      }
      const auto feats = testutil::random_normal(rng, {2, 4, 5, 4, 3});
      const auto labels = testutil::random_labels(rng, {2, 5, 4, 3}, C);
      const auto sim = similarity_map(labeled_prototypes(feats, labels, C), feats, 0.7);
      cos_ok = cos_ok && sim.data.min().item<double>() >= -1.0 - 1e-12 && sim.data.max().item<double>() <= 1.0 + 1e-12;
      for (const auto& p : {sim.probs, set.mean_probs, heads[0]}) {
        worst_norm = std::max(worst_norm, (p.sum(1) - 1.0).abs().max().item<double>());
      }
    }
  }
  // Sliding-window assembly of normalised patches stays normalised.
  {
    const Shape3 vol{9, 7, 6}, patch{4, 4, 4}, stride{3, 2, 3};
    const auto grid = plan_sliding_window(vol, patch, stride);
    std::vector<ProbabilityMap> maps;
    for (std::size_t i = 0; i < grid.origins.size(); ++i) {
      const auto p = testutil::random_probs(rng, {1, 3, 4, 4, 4}).to(torch::kFloat)[0].contiguous();
      ProbabilityMap m(patch, 3);
      std::memcpy(m.data.data(), p.data_ptr<float>(), m.data.size() * sizeof(float));
      maps.push_back(std::move(m));
    }
    const auto full = assemble_prediction(maps, grid);
    for (std::int64_t v = 0; v < vol.numel(); ++v) {
      double s = 0.0;
      for (int c = 0; c < 3; ++c) s += full.at(c, v);
      worst_norm = std::max(worst_norm, std::abs(s - 1.0));
    }
  }
  norm_ok = worst_norm <= 1e-5;
  out.add("entropy in [0, ln C]", entropy_ok);
  out.add("normalised uncertainty and reliability in [0, 1]", unit_ok);
  out.add("cosine similarity in [-1, 1]", cos_ok);
  out.add("probabilities sum to 1 within 1e-5", norm_ok, "worst " + std::to_string(worst_norm));

  // Global fusion endpoints.
  {
    const auto feats = testutil::random_normal(rng, {2, 4, 3, 3, 3});
    const auto labels = testutil::random_labels(rng, {2, 3, 3, 3}, 2);
    const auto p_l = labeled_prototypes(feats, labels, 2);
    const auto p_u = labeled_prototypes(feats * 2.0 + 1.0, labels, 2);
    const double e0 = (fuse_global(p_l, p_u, 0.0).vectors - p_l.vectors).abs().max().item<double>();
    const double e1 = (fuse_global(p_l, p_u, 1.0).vectors - (p_l.vectors + p_u.vectors) / 2.0).abs().max().item<double>();
    out.add("fusion at lambda 0 is the labelled prototype", e0 <= 1e-12);
    out.add("fusion at lambda 1 is the mean", e1 <= 1e-12);
  }
  out.add("ramp(0) = exp(-5)", std::abs(ramp_lambda(0, 14000) - std::exp(-5.0)) < 1e-15);
  out.add("ramp(T) = 1", ramp_lambda(14000, 14000) == 1.0);

  // Overlap and surface metrics.
  {
    bool identity = true, symmetric = true, zero = true;
    const Shape3 s{7, 6, 5};
    std::bernoulli_distribution coin(0.4);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::uint8_t> a(static_cast<std::size_t>(s.numel())), b(a.size());
      for (auto& x : a) x = coin(rng);
      for (auto& x : b) x = coin(rng);
      const auto o = overlap_metrics(a, b);
      identity = identity && std::abs(o.dice - 2.0 * o.jaccard / (1.0 + o.jaccard)) <= 1e-9;
      const Spacing sp{1.0, 0.7, 1.6};
      const auto ab = surface_metrics(a, b, s, sp), ba = surface_metrics(b, a, s, sp);
      symmetric = symmetric && std::abs(ab.hd95 - ba.hd95) <= 1e-9 && std::abs(ab.asd - ba.asd) <= 1e-9;
      const auto aa = surface_metrics(a, a, s, sp);
      zero = zero && aa.defined && aa.hd95 == 0.0 && aa.asd == 0.0;
    }
    out.add("Dice = 2J / (1 + J)", identity);
    out.add("hd95 / asd symmetric", symmetric);
    out.add("hd95 / asd zero on identical masks", zero);
  }

  // CutMix: every voxel comes from exactly the source the mask names.
  {
    bool exhaustive = true;
    Rng r(5);
    for (int trial = 0; trial < 10; ++trial) {
      const Shape3 s{8, 6, 10};
      Volume va(s), vb(s);
      LabelVolume la(s, 3), lb(s, 3);
      for (std::size_t i = 0; i < va.data.size(); ++i) {
        va.data[i] = static_cast<float>(i);
        vb.data[i] = -1.0f - static_cast<float>(i);
        la.data[i] = static_cast<std::uint8_t>(i % 2);
        lb.data[i] = 2;
      }
      const auto a = make_sample(va, la, "a"), b = make_sample(vb, lb, "b");
      const auto m = generate_cut_mask(s, r);
      const auto mixed = cutmix(a, b, m);
      for (std::size_t i = 0; i < mixed.image.size(); ++i) {
        const bool in = m.data[i] != 0;
        exhaustive = exhaustive && mixed.image[i] == (in ? b.image[i] : a.image[i]) &&
                     (*mixed.label)[i] == (in ? (*b.label)[i] : (*a.label)[i]);
      }
    }
    out.add("CutMix voxelwise exhaustive", exhaustive);
  }

  // EMA against its closed form on one parameter.
  {
    const double d = 0.9, theta0 = 0.3;
    std::vector<torch::Tensor> teacher{torch::full({1}, theta0, torch::kDouble)};
    std::vector<double> trajectory;
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (int t = 0; t < 25; ++t) {
      trajectory.push_back(u(rng));
      const std::vector<torch::Tensor> student{torch::full({1}, trajectory.back(), torch::kDouble)};
      ema_update(teacher, student, d);
    }
    const auto T = static_cast<int>(trajectory.size());
    double closed = std::pow(d, T) * theta0;
    for (int t = 1; t <= T; ++t) closed += (1.0 - d) * std::pow(d, T - t) * trajectory[static_cast<std::size_t>(t - 1)];
    out.add("EMA closed form", std::abs(teacher[0].item<double>() - closed) <= 1e-12,
            "teacher " + std::to_string(teacher[0].item<double>()) + " vs " + std::to_string(closed));
  }
  return out;
}

// ---- 4: memory property --------------------------------------------------------

Checks criterion_memory() {
  Checks out;
  torch::manual_seed(3);
  const std::vector<std::int64_t> label{16, 16, 16};
  const std::int64_t label_voxels = 16 * 16 * 16;
  for (int F : {16, 32, 64}) {
    for (int C : {2, 3}) {
      PrototypeHead head(F, C);
      bool channels = true, smaller = true;
      std::ostringstream d;
      for (int stride : {1, 2, 4, 8}) {
        const std::int64_t side = 16 / stride;
        const auto y = head->forward(torch::randn({1, F, side, side, side}), label);
        channels = channels && y.size(1) == C && y.sizes().slice(2).vec() == label;
        const auto proto = prototype_head_peak_floats(side * side * side, label_voxels, F, C);
        const auto raw = raw_upsample_floats(label_voxels, F);
        smaller = smaller && proto < raw;
        d << " s" << stride << ":" << proto << "<" << raw;
      }
      out.add("F=" + std::to_string(F) + " C=" + std::to_string(C) + " head emits C channels", channels);
      out.add("F=" + std::to_string(F) + " C=" + std::to_string(C) + " prototype path below raw path", smaller, d.str());
    }
  }
  // Every tap of a real network.
  for (int C : {2, 3}) {
    BackboneConfig b;
    b.base_filters = 8;
    b.depth = 3;
    b.num_classes = C;
    SegmentationNet net(b);
    torch::NoGradGuard no_grad;
    const auto out_f = net->forward(torch::randn({1, 1, 16, 16, 16}));
    bool ok = true;
    for (int tap = 1; tap <= 3; ++tap) {
      const auto f = net->prototype_features(out_f.pyramid, tap, label);
      ok = ok && f.size(1) == C && out_f.pyramid[static_cast<std::size_t>(tap - 1)].size(1) == b.pyramid_channels(tap);
    }
    out.add("network taps 1-3 yield C channels (C=" + std::to_string(C) + ")", ok);
  }
  return out;
}

// ---- shared end-to-end runs ----------------------------------------------------

struct E2E {
  fs::path work;
  std::shared_ptr<const Dataset> data;
  std::optional<RunResult> full;
  std::optional<RunResult> supervised;

  static constexpr std::uint64_t kDataSeed = 2024;

  TrainConfig config(const std::string& name) const {
    TrainConfig c = make_config("tiny");
    c.num_classes = 2;
    c.seed = 7;
    c.data_dir = (work / "data").string();
    c.out_dir = (work / name).string();
    return c;
  }

  void ensure_data() {
    if (data) return;
    fs::remove_all(work / "data");
    write_synthetic_dataset(work / "data", 20, 4, {48, 48, 48}, 2, kDataSeed, 0.1);
    data = std::make_shared<const Dataset>(load_dataset(work / "data", 2));
  }

  RunResult run(const std::string& name, TrainConfig c, std::optional<fs::path> resume = {}) {
    ensure_data();
    if (!resume) fs::remove_all(work / name);
    RunOptions opts;
    opts.resume_from = resume;
    const auto t0 = std::chrono::steady_clock::now();
    opts.on_step = [&](const LossReport& r) {
      if (r.iteration % 250 == 0) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("    [%s] iter %lld total %.4f (%.0f s)\n", name.c_str(), static_cast<long long>(r.iteration), r.total, s);
        std::fflush(stdout);
      }
    };
    return run_training(c, data, opts);
  }

  const RunResult& full_run() {
    if (!full) full = run("full", config("full"));
    return *full;
  }

  const RunResult& supervised_run() {
    if (!supervised) {
      auto c = config("supervised");
      c.unlabeled_losses = false;
      supervised = run("supervised", c);
    }
    return *supervised;
  }

  // Mean foreground Dice of the teacher over the held-out volumes.
  double held_out_dice(const fs::path& checkpoint) {
    ensure_data();
    auto model = load_model(checkpoint);
    double sum = 0.0;
    for (std::size_t i = 0; i < data->test_images.size(); ++i) {
      const auto pred = predict(model, data->test_images[i]);
      sum += evaluate_case(pred.labels, data->test_labels[i], data->test_images[i].spacing, "t").at(0).dice;
    }
    return sum / static_cast<double>(data->test_images.size());
  }
};

double window_mean(const std::vector<LossReport>& log, std::int64_t first, std::int64_t last) {
  double s = 0.0;
  int n = 0;
  for (const auto& r : log)
    if (r.iteration >= first && r.iteration <= last) {
      s += r.total;
      ++n;
    }
  return n ? s / n : NAN;
}

std::vector<std::string> log_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) lines.push_back(l);
  return lines;
}

// ---- 5: synthetic end-to-end ---------------------------------------------------

Checks criterion_end_to_end(E2E& e2e) {
  Checks out;
  const auto& full = e2e.full_run();
  const auto log = read_loss_log(full.log_path);
  const double early = window_mean(log, 1, 100), late = window_mean(log, 1900, 2000);
  out.add("(a) loss 1900-2000 below loss 1-100", late < early, "early " + fmt(early) + ", late " + fmt(late));

  const double dice = e2e.held_out_dice(full.final_checkpoint);
  std::string pin = std::isnan(kPinnedDice) ? "no pinned value yet" : "pinned " + fmt(kPinnedDice) + " +- 0.03";
  out.add("(b) held-out Dice >= 0.85", dice >= 0.85, "dice " + fmt(dice));
  out.add("(b) held-out Dice matches pinned value", !std::isnan(kPinnedDice) && std::abs(dice - kPinnedDice) <= kPinnedTolerance,
          "dice " + fmt(dice) + ", " + pin);

  const auto& sup = e2e.supervised_run();
  const double sup_dice = e2e.held_out_dice(sup.final_checkpoint);
  out.add("(c) full config >= supervised-only", dice >= sup_dice, "full " + fmt(dice) + ", supervised-only " + fmt(sup_dice));
  return out;
}

// ---- 6: ablation plumbing ------------------------------------------------------

Checks criterion_modes(const fs::path& work) {
  Checks out;
  const fs::path dir = work / "modes_data";
  fs::remove_all(dir);
  write_synthetic_dataset(dir, 8, 0, {24, 24, 24}, 2, 99, 0.25);
  const auto data = std::make_shared<const Dataset>(load_dataset(dir, 2));

  std::optional<LossReport> reference;
  std::string reference_name;
  for (auto cm : {CombinationMode::Concat, CombinationMode::SeparateMultiProto, CombinationMode::AugMapOnOrig,
                  CombinationMode::OrigMapOnAug}) {
    for (auto rm : {ReliabilityMode::VerbatimEq6, ReliabilityMode::MinMax}) {
      TrainConfig c = make_config("tiny");
      c.patch = {16, 16, 16};
      c.stride = {8, 8, 8};
      c.total_iters = 200;
      c.seed = 5;
      c.combination_mode = cm;
      c.reliability_mode = rm;
      c.out_dir = (work / "modes_run").string();
      const std::string name = std::string(to_string(cm)) + "/" + std::string(to_string(rm));
      bool finite = true;
      std::string failure;
      std::optional<LossReport> first;
      try {
        Trainer t(c, data);
        while (t.iteration() < c.total_iters) {
          const auto r = t.step();
          if (!first) first = r;
          for (double v : {r.l_seg, r.l_lc, r.l_uc1, r.l_uc2, r.total}) finite = finite && std::isfinite(v);
        }
      } catch (const std::exception& e) {
        finite = false;
        failure = e.what();
      }
      out.add(name + " runs 200 iterations with finite losses", finite, failure);
      if (!first) continue;
      if (!reference) {
        reference = first;
        reference_name = name;
        continue;
      }
      const auto& a = *reference;
      const auto& b = *first;
      const bool same = a.l_ce == b.l_ce && a.l_dice == b.l_dice && a.l_focal == b.l_focal && a.l_iou == b.l_iou &&
                        a.l_fused == b.l_fused && a.l_seg == b.l_seg;
      out.add(name + " iteration-1 labelled losses bitwise equal " + reference_name, same);
    }
  }
  return out;
}

// ---- 7: reproducibility --------------------------------------------------------

Checks criterion_reproducibility(E2E& e2e) {
  Checks out;
  const auto& full = e2e.full_run();
  const auto again = e2e.run("repeat", e2e.config("repeat"));
  const auto a = log_lines(full.log_path), b = log_lines(again.log_path);
  out.add("two runs give identical logs", a == b && a.size() == 2000, std::to_string(a.size()) + " lines");

  const fs::path ckpt = checkpoint_path(e2e.config("full").out_dir, 1000);
  fs::remove_all(e2e.work / "resumed");
  const auto resumed = e2e.run("resumed", e2e.config("resumed"), ckpt);
  const auto c = log_lines(resumed.log_path);
  const std::vector<std::string> tail_a(a.begin() + std::min<std::size_t>(1000, a.size()), a.end());
  out.add("resume at 1000 matches the uninterrupted log", c == tail_a && c.size() == 1000,
          std::to_string(c.size()) + " lines after resume");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string only;
  std::string work = "acceptance_work";
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  if (only.empty()) {
    selected = {1, 2, 3, 4, 5, 6, 7};
  } else {
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
  }

  configure_threads();
  torch::manual_seed(0);
  fs::create_directories(work);
  E2E e2e{work, nullptr, {}, {}};

  const std::map<int, std::pair<std::string, std::function<Checks()>>> criteria{
      {1, {"equation oracles", [] { return criterion_equations(); }}},
      {2, {"gradients", [] { return criterion_gradients(); }}},
      {3, {"invariants", [] { return criterion_invariants(); }}},
      {4, {"memory property", [] { return criterion_memory(); }}},
      {5, {"synthetic end-to-end", [&] { return criterion_end_to_end(e2e); }}},
      {6, {"ablation plumbing", [&] { return criterion_modes(work); }}},
      {7, {"reproducibility", [&] { return criterion_reproducibility(e2e); }}},
  };

  bool all = true;
  std::vector<std::string> summary;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << id << '\n';
      return 2;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Checks checks;
    try {
      checks = it->second.second();
    } catch (const std::exception& e) {
      checks.add("ran without error", false, e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& c : checks.items()) {
      std::printf("  [%s] %s%s%s\n", c.ok ? "ok" : "FAIL", c.name.c_str(), c.detail.empty() ? "" : ": ",
                  c.detail.c_str());
    }
    const bool pass = checks.all();
    all = all && pass;
    char line[160];
    std::snprintf(line, sizeof line, "CRITERION %d %s: %s (%.1f s)", id, pass ? "PASS" : "FAIL",
                  it->second.first.c_str(), secs);
    std::printf("%s\n", line);
    std::fflush(stdout);
    summary.push_back(line);
  }
  std::printf("\nsummary\n");
  for (const auto& s : summary) std::printf("%s\n", s.c_str());
  return all ? 0 : 1;
}
