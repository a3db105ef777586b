#include "metatrans/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "metatrans/synthbench.hpp"

namespace metatrans {
namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.d_v = 8;
  cfg.n_classes = 3;
  cfg.head_hidden = 8;
  cfg.t_max = 8;
  return cfg;
}

VideoBatch tiny_batch(int n_source, int n_target, std::mt19937_64& rng,
                      int t = 4, int d = 8, int k = 3) {
  VideoBatch b;
  for (int i = 0; i < n_source; ++i)
    b.push(Tensor::uniform(t, d, -1, 1, rng), i % k, 0);
  for (int i = 0; i < n_target; ++i)
    b.push(Tensor::uniform(t, d, -1, 1, rng), kUnlabeled, 1);
  return b;
}

// --- loss_cls ---------------------------------------------------------------

TEST(LossCls, UniformLogitsGiveLogK) {
  std::mt19937_64 rng(1);
  auto m = MetaTransModel::init(tiny_model(), rng);
  m.task_head.w2 = Tensor::zeros(8, 3, true);
  m.task_head.b2 = Tensor::zeros(1, 3, true);
  VideoBatch b = tiny_batch(4, 0, rng);
  EXPECT_NEAR(loss_cls(b, m).item(), std::log(3.0), 1e-12);
}

TEST(LossCls, NoSupervisedSamplesThrows) {
  std::mt19937_64 rng(2);
  auto m = MetaTransModel::init(tiny_model(), rng);
  VideoBatch b = tiny_batch(0, 4, rng);
  b.pseudo_active = false;
  EXPECT_THROW(loss_cls(b, m), ContractError);
}

TEST(LossCls, MixedSourceAndPseudoMatchesPerSampleOracle) {
  std::mt19937_64 rng(3);
  auto m = MetaTransModel::init(tiny_model(), rng);
  VideoBatch b = tiny_batch(2, 2, rng);
  b.pseudo_label[2] = 1;
  b.pseudo_label[3] = 2;
  b.pseudo_active = true;

  double expect = 0.0;
  const int labels[4] = {0, 1, 1, 2};
  for (int i = 0; i < 4; ++i) {
    auto out = model_forward(b.x[i], m, 0.0);
    expect += cross_entropy_logits(out.task_logits, {labels[i]}).item();
  }
  expect /= 4.0;
  EXPECT_NEAR(loss_cls(b, m).item(), expect, 1e-12);
}

TEST(LossCls, PseudoLabelsIgnoredWhileInactive) {
  std::mt19937_64 rng(4);
  auto m = MetaTransModel::init(tiny_model(), rng);
  VideoBatch b = tiny_batch(2, 2, rng);
  b.pseudo_label[2] = 0;
  b.pseudo_label[3] = 0;
  b.pseudo_active = false;
  VideoBatch source_only = b.gather({0, 1});
  EXPECT_DOUBLE_EQ(loss_cls(b, m).item(), loss_cls(source_only, m).item());
}

// --- loss_adv ---------------------------------------------------------------

TEST(LossAdv, UniformDomainLogitsGiveTwoLogTwo) {
  std::mt19937_64 rng(5);
  auto m = MetaTransModel::init(tiny_model(), rng);
  m.domain_head_frame.w2 = Tensor::zeros(8, 2, true);
  m.domain_head_frame.b2 = Tensor::zeros(1, 2, true);
  m.domain_head_video.w2 = Tensor::zeros(8, 2, true);
  m.domain_head_video.b2 = Tensor::zeros(1, 2, true);
  VideoBatch b = tiny_batch(2, 2, rng);
  EXPECT_NEAR(loss_adv(b, m, 0.1).item(), 2.0 * std::log(2.0), 1e-12);
}

TEST(LossAdv, MatchesTermByTermOracle) {
  std::mt19937_64 rng(6);
  auto m = MetaTransModel::init(tiny_model(), rng);
  VideoBatch b = tiny_batch(2, 2, rng);
  double expect = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    auto out = model_forward(b.x[i], m, 0.1);
    const int d = b.domain_label[i];
    expect += cross_entropy_logits(out.frame_domain_logits,
                                   std::vector<int>(4, d))
                  .item();
    expect += cross_entropy_logits(out.video_domain_logits, {d}).item();
  }
  expect /= b.size();
  EXPECT_NEAR(loss_adv(b, m, 0.1).item(), expect, 1e-12);
}

// --- total_loss -------------------------------------------------------------

TEST(TotalLoss, LambdaZeroEncoderGradientEqualsClsOnly) {
  std::mt19937_64 rng(7);
  auto m = MetaTransModel::init(tiny_model(), rng);
  VideoBatch b = tiny_batch(2, 2, rng);
  TrainConfig cfg;
  cfg.model = tiny_model();
  cfg.lambda1 = 0.0;

  for (auto& p : m.parameters()) p.zero_grad();
  backward(total_loss(b, m, cfg).total);
  std::vector<std::vector<double>> with_adv;
  for (const auto& [name, p] : m.named_parameters()) {
    if (name.rfind("encoder", 0) == 0 || name.rfind("fan", 0) == 0) {
      with_adv.push_back(p.grad());
    }
  }

  for (auto& p : m.parameters()) p.zero_grad();
  backward(loss_cls(b, m, 0.0));
  std::size_t idx = 0;
  for (const auto& [name, p] : m.named_parameters()) {
    if (name.rfind("encoder", 0) == 0 || name.rfind("fan", 0) == 0) {
      const auto& cls_grad = p.grad();
      for (std::size_t k = 0; k < cls_grad.size(); ++k) {
        EXPECT_NEAR(with_adv[idx][k], cls_grad[k], 1e-12) << name;
      }
      ++idx;
    }
  }
}

TEST(TotalLoss, FinitePositiveOnRandomInit) {
  std::mt19937_64 rng(8);
  auto m = MetaTransModel::init(tiny_model(), rng);
  VideoBatch b = tiny_batch(2, 2, rng);
  TrainConfig cfg;
  cfg.model = tiny_model();
  cfg.lambda1 = 0.05;
  auto loss = total_loss(b, m, cfg);
  EXPECT_TRUE(std::isfinite(loss.total.item()));
  EXPECT_GT(loss.total.item(), 0.0);
}

// The analytic gradient of the full objective, checked against finite
// differences of the function autodiff actually differentiates: parameters
// upstream of the reversal see cls - lambda*adv, everything else sees
// cls + adv.
TEST(TotalLoss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto m = MetaTransModel::init(tiny_model(), rng);
  VideoBatch b = tiny_batch(1, 1, rng);
  TrainConfig cfg;
  cfg.model = tiny_model();
  const double lambda = 0.07;
  cfg.lambda1 = lambda;

  auto objective = [&](double adv_weight) {
    return [&, adv_weight]() {
      Tensor cls = loss_cls(b, m, lambda);
      Tensor adv = loss_adv(b, m, lambda);
      return add(scale(adv, adv_weight), cls);
    };
  };

  for (auto& p : m.parameters()) p.zero_grad();
  backward(total_loss(b, m, cfg).total);

  std::vector<std::pair<std::string, Tensor>> upstream, downstream;
  for (const auto& [name, p] : m.named_parameters()) {
    if (name.rfind("domain_head", 0) == 0 || name.rfind("task_head", 0) == 0) {
      downstream.emplace_back(name, p);
    } else {
      upstream.emplace_back(name, p);
    }
  }
  // Compare stored analytic grads against FD of the matching objective.
  auto check = [&](const std::vector<std::pair<std::string, Tensor>>& params,
                   double adv_weight) {
    auto f = objective(adv_weight);
    for (const auto& [name, p] : params) {
      const auto analytic = p.grad();
      Tensor param = p;
      auto& data = param.data_mut();
      const double h = 1e-5;
      for (std::size_t k = 0; k < data.size(); ++k) {
        const double saved = data[k];
        double fp, fm;
        {
          NoGradGuard ng;
          data[k] = saved + h;
          fp = f().item();
          data[k] = saved - h;
          fm = f().item();
          data[k] = saved;
        }
        const double fd = (fp - fm) / (2 * h);
        const double denom = std::max({std::fabs(analytic[k]), std::fabs(fd), 1e-2});
        ASSERT_LT(std::fabs(analytic[k] - fd) / denom, 1e-4) << name;
      }
    }
  };
  check(upstream, -lambda);
  check(downstream, 1.0);
}

// --- pseudo labels ------------------------------------------------------------

TEST(PseudoLabels, ArgmaxAndTieBreak) {
  std::mt19937_64 rng(10);
  auto m = MetaTransModel::init(tiny_model(), rng);
  // Force constant logits so ties are exact: zero head weights, fixed bias.
  m.task_head.w2 = Tensor::zeros(8, 3, true);
  m.task_head.b2 = Tensor({1, 3}, {0.5, 0.5, 0.1}, true);
  VideoBatch target = tiny_batch(0, 3, rng);
  auto labels = generate_pseudo_labels(target, m);
  EXPECT_EQ(labels, (std::vector<int>{0, 0, 0}));  // tie 0 vs 1 -> 0

  m.task_head.b2 = Tensor({1, 3}, {0.1, 0.9, 0.2}, true);
  labels = generate_pseudo_labels(target, m);
  EXPECT_EQ(labels, (std::vector<int>{1, 1, 1}));
}

TEST(PseudoLabels, MatchesPerSampleArgmaxOracle) {
  std::mt19937_64 rng(11);
  auto m = MetaTransModel::init(tiny_model(), rng);
  VideoBatch target = tiny_batch(0, 8, rng);
  auto labels = generate_pseudo_labels(target, m);
  for (int i = 0; i < 8; ++i) {
    auto out = model_forward(target.x[i], m, 0.0);
    int best = 0;
    for (int j = 1; j < 3; ++j)
      if (out.task_logits.at(0, j) > out.task_logits.at(0, best)) best = j;
    EXPECT_EQ(labels[i], best);
  }
}

// --- adam ----------------------------------------------------------------------

TEST(Adam, ZeroGradientIsFixedPoint) {
  Tensor p = Tensor::scalar(1.25, true);
  p.zero_grad();
  AdamState state;
  adam_step({p}, state, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p.data()[0], 1.25);
}

TEST(Adam, FirstStepDeltaIsLearningRate) {
  Tensor p = Tensor::scalar(2.0, true);
  p.zero_grad();
  {
    Tensor root = p;  // grad 1 via backward on the leaf
    backward(root);
  }
  AdamState state;
  const double lr = 0.05;
  adam_step({p}, state, lr, 0.0);
  EXPECT_NEAR(p.data()[0], 2.0 - lr, 1e-8 * lr + 1e-12);
}

TEST(Adam, MatchesScalarReferenceOnQuadratic) {
  // minimize (x - 3)^2 for ten steps; compare against a plain-double
  // textbook implementation, including decoupled weight decay.
  const double lr = 0.1, wd = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Tensor p = Tensor::scalar(0.0, true);
  AdamState state;

  double x_ref = 0.0, m_ref = 0.0, v_ref = 0.0;
  for (int t = 1; t <= 10; ++t) {
    p.zero_grad();
    backward(mul(add_scalar(p, -3.0), add_scalar(p, -3.0)));
    adam_step({p}, state, lr, wd, b1, b2, eps);

    const double g = 2.0 * (x_ref - 3.0);
    x_ref -= lr * wd * x_ref;
    m_ref = b1 * m_ref + (1 - b1) * g;
    v_ref = b2 * v_ref + (1 - b2) * g * g;
    const double mhat = m_ref / (1 - std::pow(b1, t));
    const double vhat = v_ref / (1 - std::pow(b2, t));
    x_ref -= lr * mhat / (std::sqrt(vhat) + eps);

    ASSERT_NEAR(p.data()[0], x_ref, 1e-12);
  }
}

TEST(Adam, NonFiniteGradientAbortsStep) {
  Tensor p = Tensor::scalar(1.0, true);
  p.zero_grad();
  Tensor q = Tensor::scalar(2.0, true);
  q.zero_grad();
  backward(mul(p, q));
  // Corrupt one gradient in place.
  const_cast<std::vector<double>&>(p.grad())[0] =
      std::numeric_limits<double>::quiet_NaN();
  AdamState state;
  EXPECT_THROW(adam_step({p, q}, state, 0.1, 0.0), NumericError);
  EXPECT_DOUBLE_EQ(q.data()[0], 2.0);  // untouched: step aborted atomically
}

// --- adversarial direction on a linear toy ---------------------------------------

// One step on the adversarial loss must improve the discriminator while
// moving the (reversed) feature parameter toward higher discriminator loss.
TEST(AdversarialSign, LinearToyClosedForm) {
  const double lambda = 1.0, lr = 0.05;
  auto build_loss = [&](const Tensor& w, const Tensor& v) {
    std::vector<Tensor> terms;
    const double xs[2] = {1.0, -1.0};
    const int doms[2] = {0, 1};
    for (int i = 0; i < 2; ++i) {
      Tensor feat = scale(w, xs[i]);
      Tensor rev = gradient_reversal(feat, lambda);
      Tensor logit1 = mul(v, rev);
      Tensor logits = concat_cols({Tensor::scalar(0.0), logit1});
      terms.push_back(cross_entropy_logits(logits, {doms[i]}));
    }
    return mean_of(terms);
  };

  Tensor w = Tensor::scalar(0.8, true);
  Tensor v = Tensor::scalar(0.5, true);
  w.zero_grad();
  v.zero_grad();
  backward(build_loss(w, v));

  // Closed form: a_i = v*w*x_i; dL/da_i = sigmoid(a_i) - 1{dom=1}; averaged.
  auto sigmoid = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  const double a1 = 0.5 * 0.8, a2 = -0.5 * 0.8;
  const double d1 = sigmoid(a1) - 0.0, d2 = sigmoid(a2) - 1.0;
  const double grad_v_expected = 0.5 * (d1 * 0.8 + d2 * (-0.8));
  const double grad_w_expected = -lambda * 0.5 * (d1 * 0.5 + d2 * (-0.5));
  EXPECT_NEAR(v.grad()[0], grad_v_expected, 1e-12);
  EXPECT_NEAR(w.grad()[0], grad_w_expected, 1e-12);

  const double base = build_loss(w, v).item();
  // Discriminator step (descends): loss drops with features frozen.
  Tensor v2 = Tensor::scalar(0.5 - lr * v.grad()[0], true);
  EXPECT_LT(build_loss(w, v2).item(), base);
  // Feature step through the reversal (ascends): loss rises with the
  // discriminator frozen.
  Tensor w2 = Tensor::scalar(0.8 - lr * w.grad()[0], true);
  EXPECT_GT(build_loss(w2, v).item(), base);
}

// --- train loop -------------------------------------------------------------------

GeneratorSpec fast_spec(std::uint64_t seed, bool shifted) {
  GeneratorSpec spec;
  spec.d = 8;
  spec.T = 8;
  spec.K = 3;
  spec.n_per_domain.train = 24;
  spec.n_per_domain.eval = 24;
  spec.static_scale = 1.0;
  spec.dynamic_sigma = 0.3;
  spec.seed = seed;
  if (!shifted) spec.static_target_mean = std::vector<double>(8, 0.0);
  return spec;
}

TrainConfig fast_train_config() {
  TrainConfig cfg;
  cfg.model = tiny_model();
  cfg.model.n_classes = 3;
  cfg.batch_size = 8;
  cfg.epochs = 4;
  cfg.pseudo_start_epoch = 2;
  cfg.learning_rate = 1e-3;
  return cfg;
}

TEST(Train, DeterministicReports) {
  auto bench = generate_domain_pair(fast_spec(5, true));
  TrainConfig cfg = fast_train_config();
  auto r1 = train(bench.source_data(), bench.target_data(), cfg);
  auto r2 = train(bench.source_data(), bench.target_data(), cfg);
  EXPECT_EQ(report_to_json(r1.report).dump(), report_to_json(r2.report).dump());
  auto p1 = r1.model.named_parameters();
  auto p2 = r2.model.named_parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_EQ(p1[i].second.data(), p2[i].second.data());
  }
}

TEST(Train, IdenticalDomainsGiveComparableAccuracies) {
  auto bench = generate_domain_pair(fast_spec(6, false));
  TrainConfig cfg = fast_train_config();
  cfg.lambda1 = 0.0;
  cfg.epochs = 6;
  auto r = train(bench.source_data(), bench.target_data(), cfg);
  EXPECT_LE(std::fabs(r.report.target_acc - r.report.source_acc), 5.0 + 1e-9);
}

TEST(Train, PseudoLabelsInactiveBeforeStartEpoch) {
  auto bench = generate_domain_pair(fast_spec(7, true));
  TrainConfig early = fast_train_config();
  early.epochs = 3;
  early.pseudo_start_epoch = 2;
  TrainConfig never = early;
  never.pseudo_start_epoch = 3;
  auto r1 = train(bench.source_data(), bench.target_data(), early);
  auto r2 = train(bench.source_data(), bench.target_data(), never);
  for (int e = 0; e < 2; ++e) {
    EXPECT_EQ(r1.report.epochs[e].loss_cls, r2.report.epochs[e].loss_cls);
    EXPECT_EQ(r1.report.epochs[e].loss_adv, r2.report.epochs[e].loss_adv);
  }
  // The pseudo epoch differs: labels join the supervision loss.
  EXPECT_NE(r1.report.epochs[2].loss_cls, r2.report.epochs[2].loss_cls);
}

TEST(Train, SourceOnlyExcludesTargetAndAdversary) {
  auto bench = generate_domain_pair(fast_spec(8, true));
  TrainConfig cfg = fast_train_config();
  cfg.variant = Variant::kSourceOnly;
  auto r = train(bench.source_data(), bench.target_data(), cfg);
  EXPECT_EQ(r.report.lambda1, 0.0);
  for (const auto& e : r.report.epochs) EXPECT_EQ(e.loss_adv, 0.0);
}

TEST(Train, WoAdvReportsZeroAdvColumn) {
  auto bench = generate_domain_pair(fast_spec(9, true));
  TrainConfig cfg = fast_train_config();
  cfg.variant = Variant::kWoAdv;
  auto r = train(bench.source_data(), bench.target_data(), cfg);
  for (const auto& e : r.report.epochs) EXPECT_EQ(e.loss_adv, 0.0);
}

// --- grid search -------------------------------------------------------------------

TEST(GridSearch, OneRowPerGridValue) {
  auto bench = generate_domain_pair(fast_spec(10, true));
  TrainConfig cfg = fast_train_config();
  cfg.epochs = 2;
  std::vector<double> grid = {0.0, 0.02, 0.04};
  auto sweep = grid_search_lambda(bench.source_data(), bench.target_data(),
                                  cfg, grid);
  ASSERT_EQ(sweep.rows.size(), 3u);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    EXPECT_EQ(sweep.rows[i].lambda1, grid[i]);
  }
}

TEST(GridSearch, DegenerateGridSelectsZero) {
  auto bench = generate_domain_pair(fast_spec(11, true));
  TrainConfig cfg = fast_train_config();
  cfg.epochs = 2;
  auto sweep = grid_search_lambda(bench.source_data(), bench.target_data(),
                                  cfg, {0.0});
  ASSERT_EQ(sweep.rows.size(), 1u);
  EXPECT_EQ(sweep.best_lambda, 0.0);
}

TEST(GridSearch, AllEqualAccuraciesPickSmallestLambda) {
  auto bench = generate_domain_pair(fast_spec(12, true));
  TrainConfig cfg = fast_train_config();
  cfg.epochs = 1;
  cfg.pseudo_start_epoch = 1;
  cfg.learning_rate = 1e-13;  // updates negligible: accuracies tie
  auto sweep = grid_search_lambda(bench.source_data(), bench.target_data(),
                                  cfg, {0.05, 0.01, 0.03});
  for (const auto& row : sweep.rows) {
    EXPECT_EQ(row.val_target_acc, sweep.rows[0].val_target_acc);
  }
  EXPECT_EQ(sweep.best_lambda, 0.01);
}

}  // namespace
}  // namespace metatrans
