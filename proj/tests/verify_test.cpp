#include "metatrans/verify.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

namespace metatrans {
namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.d_v = 8;
  cfg.n_classes = 3;
  cfg.head_hidden = 8;
  cfg.t_max = 16;
  return cfg;
}

// --- permutation invariance suite --------------------------------------------

TEST(PermutationSuite, FreshModelPasses) {
  std::mt19937_64 rng(1);
  auto m = MetaTransModel::init(small_config(), rng);
  auto reports = check_permutation_invariance(m, 5, 5, 1e-9);
  for (const auto& r : reports) {
    EXPECT_TRUE(r.pass) << r.theorem_id << " violation " << r.max_violation;
    if (r.theorem_id == "m1_positional_non_invariance") {
      EXPECT_GT(r.max_violation, 1e-3);
    }
  }
}

TEST(PermutationSuite, IdentityPermutationIsExact) {
  std::mt19937_64 rng(2);
  auto m = MetaTransModel::init(small_config(), rng);
  Tensor x = Tensor::uniform(6, 8, -1, 1, rng);
  std::vector<int> identity = {0, 1, 2, 3, 4, 5};
  Tensor a = forward_static(x, m);
  Tensor b = forward_static(permute_rows(x, identity), m);
  EXPECT_EQ(a.data(), b.data());
}

// Negative control: wiring positional embeddings into the static stream
// destroys invariance and the checker must flag it.
TEST(PermutationSuite, StaticStreamWithPositionsFails) {
  std::mt19937_64 rng(3);
  auto m = MetaTransModel::init(small_config(), rng);
  auto broken_static = [&](const Tensor& x) {
    Tensor h = add(x, m.pos_emb.prefix(x.rows()));
    for (const auto& b : m.encoder_stack) h = encoder_block(h, b, m.cfg.ln_eps);
    return mean_pool_time(h);
  };
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    Tensor x = Tensor::uniform(8, 8, -1, 1, rng);
    Tensor base = broken_static(x);
    for (int p = 0; p < 10; ++p) {
      auto perm = random_permutation(8, rng);
      Tensor moved = broken_static(permute_rows(x, perm));
      for (std::size_t i = 0; i < base.numel(); ++i) {
        worst = std::max(worst,
                         std::fabs(base.data()[i] - moved.data()[i]));
      }
    }
  }
  EXPECT_GT(worst, 1e-3);
}

// --- 1-D Wasserstein -----------------------------------------------------------

TEST(Wasserstein1D, IdenticalSamplesGiveZero) {
  EXPECT_DOUBLE_EQ(wasserstein1_1d({1.0, 2.0, 3.0}, {3.0, 1.0, 2.0}), 0.0);
}

TEST(Wasserstein1D, PointMasses) {
  EXPECT_DOUBLE_EQ(wasserstein1_1d({0.0}, {1.0}), 1.0);
}

TEST(Wasserstein1D, SortedCouplingHandComputation) {
  EXPECT_DOUBLE_EQ(wasserstein1_1d({0.0, 2.0}, {1.0, 3.0}), 1.0);
}

TEST(Wasserstein1D, EmptyInputThrows) {
  EXPECT_THROW(wasserstein1_1d({}, {1.0}), ContractError);
}

TEST(Wasserstein1D, UnequalSizesHandComputation) {
  // a = {0, 2} (mass 1/2 each), b = {1}: transport cost 1.
  EXPECT_DOUBLE_EQ(wasserstein1_1d({0.0, 2.0}, {1.0}), 1.0);
}

TEST(Wasserstein1D, DuplicatedSampleSetIsDistance_Zero) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3, 3);
  std::vector<double> a(17);
  for (auto& v : a) v = u(rng);
  std::vector<double> doubled;
  doubled.insert(doubled.end(), a.begin(), a.end());
  doubled.insert(doubled.end(), a.begin(), a.end());
  EXPECT_NEAR(wasserstein1_1d(a, doubled), 0.0, 1e-12);
}

TEST(Wasserstein1D, MetricAxiomsOnRandomTriples) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> a(9), b(9), c(9);
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    for (auto& v : c) v = u(rng);
    const double ab = wasserstein1_1d(a, b);
    const double ba = wasserstein1_1d(b, a);
    const double ac = wasserstein1_1d(a, c);
    const double cb = wasserstein1_1d(c, b);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-12);
    EXPECT_LE(ab, ac + cb + 1e-12);
  }
}

// --- sliced W1 -------------------------------------------------------------------

TEST(SlicedW1, IdenticalCloudsGiveZero) {
  std::mt19937_64 rng(8);
  Tensor a = Tensor::uniform(20, 4, -1, 1, rng);
  EXPECT_DOUBLE_EQ(sliced_w1(a, a, 16, 3), 0.0);
}

TEST(SlicedW1, SymmetricUnderSameSeed) {
  std::mt19937_64 rng(9);
  Tensor a = Tensor::uniform(15, 4, -1, 1, rng);
  Tensor b = Tensor::uniform(15, 4, -1, 1, rng);
  EXPECT_DOUBLE_EQ(sliced_w1(a, b, 16, 4), sliced_w1(b, a, 16, 4));
}

TEST(SlicedW1, ConstantShiftMatchesMonteCarloExpectation) {
  std::mt19937_64 rng(10);
  const int n = 40, d = 6;
  Tensor a = Tensor::uniform(n, d, -1, 1, rng);
  std::vector<double> c = {0.8, -0.3, 0.5, 0.0, -0.7, 0.2};
  std::vector<double> shifted = a.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) shifted[std::size_t(i) * d + j] += c[j];
  Tensor b({n, d}, shifted);
  const double estimate = sliced_w1(a, b, 4000, 11);

  // Monte-Carlo oracle for E|<c, theta>| over uniform unit directions,
  // using an independent seed.
  std::mt19937_64 mc(12345);
  std::normal_distribution<double> gauss(0, 1);
  double expect = 0.0;
  const int draws = 200000;
  for (int i = 0; i < draws; ++i) {
    std::vector<double> theta(d);
    double norm = 0.0;
    for (auto& v : theta) {
      v = gauss(mc);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += c[j] * theta[j] / norm;
    expect += std::fabs(dot);
  }
  expect /= draws;
  EXPECT_NEAR(estimate, expect, 0.05 * expect);
}

// --- theorem 3 --------------------------------------------------------------------

GeneratorSpec bench_spec(std::uint64_t seed) {
  GeneratorSpec spec;
  spec.d = 8;
  spec.T = 8;
  spec.K = 3;
  spec.n_per_domain.train = 48;
  spec.n_per_domain.eval = 16;
  spec.static_scale = 1.0;
  spec.dynamic_sigma = 0.4;
  spec.seed = seed;
  return spec;
}

TEST(Theorem3, ExactOracleCollapsesToEquality) {
  auto bench = generate_domain_pair(bench_spec(1));
  auto in = theorem3_inputs_oracle(bench, StaticOracle::kExact);
  auto r = verify_theorem3(in, 12, 20, 0);
  EXPECT_TRUE(r.pass);
  EXPECT_DOUBLE_EQ(r.bound_lhs, r.bound_rhs);  // e == 0: same residuals
}

TEST(Theorem3, MeanOracleHoldsAcrossSeeds) {
  for (std::uint64_t seed : {2, 3, 4}) {
    auto bench = generate_domain_pair(bench_spec(seed));
    auto in = theorem3_inputs_oracle(bench, StaticOracle::kTemporalMean);
    auto r = verify_theorem3(in, 12, 20, seed);
    EXPECT_TRUE(r.pass) << "seed " << seed << " gap "
                        << r.details["gap"].dump();
  }
}

TEST(Theorem3, UntrainedModelSatisfiesBound) {
  auto bench = generate_domain_pair(bench_spec(5));
  std::mt19937_64 rng(6);
  auto m = MetaTransModel::init(small_config(), rng);
  auto in = theorem3_inputs_model(bench, m);
  auto r = verify_theorem3(in, 12, 20, 6);
  EXPECT_TRUE(r.pass);
}

TEST(Theorem3, MissingGroundTruthThrows) {
  auto bench = generate_domain_pair(bench_spec(7));
  auto in = theorem3_inputs_oracle(bench, StaticOracle::kExact);
  in.s_source.pop_back();
  EXPECT_THROW(verify_theorem3(in, 8, 10, 0), ContractError);
}

// --- theorem 4 --------------------------------------------------------------------

TEST(Theorem4, MeanOracleSlopeNearMinusHalf) {
  Theorem4Options opt;
  opt.t_grid = {8, 16, 32, 64, 128};
  opt.d = 8;
  opt.n_samples = 200;
  opt.sigma = 1.0;
  opt.seed = 1;
  auto r = verify_theorem4(temporal_mean_estimator(), opt);
  EXPECT_TRUE(r.pass) << r.details.dump();
  const double slope = r.details["slope"].get<double>();
  EXPECT_NEAR(slope, -0.5, 0.1);
  EXPECT_EQ(r.max_violation, 0.0);  // no exceedances above delta
}

TEST(Theorem4, NoiselessCaseIsExactlyCalibrated) {
  Theorem4Options opt;
  opt.t_grid = {8, 16, 32, 64, 128};
  opt.d = 4;
  opt.n_samples = 50;
  opt.sigma = 0.0;
  auto r = verify_theorem4(temporal_mean_estimator(), opt);
  EXPECT_TRUE(r.pass);
  for (const auto& row : r.details["per_T"]) {
    // noise-free sequences follow the calibration path bit for bit
    EXPECT_EQ(row["median_error"].get<double>(),
              row["calibration_error"].get<double>());
    EXPECT_LT(row["median_error"].get<double>(), 1e-12);
  }
}

TEST(Theorem4, LearnedModeSubtractsCalibrationBias) {
  // A biased estimator: temporal mean plus a fixed offset. The raw error
  // plateaus at the bias; learned mode subtracts it and recovers the decay.
  StaticEstimator biased = [](const Tensor& x) {
    auto mean = temporal_mean_rows(x);
    for (auto& v : mean) v += 0.35;
    return mean;
  };
  Theorem4Options opt;
  opt.t_grid = {8, 16, 32, 64, 128};
  opt.d = 8;
  opt.n_samples = 200;
  opt.seed = 2;
  opt.learned_mode = true;
  auto r = verify_theorem4(biased, opt);
  EXPECT_TRUE(r.pass) << r.details.dump();
  EXPECT_LT(r.details["slope"].get<double>(), -0.25);
}

TEST(Theorem4, GridPreconditionsEnforced) {
  Theorem4Options opt;
  opt.t_grid = {8, 16, 32};  // too few points
  EXPECT_THROW(verify_theorem4(temporal_mean_estimator(), opt), ContractError);
  opt.t_grid = {8, 12, 16, 24};  // less than a decade
  EXPECT_THROW(verify_theorem4(temporal_mean_estimator(), opt), ContractError);
}

// --- RGRA -------------------------------------------------------------------------

TEST(Rgra, ReproducesPublishedCells) {
  // H->U with two losses, one weight searched.
  EXPECT_NEAR(compute_rgra({99.0, 88.8, 96.9, 2, RgraMode::kFixedOthers}),
              12.59, 0.05);
  // Five losses, one-at-a-time search.
  EXPECT_NEAR(compute_rgra({58.6, 39.1, 63.7, 5, RgraMode::kFixedOthers}),
              1.98, 0.05);
}

TEST(Rgra, ZeroGainGivesZero) {
  for (int n : {2, 3, 7}) {
    EXPECT_DOUBLE_EQ(compute_rgra({80.0, 80.0, 90.0, n, RgraMode::kFixedOthers}),
                     0.0);
    EXPECT_DOUBLE_EQ(compute_rgra({80.0, 80.0, 90.0, n, RgraMode::kGreedy}),
                     0.0);
  }
}

TEST(Rgra, GreedyModeDividesExponentially) {
  const double fixed = compute_rgra({90.0, 80.0, 95.0, 3, RgraMode::kFixedOthers});
  const double greedy = compute_rgra({90.0, 80.0, 95.0, 3, RgraMode::kGreedy});
  EXPECT_NEAR(fixed / greedy, 100.0 / 20.0, 1e-12);  // 10^2 vs 10*2
}

TEST(Rgra, ContractErrors) {
  EXPECT_THROW(compute_rgra({90.0, 80.0, 80.0, 2, RgraMode::kFixedOthers}),
               ContractError);
  EXPECT_THROW(compute_rgra({90.0, 80.0, 95.0, 1, RgraMode::kFixedOthers}),
               ContractError);
}

TEST(Rgra, InvariantUnderAffineRescaling) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> acc(10.0, 95.0);
  std::uniform_real_distribution<double> scale_dist(0.1, 3.0);
  std::uniform_real_distribution<double> offset(-20.0, 20.0);
  for (int trial = 0; trial < 50; ++trial) {
    RgraInputs in;
    in.a_opt = acc(rng);
    in.a_source_only = acc(rng);
    in.a_target_sup = acc(rng);
    if (in.a_target_sup == in.a_source_only) continue;
    in.n_loss = 2 + trial % 4;
    in.mode = trial % 2 ? RgraMode::kFixedOthers : RgraMode::kGreedy;
    RgraInputs mapped = in;
    const double s = scale_dist(rng), o = offset(rng);
    mapped.a_opt = s * in.a_opt + o;
    mapped.a_source_only = s * in.a_source_only + o;
    mapped.a_target_sup = s * in.a_target_sup + o;
    EXPECT_NEAR(compute_rgra(in), compute_rgra(mapped), 1e-9);
  }
}

TEST(RgraTable, FixedOthersWithinTolerance) {
  auto r = verify_rgra_table(RgraMode::kFixedOthers);
  EXPECT_TRUE(r.pass) << "max cell error " << r.max_violation;
  EXPECT_EQ(r.trials, 20);  // 10 cells per method
}

TEST(RgraTable, GreedyMatchesTwoLossColumn) {
  auto fixed = rgra_reference_table(RgraMode::kFixedOthers);
  auto greedy = rgra_reference_table(RgraMode::kGreedy);
  // With two losses the divisors agree, so the whole column is unchanged.
  for (const auto& cell : greedy) {
    ASSERT_EQ(cell.method, "MetaTrans");
    for (const auto& f : fixed) {
      if (f.method == "MetaTrans" && f.task == cell.task) {
        EXPECT_DOUBLE_EQ(cell.computed, f.computed);
      }
    }
  }
  EXPECT_TRUE(verify_rgra_table(RgraMode::kGreedy).pass);
}

// --- report serialization -----------------------------------------------------

TEST(Reports, CsvSummaryShape) {
  TheoremReport a;
  a.theorem_id = "t1";
  a.trials = 5;
  a.max_violation = 1e-12;
  a.pass = true;
  TheoremReport b;
  b.theorem_id = "t2";
  b.pass = false;
  b.max_violation = 0.5;
  const std::string csv = reports_to_csv({a, b});
  EXPECT_NE(csv.find("theorem,trials,max_violation,pass"), std::string::npos);
  EXPECT_NE(csv.find("t1,5,1e-12,true"), std::string::npos);
  EXPECT_NE(csv.find("t2,0,0.5,false"), std::string::npos);
}

}  // namespace
}  // namespace metatrans
