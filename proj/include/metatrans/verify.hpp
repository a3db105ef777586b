#pragma once

// Executable checks for the architectural and statistical claims:
//  - static-stream permutation invariance plus the supporting equivariance
//    chain, with a positional-embedding negative control;
//  - the post-subtraction W1 bound, tested with sliced Wasserstein-1
//    estimates and a bootstrap noise allowance;
//  - the O(sqrt(1/T)) static-estimation error rate with the calibration and
//    mean-stability conditions;
//  - the relative-gain-per-running-attempt metric and the reference result
//    tables it reproduces.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metatrans/model.hpp"
#include "metatrans/nn.hpp"
#include "metatrans/synthbench.hpp"
#include "metatrans/tensor.hpp"

namespace metatrans {

struct TheoremReport {
  std::string theorem_id;
  int trials = 0;
  double max_violation = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  double bound_lhs = 0.0;  // where a two-sided bound applies
  double bound_rhs = 0.0;
  nlohmann::ordered_json details;
};

inline nlohmann::ordered_json report_to_json(const TheoremReport& r) {
  nlohmann::ordered_json j;
  j["theorem"] = r.theorem_id;
  j["trials"] = r.trials;
  j["max_violation"] = r.max_violation;
  j["tolerance"] = r.tolerance;
  j["pass"] = r.pass;
  if (r.bound_lhs != 0.0 || r.bound_rhs != 0.0) {
    j["bound_lhs"] = r.bound_lhs;
    j["bound_rhs"] = r.bound_rhs;
  }
  if (!r.details.is_null()) j["details"] = r.details;
  return j;
}

inline std::string reports_to_csv(const std::vector<TheoremReport>& reports) {
  std::ostringstream os;
  os << "theorem,trials,max_violation,pass\n";
  for (const auto& r : reports) {
    os << r.theorem_id << "," << r.trials << "," << r.max_violation << ","
       << (r.pass ? "true" : "false") << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Permutation invariance (theorem 1) and the lemma chain.

namespace detail {

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace detail

// Runs the static-stream invariance check, the per-lemma equivariance chain
// on the model's own blocks, and the positional-embedding negative control.
// Reports: m2_invariance, sa_equivariance, mha_equivariance,
// rowmap_equivariance, block_equivariance, pooling_invariance,
// m1_positional_non_invariance.
inline std::vector<TheoremReport> check_permutation_invariance(
    const MetaTransModel& model, int n_inputs, int n_perms, double tol,
    std::uint64_t seed = 0) {
  if (tol <= 0.0) throw ContractError("check_permutation_invariance: tol > 0");
  const int t = std::min(model.cfg.t_max, 12);
  const int d = model.cfg.d;
  const double eps = model.cfg.ln_eps;
  std::mt19937_64 rng(seed ^ 0x7065726dULL);
  NoGradGuard ng;

  const auto& block = model.static_stack().front();
  const auto& head = block.heads.front();

  struct Check {
    std::string id;
    std::function<Tensor(const Tensor&)> op;
    bool invariant;  // invariant (compare directly) vs equivariant
  };
  std::vector<Check> checks = {
      {"sa_equivariance",
       [&](const Tensor& x) {
         return single_head_attention(x, head.wq, head.wk, head.wv);
       },
       false},
      {"mha_equivariance",
       [&](const Tensor& x) { return multi_head_attention(x, block); }, false},
      {"rowmap_equivariance",
       [&](const Tensor& x) {
         return feed_forward(
             layer_norm_feature(x, block.ln1_gain, block.ln1_bias, eps), block);
       },
       false},
      {"block_equivariance",
       [&](const Tensor& x) {
         Tensor h = x;
         for (const auto& b : model.static_stack()) h = encoder_block(h, b, eps);
         return h;
       },
       false},
      {"pooling_invariance",
       [&](const Tensor& x) { return forward_static(x, model); }, true},
      {"m2_invariance",
       [&](const Tensor& x) { return forward_static(x, model); }, true},
  };

  std::vector<TheoremReport> reports;
  for (const auto& check : checks) {
    TheoremReport r;
    r.theorem_id = check.id;
    r.tolerance = tol;
    std::mt19937_64 trial_rng(seed ^ std::hash<std::string>{}(check.id));
    for (int i = 0; i < n_inputs; ++i) {
      Tensor x = Tensor::uniform(t, d, -1.0, 1.0, trial_rng);
      Tensor base = check.op(x);
      // the identity permutation plus n_perms random ones
      for (int p = 0; p <= n_perms; ++p) {
        std::vector<int> perm;
        if (p == 0) {
          perm.resize(t);
          for (int k = 0; k < t; ++k) perm[k] = k;
        } else {
          perm = random_permutation(t, trial_rng);
        }
        Tensor moved = check.op(permute_rows(x, perm));
        Tensor expect = check.invariant ? base : permute_rows(base, perm);
        r.max_violation =
            std::max(r.max_violation, detail::max_abs_diff(moved, expect));
        ++r.trials;
      }
    }
    r.pass = r.max_violation <= tol;
    reports.push_back(std::move(r));
  }

  // Negative control: the temporal stream pooled at the end is not
  // invariant; random search must find a violation above 1e-3.
  {
    TheoremReport r;
    r.theorem_id = "m1_positional_non_invariance";
    r.tolerance = 1e-3;
    for (int i = 0; i < std::max(1, n_inputs / 4); ++i) {
      Tensor x = Tensor::uniform(t, d, -1.0, 1.0, rng);
      Tensor base = mean_pool_time(forward_temporal(x, model));
      for (int p = 0; p < std::max(20, n_perms); ++p) {
        auto perm = random_permutation(t, rng);
        Tensor moved =
            mean_pool_time(forward_temporal(permute_rows(x, perm), model));
        r.max_violation =
            std::max(r.max_violation, detail::max_abs_diff(moved, base));
        ++r.trials;
      }
    }
    r.pass = r.max_violation > r.tolerance;
    reports.push_back(std::move(r));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Wasserstein-1 estimators.

// Exact empirical W1 on the line. Equal sizes reduce to the mean absolute
// difference of the sorted samples; unequal sizes integrate the CDF gap.
inline double wasserstein1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) {
    throw ContractError("wasserstein1_1d: empty sample set");
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::fabs(a[i] - b[i]);
    return acc / a.size();
  }
  // CDF-gap integral over the merged support.
  std::vector<double> all;
  all.reserve(a.size() + b.size());
  all.insert(all.end(), a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  double area = 0.0;
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k + 1 < all.size(); ++k) {
    while (ia < a.size() && a[ia] <= all[k]) ++ia;
    while (ib < b.size() && b[ib] <= all[k]) ++ib;
    const double fa = static_cast<double>(ia) / a.size();
    const double fb = static_cast<double>(ib) / b.size();
    area += std::fabs(fa - fb) * (all[k + 1] - all[k]);
  }
  return area;
}

namespace detail {

using PointCloud = std::vector<std::vector<double>>;  // rows of dim d

inline std::vector<std::vector<double>> unit_directions(int n, int d,
                                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x736c696365ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> dirs(n, std::vector<double>(d));
  for (auto& dir : dirs) {
    double norm = 0.0;
    for (auto& v : dir) {
      v = gauss(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      dir.assign(d, 0.0);
      dir[0] = 1.0;
      norm = 1.0;
    }
    for (auto& v : dir) v /= norm;
  }
  return dirs;
}

inline double sliced_w1_rows(const PointCloud& a, const PointCloud& b,
                             const std::vector<std::vector<double>>& dirs) {
  if (a.empty() || b.empty()) throw ContractError("sliced_w1: empty cloud");
  double acc = 0.0;
  std::vector<double> pa(a.size()), pb(b.size());
  for (const auto& dir : dirs) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dir.size(); ++j) dot += a[i][j] * dir[j];
      pa[i] = dot;
    }
    for (std::size_t i = 0; i < b.size(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dir.size(); ++j) dot += b[i][j] * dir[j];
      pb[i] = dot;
    }
    acc += wasserstein1_1d(pa, pb);
  }
  return acc / dirs.size();
}

}  // namespace detail

// Mean over seeded random unit directions of the exact 1-D W1 of the
// projected clouds. Rows of a and b are points in R^d.
inline double sliced_w1(const Tensor& a, const Tensor& b, int n_projections,
                        std::uint64_t seed) {
  if (n_projections < 1) throw ContractError("sliced_w1: n_projections >= 1");
  if (a.cols() != b.cols()) {
    throw DimensionError("sliced_w1: point dimensions differ");
  }
  detail::PointCloud ca(a.rows()), cb(b.rows());
  for (int i = 0; i < a.rows(); ++i) {
    ca[i].assign(a.data().begin() + std::size_t(i) * a.cols(),
                 a.data().begin() + std::size_t(i + 1) * a.cols());
  }
  for (int i = 0; i < b.rows(); ++i) {
    cb[i].assign(b.data().begin() + std::size_t(i) * b.cols(),
                 b.data().begin() + std::size_t(i + 1) * b.cols());
  }
  return detail::sliced_w1_rows(ca, cb,
                                detail::unit_directions(n_projections,
                                                        a.cols(), seed));
}

// ---------------------------------------------------------------------------
// Theorem 3: W1(F_S, F_T) <= W1(Ftilde_S, Ftilde_T) + E_S||e|| + E_T||e||.

// Per-domain ingredients: for every sample, its temporal feature rows Z
// (T x d), the static estimate produced by the stream under test, and the
// generator's ground-truth static.
struct Theorem3Inputs {
  std::vector<Tensor> z_source, z_target;
  std::vector<std::vector<double>> m2_source, m2_target;
  std::vector<std::vector<double>> s_source, s_target;
};

enum class StaticOracle { kExact, kTemporalMean };

inline std::vector<double> temporal_mean_rows(const Tensor& x) {
  std::vector<double> mean(x.cols(), 0.0);
  for (int t = 0; t < x.rows(); ++t)
    for (int j = 0; j < x.cols(); ++j) mean[j] += x.at(t, j);
  for (auto& v : mean) v /= x.rows();
  return mean;
}

// Oracle modes use the raw frames as the temporal features.
inline Theorem3Inputs theorem3_inputs_oracle(const GeneratedBenchmark& bench,
                                             StaticOracle oracle) {
  Theorem3Inputs in;
  auto fill = [&](const GeneratedSplit& split, std::vector<Tensor>& z,
                  std::vector<std::vector<double>>& m2,
                  std::vector<std::vector<double>>& s) {
    for (std::size_t i = 0; i < split.batch.size(); ++i) {
      z.push_back(split.batch.x[i]);
      s.push_back(split.statics[i]);
      m2.push_back(oracle == StaticOracle::kExact
                       ? split.statics[i]
                       : temporal_mean_rows(split.batch.x[i]));
    }
  };
  fill(bench.source_train, in.z_source, in.m2_source, in.s_source);
  fill(bench.target_train, in.z_target, in.m2_target, in.s_target);
  return in;
}

// Trained mode: Z from the temporal stream, the estimate from the static
// stream.
inline Theorem3Inputs theorem3_inputs_model(const GeneratedBenchmark& bench,
                                            const MetaTransModel& model) {
  NoGradGuard ng;
  Theorem3Inputs in;
  auto fill = [&](const GeneratedSplit& split, std::vector<Tensor>& z,
                  std::vector<std::vector<double>>& m2,
                  std::vector<std::vector<double>>& s) {
    for (std::size_t i = 0; i < split.batch.size(); ++i) {
      z.push_back(forward_temporal(split.batch.x[i], model).detach());
      m2.push_back(forward_static(split.batch.x[i], model).data());
      s.push_back(split.statics[i]);
    }
  };
  fill(bench.source_train, in.z_source, in.m2_source, in.s_source);
  fill(bench.target_train, in.z_target, in.m2_target, in.s_target);
  return in;
}

// Pass iff LHS <= RHS + 3 * bootstrap standard error of (LHS - RHS). Frames
// from all samples are pooled into the residual distributions; bootstrap
// resampling acts at the sample (video) level.
inline TheoremReport verify_theorem3(const Theorem3Inputs& in,
                                     int n_projections = 24,
                                     int n_bootstrap = 50,
                                     std::uint64_t seed = 0) {
  if (in.z_source.empty() || in.z_target.empty()) {
    throw ContractError("verify_theorem3: empty domain");
  }
  if (in.m2_source.size() != in.z_source.size() ||
      in.s_source.size() != in.z_source.size() ||
      in.m2_target.size() != in.z_target.size() ||
      in.s_target.size() != in.z_target.size()) {
    throw ContractError("verify_theorem3: ground-truth statics missing");
  }
  const int d = in.z_source.front().cols();
  const auto dirs = detail::unit_directions(n_projections, d, seed);

  struct DomainResiduals {
    std::vector<detail::PointCloud> f_by_sample, ft_by_sample;
    std::vector<double> err_norm;
  };
  auto build = [&](const std::vector<Tensor>& z,
                   const std::vector<std::vector<double>>& m2,
                   const std::vector<std::vector<double>>& s) {
    DomainResiduals r;
    for (std::size_t i = 0; i < z.size(); ++i) {
      detail::PointCloud f_rows, ft_rows;
      for (int t = 0; t < z[i].rows(); ++t) {
        std::vector<double> f(d), ft(d);
        for (int j = 0; j < d; ++j) {
          const double zv = z[i].at(t, j);
          f[j] = zv - m2[i][j];
          ft[j] = zv - s[i][j];
        }
        f_rows.push_back(std::move(f));
        ft_rows.push_back(std::move(ft));
      }
      r.f_by_sample.push_back(std::move(f_rows));
      r.ft_by_sample.push_back(std::move(ft_rows));
      double norm = 0.0;
      for (int j = 0; j < d; ++j) {
        const double e = m2[i][j] - s[i][j];
        norm += e * e;
      }
      r.err_norm.push_back(std::sqrt(norm));
    }
    return r;
  };
  DomainResiduals src = build(in.z_source, in.m2_source, in.s_source);
  DomainResiduals tgt = build(in.z_target, in.m2_target, in.s_target);

  auto gap = [&](const std::vector<int>& src_idx,
                 const std::vector<int>& tgt_idx) {
    detail::PointCloud fs, ft_s, fT, ft_t;
    double es = 0.0, et = 0.0;
    for (int i : src_idx) {
      fs.insert(fs.end(), src.f_by_sample[i].begin(), src.f_by_sample[i].end());
      ft_s.insert(ft_s.end(), src.ft_by_sample[i].begin(),
                  src.ft_by_sample[i].end());
      es += src.err_norm[i];
    }
    for (int i : tgt_idx) {
      fT.insert(fT.end(), tgt.f_by_sample[i].begin(), tgt.f_by_sample[i].end());
      ft_t.insert(ft_t.end(), tgt.ft_by_sample[i].begin(),
                  tgt.ft_by_sample[i].end());
      et += tgt.err_norm[i];
    }
    es /= src_idx.size();
    et /= tgt_idx.size();
    const double lhs = detail::sliced_w1_rows(fs, fT, dirs);
    const double rhs = detail::sliced_w1_rows(ft_s, ft_t, dirs) + es + et;
    return std::make_pair(lhs, rhs);
  };

  std::vector<int> all_src(src.f_by_sample.size()), all_tgt(tgt.f_by_sample.size());
  std::iota(all_src.begin(), all_src.end(), 0);
  std::iota(all_tgt.begin(), all_tgt.end(), 0);
  auto [lhs, rhs] = gap(all_src, all_tgt);

  std::mt19937_64 boot_rng(seed ^ 0x626f6f74ULL);
  std::uniform_int_distribution<int> pick_src(0, int(all_src.size()) - 1);
  std::uniform_int_distribution<int> pick_tgt(0, int(all_tgt.size()) - 1);
  std::vector<double> boot_gaps;
  for (int b = 0; b < n_bootstrap; ++b) {
    std::vector<int> bs(all_src.size()), bt(all_tgt.size());
    for (auto& v : bs) v = pick_src(boot_rng);
    for (auto& v : bt) v = pick_tgt(boot_rng);
    auto [bl, br] = gap(bs, bt);
    boot_gaps.push_back(bl - br);
  }
  double mean_gap = 0.0;
  for (double g : boot_gaps) mean_gap += g;
  mean_gap /= boot_gaps.size();
  double var = 0.0;
  for (double g : boot_gaps) var += (g - mean_gap) * (g - mean_gap);
  const double se =
      boot_gaps.size() > 1 ? std::sqrt(var / (boot_gaps.size() - 1)) : 0.0;

  TheoremReport r;
  r.theorem_id = "theorem3_w1_bound";
  r.trials = n_bootstrap;
  r.bound_lhs = lhs;
  r.bound_rhs = rhs;
  r.tolerance = 3.0 * se;
  r.max_violation = std::max(0.0, lhs - rhs);
  r.pass = lhs <= rhs + 3.0 * se + 1e-12;
  r.details = {{"bootstrap_se", se},
               {"gap", lhs - rhs},
               {"n_projections", int(dirs.size())}};
  return r;
}

// ---------------------------------------------------------------------------
// Theorem 4: error of the static estimate decays like sqrt(1/T).

using StaticEstimator =
    std::function<std::vector<double>(const Tensor& sequence)>;

inline StaticEstimator temporal_mean_estimator() {
  return [](const Tensor& x) { return temporal_mean_rows(x); };
}

struct Theorem4Options {
  std::vector<int> t_grid = {8, 16, 32, 64, 128, 256, 512};
  double sigma = 1.0;
  int d = 16;
  int n_samples = 500;
  double delta = 0.05;
  std::uint64_t seed = 0;
  double slope_min = -0.6;
  double slope_max = -0.4;
  // Learned estimators need not be calibrated: the measured calibration
  // error is subtracted before the fit and the slope criterion relaxes.
  bool learned_mode = false;
  double learned_slope_max = -0.25;
};

// For each T draws sequences s + u_t with i.i.d. N(0, sigma^2) dynamics,
// measures the median estimation error, fits the log-log slope, checks the
// calibration condition on constant sequences, and counts how often the
// high-probability bound (with L = 1) is exceeded.
inline TheoremReport verify_theorem4(const StaticEstimator& m2,
                                     const Theorem4Options& opt) {
  if (opt.t_grid.size() < 4) {
    throw ContractError("verify_theorem4: need >= 4 grid points");
  }
  const auto [mn, mx] =
      std::minmax_element(opt.t_grid.begin(), opt.t_grid.end());
  if (*mx < 10 * *mn) {
    throw ContractError("verify_theorem4: grid must span at least a decade");
  }
  NoGradGuard ng;
  std::mt19937_64 rng(opt.seed ^ 0x74346772ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<double> medians, cal_errors, cal_errors_max, exceed_fractions;
  for (int t : opt.t_grid) {
    std::vector<double> errs, cals;
    int exceed = 0;
    for (int i = 0; i < opt.n_samples; ++i) {
      std::vector<double> s(opt.d);
      for (auto& v : s) v = gauss(rng);
      std::vector<double> frames(std::size_t(t) * opt.d);
      for (int r = 0; r < t; ++r)
        for (int j = 0; j < opt.d; ++j)
          frames[std::size_t(r) * opt.d + j] = s[j] + opt.sigma * gauss(rng);
      Tensor x({t, opt.d}, std::move(frames));
      const auto est = m2(x);
      double err = 0.0;
      for (int j = 0; j < opt.d; ++j)
        err += (est[j] - s[j]) * (est[j] - s[j]);
      err = std::sqrt(err);
      errs.push_back(err);

      std::vector<double> const_frames(std::size_t(t) * opt.d);
      for (int r = 0; r < t; ++r)
        for (int j = 0; j < opt.d; ++j)
          const_frames[std::size_t(r) * opt.d + j] = s[j];
      const auto cal_est = m2(Tensor({t, opt.d}, std::move(const_frames)));
      double cal = 0.0;
      for (int j = 0; j < opt.d; ++j)
        cal += (cal_est[j] - s[j]) * (cal_est[j] - s[j]);
      cals.push_back(std::sqrt(cal));
    }
    std::nth_element(errs.begin(), errs.begin() + errs.size() / 2, errs.end());
    const double med = errs[errs.size() / 2];
    std::vector<double> cals_sorted = cals;
    std::nth_element(cals_sorted.begin(),
                     cals_sorted.begin() + cals_sorted.size() / 2,
                     cals_sorted.end());
    const double cal_med = cals_sorted[cals_sorted.size() / 2];
    const double cal_max = *std::max_element(cals.begin(), cals.end());
    medians.push_back(med);
    cal_errors.push_back(cal_med);
    cal_errors_max.push_back(cal_max);

    // High-probability bound with L = 1. The calibration constant holds
    // uniformly over statics, so the measured maximum stands in for it.
    const double bound =
        cal_max + opt.sigma * std::sqrt(2.0 * opt.d *
                                        std::log(2.0 * opt.d / opt.delta) / t);
    for (double e : errs) {
      if (e > bound) ++exceed;
    }
    exceed_fractions.push_back(static_cast<double>(exceed) / opt.n_samples);
  }

  TheoremReport r;
  r.theorem_id = "theorem4_rate";
  r.trials = opt.n_samples * static_cast<int>(opt.t_grid.size());

  const double max_med = *std::max_element(medians.begin(), medians.end());
  double slope = 0.0;
  bool slope_ok;
  if (max_med <= 1e-12) {
    // Noiseless collapse: error equals the calibration error everywhere.
    slope_ok = true;
  } else {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const int n = static_cast<int>(opt.t_grid.size());
    for (int i = 0; i < n; ++i) {
      double y = medians[i];
      if (opt.learned_mode) y = std::max(y - cal_errors[i], 1e-12);
      const double lx = std::log(static_cast<double>(opt.t_grid[i]));
      const double ly = std::log(y);
      sx += lx;
      sy += ly;
      sxx += lx * lx;
      sxy += lx * ly;
    }
    slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    slope_ok = opt.learned_mode
                   ? slope < opt.learned_slope_max
                   : (slope >= opt.slope_min && slope <= opt.slope_max);
  }

  double max_exceed = 0.0;
  for (double f : exceed_fractions) max_exceed = std::max(max_exceed, f);
  const bool exceed_ok = opt.learned_mode || max_exceed <= opt.delta;

  r.pass = slope_ok && exceed_ok;
  r.max_violation = std::max(0.0, max_exceed - opt.delta);
  r.tolerance = opt.delta;
  nlohmann::ordered_json per_t = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < opt.t_grid.size(); ++i) {
    per_t.push_back({{"T", opt.t_grid[i]},
                     {"median_error", medians[i]},
                     {"calibration_error", cal_errors[i]},
                     {"calibration_error_max", cal_errors_max[i]},
                     {"exceed_fraction", exceed_fractions[i]}});
  }
  r.details = {{"slope", slope},
               {"learned_mode", opt.learned_mode},
               {"per_T", per_t}};
  return r;
}

// ---------------------------------------------------------------------------
// Relative gain per running attempt.

enum class RgraMode { kFixedOthers, kGreedy };

struct RgraInputs {
  double a_opt = 0.0;
  double a_source_only = 0.0;
  double a_target_sup = 0.0;
  int n_loss = 2;
  RgraMode mode = RgraMode::kFixedOthers;
};

// Relative adaptation gain divided by the number of search runs:
// 10*(N_loss-1) when one weight is tuned at a time, 10^(N_loss-1) for a
// greedy grid. Returned in percent.
inline double compute_rgra(const RgraInputs& in) {
  if (in.n_loss < 2) {
    throw ContractError("compute_rgra: n_loss must be >= 2");
  }
  const double denom = in.a_target_sup - in.a_source_only;
  if (denom == 0.0) {
    throw ContractError("compute_rgra: supervised-target equals source-only");
  }
  const double gain = (in.a_opt - in.a_source_only) / denom;
  const double runs = in.mode == RgraMode::kFixedOthers
                          ? 10.0 * (in.n_loss - 1)
                          : std::pow(10.0, in.n_loss - 1);
  return 100.0 * gain / runs;
}

// One reproduced table cell: computed from the published accuracies and
// compared against the published value.
struct RgraCell {
  std::string method;
  std::string task;
  double expected = 0.0;
  double computed = 0.0;
};

// Reference accuracies (benchmark result tables) and the published
// per-cell values to reproduce. The per-task cells follow directly from the
// formula; the row averages follow the convention each row evidently used
// (mean of cells for one method, the formula applied to the average
// accuracies for the other).
inline std::vector<RgraCell> rgra_reference_table(RgraMode mode) {
  struct Row {
    const char* task;
    double s_only, t_sup, metatrans, transvae;
  };
  static const Row kEpic[] = {
      {"P08->P01", 32.8, 64.0, 48.0, 50.5},
      {"P08->P22", 34.1, 63.7, 50.4, 50.3},
      {"P01->P08", 35.4, 57.0, 47.4, 50.3},
      {"P01->P22", 39.1, 63.7, 56.6, 58.6},
      {"P22->P08", 34.6, 57.0, 48.5, 48.0},
      {"P22->P01", 35.8, 64.0, 55.1, 58.0},
  };
  static const Row kEpicAvg = {"Epic-Average", 35.3, 61.5, 51.0, 52.6};
  static const Row kUcf[] = {
      {"U->H", 80.3, 95.0, 92.2, 87.8},
      {"H->U", 88.8, 96.9, 99.0, 99.0},
  };
  static const Row kUcfAvg = {"UCF-HMDB-Average", 84.5, 95.9, 95.4, 93.4};

  // Published cells, fixed-others mode (the greedy table repeats the
  // two-loss column unchanged and shrinks the five-loss one to 0.01).
  static const double kMetaExpected[] = {4.87, 5.51, 5.56, 7.11, 6.21,
                                         6.84, 6.02, 8.11, 12.59, 10.35};
  static const double kTransExpectedFixed[] = {1.42, 1.37, 1.72, 1.98, 1.50,
                                               1.97, 1.65, 1.27, 3.13, 1.94};

  const int meta_n = 2, trans_n = 5;
  auto cell = [&](double opt, double so, double ts, int n) {
    return compute_rgra({opt, so, ts, n, mode});
  };

  std::vector<RgraCell> cells;
  std::vector<double> meta_epic, trans_epic, meta_ucf, trans_ucf;
  int idx = 0;
  for (const Row& row : kEpic) {
    meta_epic.push_back(cell(row.metatrans, row.s_only, row.t_sup, meta_n));
    trans_epic.push_back(cell(row.transvae, row.s_only, row.t_sup, trans_n));
    cells.push_back({"MetaTrans", row.task, kMetaExpected[idx],
                     meta_epic.back()});
    ++idx;
  }
  // Row averages: mean of the per-task cells.
  cells.push_back({"MetaTrans", kEpicAvg.task, kMetaExpected[idx],
                   std::accumulate(meta_epic.begin(), meta_epic.end(), 0.0) /
                       meta_epic.size()});
  ++idx;
  for (const Row& row : kUcf) {
    meta_ucf.push_back(cell(row.metatrans, row.s_only, row.t_sup, meta_n));
    trans_ucf.push_back(cell(row.transvae, row.s_only, row.t_sup, trans_n));
    cells.push_back({"MetaTrans", row.task, kMetaExpected[idx],
                     meta_ucf.back()});
    ++idx;
  }
  cells.push_back({"MetaTrans", kUcfAvg.task, kMetaExpected[idx],
                   std::accumulate(meta_ucf.begin(), meta_ucf.end(), 0.0) /
                       meta_ucf.size()});

  if (mode == RgraMode::kFixedOthers) {
    idx = 0;
    for (const Row& row : kEpic) {
      cells.push_back({"TranSVAE", row.task, kTransExpectedFixed[idx],
                       trans_epic[idx]});
      ++idx;
    }
    // This row's published averages come from the average accuracies.
    cells.push_back({"TranSVAE", kEpicAvg.task, kTransExpectedFixed[idx],
                     cell(kEpicAvg.transvae, kEpicAvg.s_only, kEpicAvg.t_sup,
                          trans_n)});
    ++idx;
    for (std::size_t u = 0; u < 2; ++u) {
      cells.push_back({"TranSVAE", kUcf[u].task, kTransExpectedFixed[idx],
                       trans_ucf[u]});
      ++idx;
    }
    cells.push_back({"TranSVAE", kUcfAvg.task, kTransExpectedFixed[idx],
                     cell(kUcfAvg.transvae, kUcfAvg.s_only, kUcfAvg.t_sup,
                          trans_n)});
  }
  return cells;
}

inline TheoremReport verify_rgra_table(RgraMode mode, double tol = 0.05) {
  auto cells = rgra_reference_table(mode);
  TheoremReport r;
  r.theorem_id = mode == RgraMode::kFixedOthers ? "rgra_table"
                                                : "rgra_table_greedy";
  r.tolerance = tol;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& c : cells) {
    const double err = std::fabs(c.computed - c.expected);
    r.max_violation = std::max(r.max_violation, err);
    ++r.trials;
    rows.push_back({{"method", c.method},
                    {"task", c.task},
                    {"expected", c.expected},
                    {"computed", c.computed}});
  }
  r.pass = r.max_violation <= tol;
  r.details = {{"cells", rows}};
  return r;
}

}  // namespace metatrans
