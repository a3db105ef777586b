#pragma once

// Training: the two-loss objective (task cross-entropy plus adversarial
// domain alignment through the gradient reversal layer), pseudo-label
// scheduling from the previous epoch's snapshot, Adam with decoupled weight
// decay, the epoch loop, and the lambda1 grid search.

#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "metatrans/model.hpp"
#include "metatrans/nn.hpp"
#include "metatrans/tensor.hpp"

namespace metatrans {

constexpr int kUnlabeled = -1;

// A set of per-frame feature sequences with labels. Serves both as a dataset
// shard and as a minibatch.
struct VideoBatch {
  std::vector<Tensor> x;           // each T x d
  std::vector<int> class_label;    // [0, K) or kUnlabeled
  std::vector<int> domain_label;   // 0 source, 1 target
  std::vector<int> pseudo_label;   // [0, K) or kUnlabeled
  bool pseudo_active = false;

  std::size_t size() const { return x.size(); }

  void push(Tensor sample, int cls, int domain, int pseudo = kUnlabeled) {
    if (domain != 0 && domain != 1) {
      throw ContractError("domain_label must be 0 or 1");
    }
    x.push_back(std::move(sample));
    class_label.push_back(cls);
    domain_label.push_back(domain);
    pseudo_label.push_back(pseudo);
  }

  VideoBatch gather(const std::vector<int>& idx) const {
    VideoBatch b;
    b.pseudo_active = pseudo_active;
    for (int i : idx) {
      b.x.push_back(x.at(i));
      b.class_label.push_back(class_label.at(i));
      b.domain_label.push_back(domain_label.at(i));
      b.pseudo_label.push_back(pseudo_label.at(i));
    }
    return b;
  }

  // Copy with class labels hidden; used for target data during training so
  // ground-truth target labels can only be consulted at evaluation time.
  VideoBatch without_class_labels() const {
    VideoBatch b = *this;
    std::fill(b.class_label.begin(), b.class_label.end(), kUnlabeled);
    return b;
  }
};

struct DomainData {
  VideoBatch train;
  VideoBatch eval;
};

struct TrainConfig {
  double lambda1 = 0.05;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  int batch_size = 32;
  int epochs = 60;
  int pseudo_start_epoch = 20;
  long seed = 0;
  bool adv_during_warmup = true;       // adversarial loss active from epoch 0
  double pseudo_threshold = 0.0;       // 0 disables confidence filtering
  std::string preset = "desk";
  Variant variant = Variant::kFull;
  ModelConfig model;

  void validate() const {
    model.validate();
    if (lambda1 < 0.0) throw ConfigError("lambda1 must be >= 0");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size < 2 || batch_size % 2 != 0) {
      throw ConfigError("batch_size must be even and >= 2");
    }
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (pseudo_start_epoch < 0 || pseudo_start_epoch > epochs) {
      throw ConfigError("pseudo_start_epoch must lie in [0, epochs]");
    }
  }
};

inline TrainConfig desk_preset() { return TrainConfig{}; }

inline TrainConfig paper_preset() {
  TrainConfig cfg;
  cfg.preset = "paper";
  cfg.epochs = 500;
  cfg.pseudo_start_epoch = 100;
  cfg.batch_size = 256;
  cfg.model.d = 2048;
  cfg.model.n_layers = 4;
  cfg.model.n_heads = 8;
  cfg.model.d_ff = 4096;
  cfg.model.d_v = 2048;
  cfg.model.head_hidden = 2048;
  return cfg;
}

// ---------------------------------------------------------------------------
// Losses.

// Mean task cross-entropy over every sample carrying a usable label: source
// class labels always, target pseudo-labels only while pseudo_active.
inline Tensor loss_cls(const VideoBatch& batch, const MetaTransModel& m,
                       double lambda1 = 0.0,
                       Variant v = Variant::kFull) {
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    int label = kUnlabeled;
    if (batch.domain_label[i] == 0) {
      if (batch.class_label[i] == kUnlabeled) {
        throw ContractError("source sample without class label");
      }
      label = batch.class_label[i];
    } else if (batch.pseudo_active) {
      label = batch.pseudo_label[i];
    }
    if (label == kUnlabeled) continue;
    auto out = model_forward(batch.x[i], m, lambda1, v);
    terms.push_back(cross_entropy_logits(out.task_logits, {label}));
  }
  if (terms.empty()) {
    throw ContractError("loss_cls: batch has no supervised samples");
  }
  return mean_of(terms);
}

// Mean over samples of frame-level plus video-level domain cross-entropy,
// computed through the reversal layer at weight lambda1.
inline Tensor loss_adv(const VideoBatch& batch, const MetaTransModel& m,
                       double lambda1, Variant v = Variant::kFull) {
  if (batch.size() == 0) throw ContractError("loss_adv: empty batch");
  bool has_source = false, has_target = false;
  for (int d : batch.domain_label) (d == 0 ? has_source : has_target) = true;
  if (!has_source || !has_target) {
    std::fprintf(stderr,
                 "warning: loss_adv computed on a single-domain batch\n");
  }
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto out = model_forward(batch.x[i], m, lambda1, v);
    const int d = batch.domain_label[i];
    Tensor frame_ce = cross_entropy_logits(
        out.frame_domain_logits, std::vector<int>(out.frame_domain_logits.rows(), d));
    Tensor video_ce = cross_entropy_logits(out.video_domain_logits, {d});
    terms.push_back(add(frame_ce, video_ce));
  }
  return mean_of(terms);
}

struct LossBreakdown {
  Tensor total;
  double cls_value = 0.0;
  double adv_value = 0.0;
};

// L = loss_cls + loss_adv, with lambda1 entering only through the reversal
// layer: the domain heads train at weight 1 while the encoder receives the
// reversed gradient scaled by lambda1. Forwards are shared between the two
// terms so each sample is encoded once.
inline LossBreakdown total_loss(const VideoBatch& batch,
                                const MetaTransModel& m,
                                const TrainConfig& cfg,
                                bool use_adversary = true) {
  const bool adv = use_adversary && variant_uses_adversary(cfg.variant);
  std::vector<Tensor> cls_terms;
  std::vector<Tensor> adv_terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto out = model_forward(batch.x[i], m, cfg.lambda1, cfg.variant);
    int label = kUnlabeled;
    if (batch.domain_label[i] == 0) {
      if (batch.class_label[i] == kUnlabeled) {
        throw ContractError("source sample without class label");
      }
      label = batch.class_label[i];
    } else if (batch.pseudo_active) {
      label = batch.pseudo_label[i];
    }
    if (label != kUnlabeled) {
      cls_terms.push_back(cross_entropy_logits(out.task_logits, {label}));
    }
    if (adv) {
      const int d = batch.domain_label[i];
      Tensor frame_ce = cross_entropy_logits(
          out.frame_domain_logits,
          std::vector<int>(out.frame_domain_logits.rows(), d));
      Tensor video_ce = cross_entropy_logits(out.video_domain_logits, {d});
      adv_terms.push_back(add(frame_ce, video_ce));
    }
  }
  if (cls_terms.empty()) {
    throw ContractError("total_loss: batch has no supervised samples");
  }
  LossBreakdown out;
  Tensor cls = mean_of(cls_terms);
  out.cls_value = cls.item();
  if (adv) {
    Tensor a = mean_of(adv_terms);
    out.adv_value = a.item();
    out.total = add(cls, a);
  } else {
    out.total = cls;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pseudo-labels.

// Argmax of the snapshot's task logits per target sample; exact ties break
// toward the smaller class index. Samples failing the optional confidence
// threshold stay unlabeled.
inline std::vector<int> generate_pseudo_labels(const VideoBatch& target,
                                               const MetaTransModel& snapshot,
                                               Variant v = Variant::kFull,
                                               double threshold = 0.0) {
  NoGradGuard ng;
  std::vector<int> labels(target.size(), kUnlabeled);
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto out = model_forward(target.x[i], snapshot, 0.0, v);
    const auto& logits = out.task_logits.data();
    int best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j) {
      if (logits[j] > logits[best]) best = static_cast<int>(j);
    }
    if (threshold > 0.0) {
      double mx = logits[best], z = 0.0;
      for (double l : logits) z += std::exp(l - mx);
      if (1.0 / z < threshold) continue;
    }
    labels[i] = best;
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay.

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long t = 0;
};

// One update: p <- p - lr*wd*p, then the bias-corrected Adam delta. All
// gradients are validated before any parameter is touched; a non-finite
// gradient aborts the whole step.
inline void adam_step(const std::vector<Tensor>& params, AdamState& state,
                      double lr, double wd, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: state does not match parameter list");
  }
  for (const auto& p : params) {
    if (!p.has_grad()) throw ContractError("adam_step: parameter missing grad");
    for (double g : p.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adam_step: non-finite gradient, step aborted");
      }
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    const auto& g = p.grad();
    auto& data = p.data_mut();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      data[k] -= lr * wd * data[k];
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      data[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation.

inline double accuracy(const VideoBatch& eval_set, const MetaTransModel& m,
                       Variant v = Variant::kFull) {
  if (eval_set.size() == 0) return 0.0;
  NoGradGuard ng;
  int correct = 0, counted = 0;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    if (eval_set.class_label[i] == kUnlabeled) continue;
    auto out = model_forward(eval_set.x[i], m, 0.0, v);
    const auto& logits = out.task_logits.data();
    int best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j) {
      if (logits[j] > logits[best]) best = static_cast<int>(j);
    }
    ++counted;
    if (best == eval_set.class_label[i]) ++correct;
  }
  if (counted == 0) throw ContractError("accuracy: no labeled samples");
  return 100.0 * correct / counted;
}

// ---------------------------------------------------------------------------
// Reports.

struct EpochRecord {
  int epoch = 0;
  double loss_cls = 0.0;
  double loss_adv = 0.0;
  double source_acc = 0.0;
  double target_acc = 0.0;
};

struct ExperimentReport {
  std::vector<EpochRecord> epochs;
  double lambda1 = 0.0;
  double target_acc = 0.0;
  double source_acc = 0.0;
  long seed = 0;
  std::string preset;
  std::string variant;
};

inline nlohmann::ordered_json report_to_json(const ExperimentReport& r) {
  nlohmann::ordered_json j;
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) {
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"loss_cls", e.loss_cls},
                           {"loss_adv", e.loss_adv},
                           {"source_acc", e.source_acc},
                           {"target_acc", e.target_acc}});
  }
  j["final"] = {{"lambda1", r.lambda1},
                {"target_acc", r.target_acc},
                {"source_acc", r.source_acc},
                {"seed", r.seed},
                {"preset", r.preset},
                {"variant", r.variant}};
  return j;
}

// ---------------------------------------------------------------------------
// The epoch loop.

struct TrainResult {
  MetaTransModel model;
  ExperimentReport report;
};

// Source supervision plus adversarial alignment from epoch 0 (configurable);
// pseudo-labels from the previous epoch's snapshot join the supervision loss
// once pseudo_start_epoch is reached. Batches mix the two domains 50/50.
// Deterministic given (config, seed).
inline TrainResult train(const DomainData& source, const DomainData& target,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (source.train.size() == 0) throw ConfigError("train: empty source set");
  const bool source_only = cfg.variant == Variant::kSourceOnly;
  if (!source_only && target.train.size() == 0) {
    throw ConfigError("train: empty target set");
  }

  ModelConfig mc = cfg.model;
  std::mt19937_64 init_rng(static_cast<std::uint64_t>(cfg.seed));
  MetaTransModel model = MetaTransModel::init(mc, init_rng);
  MetaTransModel snapshot = model.clone();
  std::mt19937_64 shuffle_rng(static_cast<std::uint64_t>(cfg.seed) ^
                              0x9e3779b97f4a7c15ULL);

  VideoBatch target_train = target.train.without_class_labels();

  auto params = model.parameters();
  AdamState opt;
  ExperimentReport report;
  report.lambda1 =
      variant_uses_adversary(cfg.variant) && !source_only ? cfg.lambda1 : 0.0;
  report.seed = cfg.seed;
  report.preset = cfg.preset;
  report.variant = variant_name(cfg.variant);

  const int half = cfg.batch_size / 2;
  std::vector<int> src_idx(source.train.size()), tgt_idx(target_train.size());
  for (std::size_t i = 0; i < src_idx.size(); ++i) src_idx[i] = int(i);
  for (std::size_t i = 0; i < tgt_idx.size(); ++i) tgt_idx[i] = int(i);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool pseudo_active =
        !source_only && epoch >= cfg.pseudo_start_epoch;
    target_train.pseudo_active = pseudo_active;
    if (pseudo_active) {
      target_train.pseudo_label = generate_pseudo_labels(
          target_train, snapshot, cfg.variant, cfg.pseudo_threshold);
    }

    std::shuffle(src_idx.begin(), src_idx.end(), shuffle_rng);
    std::shuffle(tgt_idx.begin(), tgt_idx.end(), shuffle_rng);

    int steps;
    if (source_only) {
      steps = static_cast<int>(src_idx.size()) / cfg.batch_size;
    } else {
      steps = static_cast<int>(std::min(src_idx.size(), tgt_idx.size())) / half;
    }
    if (steps == 0) throw ConfigError("train: batch_size exceeds dataset");

    double cls_sum = 0.0, adv_sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      VideoBatch batch;
      batch.pseudo_active = pseudo_active;
      if (source_only) {
        for (int k = 0; k < cfg.batch_size; ++k) {
          const int i = src_idx[std::size_t(step) * cfg.batch_size + k];
          batch.push(source.train.x[i], source.train.class_label[i], 0);
        }
      } else {
        for (int k = 0; k < half; ++k) {
          const int i = src_idx[std::size_t(step) * half + k];
          batch.push(source.train.x[i], source.train.class_label[i], 0);
        }
        for (int k = 0; k < half; ++k) {
          const int i = tgt_idx[std::size_t(step) * half + k];
          batch.push(target_train.x[i], kUnlabeled, 1,
                     target_train.pseudo_label[i]);
        }
      }

      for (auto& p : params) p.zero_grad();
      LossBreakdown loss =
          total_loss(batch, model, cfg, /*use_adversary=*/!source_only &&
                         (cfg.adv_during_warmup || pseudo_active));
      if (!std::isfinite(loss.total.item())) {
        throw NumericError("train: loss diverged at epoch " +
                           std::to_string(epoch) + ", step " +
                           std::to_string(step));
      }
      backward(loss.total);
      adam_step(params, opt, cfg.learning_rate, cfg.weight_decay);
      cls_sum += loss.cls_value;
      adv_sum += loss.adv_value;
    }

    snapshot = model.clone();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss_cls = cls_sum / steps;
    rec.loss_adv = adv_sum / steps;
    rec.source_acc = accuracy(source.eval, model, cfg.variant);
    rec.target_acc = accuracy(target.eval, model, cfg.variant);
    report.epochs.push_back(rec);
  }

  report.source_acc = report.epochs.back().source_acc;
  report.target_acc = report.epochs.back().target_acc;
  return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------------------
// Lambda1 grid search.

struct SweepRow {
  double lambda1 = 0.0;
  double val_target_acc = 0.0;
  double val_source_acc = 0.0;
};

struct SweepResult {
  double best_lambda = 0.0;
  std::vector<SweepRow> rows;
};

// One training run per grid value on an 80/20 split of the training data
// (held-out labeled source plus a disjoint target subset form the validation
// sets). Selection is by validation target accuracy; exact ties break toward
// the smaller lambda.
inline SweepResult grid_search_lambda(const DomainData& source,
                                      const DomainData& target,
                                      const TrainConfig& cfg,
                                      const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("grid_search_lambda: empty grid");

  auto split = [&](const VideoBatch& full, std::uint64_t salt) {
    std::vector<int> idx(full.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
    std::mt19937_64 rng(static_cast<std::uint64_t>(cfg.seed) ^ salt);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n_val = std::max<std::size_t>(1, idx.size() / 5);
    std::vector<int> val(idx.begin(), idx.begin() + n_val);
    std::vector<int> train(idx.begin() + n_val, idx.end());
    return std::make_pair(full.gather(train), full.gather(val));
  };
  auto [src_train, src_val] = split(source.train, 0x5343u);
  auto [tgt_train, tgt_val] = split(target.train, 0x5447u);
  DomainData src{src_train, src_val};
  DomainData tgt{tgt_train, tgt_val};

  SweepResult result;
  double best_acc = -1.0;
  bool first = true;
  for (double lambda : grid) {
    TrainConfig run_cfg = cfg;
    run_cfg.lambda1 = lambda;
    if (lambda == 0.0 && cfg.variant == Variant::kFull) {
      run_cfg.variant = Variant::kWoAdv;
    }
    TrainResult r = train(src, tgt, run_cfg);
    SweepRow row;
    row.lambda1 = lambda;
    row.val_target_acc = r.report.target_acc;
    row.val_source_acc = r.report.source_acc;
    result.rows.push_back(row);
    if (first || row.val_target_acc > best_acc ||
        (row.val_target_acc == best_acc && lambda < result.best_lambda)) {
      best_acc = row.val_target_acc;
      result.best_lambda = lambda;
      first = false;
    }
  }
  return result;
}

}  // namespace metatrans
