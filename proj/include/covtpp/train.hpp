#pragma once

// Mini-batch training, evaluation metrics and the cumulative feature-ablation
// study.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covtpp/data.hpp"
#include "covtpp/errors.hpp"
#include "covtpp/model.hpp"
#include "covtpp/parallel.hpp"

namespace covtpp {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  bool rescale_times = false;  // set time_scale to the mean training interval
  // Batches are cut from length-sorted pools of this many batches to limit
  // padding; 1 gives plain shuffled batches.
  std::size_t bucket_pool = 8;

  void validate() const {
    if (!(learning_rate > 0.0) || batch_size == 0 || max_epochs == 0 || patience == 0 || !(clip_norm > 0.0)) {
      throw UsageError("invalid training config: all settings must be positive");
    }
    if (bucket_pool == 0) {
      throw UsageError("invalid training config: bucket_pool must be at least 1");
    }
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

inline nlohmann::json to_json_line(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_accuracy", e.val_accuracy}};
}

struct ClassStats {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct Metrics {
  double time_ll_per_event = 0.0;
  double joint_ll_per_event = 0.0;
  double rmse = 0.0;
  double accuracy = 0.0;
  double f1_weighted = 0.0;
  std::vector<ClassStats> per_class;
  std::size_t events = 0;
};

inline nlohmann::json to_json(const Metrics& m) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t k = 0; k < m.per_class.size(); ++k) {
    const auto& c = m.per_class[k];
    classes.push_back({{"type", k}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}});
  }
  return {{"time_ll_per_event", m.time_ll_per_event},
          {"joint_ll_per_event", m.joint_ll_per_event},
          {"rmse", m.rmse},
          {"accuracy", m.accuracy},
          {"f1_weighted", m.f1_weighted},
          {"per_class", std::move(classes)},
          {"events", m.events}};
}

/// Precision/recall/F1 per class; F1 is 0 when precision + recall = 0.
inline std::vector<ClassStats> per_class_stats(const std::vector<std::size_t>& truth,
                                               const std::vector<std::size_t>& pred, std::size_t num_classes) {
  if (truth.size() != pred.size()) throw std::invalid_argument("label arrays differ in length");
  if (truth.empty()) throw std::invalid_argument("no labels");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || pred[i] >= num_classes) throw std::invalid_argument("label out of range");
    if (truth[i] == pred[i]) {
      ++tp[truth[i]];
    } else {
      ++fp[pred[i]];
      ++fn[truth[i]];
    }
  }
  std::vector<ClassStats> out(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    auto& c = out[k];
    c.support = tp[k] + fn[k];
    c.precision = tp[k] + fp[k] > 0 ? static_cast<double>(tp[k]) / static_cast<double>(tp[k] + fp[k]) : 0.0;
    c.recall = c.support > 0 ? static_cast<double>(tp[k]) / static_cast<double>(c.support) : 0.0;
    c.f1 = c.precision + c.recall > 0.0 ? 2.0 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
  }
  return out;
}

/// Support-weighted mean of per-class F1.
inline double f1_weighted(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred,
                          std::size_t num_classes) {
  const auto stats = per_class_stats(truth, pred, num_classes);
  double f1 = 0.0;
  for (const auto& c : stats) f1 += static_cast<double>(c.support) / static_cast<double>(truth.size()) * c.f1;
  return f1;
}

inline double accuracy(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred) {
  if (truth.size() != pred.size() || truth.empty()) throw std::invalid_argument("accuracy: bad label arrays");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == pred[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

inline double rmse(const std::vector<double>& truth, const std::vector<double>& pred) {
  if (truth.size() != pred.size() || truth.empty()) throw std::invalid_argument("rmse: bad arrays");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += (truth[i] - pred[i]) * (truth[i] - pred[i]);
  return std::sqrt(s / static_cast<double>(truth.size()));
}

/// Per-event predictions for a split (sequences ordered by length).
struct Predictions {
  std::vector<double> true_tau, pred_tau;
  std::vector<std::size_t> true_type, pred_type;
  std::vector<double> time_nll;  // NaN where tau <= 0
  std::vector<double> type_nll;
};

inline std::vector<std::vector<const EventSequence*>> make_batches(const Dataset& d, const std::vector<std::size_t>& idx,
                                                                   std::size_t batch_size) {
  std::vector<std::vector<const EventSequence*>> out;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    std::vector<const EventSequence*> b;
    for (std::size_t k = start; k < std::min(idx.size(), start + batch_size); ++k) b.push_back(&d.sequences[idx[k]]);
    out.push_back(std::move(b));
  }
  return out;
}

/// Shuffled batches with similar lengths: the (already shuffled) indices are
/// cut into pools of `pool` batches, each pool is sorted by length and
/// sliced, and the batch order is shuffled.
inline std::vector<std::vector<const EventSequence*>> bucketed_batches(const Dataset& d, std::vector<std::size_t> idx,
                                                                       std::size_t batch_size, std::size_t pool,
                                                                       std::mt19937_64& rng) {
  const std::size_t span = batch_size * pool;
  for (std::size_t start = 0; start < idx.size(); start += span) {
    auto first = idx.begin() + static_cast<std::ptrdiff_t>(start);
    auto last = idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + span));
    std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
      return d.sequences[a].size() < d.sequences[b].size();
    });
  }
  auto batches = make_batches(d, idx, batch_size);
  for (std::size_t i = batches.size(); i > 1; --i) std::swap(batches[i - 1], batches[rng() % i]);
  return batches;
}

inline Predictions predict(TransFeatModel& model, const Dataset& d, Split split, std::size_t batch_size = 64) {
  const auto idx = d.indices(split);
  if (idx.empty()) throw DataError(std::string("split '") + split_name(split) + "' is empty");
  const HyperParams& hp = model.hyperparams();
  const double log_a = model.params().at("dec.affine_log_scale").value.item();
  const double b = model.params().at("dec.affine_shift").value.item();
  // Length-sorted batches keep padding small; metrics do not depend on order.
  auto sorted = idx;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [&](std::size_t a, std::size_t b) { return d.sequences[a].size() < d.sequences[b].size(); });
  Predictions p;
  for (const auto& seqs : make_batches(d, sorted, batch_size)) {
    Batch batch = make_batch(seqs, hp);
    Tape tape(model.params());
    ForwardOutput out = model.forward(tape, batch);
    const Tensor& logits = out.mix_logits.value();
    const Tensor& means = out.mix_means.value();
    const Tensor& log_s = out.mix_log_scales.value();
    const Tensor& type_logits = out.type_logits.value();
    for (std::size_t r = 0; r < batch.rows(); ++r) {
      if (!batch.event_mask[r]) continue;
      const MixtureParams mp = mixture_from_logits(logits.row_span(r), means.row_span(r), log_s.row_span(r), log_a, b);
      p.true_tau.push_back(batch.tau[r]);
      p.pred_tau.push_back(expected_time(mp));
      p.time_nll.push_back(batch.time_mask[r] ? out.time_nll.value()[r] : std::numeric_limits<double>::quiet_NaN());
      p.type_nll.push_back(out.type_nll.value()[r]);
      p.true_type.push_back(batch.target_type[r]);
      auto row = type_logits.row_span(r);
      p.pred_type.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return p;
}

inline Metrics metrics_from_predictions(const Predictions& p, std::size_t num_types) {
  Metrics m;
  m.events = p.true_type.size();
  double time_sum = 0.0, type_sum = 0.0;
  std::size_t timed = 0;
  for (std::size_t i = 0; i < m.events; ++i) {
    if (!std::isnan(p.time_nll[i])) {
      time_sum += p.time_nll[i];
      ++timed;
    }
    type_sum += p.type_nll[i];
  }
  m.time_ll_per_event = timed > 0 ? -time_sum / static_cast<double>(timed) : 0.0;
  m.joint_ll_per_event = -(time_sum + type_sum) / static_cast<double>(m.events);
  m.rmse = rmse(p.true_tau, p.pred_tau);
  m.accuracy = accuracy(p.true_type, p.pred_type);
  m.per_class = per_class_stats(p.true_type, p.pred_type, num_types);
  m.f1_weighted = f1_weighted(p.true_type, p.pred_type, num_types);
  return m;
}

/// Metrics on one split: expected-time predictions, argmax types.
inline Metrics evaluate(TransFeatModel& model, const Dataset& d, Split split, std::size_t batch_size = 64) {
  return metrics_from_predictions(predict(model, d, split, batch_size), model.hyperparams().num_types);
}

/// Fraction of the most frequent type among predicted events of a split.
inline double majority_baseline(const Dataset& d, Split split) {
  std::vector<std::size_t> counts(d.num_types, 0);
  std::size_t n = 0;
  for (auto i : d.indices(split))
    for (auto y : d.sequences[i].types) {
      ++counts[y];
      ++n;
    }
  if (n == 0) throw DataError("majority_baseline: empty split");
  return static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(n);
}

class Adam {
 public:
  explicit Adam(const ParamStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, p] : store) {
      m_.emplace_back(p.value.rows(), p.value.cols());
      v_.emplace_back(p.value.rows(), p.value.cols());
    }
  }

  void step(ParamStore& store) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& [name, p] : store) {
      auto& m = m_[k].values();
      auto& v = v_[k].values();
      auto& w = p.value.values();
      const auto& g = p.grad.values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
      ++k;
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Rescales all gradients so their global L2 norm is at most max_norm.
inline double clip_gradients(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, p] : store)
    for (double g : p.grad.values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& [_, p] : store)
      for (double& g : p.grad.values()) g *= k;
  }
  return norm;
}

/// Log inter-event times of every training event (t_0 = 0 for the first).
inline std::vector<double> training_log_intervals(const Dataset& d) {
  std::vector<double> out;
  for (auto i : d.indices(Split::train)) {
    const auto& t = d.sequences[i].times;
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double tau = t[j] - (j == 0 ? 0.0 : t[j - 1]);
      if (tau > 0.0) out.push_back(std::log(tau));
    }
  }
  return out;
}

/// Fresh model with the decoder affine set from training data:
/// b = mean log tau, a = std log tau.
inline TransFeatModel initialize_model(const Dataset& d, HyperParams hp, const TrainConfig& cfg) {
  hp.num_types = d.num_types;
  hp.num_features = d.num_features;
  if (cfg.rescale_times) {
    double gaps = 0.0;
    std::size_t n = 0;
    for (auto i : d.indices(Split::train)) {
      const auto& t = d.sequences[i].times;
      for (std::size_t j = 0; j < t.size(); ++j) gaps += t[j] - (j == 0 ? 0.0 : t[j - 1]);
      n += t.size();
    }
    if (n > 0 && gaps > 0.0) hp.time_scale = gaps / static_cast<double>(n);
  }
  TransFeatModel model(hp, cfg.seed);
  model.standardization = d.standardization;
  const auto logs = training_log_intervals(d);
  if (!logs.empty()) {
    const double mu = std::accumulate(logs.begin(), logs.end(), 0.0) / static_cast<double>(logs.size());
    double var = 0.0;
    for (double v : logs) var += (v - mu) * (v - mu);
    var /= static_cast<double>(logs.size());
    const double sd = var > 1e-12 ? std::sqrt(var) : 1.0;
    model.params().at("dec.affine_shift").value[0] = mu;
    model.params().at("dec.affine_log_scale").value[0] = std::log(sd);
  }
  return model;
}

struct TrainResult {
  TransFeatModel model;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
  double initial_train_loss = 0.0;
};

/// One optimizer step on a batch; returns the objective before the update.
inline double train_step(TransFeatModel& model, const Batch& batch, Adam& opt, const TrainConfig& cfg,
                         std::mt19937_64& rng) {
  ParamStore& store = model.params();
  store.zero_grad();
  Tape tape(store);
  tape.training = true;
  ForwardOutput out = model.forward(tape, batch, &rng);
  const double loss = out.total.value().item();
  tape.backward(out.total);
  clip_gradients(store, cfg.clip_norm);
  opt.step(store);
  return loss;
}

/// Mean per-event joint NLL (time + type) on a split.
inline double joint_nll(TransFeatModel& model, const Dataset& d, Split split) {
  return -evaluate(model, d, split).joint_ll_per_event;
}

/// Adam on the uncertainty-weighted objective with early stopping on the
/// validation joint NLL; the best-validation parameters are returned.
/// `log_sink`, when given, receives one JSON line per epoch.
inline TrainResult train(const Dataset& d, const HyperParams& hp, const TrainConfig& cfg,
                         std::ostream* log_sink = nullptr) {
  cfg.validate();
  auto train_idx = d.indices(Split::train);
  if (train_idx.empty()) throw DataError("training split is empty");
  if (d.count(Split::val) == 0) throw DataError("validation split is empty");

  TrainResult result{initialize_model(d, hp, cfg), {}, 0, false, 0.0};
  TransFeatModel& model = result.model;
  Adam opt(model.params(), cfg.learning_rate);
  std::mt19937_64 rng(cfg.seed ^ 0x7a11ULL);

  double best = std::numeric_limits<double>::infinity();
  ParamStore best_params = model.params();
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t i = train_idx.size() - 1; i > 0; --i) std::swap(train_idx[i], train_idx[rng() % (i + 1)]);
    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (const auto& seqs : bucketed_batches(d, train_idx, cfg.batch_size, cfg.bucket_pool, rng)) {
      ++batch_no;
      const Batch batch = make_batch(seqs, model.hyperparams());
      double loss = 0.0;
      try {
        loss = train_step(model, batch, opt, cfg, rng);
      } catch (const NumericalError& e) {
        throw NumericalError("divergence at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_no) +
                             ": " + e.what());
      }
      if (epoch == 1 && batch_no == 1) result.initial_train_loss = loss;
      loss_sum += loss;
    }
    const Metrics val = evaluate(model, d, Split::val);
    EpochLog entry{epoch, loss_sum / static_cast<double>(batch_no), -val.joint_ll_per_event, val.accuracy};
    if (!std::isfinite(entry.train_loss) || !std::isfinite(entry.val_loss)) {
      throw NumericalError("divergence at epoch " + std::to_string(epoch));
    }
    result.log.push_back(entry);
    if (log_sink != nullptr) *log_sink << to_json_line(entry).dump() << '\n';
    if (entry.val_loss < best) {
      best = entry.val_loss;
      best_params = model.params();
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  for (auto& [name, p] : model.params()) p.value = best_params.at(name).value;
  return result;
}

/// Copy of `d` with the listed covariates set to 0 (the training mean after
/// standardization) in every split.
inline Dataset zero_features(Dataset d, const std::vector<std::size_t>& features) {
  for (auto& s : d.sequences)
    for (std::size_t r = 0; r < s.covariates.rows(); ++r)
      for (auto f : features) s.covariates(r, f) = 0.0;
  return d;
}

struct AblationPoint {
  std::size_t removed_count = 0;
  std::optional<std::size_t> removed_feature;  // feature removed at this step
  double test_accuracy = 0.0;
};

/// For k = 0..F, zero the top-k ranked covariates, retrain with seed + k and
/// record test accuracy. `points` restricts the run to the listed k (the
/// curve then holds only those entries, in the given order). Points run on
/// up to `workers` threads.
inline std::vector<AblationPoint> ablation_study(const Dataset& d, const HyperParams& hp, const TrainConfig& cfg,
                                                 const std::vector<std::size_t>& ranking, std::size_t workers = 1,
                                                 std::vector<std::size_t> points = {}) {
  std::vector<std::size_t> sorted = ranking;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i)
    if (sorted[i] != i) throw std::invalid_argument("ranking must be a permutation of feature indices");
  if (sorted.size() != d.num_features) throw std::invalid_argument("ranking length differs from feature count");
  if (points.empty()) {
    points.resize(d.num_features + 1);
    std::iota(points.begin(), points.end(), std::size_t{0});
  }
  for (auto k : points)
    if (k > d.num_features) throw std::invalid_argument("ablation point exceeds feature count");

  std::vector<AblationPoint> curve(points.size());
  parallel_for(points.size(), workers, [&](std::size_t i) {
    const std::size_t k = points[i];
    const std::vector<std::size_t> removed(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(k));
    const Dataset ablated = zero_features(d, removed);
    TrainConfig ck = cfg;
    ck.seed = cfg.seed + k;
    TrainResult r = train(ablated, hp, ck);
    curve[i].removed_count = k;
    if (k > 0) curve[i].removed_feature = ranking[k - 1];
    curve[i].test_accuracy = evaluate(r.model, ablated, Split::test).accuracy;
  });
  return curve;
}

}  // namespace covtpp
