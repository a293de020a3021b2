#pragma once

// Full model over padded mini-batches.
//
// A batch of B sequences is padded to the longest length and stacked into
// B*block rows. Predictor row j of a sequence models event j (0-based) from
// the state after events 0..j-1: row 0 uses the learned initial state and a
// zero auxiliary row, row j > 0 uses H1 and H2 of event j-1. Padding rows
// (time 0, type 0, zero covariates) are excluded by the loss masks and,
// being later than every real event, never enter a real row's attention.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "covtpp/autodiff.hpp"
#include "covtpp/data.hpp"
#include "covtpp/decoder.hpp"
#include "covtpp/encoder.hpp"
#include "covtpp/fisan.hpp"

namespace covtpp {

struct Batch {
  std::size_t block = 0;
  std::vector<std::size_t> lengths;
  Tensor temporal;                    // rows x M
  std::vector<std::size_t> types;     // rows (input types)
  Tensor covariates;                  // rows x F
  Mask attention;                     // rows x block
  std::vector<double> tau;            // target inter-event time per predictor row
  std::vector<double> log_tau;
  std::vector<std::size_t> target_type;
  std::vector<unsigned char> event_mask;  // real predictor rows
  std::vector<unsigned char> time_mask;   // real rows with tau > 0

  std::size_t rows() const { return lengths.size() * block; }
  std::size_t events() const {
    std::size_t n = 0;
    for (auto m : event_mask) n += m;
    return n;
  }
  std::size_t timed_events() const {
    std::size_t n = 0;
    for (auto m : time_mask) n += m;
    return n;
  }
};

inline Batch make_batch(const std::vector<const EventSequence*>& seqs, const HyperParams& hp) {
  if (seqs.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch b;
  for (const auto* s : seqs) {
    if (s->size() == 0) throw DataError("make_batch: empty sequence");
    b.block = std::max(b.block, s->size());
    b.lengths.push_back(s->size());
  }
  const std::size_t rows = b.rows();
  std::vector<double> times(rows, 0.0);
  b.types.assign(rows, 0);
  b.covariates = Tensor(rows, hp.num_features);
  b.tau.assign(rows, 0.0);
  b.log_tau.assign(rows, 0.0);
  b.target_type.assign(rows, 0);
  b.event_mask.assign(rows, 0);
  b.time_mask.assign(rows, 0);
  for (std::size_t k = 0; k < seqs.size(); ++k) {
    const EventSequence& s = *seqs[k];
    if (s.num_features() != hp.num_features) throw ShapeError("make_batch: covariate width differs from model");
    for (std::size_t j = 0; j < s.size(); ++j) {
      const std::size_t r = k * b.block + j;
      times[r] = s.times[j];
      b.types[r] = s.types[j];
      std::copy(s.covariates.row_span(j).begin(), s.covariates.row_span(j).end(), b.covariates.row_span(r).begin());
      const double tau = s.times[j] - (j == 0 ? 0.0 : s.times[j - 1]);
      b.tau[r] = tau;
      b.target_type[r] = s.types[j];
      b.event_mask[r] = 1;
      if (tau > 0.0) {
        b.time_mask[r] = 1;
        b.log_tau[r] = std::log(tau);
      }
    }
  }
  b.temporal = temporal_encoding_matrix(times, hp.embed_dim, hp.time_scale);
  b.attention = causal_block_mask(b.lengths, b.block);
  return b;
}

struct ForwardOutput {
  AttentionOutput encoder;
  FisanOutput fisan;
  Var mix_logits, mix_means, mix_log_scales;  // predictor rows x C
  Var type_logits;                            // predictor rows x K
  Var time_nll;                               // rows x 1 (0 on masked rows)
  Var type_nll;                               // rows x 1
  Var time_loss;                              // mean time NLL per timed event
  Var type_loss;                              // mean type NLL per event
  Var total;                                  // uncertainty-weighted objective
};

class TransFeatModel {
 public:
  TransFeatModel() = default;

  TransFeatModel(const HyperParams& hp, std::uint64_t seed) : hp_(hp) {
    hp_.validate();
    std::mt19937_64 rng(seed);
    add_encoder_params(params_, hp_, rng);
    add_fisan_params(params_, hp_, rng);
    add_decoder_params(params_, hp_, rng);
  }

  TransFeatModel(const HyperParams& hp, ParamStore params) : hp_(hp), params_(std::move(params)) { hp_.validate(); }

  const HyperParams& hyperparams() const { return hp_; }
  HyperParams& hyperparams() { return hp_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  std::optional<Standardization> standardization;
  std::optional<std::uint64_t> split_seed;  // seed used to split an unsplit training file

  /// Builds the graph for a batch on `tape` (which must be bound to params()).
  /// `dropout_rng` enables dropout when the tape is in training mode.
  ForwardOutput forward(Tape& tape, const Batch& batch, std::mt19937_64* dropout_rng = nullptr) const {
    ForwardOutput out;
    Var x = embed_events(tape, batch.temporal, batch.types, batch.covariates, hp_);
    out.encoder = self_attention(tape, x, batch.attention, batch.block, hp_, dropout_rng);
    out.fisan = fisan_forward(tape, tape.constant(batch.covariates), hp_);

    Var h = shift_rows(out.encoder.hidden, batch.block, tape.param("enc.initial_state"));
    Var aux = shift_rows(out.fisan.aux, batch.block);

    out.mix_logits = add_bias(matmul(h, tape.param("dec.mix_weight.weight")), tape.param("dec.mix_weight.bias"));
    out.mix_means = add_bias(matmul(h, tape.param("dec.mix_mean.weight")), tape.param("dec.mix_mean.bias"));
    out.mix_log_scales = add_bias(matmul(h, tape.param("dec.mix_scale.weight")), tape.param("dec.mix_scale.bias"));
    out.time_nll = mixture_time_nll(out.mix_logits, out.mix_means, out.mix_log_scales,
                                    tape.param("dec.affine_log_scale"), tape.param("dec.affine_shift"),
                                    batch.log_tau, batch.time_mask);

    out.type_logits = add_bias(matmul(concat_cols({h, aux}), tape.param("dec.type.weight")), tape.param("dec.type.bias"));
    out.type_nll = softmax_cross_entropy(out.type_logits, batch.target_type, batch.event_mask);

    const double timed = static_cast<double>(std::max<std::size_t>(1, batch.timed_events()));
    const double events = static_cast<double>(std::max<std::size_t>(1, batch.events()));
    out.time_loss = scale(sum(out.time_nll), 1.0 / timed);
    out.type_loss = scale(sum(out.type_nll), 1.0 / events);
    out.total = total_loss(out.time_loss, out.type_loss, tape.param("loss.rho_time"), tape.param("loss.rho_type"));
    return out;
  }

 private:
  HyperParams hp_;
  ParamStore params_;
};

}  // namespace covtpp
