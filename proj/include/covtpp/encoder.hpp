#pragma once

// Dependence module: (time, type, covariate) embeddings followed by causal
// multi-head self-attention and a position-wise feed-forward network.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "covtpp/autodiff.hpp"
#include "covtpp/data.hpp"
#include "covtpp/errors.hpp"
#include "covtpp/param_store.hpp"

namespace covtpp {

struct HyperParams {
  std::size_t embed_dim = 64;            // M
  std::size_t key_dim = 64;              // M_K
  std::size_t value_dim = 32;            // M_V
  std::size_t heads = 2;                 // H
  std::size_t fisan_heads = 2;           // H~
  std::size_t mixture_components = 16;   // C
  std::size_t num_types = 2;             // K
  std::size_t num_features = 1;          // F
  std::size_t aux_dim = 64;              // F_aux, Fi-SAN intermediate width
  std::size_t ffn_dim = 64;              // position-wise FFN hidden width
  std::size_t layers = 1;
  bool residual_layer_norm = true;       // false: literal S -> FFN stack
  double dropout = 0.0;
  double time_scale = 1.0;               // timestamps are divided by this before encoding

  void validate() const {
    auto need = [](bool ok, const char* msg) {
      if (!ok) throw UsageError(std::string("invalid hyperparameters: ") + msg);
    };
    need(embed_dim > 0 && key_dim > 0 && value_dim > 0 && heads > 0 && fisan_heads > 0, "dimensions must be positive");
    need(mixture_components > 0 && num_types > 0 && num_features > 0, "C, K and F must be positive");
    need(aux_dim > 0 && ffn_dim > 0 && layers > 0, "aux_dim, ffn_dim and layers must be positive");
    need(embed_dim % 2 == 0, "embed_dim must be even");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
    need(time_scale > 0.0, "time_scale must be positive");
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

inline void to_json(nlohmann::json& j, const HyperParams& h) {
  j = nlohmann::json{{"embed_dim", h.embed_dim},
                     {"key_dim", h.key_dim},
                     {"value_dim", h.value_dim},
                     {"heads", h.heads},
                     {"fisan_heads", h.fisan_heads},
                     {"mixture_components", h.mixture_components},
                     {"num_types", h.num_types},
                     {"num_features", h.num_features},
                     {"aux_dim", h.aux_dim},
                     {"ffn_dim", h.ffn_dim},
                     {"layers", h.layers},
                     {"residual_layer_norm", h.residual_layer_norm},
                     {"dropout", h.dropout},
                     {"time_scale", h.time_scale}};
}

inline void from_json(const nlohmann::json& j, HyperParams& h) {
  j.at("embed_dim").get_to(h.embed_dim);
  j.at("key_dim").get_to(h.key_dim);
  j.at("value_dim").get_to(h.value_dim);
  j.at("heads").get_to(h.heads);
  j.at("fisan_heads").get_to(h.fisan_heads);
  j.at("mixture_components").get_to(h.mixture_components);
  j.at("num_types").get_to(h.num_types);
  j.at("num_features").get_to(h.num_features);
  j.at("aux_dim").get_to(h.aux_dim);
  j.at("ffn_dim").get_to(h.ffn_dim);
  j.at("layers").get_to(h.layers);
  j.at("residual_layer_norm").get_to(h.residual_layer_norm);
  j.at("dropout").get_to(h.dropout);
  j.at("time_scale").get_to(h.time_scale);
}

/// Sinusoidal encoding: entry j (1-based) is cos(t / 10000^((j-1)/M)) for odd
/// j and sin(t / 10000^(j/M)) for even j.
inline std::vector<double> temporal_encode(double t, std::size_t dim) {
  if (dim < 2) throw std::invalid_argument("temporal_encode: dimension must be >= 2");
  std::vector<double> z(dim);
  const double m = static_cast<double>(dim);
  for (std::size_t k = 0; k < dim; ++k) {
    if (k % 2 == 0) {
      z[k] = std::cos(t / std::pow(10000.0, static_cast<double>(k) / m));
    } else {
      z[k] = std::sin(t / std::pow(10000.0, static_cast<double>(k + 1) / m));
    }
  }
  return z;
}

/// Rows of temporal encodings, one per timestamp.
inline Tensor temporal_encoding_matrix(const std::vector<double>& times, std::size_t dim, double time_scale = 1.0) {
  Tensor z(times.size(), dim);
  for (std::size_t i = 0; i < times.size(); ++i) {
    auto row = temporal_encode(times[i] / time_scale, dim);
    std::copy(row.begin(), row.end(), z.row_span(i).begin());
  }
  return z;
}

namespace names {
inline std::string layer(std::size_t l, const std::string& leaf) { return "enc.l" + std::to_string(l) + "." + leaf; }
inline std::string head(std::size_t l, const char* kind, std::size_t h) {
  return layer(l, std::string(kind) + ".h" + std::to_string(h));
}
}  // namespace names

template <class Rng>
void add_encoder_params(ParamStore& store, const HyperParams& hp, Rng& rng) {
  const std::size_t m = hp.embed_dim;
  // Type table stored one row per type: row k is the embedding of type k.
  store.add("enc.type_embedding", init_uniform(hp.num_types, m, hp.num_types, rng));
  store.add("enc.covariate_embedding", init_uniform(hp.num_features, m, hp.num_features, rng));
  store.add("enc.initial_state", Tensor(1, m));
  for (std::size_t l = 0; l < hp.layers; ++l) {
    for (std::size_t h = 0; h < hp.heads; ++h) {
      store.add(names::head(l, "query", h), init_uniform(m, hp.key_dim, m, rng));
      store.add(names::head(l, "key", h), init_uniform(m, hp.key_dim, m, rng));
      store.add(names::head(l, "value", h), init_uniform(m, hp.value_dim, m, rng));
    }
    store.add(names::layer(l, "out"), init_uniform(hp.heads * hp.value_dim, m, hp.heads * hp.value_dim, rng));
    store.add(names::layer(l, "ffn1.weight"), init_uniform(m, hp.ffn_dim, m, rng));
    store.add(names::layer(l, "ffn1.bias"), Tensor(1, hp.ffn_dim));
    store.add(names::layer(l, "ffn2.weight"), init_uniform(hp.ffn_dim, m, hp.ffn_dim, rng));
    store.add(names::layer(l, "ffn2.bias"), Tensor(1, m));
    if (hp.residual_layer_norm) {
      store.add(names::layer(l, "norm1.gain"), Tensor(1, m, 1.0));
      store.add(names::layer(l, "norm1.bias"), Tensor(1, m));
      store.add(names::layer(l, "norm2.gain"), Tensor(1, m, 1.0));
      store.add(names::layer(l, "norm2.bias"), Tensor(1, m));
    }
  }
}

/// Causal attention mask for `count` stacked blocks of length `block`:
/// row i of block b may see keys j <= i with j < lengths[b].
inline Mask causal_block_mask(const std::vector<std::size_t>& lengths, std::size_t block) {
  Mask mask(lengths.size() * block, block, false);
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t i = 0; i < block; ++i)
      for (std::size_t j = 0; j <= i && j < lengths[b]; ++j) mask.set(b * block + i, j, true);
  return mask;
}

/// X = Z + E + F for stacked rows: Z is the (constant) temporal encoding,
/// E the type-embedding rows, F = covariates * W.
inline Var embed_events(Tape& tape, const Tensor& temporal, const std::vector<std::size_t>& types,
                        const Tensor& covariates, const HyperParams& hp) {
  if (temporal.cols() != hp.embed_dim || covariates.cols() != hp.num_features || types.size() != temporal.rows() ||
      covariates.rows() != temporal.rows()) {
    throw ShapeError("embed_events: inconsistent input shapes");
  }
  for (auto y : types)
    if (y >= hp.num_types) throw DataError("type index " + std::to_string(y) + " >= K=" + std::to_string(hp.num_types));
  Var z = tape.constant(temporal);
  Var e = gather_rows(tape.param("enc.type_embedding"), types);
  Var f = matmul(tape.constant(covariates), tape.param("enc.covariate_embedding"));
  return add(add(z, e), f);
}

/// Single-sequence embedding, shape L x M.
inline Var embed_sequence(Tape& tape, const EventSequence& s, const HyperParams& hp) {
  return embed_events(tape, temporal_encoding_matrix(s.times, hp.embed_dim, hp.time_scale), s.types, s.covariates, hp);
}

struct AttentionOutput {
  Var hidden;                    // H1, rows x M
  std::vector<Var> weights;      // per layer-major, per head attention rows x block
};

/// Stacked encoder layers over a batch of `block`-length padded sequences.
template <class Rng>
AttentionOutput self_attention(Tape& tape, Var x, const Mask& mask, std::size_t block, const HyperParams& hp,
                               Rng* dropout_rng) {
  if (x.cols() != hp.embed_dim) throw ShapeError("self_attention: input width " + x.value().shape_string());
  if (mask.rows != x.rows() || mask.cols != block) throw ShapeError("self_attention: mask shape");
  AttentionOutput out;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(hp.key_dim));
  auto drop = [&](Var v) { return dropout_rng != nullptr ? dropout(v, hp.dropout, *dropout_rng) : v; };

  for (std::size_t l = 0; l < hp.layers; ++l) {
    std::vector<Var> heads;
    for (std::size_t h = 0; h < hp.heads; ++h) {
      Var q = matmul(x, tape.param(names::head(l, "query", h)));
      Var k = matmul(x, tape.param(names::head(l, "key", h)));
      Var v = matmul(x, tape.param(names::head(l, "value", h)));
      Var w = masked_softmax(scale(block_matmul_nt(q, k, block), inv_sqrt_dk), mask);
      out.weights.push_back(w);
      heads.push_back(block_matmul(w, v, block));
    }
    Var s = matmul(heads.size() == 1 ? heads.front() : concat_cols(heads), tape.param(names::layer(l, "out")));
    auto ffn = [&](Var in) {
      Var hidden = relu(add_bias(matmul(in, tape.param(names::layer(l, "ffn1.weight"))),
                                 tape.param(names::layer(l, "ffn1.bias"))));
      return add_bias(matmul(hidden, tape.param(names::layer(l, "ffn2.weight"))),
                      tape.param(names::layer(l, "ffn2.bias")));
    };
    if (hp.residual_layer_norm) {
      Var a = layer_norm(add(x, drop(s)), tape.param(names::layer(l, "norm1.gain")),
                         tape.param(names::layer(l, "norm1.bias")));
      x = layer_norm(add(a, drop(ffn(a))), tape.param(names::layer(l, "norm2.gain")),
                     tape.param(names::layer(l, "norm2.bias")));
    } else {
      x = ffn(s);
    }
  }
  out.hidden = x;
  return out;
}

inline AttentionOutput self_attention(Tape& tape, Var x, const Mask& mask, std::size_t block, const HyperParams& hp) {
  return self_attention<std::mt19937_64>(tape, x, mask, block, hp, nullptr);
}

}  // namespace covtpp
