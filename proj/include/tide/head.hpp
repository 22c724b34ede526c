#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "tide/backbone.hpp"
#include "tide/fusion.hpp"
#include "tide/nn.hpp"

namespace tide {

struct ObjectQueries {
  Tensor q;                              // [N, d]
  std::size_t selected_count = 0;        // k
  std::vector<std::size_t> selected;     // token indices, best first
  Tensor reference;                      // [N, 4] box logits the box head refines
};

// Cell box of every token, CenterNorm: center of its grid cell, one cell
// wide and tall.
inline std::vector<std::array<double, 4>> token_cells(const std::vector<LevelShape>& levels) {
  std::vector<std::array<double, 4>> out;
  for (const auto& l : levels)
    for (std::size_t r = 0; r < l.h; ++r)
      for (std::size_t c = 0; c < l.w; ++c)
        out.push_back({(c + 0.5) / static_cast<double>(l.w), (r + 0.5) / static_cast<double>(l.h),
                       1.0 / static_cast<double>(l.w), 1.0 / static_cast<double>(l.h)});
  return out;
}

inline double inverse_sigmoid(double p, double eps = 1e-5) {
  p = std::clamp(p, eps, 1.0 - eps);
  return std::log(p / (1.0 - p));
}

// Reference logits for the queries: selected tokens start from their cell,
// learnable rows from the whole-image center box (logit 0).
inline Tensor reference_logits(const std::vector<LevelShape>& levels, const std::vector<std::size_t>& selected,
                               std::size_t n_total) {
  const auto cells = token_cells(levels);
  std::vector<double> v(n_total * 4, 0.0);
  for (std::size_t i = 0; i < selected.size(); ++i)
    for (std::size_t k = 0; k < 4; ++k) v[i * 4 + k] = inverse_sigmoid(cells.at(selected[i])[k]);
  return Tensor({n_total, 4}, std::move(v));
}

// Top-k indices by descending score; ties go to the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  if (k > scores.size()) throw ConfigError("top-k: k exceeds candidate count");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

// Support-guided query selection: score every token by its best dot product
// with any support row, take the k best tokens, and append the learnable
// rows (N - k of them).
inline ObjectQueries select_queries(const Tensor& tokens, const Tensor& support, std::size_t k,
                                    const Tensor& learnable) {
  if (tokens.rank() != 2 || support.rank() != 2 || tokens.dim(1) != support.dim(1))
    throw DimError("select_queries: token/support width mismatch");
  if (k > tokens.dim(0)) throw ConfigError("select_queries: k exceeds query token count");
  const std::size_t T = tokens.dim(0), m = support.dim(0);
  std::vector<double> best(T, -std::numeric_limits<double>::infinity());
  {
    NoGradGuard ng;
    const Tensor sim = matmul(tokens, support, true);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < m; ++j) best[t] = std::max(best[t], sim[t * m + j]);
  }
  ObjectQueries out;
  out.selected = top_k_indices(best, k);
  out.selected_count = k;
  if (k == 0) {
    out.q = learnable;
  } else if (!learnable.defined() || learnable.dim(0) == 0) {
    out.q = index_select(tokens, out.selected);
  } else {
    out.q = concat({index_select(tokens, out.selected), learnable}, 0);
  }
  return out;
}

struct DecoderConfig {
  std::size_t layers = 6;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 0;

  std::size_t hidden() const { return ffn_dim ? ffn_dim : 4 * d; }
};

// Pre-norm decoder layer: self-attention over the queries, cross-attention
// into the query-image tokens, cross-attention into the support rows, FFN.
class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(ParameterStore& ps, const std::string& name, const DecoderConfig& cfg, Rng& rng)
      : ln_self_(ps, name + ".ln_self", cfg.d, rng),
        ln_img_q_(ps, name + ".ln_img_q", cfg.d, rng),
        ln_img_kv_(ps, name + ".ln_img_kv", cfg.d, rng),
        ln_sup_q_(ps, name + ".ln_sup_q", cfg.d, rng),
        ln_sup_kv_(ps, name + ".ln_sup_kv", cfg.d, rng),
        ln_ffn_(ps, name + ".ln_ffn", cfg.d, rng),
        self_attn_(ps, name + ".self_attn", cfg.d, cfg.heads, rng),
        img_attn_(ps, name + ".image_cross_attn", cfg.d, cfg.heads, rng),
        sup_attn_(ps, name + ".support_cross_attn", cfg.d, cfg.heads, rng),
        ffn_(ps, name + ".ffn", cfg.d, cfg.hidden(), rng) {}

  Tensor operator()(const Tensor& c, const Tensor& z, const Tensor& s) const {
    const Tensor a = ln_self_(c);
    const Tensor c1 = add(c, self_attn_(a, a, a));
    const Tensor zn = ln_img_kv_(z);
    const Tensor c2 = add(c1, img_attn_(ln_img_q_(c1), zn, zn));
    const Tensor sn = ln_sup_kv_(s);
    const Tensor c3 = add(c2, sup_attn_(ln_sup_q_(c2), sn, sn));
    return add(c3, ffn_(ln_ffn_(c3)));
  }

 private:
  LayerNorm ln_self_, ln_img_q_, ln_img_kv_, ln_sup_q_, ln_sup_kv_, ln_ffn_;
  MultiHeadAttention self_attn_, img_attn_, sup_attn_;
  FeedForward ffn_;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(ParameterStore& ps, const DecoderConfig& cfg, Rng& rng) {
    for (std::size_t l = 0; l < cfg.layers; ++l)
      layers_.emplace_back(ps, "decoder.layer" + std::to_string(l), cfg, rng);
  }

  // States C^1..C^L, starting from C^0 = queries.
  std::vector<Tensor> operator()(const Tensor& queries, const Tensor& z, const Tensor& s) const {
    std::vector<Tensor> states;
    Tensor c = queries;
    for (const auto& layer : layers_) {
      c = layer(c, z, s);
      states.push_back(c);
    }
    return states;
  }

 private:
  std::vector<DecoderLayer> layers_;
};

// Dynamic contrastive classifier: logits over support positions,
// (C W_l) S^T, with one projection per decoder layer.
inline Tensor contrastive_logits(const Tensor& c, const Tensor& support, const Linear& projection) {
  if (support.rank() != 2 || support.dim(0) == 0) throw ConfigError("classifier needs at least one support row");
  if (c.dim(1) != support.dim(1)) throw DimError("classifier: state and support widths differ");
  return matmul(projection(c), support, true);
}

inline Tensor classify(const Tensor& c, const Tensor& support, const Linear& projection) {
  return softmax(contrastive_logits(c, support, projection), -1);
}

// Box MLP: (layers-1) hidden ReLU layers then a 4-way offset added to the
// reference logits and squashed by the logistic map into (0,1).
class BoxHead {
 public:
  BoxHead() = default;
  BoxHead(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t layers, Rng& rng) {
    if (layers < 1) throw ConfigError("box head needs at least one layer");
    for (std::size_t i = 0; i + 1 < layers; ++i)
      hidden_.emplace_back(ps, name + ".layer" + std::to_string(i), d, d, rng, Init::He);
    out_ = Linear(ps, name + ".layer" + std::to_string(layers - 1), d, 4, rng, Init::Zeros);
  }

  Tensor operator()(const Tensor& c, const Tensor& reference = {}) const {
    Tensor x = c;
    for (const auto& l : hidden_) x = relu(l(x));
    x = out_(x);
    return sigmoid(reference.defined() ? add(x, reference) : x);
  }

 private:
  std::vector<Linear> hidden_;
  Linear out_;
};

inline Tensor regress_boxes(const BoxHead& head, const Tensor& c, const Tensor& reference = {}) {
  return head(c, reference);
}

}  // namespace tide
