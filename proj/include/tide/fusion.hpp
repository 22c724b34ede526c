#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tide/backbone.hpp"
#include "tide/nn.hpp"

namespace tide {

struct FusionConfig {
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t d = 64;
  std::size_t dmsa_points = 4;
  std::size_t ffn_dim = 0;  // 0 -> 4d
  bool enable_bmha = true;

  std::size_t hidden() const { return ffn_dim ? ffn_dim : 4 * d; }
};

// Query tokens of all levels stacked level-major, with their grid layout.
struct TokenGrid {
  Tensor tokens;  // [T, d]
  Tensor pos;     // [T, d]
  std::vector<LevelShape> levels;
};

inline TokenGrid flatten_levels(const QueryFeatures& qf) {
  if (qf.levels.empty()) throw DimError("query features have no levels");
  std::vector<Tensor> toks, pos;
  TokenGrid g;
  for (const auto& l : qf.levels) {
    if (l.tokens.dim(0) != l.h * l.w) throw DimError("level token count does not match its grid");
    toks.push_back(l.tokens);
    pos.push_back(l.pos);
    g.levels.push_back({l.h, l.w});
  }
  g.tokens = concat(toks, 0);
  g.pos = concat(pos, 0);
  return g;
}

// Bi-directional multi-head attention with one shared logit matrix
// A = LN(z)Wq (LN(s)Wk)^T / sqrt(d/heads): query tokens read support rows
// through the row softmax of A, support rows read query tokens through the
// column softmax. Both branches are residual, each scaled by a learnable
// per-channel gain that starts at 1e-4 (GLIP layer scale), so fusion opens
// gradually. Positional embeddings, when given, are added to the attention
// inputs only, never to the values.
class BiAttention {
 public:
  BiAttention() = default;
  BiAttention(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t heads, Rng& rng)
      : heads_(heads),
        ln_z_(ps, name + ".ln_z", d, rng),
        ln_s_(ps, name + ".ln_s", d, rng),
        wq_(ps, name + ".w_q", d, d, rng),
        wk_(ps, name + ".w_k", d, d, rng),
        wv_s_(ps, name + ".w_v", d, d, rng),
        wv_z_(ps, name + ".w_v_prime", d, d, rng),
        wo_z_(ps, name + ".w_o_z", d, d, rng),
        wo_s_(ps, name + ".w_o_s", d, d, rng),
        gamma_z_(ps.create(name + ".gamma_z", {d}, Init::Ones, rng)),
        gamma_s_(ps.create(name + ".gamma_s", {d}, Init::Ones, rng)) {
    if (heads == 0 || d % heads != 0) throw ConfigError("BMHA width not divisible by heads");
    for (Tensor g : {gamma_z_, gamma_s_})
      for (auto& v : g.mutable_data()) v = kLayerScaleInit;
  }

  struct Output {
    Tensor z, s;
    Tensor attention;  // [T, m] row-softmax weights averaged over heads
  };

  Output operator()(const Tensor& z, const Tensor& s, const Tensor& z_pos = {}, const Tensor& s_pos = {}) const {
    if (z.dim(1) != s.dim(1)) throw DimError("BMHA: token width and support width differ");
    const std::size_t T = z.dim(0), m = s.dim(0), d = z.dim(1);
    const Tensor zn = ln_z_(z), sn = ln_s_(s);
    auto heads3 = [&](const Tensor& t) { return split_heads(reshape(t, {1, t.dim(0), d}), heads_); };
    const Tensor q = heads3(wq_(z_pos.defined() ? add(zn, z_pos) : zn));
    const Tensor k = heads3(wk_(s_pos.defined() ? add(sn, s_pos) : sn));
    const Tensor vs = heads3(wv_s_(sn)), vz = heads3(wv_z_(zn));
    const Tensor logits = scale(matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(d / heads_)));  // [H,T,m]
    const Tensor a_row = softmax(logits, 2);
    const Tensor a_col = softmax(logits, 1);
    const Tensor dz = reshape(merge_heads(matmul(a_row, vs), heads_), {T, d});
    const Tensor ds = reshape(merge_heads(matmul(transpose(a_col), vz), heads_), {m, d});
    Output out{add(z, mul(wo_z_(dz), gamma_z_)), add(s, mul(wo_s_(ds), gamma_s_)), {}};
    std::vector<double> avg(T * m, 0.0);
    for (std::size_t h = 0; h < heads_; ++h)
      for (std::size_t i = 0; i < T * m; ++i) avg[i] += a_row[h * T * m + i] / static_cast<double>(heads_);
    out.attention = Tensor({T, m}, std::move(avg));
    return out;
  }

 private:
  std::size_t heads_ = 1;
  LayerNorm ln_z_, ln_s_;
  static constexpr double kLayerScaleInit = 1e-4;
  Linear wq_, wk_, wv_s_, wv_z_, wo_z_, wo_s_;
  Tensor gamma_z_, gamma_s_;
};

// Deformable multi-scale attention on the query branch: every token samples
// `points` locations per head and level around its own normalized grid
// position, weighted by a softmax over (level, point) per head. Support rows
// have no spatial layout and use plain multi-head self-attention.
class DeformableAttention {
 public:
  DeformableAttention() = default;
  DeformableAttention(ParameterStore& ps, const std::string& name, const FusionConfig& cfg, std::size_t n_levels,
                      Rng& rng)
      : heads_(cfg.heads), levels_(n_levels), points_(cfg.dmsa_points) {
    const std::size_t d = cfg.d, hlp = heads_ * levels_ * points_;
    ln_z_ = LayerNorm(ps, name + ".ln_z", d, rng);
    ln_s_ = LayerNorm(ps, name + ".ln_s", d, rng);
    offsets_ = Linear(ps, name + ".sampling_offsets", d, hlp * 2, rng, Init::Zeros);
    // Offset bias: head k points along angle 2*pi*k/heads, point p at
    // distance p+1 (in cells of its level). Summed over heads this is 0.
    auto bias = offsets_.bias.mutable_data();
    for (std::size_t h = 0; h < heads_; ++h) {
      const double th = 2.0 * 3.14159265358979323846 * static_cast<double>(h) / static_cast<double>(heads_);
      double cx = std::cos(th), cy = std::sin(th);
      const double norm = std::max(std::fabs(cx), std::fabs(cy));
      cx /= norm;
      cy /= norm;
      for (std::size_t l = 0; l < levels_; ++l)
        for (std::size_t p = 0; p < points_; ++p) {
          const std::size_t s = ((h * levels_ + l) * points_ + p) * 2;
          bias[s] = cx * static_cast<double>(p + 1);
          bias[s + 1] = cy * static_cast<double>(p + 1);
        }
    }
    weights_ = Linear(ps, name + ".attention_weights", d, hlp, rng, Init::Zeros);
    value_ = Linear(ps, name + ".value_proj", d, d, rng);
    out_ = Linear(ps, name + ".output_proj", d, d, rng);
    support_attn_ = MultiHeadAttention(ps, name + ".support_attn", d, heads_, rng);
  }

  struct Output {
    Tensor z, s;
    Tensor locations;  // [T, H, L, P, 2]
    Tensor weights;    // [T, H, L, P]
  };

  Output operator()(const TokenGrid& g, const Tensor& s, const Tensor& s_pos = {}) const {
    if (g.levels.size() != levels_) throw DimError("DMSA: level count differs from construction");
    std::size_t T = 0;
    for (const auto& l : g.levels) T += l.h * l.w;
    if (g.tokens.dim(0) != T) throw DimError("DMSA: tokens do not match grid shapes");
    const std::size_t H = heads_, L = levels_, P = points_;

    // reference point of every token, broadcast over heads/levels/points
    std::vector<double> ref(T * H * L * P * 2);
    std::size_t t = 0;
    for (const auto& lv : g.levels)
      for (std::size_t i = 0; i < lv.h; ++i)
        for (std::size_t j = 0; j < lv.w; ++j, ++t) {
          const double rx = (static_cast<double>(j) + 0.5) / static_cast<double>(lv.w);
          const double ry = (static_cast<double>(i) + 0.5) / static_cast<double>(lv.h);
          for (std::size_t k = 0; k < H * L * P; ++k) {
            ref[(t * H * L * P + k) * 2] = rx;
            ref[(t * H * L * P + k) * 2 + 1] = ry;
          }
        }
    std::vector<double> inv(H * L * P * 2);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t s2 = ((h * L + l) * P + p) * 2;
          inv[s2] = 1.0 / static_cast<double>(g.levels[l].w);
          inv[s2 + 1] = 1.0 / static_cast<double>(g.levels[l].h);
        }

    const Tensor zn = ln_z_(g.tokens);
    const Tensor q = add(zn, g.pos);
    const Tensor off = mul(reshape(offsets_(q), {T, H, L, P, 2}), Tensor({H, L, P, 2}, std::move(inv)));
    const Tensor loc = clamp(add(off, Tensor({T, H, L, P, 2}, std::move(ref))), 0.0, 1.0);
    const Tensor w = reshape(softmax(reshape(weights_(q), {T, H, L * P}), -1), {T, H, L, P});
    const Tensor agg = deformable_aggregate(value_(zn), g.levels, loc, w);
    const Tensor sn = ln_s_(s);
    const Tensor sq = s_pos.defined() ? add(sn, s_pos) : sn;
    return {add(g.tokens, out_(agg)), add(s, support_attn_(sq, sq, sn)), loc, w};
  }

 private:
  std::size_t heads_ = 1, levels_ = 1, points_ = 1;
  LayerNorm ln_z_, ln_s_;
  Linear offsets_, weights_, value_, out_;
  MultiHeadAttention support_attn_;
};

// Tokenwise pre-norm FFN with separate parameters per branch.
class FusionFFN {
 public:
  FusionFFN() = default;
  FusionFFN(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t hidden, Rng& rng)
      : ln_z_(ps, name + ".ln_z", d, rng),
        ln_s_(ps, name + ".ln_s", d, rng),
        ffn_z_(ps, name + ".ffn_z", d, hidden, rng),
        ffn_s_(ps, name + ".ffn_s", d, hidden, rng) {}

  std::pair<Tensor, Tensor> operator()(const Tensor& z, const Tensor& s) const {
    return {add(z, ffn_z_(ln_z_(z))), add(s, ffn_s_(ln_s_(s)))};
  }

 private:
  LayerNorm ln_z_, ln_s_;
  FeedForward ffn_z_, ffn_s_;
};

struct FusionOutput {
  Tensor z;                               // Z^L [T, d]
  Tensor s;                               // S^L [m, d]
  std::vector<Tensor> bmha_attention;     // per layer [T, m] (empty when BMHA disabled)
  std::vector<Tensor> sampling_locations; // per layer [T, H, L, P, 2]
  std::vector<Tensor> sampling_weights;   // per layer [T, H, L, P]
};

// L layers of BMHA -> DMSA -> FFN.
class FusionEncoder {
 public:
  FusionEncoder() = default;
  FusionEncoder(ParameterStore& ps, const FusionConfig& cfg, std::size_t n_levels, Rng& rng) : cfg_(cfg) {
    if (cfg.d % cfg.heads != 0) throw ConfigError("fusion width not divisible by heads");
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "fusion.layer" + std::to_string(l);
      if (cfg.enable_bmha) bmha_.emplace_back(ps, p + ".bmha", cfg.d, cfg.heads, rng);
      dmsa_.emplace_back(ps, p + ".dmsa", cfg, n_levels, rng);
      ffn_.emplace_back(ps, p + ".ffn", cfg.d, cfg.hidden(), rng);
    }
  }

  const FusionConfig& config() const { return cfg_; }

  FusionOutput operator()(const TokenGrid& grid, const Tensor& support, const Tensor& support_pos = {}) const {
    if (grid.tokens.dim(1) != support.dim(1)) throw DimError("fusion: query and support widths differ");
    FusionOutput out;
    Tensor z = grid.tokens, s = support;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      if (cfg_.enable_bmha) {
        auto b = bmha_[l](z, s, grid.pos, support_pos);
        z = b.z;
        s = b.s;
        out.bmha_attention.push_back(b.attention);
      }
      auto dm = dmsa_[l]({z, grid.pos, grid.levels}, s, support_pos);
      out.sampling_locations.push_back(dm.locations);
      out.sampling_weights.push_back(dm.weights);
      std::tie(z, s) = ffn_[l](dm.z, dm.s);
    }
    out.z = z;
    out.s = s;
    return out;
  }

 private:
  FusionConfig cfg_;
  std::vector<BiAttention> bmha_;
  std::vector<DeformableAttention> dmsa_;
  std::vector<FusionFFN> ffn_;
};

}  // namespace tide
