#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tide/backbone.hpp"
#include "tide/fusion.hpp"
#include "tide/head.hpp"

namespace tide {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t layers = 6;  // fusion layers and decoder layers
  std::size_t num_queries = 32;
  std::size_t select_k = 16;
  std::size_t dmsa_points = 4;
  std::size_t ffn_dim = 0;  // 0 -> 4d
  std::size_t query_patch = 8;
  std::size_t query_levels = 3;
  std::size_t query_blocks = 2;
  std::size_t support_patch = 16;
  std::size_t support_blocks = 3;
  std::size_t box_layers = 6;
  bool enable_bmha = true;
  bool enable_dcc = true;
  bool support_pos_embed = true;
  bool use_multiscale = false;
  bool select_with_raw_support = false;

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) throw ConfigError("d must be a positive multiple of heads");
    if (d % 4 != 0) throw ConfigError("d must be a multiple of 4 (sine embeddings)");
    if (select_k > num_queries) throw ConfigError("select_k must not exceed num_queries");
    if (num_queries == 0) throw ConfigError("num_queries must be positive");
    if (query_levels < 2) throw ConfigError("query_levels must be >= 2");
    if (dmsa_points == 0) throw ConfigError("dmsa_points must be positive");
    if (box_layers == 0) throw ConfigError("box_layers must be positive");
  }
};

// Predictions of one decoder layer.
struct LayerPrediction {
  Tensor log_probs;  // [N, m], differentiable
  Tensor probs;      // [N, m], values only
  Tensor boxes;      // [N, 4] CenterNorm in (0,1), differentiable
};

// The fixed-size candidate set a forward pass emits (top decoder layer).
struct DetectionSet {
  Tensor class_dist;  // [N, m]
  Tensor boxes;       // [N, 4]
  std::size_t null_index = 0;
};

struct ForwardResult {
  std::vector<LayerPrediction> layers;
  FusionOutput fusion;
  ObjectQueries queries;
  std::size_t null_index = 0;

  DetectionSet detections() const {
    return {layers.back().probs.detach(), layers.back().boxes.detach(), null_index};
  }
};

class TideModel {
 public:
  TideModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    BackboneConfig bb{cfg.d, cfg.heads, cfg.ffn_dim, cfg.query_patch, cfg.query_levels, cfg.query_blocks,
                      cfg.support_patch, cfg.support_blocks};
    query_encoder_ = QueryEncoder(params_, bb, rng);
    support_encoder_ = SupportEncoder(params_, bb, rng);
    FusionConfig fc{cfg.layers, cfg.heads, cfg.d, cfg.dmsa_points, cfg.ffn_dim, cfg.enable_bmha};
    fusion_ = FusionEncoder(params_, fc, cfg.query_levels, rng);
    if (cfg.num_queries > cfg.select_k)
      learnable_queries_ = params_.create("head.learnable_queries", {cfg.num_queries - cfg.select_k, cfg.d},
                                          Init::Normal02, rng);
    decoder_ = Decoder(params_, {cfg.layers, cfg.d, cfg.heads, cfg.ffn_dim}, rng);
    norm_c_ = LayerNorm(params_, "head.norm_c", cfg.d, rng);
    norm_s_ = LayerNorm(params_, "head.norm_s", cfg.d, rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      if (cfg.enable_dcc)
        class_proj_.emplace_back(params_, "head.class_proj" + std::to_string(l), cfg.d, cfg.d, rng, Init::Normal02);
      else
        class_proj_.emplace_back(params_, "head.binary_class" + std::to_string(l), cfg.d, 2, rng);
    }
    box_head_ = BoxHead(params_, "head.box", cfg.d, cfg.box_layers, rng);
  }

  TideModel(const TideModel&) = delete;
  TideModel& operator=(const TideModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const QueryEncoder& query_encoder() const { return query_encoder_; }
  const SupportEncoder& support_encoder() const { return support_encoder_; }
  const FusionEncoder& fusion() const { return fusion_; }

  SupportFeatures encode_support(const std::vector<Image>& images) const {
    return support_encoder_(images, cfg_.use_multiscale);
  }

  ForwardResult forward(const Image& query, const std::vector<Image>& support, std::size_t null_index) const {
    return forward(query, encode_support(support), null_index);
  }

  ForwardResult forward(const Image& query, SupportFeatures sf, std::size_t null_index) const {
    const std::size_t m = sf.rows.dim(0);
    if (m == 0) throw ConfigError("forward needs at least one support row");
    if (sf.rows.dim(1) != cfg_.d) throw ConfigError("support rows width does not match model width");
    if (null_index >= m) throw ConfigError("null index outside the support rows");
    const Tensor s = sf.rows;
    const Tensor s_pos = cfg_.support_pos_embed ? sine_positional_embedding(m, 1, cfg_.d) : Tensor();

    ForwardResult out;
    out.null_index = null_index;
    const TokenGrid grid = flatten_levels(query_encoder_(query));
    out.fusion = fusion_(grid, s, s_pos);
    if (cfg_.select_k > grid.tokens.dim(0)) throw ConfigError("select_k exceeds the number of query tokens");
    out.queries = select_queries(out.fusion.z, cfg_.select_with_raw_support ? s : out.fusion.s, cfg_.select_k,
                                 learnable_queries_);
    out.queries.reference = reference_logits(grid.levels, out.queries.selected, out.queries.q.dim(0));
    const auto states = decoder_(out.queries.q, out.fusion.z, out.fusion.s);
    const Tensor s_n = norm_s_(out.fusion.s);
    for (std::size_t l = 0; l < states.size(); ++l) {
      LayerPrediction p;
      const Tensor c_n = norm_c_(states[l]);
      p.log_probs = cfg_.enable_dcc ? log_softmax(contrastive_logits(c_n, s_n, class_proj_[l]), -1)
                                    : binary_log_probs(c_n, m, null_index, class_proj_[l]);
      std::vector<double> pr(p.log_probs.size());
      for (std::size_t i = 0; i < pr.size(); ++i) pr[i] = std::exp(p.log_probs[i]);
      p.probs = Tensor(p.log_probs.shape(), std::move(pr));
      p.boxes = box_head_(c_n, out.queries.reference);
      out.layers.push_back(std::move(p));
    }
    if (out.layers.empty()) throw ConfigError("model has no decoder layers");
    return out;
  }

  DetectionSet detect(const Image& query, const std::vector<Image>& support, std::size_t null_index) const {
    NoGradGuard ng;
    return forward(query, support, null_index).detections();
  }

 private:
  // Target/non-target head spread over positions: every non-null position
  // gets p(target)/(m-1), the null position gets p(non-target).
  static Tensor binary_log_probs(const Tensor& c, std::size_t m, std::size_t null_index, const Linear& head) {
    const Tensor lp = log_softmax(head(c), -1);  // [N,2]
    if (m == 1) return reshape(slice(lp, 1, 1, 1), {c.dim(0), 1});
    std::vector<double> g(2 * m, 0.0), offset(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      if (j == null_index) {
        g[m + j] = 1.0;
      } else {
        g[j] = 1.0;
        offset[j] = -std::log(static_cast<double>(m - 1));
      }
    }
    return add(matmul(lp, Tensor({2, m}, std::move(g))), Tensor({m}, std::move(offset)));
  }

  ModelConfig cfg_;
  ParameterStore params_;
  QueryEncoder query_encoder_;
  SupportEncoder support_encoder_;
  FusionEncoder fusion_;
  Tensor learnable_queries_;
  Decoder decoder_;
  LayerNorm norm_c_, norm_s_;
  std::vector<Linear> class_proj_;
  BoxHead box_head_;
};

}  // namespace tide
