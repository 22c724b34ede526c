#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tide/checkpoint.hpp"
#include "tide/data.hpp"
#include "tide/nn.hpp"

namespace tide {

// Fixed 2-D sine/cosine embedding: the first d/2 channels encode the row,
// the last d/2 the column, as interleaved (sin, cos) pairs with frequencies
// 10000^(-2i/(d/2)). Positions are normalized to (0, 2*pi].
inline Tensor sine_positional_embedding(std::size_t h, std::size_t w, std::size_t d) {
  if (d == 0 || d % 4 != 0) throw ConfigError("sine embedding width must be a positive multiple of 4");
  const std::size_t half = d / 2;
  const double two_pi = 2.0 * 3.14159265358979323846;
  std::vector<double> out(h * w * d);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double ye = (static_cast<double>(i) + 1.0) / static_cast<double>(h) * two_pi;
      const double xe = (static_cast<double>(j) + 1.0) / static_cast<double>(w) * two_pi;
      double* row = out.data() + (i * w + j) * d;
      for (std::size_t k = 0; k < half; k += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
        row[k] = std::sin(ye * freq);
        row[k + 1] = std::cos(ye * freq);
        row[half + k] = std::sin(xe * freq);
        row[half + k + 1] = std::cos(xe * freq);
      }
    }
  return Tensor({h * w, d}, std::move(out));
}

struct FeatureLevel {
  Tensor tokens;  // [h*w, d]
  std::size_t h = 0, w = 0;
  Tensor pos;     // [h*w, d]
};

struct QueryFeatures {
  std::vector<FeatureLevel> levels;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& l : levels) n += l.h * l.w;
    return n;
  }
};

struct SupportFeatures {
  Tensor rows;  // [m, d]
  Tensor pos;   // [m, d] or undefined
};

struct BackboneConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 0;  // 0 -> 4d
  std::size_t query_patch = 8;
  std::size_t query_levels = 3;
  std::size_t query_blocks = 2;
  std::size_t support_patch = 16;
  std::size_t support_blocks = 3;

  std::size_t hidden() const { return ffn_dim ? ffn_dim : 4 * d; }
};

// Non-overlapping p x p patches of a [3,H,W] image -> [rows*cols, 3*p*p].
// Trailing pixels that do not fill a patch are dropped.
inline Tensor patchify(const Image& img, std::size_t p, std::size_t& rows, std::size_t& cols) {
  if (img.height < p || img.width < p)
    throw DimError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) + " smaller than patch " +
                   std::to_string(p));
  rows = img.height / p;
  cols = img.width / p;
  const std::size_t dim = img.channels * p * p;
  std::vector<double> out(rows * cols * dim);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double* dst = out.data() + (r * cols + c) * dim;
      for (std::size_t ch = 0; ch < img.channels; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) *dst++ = img.at(ch, r * p + y, c * p + x);
    }
  return Tensor({rows * cols, dim}, std::move(out));
}

// Hierarchical query encoder: patch embedding, then per level a stack of
// self-attention blocks followed by 2x2 patch merging (ceil) into the next.
class QueryEncoder {
 public:
  QueryEncoder() = default;
  QueryEncoder(ParameterStore& ps, const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.query_levels < 2) throw ConfigError("query encoder needs at least 2 levels");
    embed_ = Linear(ps, "query_encoder.patch_embed", 3 * cfg.query_patch * cfg.query_patch, cfg.d, rng);
    for (std::size_t l = 0; l < cfg.query_levels; ++l) {
      const std::string p = "query_encoder.level" + std::to_string(l);
      std::vector<EncoderBlock> blocks;
      for (std::size_t b = 0; b < cfg.query_blocks; ++b)
        blocks.emplace_back(ps, p + ".block" + std::to_string(b), cfg.d, cfg.heads, cfg.hidden(), rng);
      blocks_.push_back(std::move(blocks));
      if (l + 1 < cfg.query_levels) {
        merge_norm_.emplace_back(ps, p + ".merge_norm", 4 * cfg.d, rng);
        merge_.emplace_back(ps, p + ".merge", 4 * cfg.d, cfg.d, rng);
      }
    }
  }

  QueryFeatures operator()(const Image& image) const {
    std::size_t h, w;
    Tensor x = embed_(patchify(image, cfg_.query_patch, h, w));
    QueryFeatures out;
    for (std::size_t l = 0; l < cfg_.query_levels; ++l) {
      const Tensor pos = sine_positional_embedding(h, w, cfg_.d);
      x = add(x, pos);
      for (const auto& blk : blocks_[l]) x = blk(x);
      out.levels.push_back({x, h, w, pos});
      if (l + 1 == cfg_.query_levels) break;
      // 2x2 merge; missing neighbours at odd edges repeat the last row/col
      const std::size_t nh = (h + 1) / 2, nw = (w + 1) / 2;
      std::vector<std::vector<std::size_t>> idx(4);
      for (std::size_t i = 0; i < nh; ++i)
        for (std::size_t j = 0; j < nw; ++j)
          for (std::size_t k = 0; k < 4; ++k) {
            const std::size_t r = std::min(2 * i + k / 2, h - 1), c = std::min(2 * j + k % 2, w - 1);
            idx[k].push_back(r * w + c);
          }
      x = merge_[l](merge_norm_[l](concat({index_select(x, idx[0]), index_select(x, idx[1]), index_select(x, idx[2]),
                                          index_select(x, idx[3])},
                                         1)));
      h = nh;
      w = nw;
    }
    return out;
  }

 private:
  BackboneConfig cfg_;
  Linear embed_;
  std::vector<std::vector<EncoderBlock>> blocks_;
  std::vector<LayerNorm> merge_norm_;
  std::vector<Linear> merge_;
};

// Support encoder: a flat ViT over 128x128 crops, mean-pooled to one row
// per image. Shares no parameters with the query encoder.
class SupportEncoder {
 public:
  SupportEncoder() = default;
  SupportEncoder(ParameterStore& ps, const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    embed_ = Linear(ps, "support_encoder.patch_embed", 3 * cfg.support_patch * cfg.support_patch, cfg.d, rng);
    for (std::size_t b = 0; b < cfg.support_blocks; ++b)
      blocks_.emplace_back(ps, "support_encoder.block" + std::to_string(b), cfg.d, cfg.heads, cfg.hidden(), rng);
    norm_ = LayerNorm(ps, "support_encoder.norm", cfg.d, rng);
  }

  // [m, d]; each image encoded independently.
  Tensor encode(const std::vector<Image>& images) const {
    if (images.empty()) return Tensor::zeros({0, cfg_.d});
    std::vector<Tensor> patches;
    std::size_t h = 0, w = 0;
    for (const auto& img : images) {
      if (img.height != kSupportSize || img.width != kSupportSize || img.channels != 3)
        throw DimError("support images must be 3x128x128");
      patches.push_back(patchify(img, cfg_.support_patch, h, w));
    }
    const std::size_t m = images.size(), n = h * w;
    Tensor x = reshape(embed_(concat(patches, 0)), {m, n, cfg_.d});
    x = add(x, sine_positional_embedding(h, w, cfg_.d));
    for (const auto& blk : blocks_) x = blk(x);
    return mean_axis(norm_(x), 1);
  }

  SupportFeatures operator()(const std::vector<Image>& images, bool use_multiscale) const {
    if (!use_multiscale) return {encode(images), {}};
    std::vector<Image> all;
    for (const auto& img : images) {
      if (img.height != kSupportSize || img.width != kSupportSize) throw DimError("support images must be 3x128x128");
      for (auto& v : multiscale_support(img)) all.push_back(std::move(v));
    }
    const Tensor enc = encode(all);  // [3m, d], three consecutive rows per image
    return {mean_axis(reshape(enc, {images.size(), 3, cfg_.d}), 1), {}};
  }

 private:
  BackboneConfig cfg_;
  Linear embed_;
  std::vector<EncoderBlock> blocks_;
  LayerNorm norm_;
};

// Support rows computed elsewhere (e.g. a frozen external model), stored in
// the checkpoint record format as a single record "support_embeddings".
inline SupportFeatures load_external_support_embeddings(const std::string& path, std::size_t d) {
  const auto records = read_records(path);
  for (const auto& r : records) {
    if (r.name != "support_embeddings") continue;
    if (r.shape.size() != 2) throw ConfigError("support_embeddings must be rank 2");
    if (r.shape[0] == 0) throw ConfigError("support_embeddings has no rows");
    if (r.shape[1] != d)
      throw ConfigError("support_embeddings width " + std::to_string(r.shape[1]) + " does not match model width " +
                        std::to_string(d));
    return {Tensor(r.shape, r.values), {}};
  }
  throw ConfigError("no 'support_embeddings' record in '" + path + "'");
}

inline void save_external_support_embeddings(const std::string& path, const Tensor& rows) {
  write_records(path, {{"support_embeddings", rows.shape(), {rows.data().begin(), rows.data().end()}}});
}

}  // namespace tide
