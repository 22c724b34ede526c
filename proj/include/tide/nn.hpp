#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tide/ops.hpp"
#include "tide/rng.hpp"

namespace tide {

// A named learnable tensor.
struct Parameter {
  std::string name;
  Tensor tensor;
};

inline bool valid_parameter_name(const std::string& name) {
  if (name.empty()) return false;
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '.' || c == '_';
    if (!ok) return false;
  }
  return true;
}

enum class Init { Xavier, He, Normal02, Zeros, Ones };

// Ordered registry of every learnable tensor of a model. Insertion order is
// the canonical parameter order (checkpoints, checksums, optimizer state).
class ParameterStore {
 public:
  Tensor create(const std::string& name, Shape shape, Init init, Rng& rng) {
    if (!valid_parameter_name(name)) throw ConfigError("invalid parameter name '" + name + "'");
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    std::vector<double> v(numel(shape), 0.0);
    const double fan_in = shape.size() >= 2 ? static_cast<double>(shape[shape.size() - 2]) : 1.0;
    const double fan_out = shape.empty() ? 1.0 : static_cast<double>(shape.back());
    switch (init) {
      case Init::Xavier: {
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& x : v) x = rng.uniform(-a, a);
        break;
      }
      case Init::He: {
        const double s = std::sqrt(2.0 / fan_in);
        for (auto& x : v) x = rng.normal(0.0, s);
        break;
      }
      case Init::Normal02:
        for (auto& x : v) x = rng.normal(0.0, 0.2);
        break;
      case Init::Zeros:
        break;
      case Init::Ones:
        std::fill(v.begin(), v.end(), 1.0);
        break;
    }
    index_[name] = params_.size();
    params_.push_back({name, Tensor(std::move(shape), std::move(v), true)});
    return params_.back().tensor;
  }

  const std::vector<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second].tensor;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // FNV-1a over names and raw value bytes; detects any mutation.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
    };
    for (const auto& p : params_) {
      feed(p.name.data(), p.name.size());
      feed(p.tensor.data().data(), p.tensor.size() * sizeof(double));
    }
    return h;
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight, bias;

  Linear() = default;
  Linear(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         Init init = Init::Xavier, bool with_bias = true) {
    weight = ps.create(name + ".weight", {in, out}, init, rng);
    if (with_bias) bias = ps.create(name + ".bias", {out}, Init::Zeros, rng);
  }

  Tensor operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
  }
};

struct LayerNorm {
  Tensor gain, bias;

  LayerNorm() = default;
  LayerNorm(ParameterStore& ps, const std::string& name, std::size_t d, Rng& rng) {
    gain = ps.create(name + ".gain", {d}, Init::Ones, rng);
    bias = ps.create(name + ".bias", {d}, Init::Zeros, rng);
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// [B, n, d] -> [B*heads, n, d/heads]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0), n = x.dim(1), d = x.dim(2);
  return reshape(permute(reshape(x, {B, n, heads, d / heads}), {0, 2, 1, 3}), {B * heads, n, d / heads});
}

// [B*heads, n, dh] -> [B, n, heads*dh]
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0) / heads, n = x.dim(1), dh = x.dim(2);
  return reshape(permute(reshape(x, {B, heads, n, dh}), {0, 2, 1, 3}), {B, n, heads * dh});
}

// Scaled dot-product attention over already-projected q/k/v, per head with
// 1/sqrt(d/heads) scaling. Accepts [n,d] or batched [B,n,d].
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const bool batched = q.rank() == 3;
  const std::size_t d = q.shape().back();
  if (heads == 0 || d % heads != 0)
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  if (k.shape().back() != d || v.shape().back() != d) throw DimError("attention: width mismatch");
  if (k.rank() != q.rank() || v.shape() != k.shape()) throw DimError("attention: key/value shape mismatch");
  auto lift = [batched](const Tensor& t) { return batched ? t : reshape(t, {1, t.dim(0), t.dim(1)}); };
  const Tensor qh = split_heads(lift(q), heads), kh = split_heads(lift(k), heads), vh = split_heads(lift(v), heads);
  const double s = 1.0 / std::sqrt(static_cast<double>(d / heads));
  const Tensor attn = softmax(scale(matmul(qh, kh, true), s), -1);
  Tensor out = merge_heads(matmul(attn, vh), heads);
  return batched ? out : reshape(out, {q.dim(0), d});
}

// Projected multi-head attention: in-projections for q, k, v, then an
// output projection.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t heads_, Rng& rng)
      : heads(heads_) {
    if (heads_ == 0 || d % heads_ != 0)
      throw ConfigError("width " + std::to_string(d) + " not divisible by " + std::to_string(heads_) + " heads");
    wq = Linear(ps, name + ".w_q", d, d, rng);
    wk = Linear(ps, name + ".w_k", d, d, rng);
    wv = Linear(ps, name + ".w_v", d, d, rng);
    wo = Linear(ps, name + ".w_o", d, d, rng);
  }

  Tensor operator()(const Tensor& q, const Tensor& k, const Tensor& v) const {
    return wo(attention(wq(q), wk(k), wv(v), heads));
  }
};

inline Tensor multi_head_attention(const MultiHeadAttention& mha, const Tensor& q, const Tensor& k, const Tensor& v) {
  return mha(q, k, v);
}

// Two-layer tokenwise MLP, d -> hidden -> d.
struct FeedForward {
  Linear fc1, fc2;

  FeedForward() = default;
  FeedForward(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t hidden, Rng& rng) {
    fc1 = Linear(ps, name + ".fc1", d, hidden, rng, Init::He);
    fc2 = Linear(ps, name + ".fc2", hidden, d, rng);
  }

  Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

// Pre-norm transformer encoder block over [n,d] or [B,n,d] tokens.
// Position embeddings, when given, are added to queries and keys only.
struct EncoderBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  FeedForward ffn;

  EncoderBlock() = default;
  EncoderBlock(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t heads, std::size_t hidden,
               Rng& rng)
      : ln1(ps, name + ".ln1", d, rng),
        ln2(ps, name + ".ln2", d, rng),
        attn(ps, name + ".attn", d, heads, rng),
        ffn(ps, name + ".ffn", d, hidden, rng) {}

  Tensor operator()(Tensor x, const Tensor& pos = {}) const {
    const Tensor h = ln1(x);
    const Tensor qk = pos.defined() ? add(h, pos) : h;
    x = add(x, attn(qk, qk, h));
    return add(x, ffn(ln2(x)));
  }
};

}  // namespace tide
