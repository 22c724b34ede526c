#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <vector>

#include <nlohmann/json.hpp>

#include "tide/checkpoint.hpp"
#include "tide/config.hpp"
#include "tide/loss.hpp"
#include "tide/model.hpp"
#include "tide/optim.hpp"

namespace tide {

// Images that can serve as training queries: at least one training-class
// object, and every such class has a source image other than this one.
inline std::vector<Id> training_queries(const Dataset& ds, const EpisodeConfig& cfg) {
  const auto classes = training_classes(ds, cfg);
  std::vector<Id> out;
  for (const auto& [im, info] : ds.images) {
    bool any = false, ok = true;
    for (Id a : ds.annotations_of_image(im)) {
      const Id c = ds.annotations.at(a).category_id;
      if (std::find(classes.begin(), classes.end(), c) == classes.end()) continue;
      any = true;
      if (ds.images_of_class(c).size() < 2) ok = false;
    }
    if (any && ok) out.push_back(im);
  }
  return out;
}

// Deterministic episode stream: episode i depends only on (seed, i).
class EpisodeStream {
 public:
  EpisodeStream(const Dataset& ds, const EpisodeConfig& cfg, std::uint64_t seed)
      : ds_(ds), cfg_(cfg), rng_(Rng(seed).split(0x65706973)), queries_(training_queries(ds, cfg)) {
    if (queries_.empty()) throw SamplingError("dataset has no usable training query images");
  }

  Episode next() {
    Rng r = rng_.split(index_++);
    const Id q = queries_[r.below(queries_.size())];
    return sample_training_episode(ds_, q, r, cfg_);
  }

  std::uint64_t index() const { return index_; }

 private:
  const Dataset& ds_;
  EpisodeConfig cfg_;
  Rng rng_;
  std::vector<Id> queries_;
  std::uint64_t index_ = 0;
};

inline Tensor episode_loss(const TideModel& model, const Episode& ep, const LossWeights& w) {
  const auto out = model.forward(ep.query, ep.support.images(), ep.support.null_index());
  return total_loss(out.layers, ep.targets, ep.support.null_index(), w);
}

// Mean loss over fixed episodes, no graph kept.
inline double mean_episode_loss(const TideModel& model, const std::vector<Episode>& eps, const LossWeights& w) {
  NoGradGuard ng;
  double acc = 0.0;
  for (const auto& ep : eps) acc += episode_loss(model, ep, w).item();
  return eps.empty() ? 0.0 : acc / static_cast<double>(eps.size());
}

struct TrainStep {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct TrainResult {
  std::vector<TrainStep> history;
};

// Runs cfg.steps optimizer steps on `model`. One JSON object per logged
// step is written to `log` when given; `on_step` runs after every step.
inline TrainResult train(TideModel& model, const Dataset& ds, const RunConfig& cfg, std::ostream* log = nullptr,
                         const std::function<void(const TrainStep&)>& on_step = {}) {
  cfg.validate();
  EpisodeStream stream(ds, cfg.episode, cfg.seed);
  AdamWOptions opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.grad_clip = cfg.grad_clip;
  AdamW optimizer(model.params(), opt);

  TrainResult res;
  const auto drop_at = static_cast<std::size_t>(std::llround(cfg.lr_drop * static_cast<double>(cfg.steps)));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (cfg.lr_drop > 0.0 && step == drop_at) optimizer.set_lr(cfg.lr * 0.1);
    model.params().zero_grads();
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      Tensor loss = episode_loss(model, stream.next(), cfg.loss);
      if (!std::isfinite(loss.item()))
        throw NumericError("non-finite loss at step " + std::to_string(step));
      if (cfg.batch_size > 1) loss = scale(loss, 1.0 / static_cast<double>(cfg.batch_size));
      loss_sum += loss.item();
      backward(loss);
    }
    const double norm = optimizer.step();
    res.history.push_back({step, loss_sum, norm});
    if (on_step) on_step(res.history.back());
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      *log << nlohmann::json{{"step", step}, {"loss", loss_sum}, {"grad_norm", norm}}.dump() << "\n";
  }
  if (log) log->flush();
  return res;
}

inline void save_checkpoint(const TideModel& model, const std::string& path) {
  write_records(path, records_from(model.params()));
}

inline void load_checkpoint(TideModel& model, const std::string& path) {
  load_into(model.params(), read_records(path));
}

}  // namespace tide
