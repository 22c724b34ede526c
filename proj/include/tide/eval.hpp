#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tide/data.hpp"
#include "tide/geometry.hpp"
#include "tide/model.hpp"

namespace tide {

struct ScoredDetection {
  Id image_id = 0;
  Id class_id = 0;
  double score = 0.0;
  BoundingBox box;  // CornerAbs
};

struct GroundTruth {
  Id image_id = 0;
  BoundingBox box;  // CornerAbs
};

enum class ScoreAggregation { Sum, Max };

struct DecodeOptions {
  double score_threshold = 0.0;  // keep detections scoring strictly above
  ScoreAggregation aggregation = ScoreAggregation::Sum;
  bool nms = false;
  double nms_iou = 0.5;
};

// Greedy per-class non-maximum suppression, highest score first.
inline std::vector<ScoredDetection> non_maximum_suppression(std::vector<ScoredDetection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<ScoredDetection> kept;
  for (const auto& d : dets) {
    bool keep = true;
    for (const auto& k : kept)
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(d);
  }
  return kept;
}

// Turns a candidate set into class detections. Each candidate takes its
// argmax position; candidates whose argmax is the null row (or a negative)
// are dropped. Several shots of one class collapse to that class, scored by
// the summed (or max) probability of its positions.
inline std::vector<ScoredDetection> decode_detections(const DetectionSet& ds,
                                                      const std::vector<std::optional<Id>>& position_to_class,
                                                      ImageSize image_size, const DecodeOptions& opt = {},
                                                      Id image_id = 0) {
  const std::size_t N = ds.class_dist.dim(0), m = ds.class_dist.dim(1);
  if (position_to_class.size() != m) throw DataError("position map does not cover every support position");
  std::vector<ScoredDetection> out;
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (ds.class_dist[i * m + j] > ds.class_dist[i * m + best]) best = j;
    if (!position_to_class[best]) continue;
    const Id cls = *position_to_class[best];
    double score = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (position_to_class[j] == cls)
        score = opt.aggregation == ScoreAggregation::Sum ? score + ds.class_dist[i * m + j]
                                                          : std::max(score, ds.class_dist[i * m + j]);
    if (!(score > opt.score_threshold)) continue;
    auto cn = BoundingBox::center_norm(ds.boxes[i * 4], ds.boxes[i * 4 + 1], ds.boxes[i * 4 + 2], ds.boxes[i * 4 + 3]);
    BoundingBox box = convert(cn, BoxFormat::CornerAbs, image_size);
    box.v[0] = std::clamp(box.v[0], 0.0, image_size.width);
    box.v[2] = std::clamp(box.v[2], 0.0, image_size.width);
    box.v[1] = std::clamp(box.v[1], 0.0, image_size.height);
    box.v[3] = std::clamp(box.v[3], 0.0, image_size.height);
    out.push_back({image_id, cls, std::min(score, 1.0), box});
  }
  return opt.nms ? non_maximum_suppression(std::move(out), opt.nms_iou) : out;
}

// COCO-style single-class AP: detections in descending score order (stable)
// greedily claim the best-overlapping unclaimed ground truth of their image
// with IoU >= threshold; precision is made monotone and read at the 101
// recall points 0, 0.01, ..., 1. Returns 0 when there is no ground truth.
inline double average_precision(const std::vector<ScoredDetection>& dets, const std::vector<GroundTruth>& gts,
                                double iou_threshold) {
  if (gts.empty()) return 0.0;
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<char> claimed(gts.size(), 0);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (std::size_t o : order) {
    const auto& d = dets[o];
    double best_iou = iou_threshold;
    std::optional<std::size_t> best;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g] || gts[g].image_id != d.image_id) continue;
      const double v = iou(d.box, gts[g].box);
      if (v >= best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best) {
      claimed[*best] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double thr = r / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), thr);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

// Anything that turns (query image, support set) into a candidate set.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual DetectionSet detect(const Dataset& ds, Id image_id, const Image& query, const SupportSet& support) const = 0;
};

class ModelDetector : public Detector {
 public:
  explicit ModelDetector(const TideModel& model) : model_(model) {}
  DetectionSet detect(const Dataset&, Id, const Image& query, const SupportSet& support) const override {
    return model_.detect(query, support.images(), support.null_index());
  }

 private:
  const TideModel& model_;
};

// Emits the ground truth itself: one certain candidate per annotated object
// of a support class, every other slot certain no-object.
class OracleDetector : public Detector {
 public:
  explicit OracleDetector(std::size_t num_queries = 32) : n_(num_queries) {}
  DetectionSet detect(const Dataset& ds, Id image_id, const Image&, const SupportSet& support) const override {
    const std::size_t m = support.size(), nul = support.null_index();
    const auto p2c = support.position_to_class();
    std::vector<double> probs(n_ * m, 0.0), boxes(n_ * 4, 0.5);
    std::size_t slot = 0;
    for (Id a : ds.annotations_of_image(image_id)) {
      const auto& ann = ds.annotations.at(a);
      auto pos = std::find(p2c.begin(), p2c.end(), std::optional<Id>(ann.category_id));
      if (pos == p2c.end() || slot >= n_) continue;
      probs[slot * m + static_cast<std::size_t>(pos - p2c.begin())] = 1.0;
      const auto b = convert(ann.box, BoxFormat::CenterNorm, ds.size_of(image_id));
      std::copy(b.v.begin(), b.v.end(), boxes.begin() + static_cast<long>(slot * 4));
      ++slot;
    }
    for (; slot < n_; ++slot) probs[slot * m + nul] = 1.0;
    return {Tensor({n_, m}, std::move(probs)), Tensor({n_, 4}, std::move(boxes)), nul};
  }

 private:
  std::size_t n_;
};

struct ProtocolConfig {
  std::size_t ways = 2;
  std::size_t shots = 1;
  std::vector<std::uint64_t> seeds = {0};
  std::size_t query_size = 64;
  DecodeOptions decode;
};

struct ClassMetrics {
  Id class_id = 0;
  std::string name;
  double ap = 0, ap50 = 0, ap75 = 0;
};

struct EvalReport {
  std::size_t ways = 2, shots = 1;
  std::vector<std::uint64_t> seeds;
  double ap = 0, ap50 = 0, ap75 = 0;
  std::vector<ClassMetrics> per_class;                 // averaged over the seeds that drew the class
  std::vector<std::array<double, 3>> per_seed;         // (AP, AP50, AP75) per seed
  std::vector<ScoredDetection> detections;             // all seeds, in evaluation order
  std::map<std::uint64_t, std::vector<Id>> shot_images;  // seed -> images used for shots
  std::map<std::uint64_t, std::vector<Id>> query_images; // seed -> images evaluated

  nlohmann::json to_json() const {
    nlohmann::json j{{"ways", ways}, {"shots", shots}, {"seeds", seeds}, {"AP", ap}, {"AP50", ap50}, {"AP75", ap75}};
    j["per_class"] = nlohmann::json::array();
    for (const auto& c : per_class)
      j["per_class"].push_back({{"class_id", c.class_id}, {"name", c.name}, {"AP", c.ap}, {"AP50", c.ap50}, {"AP75", c.ap75}});
    j["per_seed"] = nlohmann::json::array();
    for (std::size_t i = 0; i < per_seed.size(); ++i)
      j["per_seed"].push_back({{"seed", seeds[i]}, {"AP", per_seed[i][0]}, {"AP50", per_seed[i][1]}, {"AP75", per_seed[i][2]}});
    return j;
  }
};

// COCO results-array export.
inline nlohmann::json detections_to_coco(const std::vector<ScoredDetection>& dets) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : dets)
    arr.push_back({{"image_id", d.image_id},
                   {"category_id", d.class_id},
                   {"bbox", {d.box.v[0], d.box.v[1], d.box.v[2] - d.box.v[0], d.box.v[3] - d.box.v[1]}},
                   {"score", d.score}});
  return arr;
}

struct ClassAP {
  double ap = 0, ap50 = 0, ap75 = 0;
};

inline ClassAP coco_metrics(const std::vector<ScoredDetection>& dets, const std::vector<GroundTruth>& gts) {
  ClassAP m;
  for (int i = 0; i < 10; ++i) {
    const double v = average_precision(dets, gts, (50 + 5 * i) / 100.0);
    m.ap += v;
    if (i == 0) m.ap50 = v;
    if (i == 5) m.ap75 = v;
  }
  m.ap /= 10.0;
  return m;
}

// ways-way N-shot evaluation over novel classes, one episode family per
// seed: draw `ways` novel classes and N shot annotations per class, then
// detect in every other image containing one of those classes.
inline EvalReport run_protocol(const Detector& detector, const Dataset& ds, const ProtocolConfig& cfg) {
  const auto novel = ds.classes(Split::Novel);
  if (cfg.ways < 1) throw ConfigError("ways must be positive");
  if (novel.size() < cfg.ways)
    throw ConfigError("protocol needs " + std::to_string(cfg.ways) + " novel classes, dataset has " +
                      std::to_string(novel.size()));
  if (cfg.shots < 1) throw ConfigError("shots must be positive");
  if (cfg.seeds.empty()) throw ConfigError("protocol needs at least one seed");

  EvalReport rep;
  rep.ways = cfg.ways;
  rep.shots = cfg.shots;
  rep.seeds = cfg.seeds;
  std::map<Id, std::vector<ClassAP>> by_class;
  for (auto seed : cfg.seeds) {
    Rng rng(seed);
    auto classes = novel;
    rng.shuffle(classes);
    classes.resize(cfg.ways);
    std::sort(classes.begin(), classes.end());

    std::map<Id, std::vector<Id>> shots;
    std::set<Id> shot_images;
    for (Id c : classes) {
      auto anns = ds.annotations_of_class(c);
      rng.shuffle(anns);
      for (Id a : anns) {
        if (shots[c].size() == cfg.shots) break;
        shots[c].push_back(a);
        shot_images.insert(ds.annotations.at(a).image_id);
      }
      if (shots[c].size() < cfg.shots)
        throw SamplingError("class " + std::to_string(c) + " has fewer than " + std::to_string(cfg.shots) + " annotations");
    }
    std::set<Id> queries;
    for (Id c : classes)
      for (Id im : ds.images_of_class(c))
        if (!shot_images.count(im)) queries.insert(im);
    if (queries.empty()) throw SamplingError("no query images left after drawing shots");
    rep.shot_images[seed] = {shot_images.begin(), shot_images.end()};
    rep.query_images[seed] = {queries.begin(), queries.end()};

    const SupportSet support = build_test_support(ds, shots);
    const auto p2c = support.position_to_class();
    std::map<Id, std::vector<ScoredDetection>> dets;
    std::map<Id, std::vector<GroundTruth>> gts;
    for (Id im : queries) {
      const Image q = prepare_query(ds, im, cfg.query_size);
      const DetectionSet set = detector.detect(ds, im, q, support);
      for (auto& d : decode_detections(set, p2c, ds.size_of(im), cfg.decode, im)) {
        dets[d.class_id].push_back(d);
        rep.detections.push_back(d);
      }
      for (Id a : ds.annotations_of_image(im)) {
        const auto& ann = ds.annotations.at(a);
        if (shots.count(ann.category_id)) gts[ann.category_id].push_back({im, ann.box});
      }
    }
    std::array<double, 3> seed_mean{0, 0, 0};
    for (Id c : classes) {
      const ClassAP m = coco_metrics(dets[c], gts[c]);
      by_class[c].push_back(m);
      seed_mean[0] += m.ap;
      seed_mean[1] += m.ap50;
      seed_mean[2] += m.ap75;
    }
    for (auto& v : seed_mean) v /= static_cast<double>(classes.size());
    rep.per_seed.push_back(seed_mean);
  }
  for (const auto& s : rep.per_seed) {
    rep.ap += s[0];
    rep.ap50 += s[1];
    rep.ap75 += s[2];
  }
  const auto n_seeds = static_cast<double>(rep.per_seed.size());
  rep.ap /= n_seeds;
  rep.ap50 /= n_seeds;
  rep.ap75 /= n_seeds;
  for (const auto& [c, ms] : by_class) {
    ClassMetrics cm{c, ds.categories.at(c).name};
    for (const auto& m : ms) {
      cm.ap += m.ap;
      cm.ap50 += m.ap50;
      cm.ap75 += m.ap75;
    }
    const auto n = static_cast<double>(ms.size());
    cm.ap /= n;
    cm.ap50 /= n;
    cm.ap75 /= n;
    rep.per_class.push_back(cm);
  }
  return rep;
}

}  // namespace tide
