#pragma once

#include <vector>

#include "tide/data.hpp"
#include "tide/geometry.hpp"
#include "tide/hungarian.hpp"
#include "tide/model.hpp"

namespace tide {

struct LossWeights {
  double cls = 1.0;   // lambda_1
  double l1 = 5.0;    // lambda_2
  double giou = 2.0;  // lambda_3
  double no_object = 1.0;
  bool aux_loss = true;
};

inline MatchAssignment hungarian(const Tensor& cost) {
  if (cost.rank() != 2) throw DimError("hungarian expects a matrix");
  return hungarian(std::vector<double>(cost.data().begin(), cost.data().end()), cost.dim(0), cost.dim(1));
}

// DETR-style matching cost [N, n_tgt]:
//   -l1 * P[i, xi_j] + l2 * |box_i - box_j|_1 + l3 * (1 - GIoU(box_i, box_j))
inline Tensor match_cost(const Tensor& probs, const Tensor& boxes, const std::vector<Target>& targets,
                         const LossWeights& w, std::optional<std::size_t> null_index = std::nullopt) {
  if (targets.empty()) throw DataError("match_cost needs at least one target");
  const std::size_t N = probs.dim(0), m = probs.dim(1), n = targets.size();
  if (boxes.shape() != Shape{N, 4}) throw DimError("match_cost: boxes must be [N,4]");
  for (const auto& t : targets)
    if (t.position >= m || (null_index && t.position == *null_index))
      throw DataError("target position " + std::to_string(t.position) + " is not a valid support position");
  std::vector<double> c(N * n);
  for (std::size_t i = 0; i < N; ++i) {
    const auto pb = BoundingBox::center_norm(boxes[i * 4], boxes[i * 4 + 1], boxes[i * 4 + 2], boxes[i * 4 + 3]);
    for (std::size_t j = 0; j < n; ++j) {
      const auto& tb = targets[j].box;
      double l1 = 0.0;
      for (std::size_t k = 0; k < 4; ++k) l1 += std::fabs(pb.v[k] - tb.v[k]);
      c[i * n + j] = -w.cls * probs[i * m + targets[j].position] + w.l1 * l1 + w.giou * (1.0 - giou(pb, tb));
    }
  }
  return Tensor({N, n}, std::move(c));
}

struct LayerLoss {
  Tensor loss;
  MatchAssignment assignment;
};

// Set loss of one layer: matched queries pay cross-entropy on their target
// position plus L1 and GIoU box terms; unmatched queries pay cross-entropy
// toward the null position. Summed over queries.
inline LayerLoss layer_loss(const LayerPrediction& p, const std::vector<Target>& targets, std::size_t null_index,
                            const LossWeights& w) {
  const std::size_t N = p.log_probs.dim(0), m = p.log_probs.dim(1);
  if (null_index >= m) throw DataError("null index outside the support rows");
  if (targets.size() > N) throw DataError("more targets than prediction slots");
  LayerLoss out;
  if (targets.empty()) {
    out.assignment.unmatched.resize(N);
    std::iota(out.assignment.unmatched.begin(), out.assignment.unmatched.end(), 0);
  } else {
    out.assignment = hungarian(match_cost(p.probs, p.boxes, targets, w, null_index));
  }

  std::vector<double> cw(N * m, 0.0);
  for (auto [i, j] : out.assignment.pairs) cw[i * m + targets[j].position] = w.cls;
  for (auto i : out.assignment.unmatched) cw[i * m + null_index] = w.cls * w.no_object;
  Tensor loss = neg(sum(mul(p.log_probs, Tensor({N, m}, std::move(cw)))));

  if (!targets.empty() && (w.l1 != 0.0 || w.giou != 0.0)) {
    std::vector<std::size_t> rows;
    std::vector<double> tb;
    for (auto [i, j] : out.assignment.pairs) {
      rows.push_back(i);
      tb.insert(tb.end(), targets[j].box.v.begin(), targets[j].box.v.end());
    }
    const Tensor pred = index_select(p.boxes, rows);
    const Tensor tgt({rows.size(), 4}, std::move(tb));
    if (w.l1 != 0.0) loss = add(loss, scale(sum(abs(sub(pred, tgt))), w.l1));
    if (w.giou != 0.0)
      loss = add(loss, scale(sum(add_scalar(neg(giou_tensor(pred, tgt)), 1.0)), w.giou));
  }
  out.loss = loss;
  return out;
}

// Mean of the per-layer losses (all decoder layers with aux_loss, else the
// last one only).
inline Tensor total_loss(const std::vector<LayerPrediction>& layers, const std::vector<Target>& targets,
                         std::size_t null_index, const LossWeights& w,
                         std::vector<MatchAssignment>* assignments = nullptr) {
  if (layers.empty()) throw DimError("total_loss needs at least one layer");
  const std::size_t first = w.aux_loss ? 0 : layers.size() - 1;
  std::vector<Tensor> parts;
  for (std::size_t l = first; l < layers.size(); ++l) {
    auto ll = layer_loss(layers[l], targets, null_index, w);
    parts.push_back(ll.loss);
    if (assignments) assignments->push_back(std::move(ll.assignment));
  }
  Tensor acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return scale(acc, 1.0 / static_cast<double>(parts.size()));
}

}  // namespace tide
