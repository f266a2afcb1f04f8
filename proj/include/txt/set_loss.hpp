#pragma once

// Bipartite matching and the set-based detection loss.

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "txt/detector.hpp"

namespace txt {

struct MatchAssignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (gt, prediction), in gt order
  double total_cost = 0.0;
};

using CostMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Minimum-cost injection of the G rows into the Q columns (G <= Q), via the
/// shortest augmenting path form of Kuhn-Munkres with row/column potentials.
/// Ties resolve to the lowest column index at every relaxation.
template <class Derived>
MatchAssignment hungarian_match(const Eigen::MatrixBase<Derived>& cost) {
  using Scalar = typename Derived::Scalar;
  const auto g = static_cast<std::size_t>(cost.rows());
  const auto q = static_cast<std::size_t>(cost.cols());
  if (g > q) throw ContractError("hungarian_match: " + std::to_string(g) + " targets exceed " + std::to_string(q) +
                                 " predictions");
  if (!cost.allFinite()) throw ContractError("hungarian_match: cost matrix has non-finite entries");
  MatchAssignment out;
  if (g == 0) return out;

  const Scalar inf = std::numeric_limits<Scalar>::infinity();
  // 1-based arrays; column 0 is a virtual start node.
  std::vector<Scalar> u(g + 1, 0), v(q + 1, 0);
  std::vector<std::size_t> owner(q + 1, 0), way(q + 1, 0);
  for (std::size_t i = 1; i <= g; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<Scalar> minv(q + 1, inf);
    std::vector<char> used(q + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      Scalar delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= q; ++j) {
        if (used[j]) continue;
        const Scalar cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= q; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> pred_of(g, 0);
  for (std::size_t j = 1; j <= q; ++j)
    if (owner[j] != 0) pred_of[owner[j] - 1] = j - 1;
  for (std::size_t i = 0; i < g; ++i) {
    out.pairs.emplace_back(i, pred_of[i]);
    out.total_cost += static_cast<double>(cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(pred_of[i])));
  }
  return out;
}

/// Corner-form box (x1, y1, x2, y2).
using Box = Eigen::Vector4d;

Box cxcywh_to_xyxy(const Eigen::Vector4d& b);
double box_iou(const Box& a, const Box& b);
/// Generalized IoU of two corner boxes; both need positive width and height.
double giou(const Box& a, const Box& b);

/// Differentiable [N, 4] (cx, cy, w, h) -> (x1, y1, x2, y2).
Tensor cxcywh_to_xyxy(const Tensor& boxes);
/// Row-wise generalized IoU of corner boxes [N, 4] -> [N].
Tensor pairwise_giou(const Tensor& a, const Tensor& b);

/// Focal loss of a single probability; p is clamped to [1e-12, 1 - 1e-12].
double focal_loss(double p, int target, double alpha, double gamma);

/// Summed sigmoid focal loss over all entries of logits [Q, C] against 0/1
/// targets, in the overflow-safe softplus form.
Tensor sigmoid_focal_loss(const Tensor& logits, const Tensor& targets, double alpha, double gamma);

struct CostWeights {
  double class_weight = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  ClassLossKind kind = ClassLossKind::kCrossEntropy;
  double alpha = 0.25;
  double gamma = 2.0;
  /// Cross-entropy weight of the no-object class.
  double no_object_weight = 0.1;

  void validate() const;
};

struct GroundTruth {
  std::vector<std::array<double, 4>> boxes;  // normalized (cx, cy, w, h)
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

/// [G, Q] matching cost: weighted class cost + L1 on (cx, cy, w, h) + (1 - GIoU).
CostMatrix matching_cost(const DetectionSet& pred, const GroundTruth& gt, const CostWeights& w);

struct DetectionLoss {
  Tensor total;
  Tensor classification;
  Tensor l1;
  Tensor giou;
  MatchAssignment match;
};

/// Set loss over all predictions. Box terms are normalized by max(G, 1). A
/// non-null `fixed` replaces the matcher (used to hold the assignment
/// constant).
DetectionLoss detection_loss(const DetectionSet& pred, const GroundTruth& gt, const CostWeights& w,
                             const MatchAssignment* fixed = nullptr);

}  // namespace txt
