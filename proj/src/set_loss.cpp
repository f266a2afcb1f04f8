#include "txt/set_loss.hpp"

#include <algorithm>

namespace txt {

Box cxcywh_to_xyxy(const Eigen::Vector4d& b) {
  return {b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]};
}

namespace {

void check_box(const Box& b) {
  if (!(b[2] > b[0]) || !(b[3] > b[1]))
    throw ContractError("degenerate box (" + std::to_string(b[0]) + ", " + std::to_string(b[1]) + ", " +
                        std::to_string(b[2]) + ", " + std::to_string(b[3]) + ")");
}

double area(const Box& b) { return (b[2] - b[0]) * (b[3] - b[1]); }

double intersection(const Box& a, const Box& b) {
  const double w = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double h = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  return w * h;
}

Tensor col(const Tensor& x, std::size_t j) { return slice(x, 1, j, j + 1); }

}  // namespace

double box_iou(const Box& a, const Box& b) {
  check_box(a);
  check_box(b);
  const double inter = intersection(a, b);
  return inter / (area(a) + area(b) - inter);
}

double giou(const Box& a, const Box& b) {
  check_box(a);
  check_box(b);
  const double inter = intersection(a, b);
  const double uni = area(a) + area(b) - inter;
  const double enclose =
      (std::max(a[2], b[2]) - std::min(a[0], b[0])) * (std::max(a[3], b[3]) - std::min(a[1], b[1]));
  return inter / uni - (enclose - uni) / enclose;
}

Tensor cxcywh_to_xyxy(const Tensor& boxes) {
  if (boxes.rank() != 2 || boxes.dim(1) != 4) throw DimensionError("boxes must be [N, 4]");
  Tensor cx = col(boxes, 0), cy = col(boxes, 1), hw = col(boxes, 2) * 0.5, hh = col(boxes, 3) * 0.5;
  return concat({cx - hw, cy - hh, cx + hw, cy + hh}, 1);
}

Tensor pairwise_giou(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 2 || a.dim(1) != 4) throw DimensionError("giou needs matching [N, 4]");
  const std::size_t n = a.dim(0);
  Tensor ax1 = col(a, 0), ay1 = col(a, 1), ax2 = col(a, 2), ay2 = col(a, 3);
  Tensor bx1 = col(b, 0), by1 = col(b, 1), bx2 = col(b, 2), by2 = col(b, 3);
  Tensor area_a = (ax2 - ax1) * (ay2 - ay1);
  Tensor area_b = (bx2 - bx1) * (by2 - by1);
  Tensor iw = relu(minimum(ax2, bx2) - maximum(ax1, bx1));
  Tensor ih = relu(minimum(ay2, by2) - maximum(ay1, by1));
  Tensor inter = iw * ih;
  Tensor uni = area_a + area_b - inter;
  Tensor enclose = (maximum(ax2, bx2) - minimum(ax1, bx1)) * (maximum(ay2, by2) - minimum(ay1, by1));
  return reshape(inter / uni - (enclose - uni) / enclose, {n});
}

double focal_loss(double p, int target, double alpha, double gamma) {
  p = std::clamp(p, 1e-12, 1.0 - 1e-12);
  if (target == 1) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
  return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

Tensor sigmoid_focal_loss(const Tensor& logits, const Tensor& targets, double alpha, double gamma) {
  if (logits.shape() != targets.shape()) throw DimensionError("focal targets must match logits");
  Tensor p = sigmoid(logits);
  Tensor pos = pow(1.0 - p, gamma) * softplus(-logits) * alpha;
  Tensor neg = pow(p, gamma) * softplus(logits) * (1.0 - alpha);
  return sum(targets * pos + (1.0 - targets) * neg);
}

void CostWeights::validate() const {
  if (class_weight < 0 || l1 < 0 || giou < 0) throw ConfigError("loss weights must be non-negative");
  if (class_weight == 0 && l1 == 0 && giou == 0) throw ConfigError("at least one loss weight must be positive");
  if (alpha < 0 || alpha > 1 || gamma < 0) throw ConfigError("focal parameters out of range");
  if (no_object_weight < 0) throw ConfigError("no-object weight must be non-negative");
}

CostMatrix matching_cost(const DetectionSet& pred, const GroundTruth& gt, const CostWeights& w) {
  const std::size_t q = pred.size(), g = gt.size();
  if (gt.boxes.size() != g) throw DimensionError("ground truth boxes and labels differ in count");
  const std::size_t c = pred.class_logits.dim(1);
  std::vector<double> prob(q * c);
  {
    NoGradGuard guard;
    Tensor p = w.kind == ClassLossKind::kFocal ? sigmoid(pred.class_logits) : softmax(pred.class_logits, 1);
    std::copy(p.data().begin(), p.data().end(), prob.begin());
  }
  const std::size_t real = w.kind == ClassLossKind::kFocal ? c : c - 1;
  CostMatrix cost(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(q));
  for (std::size_t i = 0; i < g; ++i) {
    const std::size_t label = gt.labels[i];
    if (label >= real) throw ContractError("ground-truth label " + std::to_string(label) + " out of range");
    const Eigen::Vector4d tb(gt.boxes[i][0], gt.boxes[i][1], gt.boxes[i][2], gt.boxes[i][3]);
    const Box tc = cxcywh_to_xyxy(tb);
    for (std::size_t j = 0; j < q; ++j) {
      const double p = prob[j * c + label];
      double class_cost;
      if (w.kind == ClassLossKind::kFocal) {
        const double pos = w.alpha * std::pow(1.0 - p, w.gamma) * -std::log(p + 1e-8);
        const double neg = (1.0 - w.alpha) * std::pow(p, w.gamma) * -std::log(1.0 - p + 1e-8);
        class_cost = pos - neg;
      } else {
        class_cost = -p;
      }
      const Eigen::Vector4d pb(pred.boxes.at(j, 0), pred.boxes.at(j, 1), pred.boxes.at(j, 2), pred.boxes.at(j, 3));
      const double l1 = (pb - tb).cwiseAbs().sum();
      cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          w.class_weight * class_cost + w.l1 * l1 + w.giou * (1.0 - giou(cxcywh_to_xyxy(pb), tc));
    }
  }
  return cost;
}

DetectionLoss detection_loss(const DetectionSet& pred, const GroundTruth& gt, const CostWeights& w,
                             const MatchAssignment* fixed) {
  w.validate();
  if (pred.loss != w.kind) throw ConfigError("detection set and loss weights disagree on the class loss kind");
  const std::size_t q = pred.size(), g = gt.size();
  if (g > q) throw ContractError("more ground-truth objects than predictions");
  DetectionLoss out;
  out.match = fixed ? *fixed : hungarian_match(matching_cost(pred, gt, w));
  if (out.match.pairs.size() != g) throw ContractError("assignment does not cover every ground-truth object");

  const std::size_t c = pred.class_logits.dim(1);
  const double norm = static_cast<double>(std::max<std::size_t>(g, 1));
  if (w.kind == ClassLossKind::kFocal) {
    std::vector<double> targets(q * c, 0.0);
    for (auto [gi, pj] : out.match.pairs) targets[pj * c + gt.labels[gi]] = 1.0;
    out.classification =
        sigmoid_focal_loss(pred.class_logits, Tensor({q, c}, std::move(targets)), w.alpha, w.gamma) * (1.0 / norm);
  } else {
    std::vector<std::size_t> labels(q, c - 1);
    for (auto [gi, pj] : out.match.pairs) labels[pj] = gt.labels[gi];
    std::vector<double> class_weights(c, 1.0);
    class_weights[c - 1] = w.no_object_weight;
    out.classification = cross_entropy(pred.class_logits, labels, class_weights);
  }

  if (g == 0) {
    out.l1 = Tensor::scalar(0.0);
    out.giou = Tensor::scalar(0.0);
  } else {
    std::vector<std::size_t> rows;
    std::vector<double> target;
    for (auto [gi, pj] : out.match.pairs) {
      rows.push_back(pj);
      target.insert(target.end(), gt.boxes[gi].begin(), gt.boxes[gi].end());
    }
    Tensor matched = gather_rows(pred.boxes, rows);
    Tensor tgt({g, 4}, std::move(target));
    out.l1 = sum(abs(matched - tgt)) * (1.0 / norm);
    out.giou = sum(1.0 - pairwise_giou(cxcywh_to_xyxy(matched), cxcywh_to_xyxy(tgt))) * (1.0 / norm);
  }
  out.total = out.classification * w.class_weight + out.l1 * w.l1 + out.giou * w.giou;
  return out;
}

}  // namespace txt
