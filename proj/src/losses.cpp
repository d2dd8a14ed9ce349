#include "ov3d/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "ov3d/errors.hpp"
#include "ov3d/rng.hpp"

namespace ov3d {

namespace {

constexpr double kPi = std::numbers::pi;

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// Matching

std::vector<int> hungarian_match(const Mat& cost) {
  const int q = static_cast<int>(cost.rows());
  const int g = static_cast<int>(cost.cols());
  if (g == 0) return {};
  if (q < g) throw Error("hungarian_match needs at least as many proposals as targets");
  // Potentials formulation with targets as rows (n = g <= m = q), 1-based.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(g + 1, 0.0), v(q + 1, 0.0);
  std::vector<int> p(q + 1, 0), way(q + 1, 0);
  for (int i = 1; i <= g; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(q + 1, inf);
    std::vector<char> used(q + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= q; ++j) {
        if (used[j]) continue;
        const double cur = cost(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= q; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(g, -1);
  for (int j = 1; j <= q; ++j) {
    if (p[j] != 0) assignment[p[j] - 1] = j - 1;
  }
  return assignment;
}

// ---------------------------------------------------------------------------
// Leaf losses

ClsLoss loss_cls(const VecX& logits, int target) {
  if (target < 0 || target >= logits.size()) throw Error("loss_cls target outside the vocabulary");
  ClsLoss out;
  const double m = logits.maxCoeff();
  if (logits[target] == m) {
    // log1p keeps tiny losses exact when the target dominates.
    double rest = 0.0;
    for (Eigen::Index j = 0; j < logits.size(); ++j) {
      if (j != target) rest += std::exp(logits[j] - m);
    }
    out.value = std::log1p(rest);
  } else {
    out.value = m + std::log((logits.array() - m).exp().sum()) - logits[target];
  }
  out.grad = softmax(logits);
  out.grad[target] -= 1.0;
  return out;
}

Box3DLoss loss_box_3d(const Box3D& pred, const Box3D& gt, const Vec3& extent) {
  Box3DLoss out;
  for (int a = 0; a < 3; ++a) {
    const double dc = pred.center[a] - gt.center[a];
    out.value += std::abs(dc) / extent[a];
    out.grad.center[a] = sign(dc) / extent[a];
    const double ls = std::log(pred.size[a] / gt.size[a]);
    out.value += std::abs(ls);
    out.grad.size[a] = sign(ls) / pred.size[a];
  }
  const double dy = normalize_yaw(pred.yaw - gt.yaw);
  out.value += std::abs(dy) / kPi;
  out.grad.yaw = sign(dy) / kPi;
  return out;
}

Box2DLoss loss_box_2d(const Box2D& pred, const Box2D& gt, int width, int height) {
  Box2DLoss out;
  const double w = width;
  const double h = height;
  const Vec2 d0 = pred.min - gt.min;
  const Vec2 d1 = pred.max - gt.max;
  out.value = std::abs(d0.x()) / w + std::abs(d0.y()) / h + std::abs(d1.x()) / w + std::abs(d1.y()) / h;
  out.grad.min = Vec2(sign(d0.x()) / w, sign(d0.y()) / h);
  out.grad.max = Vec2(sign(d1.x()) / w, sign(d1.y()) / h);

  const double iw = std::min(pred.max.x(), gt.max.x()) - std::max(pred.min.x(), gt.min.x());
  const double ih = std::min(pred.max.y(), gt.max.y()) - std::max(pred.min.y(), gt.min.y());
  const double area_p = pred.area();
  const double area_g = gt.area();
  if (iw <= 0.0 || ih <= 0.0 || area_p + area_g <= 0.0) {
    out.value += 1.0;
    return out;
  }
  const double inter = iw * ih;
  const double uni = area_p + area_g - inter;
  out.value += 1.0 - inter / uni;
  // d(I/U) = (dI (U + I) - I dA_p) / U^2 per coordinate.
  const double pw = pred.width();
  const double ph = pred.height();
  const double di_x1 = pred.min.x() > gt.min.x() ? -ih : 0.0;
  const double di_x2 = pred.max.x() < gt.max.x() ? ih : 0.0;
  const double di_y1 = pred.min.y() > gt.min.y() ? -iw : 0.0;
  const double di_y2 = pred.max.y() < gt.max.y() ? iw : 0.0;
  auto d_iou = [&](double di, double da) { return (di * (uni + inter) - inter * da) / (uni * uni); };
  out.grad.min.x() -= d_iou(di_x1, -ph);
  out.grad.max.x() -= d_iou(di_x2, ph);
  out.grad.min.y() -= d_iou(di_y1, -pw);
  out.grad.max.y() -= d_iou(di_y2, pw);
  return out;
}

std::size_t max_size_index(const std::vector<Proposal2D>& proposals) {
  if (proposals.empty()) throw Error("max-size selection over zero proposals");
  std::size_t best = 0;
  for (std::size_t k = 1; k < proposals.size(); ++k) {
    if (proposals[k].box.area() > proposals[best].box.area()) best = k;
  }
  return best;
}

MaxSizeLoss loss_max_size_ign(const std::vector<Proposal2D>& proposals, int label) {
  MaxSizeLoss out;
  out.index = max_size_index(proposals);
  const ClsLoss c = loss_cls(proposals[out.index].logits, label);
  out.value = c.value;
  out.grad_logits = c.grad;
  return out;
}

// ---------------------------------------------------------------------------
// Contrastive

const char* to_string(ContrastiveMode mode) {
  switch (mode) {
    case ContrastiveMode::kOff:
      return "off";
    case ContrastiveMode::kAugmentation:
      return "augmentation";
    case ContrastiveMode::kPosition:
      return "position";
    case ContrastiveMode::kClass:
      return "class";
  }
  return "off";
}

ContrastiveMode parse_contrastive_mode(const std::string& name) {
  for (auto m : {ContrastiveMode::kOff, ContrastiveMode::kAugmentation, ContrastiveMode::kPosition,
                 ContrastiveMode::kClass}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("contrastive.mode", "expected off, augmentation, position or class, got '" + name + "'");
}

void ContrastiveConfig::validate() const {
  if (!(tau0 > 0.0)) throw ConfigError("contrastive.tau0", "must be > 0");
  if (!(gamma >= 1.0)) throw ConfigError("contrastive.gamma", "must be >= 1");
  if (!(cross_distance >= 0.0)) throw ConfigError("contrastive.cross_distance", "must be >= 0");
  if (!(weight >= 0.0)) throw ConfigError("contrastive.weight", "must be >= 0");
}

double ContrastiveConfig::temperature(double dist) const { return tau0 * std::pow(effective_gamma(), dist); }

double anchor_distance(const EmbeddingVector& a, const EmbeddingVector& b, const ContrastiveConfig& cfg) {
  if (!a.anchor || !b.anchor) return cfg.cross_distance;
  return (*a.anchor - *b.anchor).norm();
}

DeccResult loss_decc(const std::vector<EmbeddingVector>& batch, const ContrastiveConfig& cfg) {
  const std::size_t m = batch.size();
  DeccResult out;
  out.grads.assign(m, VecX());
  for (std::size_t i = 0; i < m; ++i) out.grads[i] = VecX::Zero(batch[i].h.size());
  if (m < 2) throw NoPositives();

  std::vector<double> num;
  std::vector<double> den;
  std::vector<std::size_t> pos;
  std::vector<double> pos_tau;
  for (std::size_t i = 0; i < m; ++i) {
    num.clear();
    den.clear();
    pos.clear();
    pos_tau.clear();
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const double s = batch[i].h.dot(batch[j].h);
      den.push_back(s / cfg.tau0);
      if (batch[j].label == batch[i].label) {
        const double tau = cfg.temperature(anchor_distance(batch[i], batch[j], cfg));
        num.push_back(s / tau);
        pos.push_back(j);
        pos_tau.push_back(tau);
      }
    }
    if (pos.empty()) continue;
    ++out.anchors;
    const double lnum = log_sum_exp(num);
    const double lden = log_sum_exp(den);
    out.value += lden - lnum;
    for (std::size_t k = 0; k < pos.size(); ++k) {
      const double w = std::exp(num[k] - lnum) / pos_tau[k];
      out.grads[i] -= w * batch[pos[k]].h;
      out.grads[pos[k]] -= w * batch[i].h;
    }
    std::size_t k = 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const double w = std::exp(den[k++] - lden) / cfg.tau0;
      out.grads[i] += w * batch[j].h;
      out.grads[j] += w * batch[i].h;
    }
  }
  if (out.anchors == 0) throw NoPositives();
  const double scale = 1.0 / out.anchors;
  out.value *= scale;
  for (auto& g : out.grads) g *= scale;
  return out;
}

// ---------------------------------------------------------------------------
// Assembled objectives

std::vector<Target2D> project_targets(const std::vector<SupervisionRecord>& targets, const CameraModel& cam) {
  std::vector<Target2D> out;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    try {
      const Box2D b = project_box_to_2d(targets[r].box, cam);
      if (b.width() >= 1.0 && b.height() >= 1.0) out.push_back({b, targets[r].class_id, r});
    } catch (const AllBehindCamera&) {
    }
  }
  return out;
}

namespace {

enum class Source { k3D, k2D, kClassification, kAug3D, kAug2D };

struct ContrastItem {
  Source source = Source::k3D;
  std::size_t owner = 0;     // scene or classification-sample index
  std::size_t proposal = 0;  // proposal index within the owner
  VecX feature;
  int class_id = 0;
  long instance = 0;
  std::optional<Vec3> anchor;
  std::optional<PointEncoder::Cache> aug3;
  std::optional<ImageEncoder::Cache> aug2;
};

struct SceneWork {
  Det3DOutput o3;
  Det2DOutput o2;
  Det3DGrads g3;
  Det2DGrads g2;
  SceneWork(Det3DOutput a, Det2DOutput b)
      : o3(std::move(a)), o2(std::move(b)), g3(o3.proposals.size()), g2(o2.proposals.size()) {}
};

struct ClassWork {
  Det2DOutput out;
  Det2DGrads grads;
  std::size_t index = 0;
  explicit ClassWork(Det2DOutput o) : out(std::move(o)), grads(out.proposals.size()) {}
};

// Weighted cross-entropy over every proposal: matched ones toward their target,
// the rest toward background. Returns the weighted mean and fills logit grads.
template <typename Proposal>
double classification_term(const std::vector<Proposal>& props, const std::vector<int>& target_of,
                           const std::vector<double>& weight_of, const std::vector<int>& class_of, int background,
                           double bg_weight, double scale, std::vector<VecX>* d_logits) {
  double sum = 0.0;
  double wsum = 0.0;
  std::vector<std::pair<double, ClsLoss>> parts;
  parts.reserve(props.size());
  for (std::size_t q = 0; q < props.size(); ++q) {
    const int t = target_of[q];
    const double w = t >= 0 ? weight_of[t] : bg_weight;
    ClsLoss c = loss_cls(props[q].logits, t >= 0 ? class_of[t] : background);
    sum += w * c.value;
    wsum += w;
    parts.emplace_back(w, std::move(c));
  }
  if (wsum <= 0.0) return 0.0;
  if (d_logits) {
    for (std::size_t q = 0; q < props.size(); ++q) {
      if (parts[q].first == 0.0) continue;
      VecX g = parts[q].second.grad * (parts[q].first * scale / wsum);
      if ((*d_logits)[q].size() == 0) {
        (*d_logits)[q] = std::move(g);
      } else {
        (*d_logits)[q] += g;
      }
    }
  }
  return sum / wsum;
}

LossTerms assemble(const Model& model, const ParamStore& params, const std::vector<SceneSample>& scenes,
                   const std::vector<const ClassificationSample*>& classification, const LossWeights& weights,
                   const ContrastiveConfig* contrastive, std::uint64_t aug_seed, ParamStore* grads) {
  const ModelConfig& mc = model.config();
  const int background = mc.background();
  const bool want_contrast = contrastive != nullptr && contrastive->mode != ContrastiveMode::kOff;
  const ContrastiveMode mode = want_contrast ? contrastive->mode : ContrastiveMode::kOff;
  LossTerms terms;
  std::vector<SceneWork> work;
  work.reserve(scenes.size());
  std::vector<ContrastItem> items;
  Rng aug_rng(aug_seed);
  const double scene_scale = scenes.empty() ? 0.0 : 1.0 / static_cast<double>(scenes.size());

  for (std::size_t b = 0; b < scenes.size(); ++b) {
    const SceneSample& s = scenes[b];
    work.emplace_back(forward_detector_3d(model, params, s.scene->points, s.scene->extent),
                      forward_detector_2d(model, params, *s.image, true));
    SceneWork& w = work.back();

    // Targets beyond the proposal budget cannot be matched; keep the first ones.
    std::vector<SupervisionRecord> targets = s.targets;
    if (targets.size() > w.o3.proposals.size()) targets.resize(w.o3.proposals.size());
    std::vector<double> weight_of;
    std::vector<int> class_of;
    for (const auto& t : targets) {
      weight_of.push_back(t.origin == Origin::kPseudo ? weights.pseudo : 1.0);
      class_of.push_back(t.class_id);
    }

    // 3D
    const auto& p3 = w.o3.proposals;
    const std::size_t g = targets.size();
    Mat cost(static_cast<Eigen::Index>(p3.size()), static_cast<Eigen::Index>(g));
    for (std::size_t q = 0; q < p3.size(); ++q) {
      const VecX prob = softmax(p3[q].logits);
      for (std::size_t t = 0; t < g; ++t) {
        cost(q, t) = (1.0 - prob[targets[t].class_id]) + loss_box_3d(p3[q].box, targets[t].box, s.scene->extent).value;
      }
    }
    const std::vector<int> assign3 = hungarian_match(cost);
    std::vector<int> target_of3(p3.size(), -1);
    for (std::size_t t = 0; t < g; ++t) target_of3[assign3[t]] = static_cast<int>(t);
    terms.cls3d += scene_scale * classification_term(p3, target_of3, weight_of, class_of, background,
                                                     weights.background, scene_scale,
                                                     grads ? &w.g3.logits : nullptr);
    double wbox = 0.0;
    for (std::size_t t = 0; t < g; ++t) wbox += weight_of[t];
    double box3 = 0.0;
    for (std::size_t t = 0; t < g && wbox > 0.0; ++t) {
      const int q = assign3[t];
      const Box3DLoss l = loss_box_3d(p3[q].box, targets[t].box, s.scene->extent);
      box3 += weight_of[t] * l.value;
      const double k = weight_of[t] * scene_scale / wbox;
      w.g3.box[q].center += k * l.grad.center;
      w.g3.box[q].size += k * l.grad.size;
      w.g3.box[q].yaw += k * l.grad.yaw;
      if (want_contrast && !p3[q].empty) {
        ContrastItem it;
        it.source = Source::k3D;
        it.owner = b;
        it.proposal = static_cast<std::size_t>(q);
        it.feature = p3[q].feature.values;
        it.class_id = targets[t].class_id;
        it.instance = static_cast<long>(b * 1000 + t);
        it.anchor = targets[t].box.center;
        items.push_back(std::move(it));
      }
    }
    if (wbox > 0.0) terms.box3d += scene_scale * box3 / wbox;

    // 2D
    const std::vector<Target2D> t2 = project_targets(targets, s.scene->camera);
    auto& p2 = w.o2.proposals;
    std::vector<double> weight2;
    std::vector<int> class2;
    for (const auto& t : t2) {
      weight2.push_back(weight_of[t.record]);
      class2.push_back(t.class_id);
    }
    const std::size_t g2 = std::min(t2.size(), p2.size());
    Mat cost2(static_cast<Eigen::Index>(p2.size()), static_cast<Eigen::Index>(g2));
    for (std::size_t q = 0; q < p2.size(); ++q) {
      const VecX prob = softmax(p2[q].logits);
      for (std::size_t t = 0; t < g2; ++t) {
        cost2(q, t) = (1.0 - prob[t2[t].class_id]) +
                      loss_box_2d(p2[q].box, t2[t].box, s.image->width, s.image->height).value;
      }
    }
    const std::vector<int> assign2 = hungarian_match(cost2);
    std::vector<int> target_of2(p2.size(), -1);
    for (std::size_t t = 0; t < g2; ++t) target_of2[assign2[t]] = static_cast<int>(t);
    terms.cls2d += scene_scale * classification_term(p2, target_of2, weight2, class2, background, weights.background,
                                                     scene_scale, grads ? &w.g2.logits : nullptr);
    double wbox2 = 0.0;
    for (std::size_t t = 0; t < g2; ++t) wbox2 += weight2[t];
    double box2 = 0.0;
    for (std::size_t t = 0; t < g2 && wbox2 > 0.0; ++t) {
      const int q = assign2[t];
      const Box2DLoss l = loss_box_2d(p2[q].box, t2[t].box, s.image->width, s.image->height);
      box2 += weight2[t] * l.value;
      const double k = weight2[t] * scene_scale / wbox2;
      w.g2.box[q].min += k * l.grad.min;
      w.g2.box[q].max += k * l.grad.max;
      if (want_contrast) {
        const SupervisionRecord& rec = targets[t2[t].record];
        ContrastItem it;
        it.source = Source::k2D;
        it.owner = b;
        it.proposal = static_cast<std::size_t>(q);
        it.feature = p2[q].feature.values;
        it.class_id = rec.class_id;
        it.instance = static_cast<long>(b * 1000 + t2[t].record);
        it.anchor = rec.box.center;
        items.push_back(std::move(it));
      }
    }
    if (wbox2 > 0.0) terms.box2d += scene_scale * box2 / wbox2;
  }

  // Image-level supervision on the max-size proposal.
  std::vector<ClassWork> cwork;
  cwork.reserve(classification.size());
  const double cls_scale = classification.empty() ? 0.0 : 1.0 / static_cast<double>(classification.size());
  for (std::size_t n = 0; n < classification.size(); ++n) {
    const ClassificationSample& cs = *classification[n];
    cwork.emplace_back(forward_detector_2d(model, params, cs.image, false));
    ClassWork& cw = cwork.back();
    cw.index = max_size_index(cw.out.proposals);
    compute_roi_2d(model, params, cs.image, cw.out, cw.index);
    const MaxSizeLoss l = loss_max_size_ign(cw.out.proposals, cs.class_id);
    terms.ign += cls_scale * l.value;
    cw.grads.logits[cw.index] = l.grad_logits * cls_scale;
    if (want_contrast) {
      ContrastItem it;
      it.source = Source::kClassification;
      it.owner = n;
      it.proposal = cw.index;
      it.feature = cw.out.proposals[cw.index].feature.values;
      it.class_id = cs.class_id;
      it.instance = 1000000L + static_cast<long>(n);
      items.push_back(std::move(it));
    }
  }

  // Augmented second views: a jittered point subset for 3D and a mirrored,
  // noisy crop for images. Their gradients stop at the ROI encoders.
  if (mode == ContrastiveMode::kAugmentation) {
    const std::size_t base = items.size();
    for (std::size_t k = 0; k < base; ++k) {
      const ContrastItem& src = items[k];
      ContrastItem it;
      it.owner = src.owner;
      it.class_id = src.class_id;
      it.instance = src.instance;
      it.anchor = src.anchor;
      if (src.source == Source::k3D) {
        const Scene& sc = *scenes[src.owner].scene;
        const Box3D& box = work[src.owner].o3.proposals[src.proposal].box;
        const auto inside = points_in_box(sc.points, roi_geometry(box));
        std::vector<std::size_t> keep;
        for (std::size_t idx : inside) {
          if (aug_rng.uniform() < 0.75) keep.push_back(idx);
        }
        if (keep.empty()) keep.push_back(inside.front());
        Mat local = roi_points(sc.points, keep, mc.roi_max_points);
        for (Eigen::Index j = 0; j < local.rows(); ++j) {
          for (int a = 0; a < 3; ++a) local(j, a) += 0.02 * aug_rng.normal();
        }
        it.source = Source::kAug3D;
        it.aug3 = model.roi3d.forward(params, local);
        it.feature = it.aug3->out;
      } else {
        const Image& img = src.source == Source::k2D ? *scenes[src.owner].image : classification[src.owner]->image;
        const Box2D& box = src.source == Source::k2D ? work[src.owner].o2.proposals[src.proposal].box
                                                     : cwork[src.owner].out.proposals[src.proposal].box;
        Image crop = crop_resize(img, roi_geometry(box), mc.crop_size);
        Image flipped = crop;
        for (int y = 0; y < crop.height; ++y) {
          for (int x = 0; x < crop.width; ++x) {
            for (int ch = 0; ch < crop.channels; ++ch) {
              flipped.at(y, x, ch) =
                  static_cast<float>(crop.at(y, crop.width - 1 - x, ch) + 0.02 * aug_rng.normal());
            }
          }
        }
        it.source = Source::kAug2D;
        it.aug2 = model.roi2d.forward(params, flipped);
        it.feature = it.aug2->out;
      }
      items.push_back(std::move(it));
    }
  }

  if (want_contrast && !items.empty()) {
    std::vector<EmbeddingVector> batch;
    std::vector<ProjectionHead::Cache> caches;
    std::vector<std::size_t> used;
    for (std::size_t k = 0; k < items.size(); ++k) {
      const ContrastItem& it = items[k];
      const bool is3d = it.source == Source::k3D || it.source == Source::kAug3D;
      const ProjectionHead& head = is3d ? model.proj3d : model.proj2d;
      try {
        caches.push_back(head.forward(params, it.feature));
      } catch (const DegenerateNorm&) {
        continue;
      }
      EmbeddingVector e;
      e.h = caches.back().h;
      e.modality = is3d ? Modality::kPointCloud : Modality::kImage;
      e.anchor = it.anchor;
      e.label = mode == ContrastiveMode::kClass ? it.class_id : static_cast<int>(it.instance);
      batch.push_back(std::move(e));
      used.push_back(k);
    }
    try {
      const DeccResult d = loss_decc(batch, *contrastive);
      terms.decc = contrastive->weight * d.value;
      terms.decc_applied = true;
      if (grads) {
        for (std::size_t e = 0; e < batch.size(); ++e) {
          const ContrastItem& it = items[used[e]];
          const bool is3d = it.source == Source::k3D || it.source == Source::kAug3D;
          const ProjectionHead& head = is3d ? model.proj3d : model.proj2d;
          const VecX df = head.backward(params, caches[e], contrastive->weight * d.grads[e], *grads);
          auto add = [&](std::vector<VecX>& slot) {
            if (slot[it.proposal].size() == 0) {
              slot[it.proposal] = df;
            } else {
              slot[it.proposal] += df;
            }
          };
          switch (it.source) {
            case Source::k3D:
              add(work[it.owner].g3.feature);
              break;
            case Source::k2D:
              add(work[it.owner].g2.feature);
              break;
            case Source::kClassification:
              add(cwork[it.owner].grads.feature);
              break;
            case Source::kAug3D:
              model.roi3d.backward(params, *it.aug3, df, *grads, false);
              break;
            case Source::kAug2D:
              model.roi2d.backward(params, *it.aug2, df, *grads);
              break;
          }
        }
      }
    } catch (const NoPositives&) {
      terms.decc = 0.0;
      terms.decc_applied = false;
    }
  }

  if (grads) {
    for (auto& w : work) {
      backward_detector_3d(model, params, w.o3, w.g3, *grads);
      backward_detector_2d(model, params, w.o2, w.g2, *grads);
    }
    for (auto& cw : cwork) backward_detector_2d(model, params, cw.out, cw.grads, *grads);
  }
  return terms;
}

}  // namespace

LossTerms assemble_phase1_loss(const Model& model, const ParamStore& params, const std::vector<SceneSample>& scenes,
                               const std::vector<const ClassificationSample*>& classification,
                               const LossWeights& weights, ParamStore* grads) {
  return assemble(model, params, scenes, classification, weights, nullptr, 0, grads);
}

LossTerms assemble_phase2_loss(const Model& model, const ParamStore& params, const std::vector<SceneSample>& scenes,
                               const std::vector<const ClassificationSample*>& classification,
                               const LossWeights& weights, const ContrastiveConfig& contrastive,
                               std::uint64_t aug_seed, ParamStore* grads) {
  return assemble(model, params, scenes, classification, weights, &contrastive, aug_seed, grads);
}

}  // namespace ov3d
