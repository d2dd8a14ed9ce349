#include "ov3d/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "ov3d/errors.hpp"

namespace ov3d {

const char* to_string(Objectness o) {
  return o == Objectness::kForegroundMax ? "foreground_max" : "not_background";
}

Objectness parse_objectness(const std::string& name) {
  if (name == "foreground_max") return Objectness::kForegroundMax;
  if (name == "not_background") return Objectness::kNotBackground;
  throw ConfigError("pseudo.objectness", "expected foreground_max or not_background, got '" + name + "'");
}

void ScheduleConfig::validate() const {
  if (k0 < 1) throw ConfigError("pseudo.k0", "must be >= 1");
  if (k_step < 0) throw ConfigError("pseudo.k_step", "must be >= 0");
  if (period < 1) throw ConfigError("pseudo.period", "must be >= 1");
  if (!(confidence_floor >= 0.0 && confidence_floor <= 1.0)) {
    throw ConfigError("pseudo.confidence_floor", "must be in [0, 1]");
  }
  if (!(duplicate_iou > 0.0 && duplicate_iou <= 1.0)) throw ConfigError("pseudo.duplicate_iou", "must be in (0, 1]");
}

ScheduleConfig ScheduleConfig::reference() {
  ScheduleConfig c;
  c.k0 = 50;
  c.k_step = 10;
  c.period = 50;
  return c;
}

int schedule_k(int epoch, const ScheduleConfig& cfg) {
  if (epoch < 0) throw Error("schedule_k epoch must be >= 0");
  return cfg.k0 + cfg.k_step * (epoch / cfg.period);
}

std::map<int, int> PseudoStore::count_per_class() const {
  std::map<int, int> out;
  for (const auto& l : labels) ++out[l.class_id];
  return out;
}

std::vector<SupervisionRecord> PseudoStore::records_for(std::int64_t scene_id) const {
  std::vector<SupervisionRecord> out;
  for (const auto& l : labels) {
    if (l.scene_id == scene_id) out.push_back({l.box, l.class_id, Origin::kPseudo});
  }
  return out;
}

bool PseudoStore::operator==(const PseudoStore& o) const {
  if (epoch != o.epoch || labels.size() != o.labels.size()) return false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& a = labels[i];
    const auto& b = o.labels[i];
    if (a.scene_id != b.scene_id || a.class_id != b.class_id || a.confidence != b.confidence || a.epoch != b.epoch ||
        a.box.center != b.box.center || a.box.size != b.box.size || a.box.yaw != b.box.yaw) {
      return false;
    }
  }
  return true;
}

namespace {

struct Candidate {
  PseudoLabel label;
  std::size_t proposal = 0;
};

}  // namespace

PseudoStore generate_pseudo_labels(const Model& model, const ParamStore& params, const std::vector<PseudoInput>& scenes,
                                   const VocabularySplit& split, int epoch, const ScheduleConfig& cfg,
                                   const CropClassifier& classifier) {
  const ModelConfig& mc = model.config();
  const std::vector<int> unseen = split.unseen();
  std::vector<Candidate> pool;
  for (const PseudoInput& in : scenes) {
    const Scene& scene = *in.scene;
    std::vector<Box3D> seen_gt;
    for (const auto& o : scene.objects) {
      if (o.labeled && split.is_seen(o.class_id)) seen_gt.push_back(o.box);
    }
    const Det3DOutput det = forward_detector_3d(model, params, scene.points, scene.extent);
    std::vector<Candidate> local;
    for (std::size_t q = 0; q < det.proposals.size(); ++q) {
      const Proposal3D& p = det.proposals[q];
      if (p.empty) continue;
      const VecX prob3 = softmax(p.logits);
      const double obj =
          cfg.objectness == Objectness::kForegroundMax ? p.confidence : 1.0 - prob3[mc.background()];
      if (obj < cfg.confidence_floor) continue;
      const bool duplicate = std::any_of(seen_gt.begin(), seen_gt.end(),
                                         [&](const Box3D& g) { return iou_3d(p.box, g) >= cfg.duplicate_iou; });
      if (duplicate) continue;
      if (points_in_box(scene.points, p.box).empty()) continue;
      Box2D b2;
      try {
        b2 = project_box_to_2d(p.box, scene.camera);
      } catch (const AllBehindCamera&) {
        continue;
      }
      if (b2.width() < 1.0 || b2.height() < 1.0) continue;
      const Image crop = crop_resize(*in.image, b2, mc.crop_size);
      const VecX prob2 = classifier
                             ? classifier(in, p.box, crop)
                             : softmax(classify(params, model.cls2d, encode_image_roi(model, params, crop).values));
      const int cls = foreground_argmax(prob2);
      if (std::find(unseen.begin(), unseen.end(), cls) == unseen.end()) continue;
      const double conf = obj * prob2[cls];
      if (!(conf > 0.0)) continue;
      local.push_back({{scene.id, p.box, cls, std::min(conf, 1.0), epoch}, q});
    }
    // Several queries often land on one object; keep the most confident.
    std::stable_sort(local.begin(), local.end(),
                     [](const Candidate& a, const Candidate& b) { return a.label.confidence > b.label.confidence; });
    std::vector<Candidate> kept;
    for (const Candidate& c : local) {
      const bool overlaps = std::any_of(kept.begin(), kept.end(), [&](const Candidate& k) {
        return iou_3d(k.label.box, c.label.box) >= cfg.duplicate_iou;
      });
      if (!overlaps) kept.push_back(c);
    }
    pool.insert(pool.end(), kept.begin(), kept.end());
  }

  const int k = schedule_k(epoch, cfg);
  std::stable_sort(pool.begin(), pool.end(), [](const Candidate& a, const Candidate& b) {
    if (a.label.confidence != b.label.confidence) return a.label.confidence > b.label.confidence;
    if (a.label.scene_id != b.label.scene_id) return a.label.scene_id < b.label.scene_id;
    return a.proposal < b.proposal;
  });
  std::map<int, int> taken;
  PseudoStore store;
  store.epoch = epoch;
  for (const Candidate& c : pool) {
    if (taken[c.label.class_id] >= k) continue;
    ++taken[c.label.class_id];
    store.labels.push_back(c.label);
  }
  std::stable_sort(store.labels.begin(), store.labels.end(), [](const PseudoLabel& a, const PseudoLabel& b) {
    if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
    return a.confidence > b.confidence;
  });
  return store;
}

PseudoStore refresh_if_due(int epoch, const ScheduleConfig& cfg, const PseudoStore& current,
                           const std::function<PseudoStore(int)>& regenerate, bool* regenerated) {
  const bool due = epoch % cfg.period == 0;
  if (regenerated) *regenerated = due;
  return due ? regenerate(epoch) : current;
}

std::string dump_store(const PseudoStore& store) {
  std::string out;
  for (const auto& l : store.labels) {
    nlohmann::ordered_json j;
    j["scene_id"] = l.scene_id;
    j["class"] = l.class_id;
    j["box"] = {l.box.center.x(), l.box.center.y(), l.box.center.z(), l.box.size.x(),
                l.box.size.y(),   l.box.size.z(),   l.box.yaw};
    j["confidence"] = l.confidence;
    j["epoch"] = l.epoch;
    out += j.dump() + "\n";
  }
  return out;
}

PseudoStore parse_store(const std::string& text) {
  PseudoStore store;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PseudoLabel l;
      l.scene_id = j.at("scene_id").get<std::int64_t>();
      l.class_id = j.at("class").get<int>();
      const auto& b = j.at("box");
      if (b.size() != 7) throw FormatError("box must have 7 values");
      l.box.center = Vec3(b[0].get<double>(), b[1].get<double>(), b[2].get<double>());
      l.box.size = Vec3(b[3].get<double>(), b[4].get<double>(), b[5].get<double>());
      l.box.yaw = b[6].get<double>();
      l.confidence = j.at("confidence").get<double>();
      l.epoch = j.at("epoch").get<int>();
      store.epoch = std::max(store.epoch, l.epoch);
      store.labels.push_back(l);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("pseudo-label dump line " + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("pseudo-label dump line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return store;
}

std::array<int, 10> confidence_histogram(const PseudoStore& store) {
  std::array<int, 10> h{};
  for (const auto& l : store.labels) {
    const int bin = std::clamp(static_cast<int>(std::floor(l.confidence * 10.0)), 0, 9);
    ++h[bin];
  }
  return h;
}

std::string summarize_store(const PseudoStore& store) {
  std::ostringstream os;
  os << store.labels.size() << " labels\n";
  if (store.labels.empty()) return os.str();
  os << "class  count\n";
  for (const auto& [c, n] : store.count_per_class()) os << std::setw(5) << c << "  " << n << "\n";
  os << "confidence histogram\n";
  const auto h = confidence_histogram(store);
  for (int b = 0; b < 10; ++b) {
    os << "  [" << std::fixed << std::setprecision(1) << b / 10.0 << ", " << (b + 1) / 10.0
       << (b == 9 ? "]" : ")") << "  " << h[b] << "\n";
  }
  return os.str();
}

}  // namespace ov3d
