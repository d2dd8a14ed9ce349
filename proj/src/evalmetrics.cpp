#include "ov3d/evalmetrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "json.hpp"
#include "ov3d/errors.hpp"

namespace ov3d {

std::vector<bool> match_detections(const std::vector<Box3D>& detections, const std::vector<Box3D>& ground_truths,
                                   double threshold) {
  std::vector<bool> tp(detections.size(), false);
  std::vector<bool> used(ground_truths.size(), false);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (used[g]) continue;
      const double iou = iou_3d(detections[d], ground_truths[g]);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= threshold) {
      used[best] = true;
      tp[d] = true;
    }
  }
  return tp;
}

std::optional<double> average_precision(const std::vector<bool>& tp, std::size_t gt_count) {
  if (gt_count == 0) return std::nullopt;
  // Extended precision so the result is the double nearest the rational AP.
  const std::size_t n = tp.size();
  std::vector<long double> precision(n);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    hits += tp[i];
    precision[i] = static_cast<long double>(hits) / static_cast<long double>(i + 1);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  // Recall steps by 1 / gt_count at every true positive.
  long double sum = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    if (tp[i]) sum += precision[i];
  }
  return static_cast<double>(sum / static_cast<long double>(gt_count));
}

void sort_detections(std::vector<Detection>& detections) {
  std::stable_sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
    return a.index < b.index;
  });
}

MetricsReport evaluate_detections(std::vector<Detection> detections, const std::vector<GroundTruth>& ground_truths,
                                  const std::vector<int>& class_set, double threshold) {
  sort_detections(detections);
  MetricsReport report;
  double ap_sum = 0.0;
  int ap_count = 0;
  for (int c : class_set) {
    std::map<std::int64_t, std::vector<Box3D>> gts;
    int gt_count = 0;
    for (const auto& g : ground_truths) {
      if (g.class_id != c) continue;
      gts[g.scene_id].push_back(g.box);
      ++gt_count;
    }
    // Greedy matching in global confidence order; matching state is per scene.
    std::map<std::int64_t, std::vector<bool>> used;
    std::vector<bool> tp;
    std::map<std::int64_t, std::vector<const Detection*>> by_scene;
    for (const auto& d : detections) {
      if (d.class_id != c) continue;
      auto it = gts.find(d.scene_id);
      bool hit = false;
      if (it != gts.end()) {
        auto& u = used[d.scene_id];
        u.resize(it->second.size(), false);
        int best = -1;
        double best_iou = -1.0;
        for (std::size_t g = 0; g < it->second.size(); ++g) {
          if (u[g]) continue;
          const double iou = iou_3d(d.box, it->second[g]);
          if (iou > best_iou) {
            best_iou = iou;
            best = static_cast<int>(g);
          }
        }
        if (best >= 0 && best_iou >= threshold) {
          u[best] = true;
          hit = true;
        }
      }
      tp.push_back(hit);
      by_scene[d.scene_id].push_back(&d);
    }
    ClassMetrics cm;
    cm.class_id = c;
    cm.gt = gt_count;
    cm.detections = static_cast<int>(tp.size());
    cm.ap25 = average_precision(tp, static_cast<std::size_t>(gt_count));
    if (cm.ap25) {
      ap_sum += *cm.ap25;
      ++ap_count;
    }
    report.per_class.push_back(cm);

    for (const auto& [scene, boxes] : gts) {
      const auto it = by_scene.find(scene);
      for (const Box3D& g : boxes) {
        ++report.gt_total;
        if (it == by_scene.end()) continue;
        const bool recalled = std::any_of(it->second.begin(), it->second.end(),
                                          [&](const Detection* d) { return iou_3d(d->box, g) >= threshold; });
        report.gt_recalled += recalled;
      }
    }
  }
  report.map25 = ap_count > 0 ? ap_sum / ap_count : 0.0;
  report.ar25 = report.gt_total > 0 ? static_cast<double>(report.gt_recalled) / report.gt_total : 0.0;
  return report;
}

std::vector<Detection> detect_scene(const Model& model, const ParamStore& params, const Scene& scene) {
  const Det3DOutput out = forward_detector_3d(model, params, scene.points, scene.extent);
  std::vector<Detection> dets;
  for (std::size_t q = 0; q < out.proposals.size(); ++q) {
    const Proposal3D& p = out.proposals[q];
    dets.push_back({scene.id, q, foreground_argmax(p.logits), p.confidence, p.box});
  }
  return dets;
}

std::vector<GroundTruth> ground_truths_of(const std::vector<Scene>& scenes) {
  std::vector<GroundTruth> out;
  for (const auto& s : scenes) {
    for (const auto& o : s.objects) out.push_back({s.id, o.class_id, o.box});
  }
  return out;
}

MetricsReport evaluate(const Model& model, const ParamStore& params, const std::vector<Scene>& scenes,
                       const VocabularySplit& split, const std::vector<int>& class_set) {
  for (int c : class_set) {
    if (std::find(split.test.begin(), split.test.end(), c) == split.test.end()) {
      throw Error("evaluation class " + std::to_string(c) + " is not in the test vocabulary");
    }
  }
  std::vector<Detection> dets;
  for (const auto& s : scenes) {
    auto d = detect_scene(model, params, s);
    dets.insert(dets.end(), d.begin(), d.end());
  }
  return evaluate_detections(std::move(dets), ground_truths_of(scenes), class_set);
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string report_table(const MetricsReport& r) {
  std::ostringstream os;
  os << "class     gt   dets    AP25\n";
  for (const auto& c : r.per_class) {
    char line[96];
    std::snprintf(line, sizeof(line), "%5d  %5d  %5d  %6s\n", c.class_id, c.gt, c.detections,
                  c.ap25 ? fixed(100.0 * *c.ap25, 2).c_str() : "-");
    os << line;
  }
  os << "mAP25  " << fixed(100.0 * r.map25, 2) << "\n";
  os << "AR25   " << fixed(100.0 * r.ar25, 2) << "  (" << r.gt_recalled << "/" << r.gt_total << ")\n";
  return os.str();
}

std::string report_jsonl(const MetricsReport& r) {
  std::string out;
  for (const auto& c : r.per_class) {
    nlohmann::ordered_json j;
    j["class"] = c.class_id;
    j["ap25"] = c.ap25 ? nlohmann::ordered_json(*c.ap25) : nlohmann::ordered_json(nullptr);
    j["gt"] = c.gt;
    j["detections"] = c.detections;
    out += j.dump() + "\n";
  }
  nlohmann::ordered_json m;
  m["summary"] = "map25";
  m["value"] = r.map25;
  out += m.dump() + "\n";
  nlohmann::ordered_json a;
  a["summary"] = "ar25";
  a["value"] = r.ar25;
  a["recalled"] = r.gt_recalled;
  a["gt"] = r.gt_total;
  out += a.dump() + "\n";
  return out;
}

std::string dump_detections(const std::vector<Detection>& detections) {
  std::string out;
  for (const auto& d : detections) {
    nlohmann::ordered_json j;
    j["scene_id"] = d.scene_id;
    j["index"] = d.index;
    j["class"] = d.class_id;
    j["confidence"] = d.confidence;
    j["box"] = {d.box.center.x(), d.box.center.y(), d.box.center.z(), d.box.size.x(),
                d.box.size.y(),   d.box.size.z(),   d.box.yaw};
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<Detection> parse_detections(const std::string& text) {
  std::vector<Detection> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Detection d;
      d.scene_id = j.at("scene_id").get<std::int64_t>();
      d.index = j.at("index").get<std::size_t>();
      d.class_id = j.at("class").get<int>();
      d.confidence = j.at("confidence").get<double>();
      const auto& b = j.at("box");
      if (b.size() != 7) throw FormatError("box must have 7 values");
      d.box.center = Vec3(b[0].get<double>(), b[1].get<double>(), b[2].get<double>());
      d.box.size = Vec3(b[3].get<double>(), b[4].get<double>(), b[5].get<double>());
      d.box.yaw = b[6].get<double>();
      out.push_back(d);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("detection dump line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ov3d
