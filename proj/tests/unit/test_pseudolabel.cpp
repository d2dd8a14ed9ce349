#include <algorithm>
#include <set>

#include "doctest.h"
#include "ov3d/errors.hpp"
#include "ov3d/pseudolabel.hpp"
#include "unit/helpers.hpp"

using namespace ov3d;
using namespace ov3d::testing;

namespace {

struct Corpus {
  Dataset data;
  Model model{tiny_model_config()};
  ParamStore params;
  std::vector<PseudoInput> inputs;

  Corpus() {
    data = generate_dataset(small_scene_config(), small_data_config(), 4);
    params = perturbed_params(model, 4, 0.2);
    for (std::size_t i = 0; i < data.train.size(); ++i) inputs.push_back({&data.train[i], &data.train_images[i]});
  }
};

const Corpus& corpus() {
  static const Corpus c;
  return c;
}

ScheduleConfig small_k(int k) {
  ScheduleConfig s;
  s.k0 = k;
  s.k_step = 0;
  return s;
}

// Untrained 2D heads tend to favour one class; a box-seeded random
// distribution exercises every branch deterministically.
VecX hashed_probabilities(const PseudoInput&, const Box3D& box, const Image&) {
  std::uint64_t seed = 0;
  for (int a = 0; a < 3; ++a) seed = derive_seed(seed, static_cast<std::uint64_t>(std::llround(box.center[a] * 1e6)));
  Rng rng(seed);
  VecX logits(9);
  for (int i = 0; i < 9; ++i) logits[i] = 2.0 * rng.normal();
  return softmax(logits);
}

std::string key(const PseudoLabel& l) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%lld/%d/%.17g/%.17g", static_cast<long long>(l.scene_id), l.class_id,
                l.box.center.x(), l.box.center.y());
  return buf;
}

}  // namespace

TEST_CASE("schedule_k") {
  const ScheduleConfig ref = ScheduleConfig::reference();
  CHECK(schedule_k(0, ref) == 50);
  CHECK(schedule_k(49, ref) == 50);
  CHECK(schedule_k(50, ref) == 60);
  CHECK(schedule_k(120, ref) == 70);
  CHECK(schedule_k(199, ref) == 80);
  const ScheduleConfig desk;
  CHECK(schedule_k(0, desk) == 20);
  CHECK(schedule_k(10, desk) == 30);
  CHECK_THROWS_AS(schedule_k(-1, desk), Error);
}

TEST_CASE("schedule validation names the key") {
  auto key_of = [](ScheduleConfig c) {
    try {
      c.validate();
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string();
  };
  ScheduleConfig c;
  c.k0 = 0;
  CHECK(key_of(c) == "pseudo.k0");
  c = {};
  c.period = 0;
  CHECK(key_of(c) == "pseudo.period");
  c = {};
  c.confidence_floor = 1.5;
  CHECK(key_of(c) == "pseudo.confidence_floor");
  c = {};
  c.duplicate_iou = 0.0;
  CHECK(key_of(c) == "pseudo.duplicate_iou");
  CHECK(key_of({}).empty());
  CHECK(parse_objectness(to_string(Objectness::kForegroundMax)) == Objectness::kForegroundMax);
  CHECK_THROWS_AS(parse_objectness("x"), ConfigError);
}

TEST_CASE("generated labels satisfy the store invariants") {
  const Corpus& c = corpus();
  for (int k : {1, 2, 5}) {
    const ScheduleConfig cfg = small_k(k);
    const PseudoStore store =
        generate_pseudo_labels(c.model, c.params, c.inputs, c.data.split, 7, cfg, hashed_probabilities);
    CHECK(store.epoch == 7);
    CHECK_FALSE(store.labels.empty());
    for (const auto& [cls, n] : store.count_per_class()) CHECK(n <= k);
    for (std::size_t i = 0; i < store.labels.size(); ++i) {
      const PseudoLabel& l = store.labels[i];
      CHECK_FALSE(c.data.split.is_seen(l.class_id));
      CHECK(l.epoch == 7);
      CHECK(l.confidence > 0.0);
      CHECK(l.confidence <= 1.0);
      CHECK(l.confidence >= 0.0);
      const Scene& s = c.data.train.at(static_cast<std::size_t>(l.scene_id));
      CHECK(s.id == l.scene_id);
      CHECK_FALSE(points_in_box(s.points, l.box).empty());
      for (const auto& o : s.objects) {
        if (o.labeled && c.data.split.is_seen(o.class_id)) CHECK(iou_3d(o.box, l.box) < cfg.duplicate_iou);
      }
      if (i > 0) {
        const PseudoLabel& p = store.labels[i - 1];
        CHECK(p.scene_id <= l.scene_id);
        if (p.scene_id == l.scene_id) CHECK(p.confidence >= l.confidence);
      }
    }
  }
}

TEST_CASE("a larger k keeps every label of a smaller k") {
  const Corpus& c = corpus();
  std::set<std::string> prev;
  std::size_t prev_size = 0;
  for (int k : {1, 2, 3, 6, 50}) {
    const PseudoStore s =
        generate_pseudo_labels(c.model, c.params, c.inputs, c.data.split, 0, small_k(k), hashed_probabilities);
    std::set<std::string> now;
    for (const auto& l : s.labels) now.insert(key(l));
    CHECK(std::includes(now.begin(), now.end(), prev.begin(), prev.end()));
    CHECK(s.labels.size() >= prev_size);
    prev = now;
    prev_size = s.labels.size();
  }
  CHECK(prev_size > 0);
}

TEST_CASE("pseudo-label generation is deterministic") {
  const Corpus& c = corpus();
  const ScheduleConfig cfg;
  CHECK(generate_pseudo_labels(c.model, c.params, c.inputs, c.data.split, 3, cfg) ==
        generate_pseudo_labels(c.model, c.params, c.inputs, c.data.split, 3, cfg));
  const auto a = generate_pseudo_labels(c.model, c.params, c.inputs, c.data.split, 3, cfg, hashed_probabilities);
  CHECK_FALSE(a.labels.empty());
  CHECK(a == generate_pseudo_labels(c.model, c.params, c.inputs, c.data.split, 3, cfg, hashed_probabilities));
}

TEST_CASE("confidence floor at 1 empties the store") {
  const Corpus& c = corpus();
  ScheduleConfig cfg;
  cfg.confidence_floor = 1.0;
  const auto store = generate_pseudo_labels(c.model, c.params, c.inputs, c.data.split, 0, cfg, hashed_probabilities);
  CHECK(store.labels.empty());
}

TEST_CASE("an oracle crop classifier yields correct classes") {
  const Corpus& c = corpus();
  // Many queries so that some untrained boxes overlap real objects.
  ModelConfig mc = tiny_model_config();
  mc.queries_3d = 48;
  const Model model(mc);
  const ParamStore params = perturbed_params(model, 5, 0.2);
  const int classes = mc.num_classes;
  // One-hot on the class of the best-overlapping object, background otherwise.
  const CropClassifier oracle = [&](const PseudoInput& in, const Box3D& box, const Image&) {
    VecX p = VecX::Zero(classes + 1);
    double best = 0.0;
    int cls = classes;
    for (const auto& o : in.scene->objects) {
      const double v = iou_3d(o.box, box);
      if (v > best) {
        best = v;
        cls = o.class_id;
      }
    }
    p[best >= 0.1 ? cls : classes] = 1.0;
    return p;
  };
  ScheduleConfig cfg = small_k(100);
  const PseudoStore store = generate_pseudo_labels(model, params, c.inputs, c.data.split, 0, cfg, oracle);
  REQUIRE_FALSE(store.labels.empty());
  for (const auto& l : store.labels) {
    const Scene& s = c.data.train.at(static_cast<std::size_t>(l.scene_id));
    double best = 0.0;
    int cls = -1;
    for (const auto& o : s.objects) {
      if (iou_3d(o.box, l.box) > best) {
        best = iou_3d(o.box, l.box);
        cls = o.class_id;
      }
    }
    CHECK(best >= 0.1);
    CHECK(l.class_id == cls);
  }
}

TEST_CASE("refresh happens exactly on period boundaries") {
  ScheduleConfig cfg;
  cfg.period = 7;
  for (int epochs : {1, 7, 8, 20, 21}) {
    int calls = 0;
    PseudoStore current;
    for (int e = 0; e < epochs; ++e) {
      bool did = false;
      current = refresh_if_due(
          e, cfg, current,
          [&](int epoch) {
            ++calls;
            PseudoStore s;
            s.epoch = epoch;
            return s;
          },
          &did);
      CHECK(did == (e % 7 == 0));
      CHECK(current.epoch == e / 7 * 7);
    }
    CHECK(calls == (epochs + 6) / 7);
  }
}

TEST_CASE("store dump round trip") {
  const Corpus& c = corpus();
  const PseudoStore s =
      generate_pseudo_labels(c.model, c.params, c.inputs, c.data.split, 0, ScheduleConfig{}, hashed_probabilities);
  REQUIRE_FALSE(s.labels.empty());
  const std::string text = dump_store(s);
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(s.labels.size()));
  CHECK(parse_store(text) == s);
  CHECK(dump_store(parse_store(text)) == text);
  CHECK(parse_store("").labels.empty());
  CHECK_THROWS_AS(parse_store("{\"scene_id\": 1}\n"), FormatError);
  CHECK_THROWS_AS(parse_store("not json\n"), FormatError);
  CHECK_THROWS_AS(parse_store(R"({"scene_id":1,"class":2,"box":[1,2,3],"confidence":0.5,"epoch":0})"), FormatError);
}

TEST_CASE("store summaries") {
  PseudoStore empty;
  CHECK(summarize_store(empty) == "0 labels\n");

  PseudoStore s;
  const std::vector<double> confs{0.0, 0.05, 0.1, 0.35, 0.999, 1.0, 0.5, 0.5};
  for (std::size_t i = 0; i < confs.size(); ++i) {
    PseudoLabel l;
    l.scene_id = static_cast<std::int64_t>(i % 3);
    l.class_id = static_cast<int>(4 + i % 2);
    l.confidence = confs[i];
    s.labels.push_back(l);
  }
  std::array<int, 10> expected{};
  for (double v : confs) {
    int bin = 0;
    while (bin < 9 && v >= (bin + 1) / 10.0) ++bin;
    ++expected[bin];
  }
  CHECK(confidence_histogram(s) == expected);
  const auto counts = s.count_per_class();
  CHECK(counts.at(4) == 4);
  CHECK(counts.at(5) == 4);
  const std::string text = summarize_store(s);
  CHECK(text.rfind("8 labels\n", 0) == 0);
  CHECK(text.find("[0.9, 1.0]  2") != std::string::npos);
  const auto recs = s.records_for(1);
  CHECK(recs.size() == 3);
  for (const auto& r : recs) CHECK(r.origin == Origin::kPseudo);
}
