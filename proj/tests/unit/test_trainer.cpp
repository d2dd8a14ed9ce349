#include <set>

#include "doctest.h"
#include "ov3d/errors.hpp"
#include "ov3d/trainer.hpp"
#include "unit/helpers.hpp"

using namespace ov3d;
using namespace ov3d::testing;

namespace {

const Dataset& small_data() {
  static const Dataset d = generate_dataset(small_scene_config(), small_data_config(), 2);
  return d;
}

TrainConfig quick_config(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.learning_rate = 1e-2;
  c.batch_size = 3;
  c.classification_per_step = 2;
  c.epochs_phase1 = 3;
  c.epochs_phase2 = 5;
  c.schedule.period = 2;
  c.schedule.k0 = 2;
  c.schedule.k_step = 1;
  return c;
}

bool same_params(const ParamStore& a, const ParamStore& b) {
  return serialize_checkpoint(a) == serialize_checkpoint(b);
}

ParamStore scalar_param(double v) {
  ParamStore p;
  VecX x(1);
  x[0] = v;
  p.add("x", x);
  return p;
}

}  // namespace

TEST_CASE("zero epochs return the initialization") {
  const Model model(tiny_model_config());
  TrainConfig c = quick_config(5);
  c.epochs_phase1 = 0;
  c.epochs_phase2 = 0;
  TrainLog log;
  const ParamStore p1 = train_phase1(model, small_data(), c, log);
  CHECK(same_params(p1, model.init(derive_seed(5, 1))));
  const ParamStore p2 = train_phase2(model, small_data(), p1, c, log);
  CHECK(same_params(p1, p2));
  CHECK(log.epochs.empty());
  CHECK(log.regenerations == 0);
}

TEST_CASE("phase-1 loss decreases with the default optimizer settings") {
  const Model model(tiny_model_config());
  for (std::uint64_t seed : {0, 1, 2}) {
    TrainConfig c;
    c.seed = seed;
    c.epochs_phase1 = 15;
    TrainLog log;
    train_phase1(model, small_data(), c, log);
    REQUIRE(log.epochs.size() == 15);
    CHECK(log.epochs.back().total <= log.epochs.front().total);
    for (const auto& r : log.epochs) {
      CHECK(r.phase == 1);
      CHECK(r.steps == 2);
      CHECK(r.total == r.mean.total());
    }
  }
}

TEST_CASE("training is deterministic") {
  const Model model(tiny_model_config());
  const TrainConfig c = quick_config(9);
  auto run = [&] {
    TrainLog log;
    PseudoStore store;
    const ParamStore p1 = train_phase1(model, small_data(), c, log);
    const ParamStore p2 = train_phase2(model, small_data(), p1, c, log, {}, &store);
    return std::make_tuple(serialize_checkpoint(p2), log.to_jsonl(), dump_store(store));
  };
  CHECK(run() == run());
  TrainConfig other = c;
  other.seed = 10;
  TrainLog log;
  CHECK_FALSE(same_params(train_phase1(model, small_data(), c, log), train_phase1(model, small_data(), other, log)));
}

TEST_CASE("phase 2 regenerates once per period and respects k") {
  const Model model(tiny_model_config());
  TrainConfig c = quick_config(3);
  TrainLog base_log;
  const ParamStore p1 = train_phase1(model, small_data(), c, base_log);
  for (int period : {1, 2, 3, 7}) {
    c.schedule.period = period;
    TrainLog log;
    int evaluations = 0;
    TrainHooks hooks;
    hooks.evaluate = [&](const ParamStore&) {
      ++evaluations;
      return MetricsReport{};
    };
    train_phase2(model, small_data(), p1, c, log, hooks);
    const int expected = (c.epochs_phase2 + period - 1) / period;
    CHECK(log.regenerations == expected);
    // One snapshot before each later regeneration and one at the end.
    CHECK(evaluations == expected);
    CHECK(log.snapshots.size() == static_cast<std::size_t>(expected));
    for (std::size_t i = 0; i < log.snapshots.size(); ++i) CHECK(log.snapshots[i].refreshes == static_cast<int>(i) + 1);
    int seen_regen = 0;
    for (const auto& r : log.epochs) {
      CHECK(r.phase == 2);
      CHECK(r.regenerated == (r.epoch % period == 0));
      seen_regen += r.regenerated;
      CHECK(r.pseudo_k == schedule_k(r.epoch, c.schedule));
      for (const auto& [cls, n] : r.pseudo_per_class) {
        CHECK(n <= r.pseudo_k);
        CHECK_FALSE(small_data().split.is_seen(cls));
      }
    }
    CHECK(seen_regen == expected);
  }
  CHECK(c.epochs_phase2 < 7);
}

TEST_CASE("phase 2 without pseudo labels never builds a store") {
  const Model model(tiny_model_config());
  TrainConfig c = quick_config(4);
  c.use_pseudo = false;
  TrainLog log;
  PseudoStore store;
  store.labels.resize(3);
  const ParamStore p1 = train_phase1(model, small_data(), c, log);
  train_phase2(model, small_data(), p1, c, log, {}, &store);
  CHECK(store.labels.empty());
  CHECK(log.regenerations == 0);
  for (const auto& r : log.epochs) {
    CHECK_FALSE(r.regenerated);
    CHECK(r.pseudo_k == 0);
    CHECK(r.pseudo_per_class.empty());
  }
}

TEST_CASE("phase 2 leaves the phase-1 log untouched") {
  const Model model(tiny_model_config());
  const TrainConfig c = quick_config(6);
  TrainLog log;
  const ParamStore p1 = train_phase1(model, small_data(), c, log);
  const std::string before = log.to_jsonl();
  const auto n1 = log.epochs.size();
  train_phase2(model, small_data(), p1, c, log);
  CHECK(log.epochs.size() == n1 + static_cast<std::size_t>(c.epochs_phase2));
  TrainLog head;
  head.epochs.assign(log.epochs.begin(), log.epochs.begin() + static_cast<std::ptrdiff_t>(n1));
  CHECK(head.to_jsonl() == before);
}

TEST_CASE("label ratio masks whole scenes") {
  const auto& scenes = small_data().train;
  REQUIRE(scenes.size() == 6);
  auto labeled_count = [](const std::vector<Scene>& s) {
    int n = 0;
    for (const auto& sc : s) {
      REQUIRE_FALSE(sc.objects.empty());
      const bool flag = sc.objects.front().labeled;
      for (const auto& o : sc.objects) CHECK(o.labeled == flag);
      n += flag;
    }
    return n;
  };
  CHECK(labeled_count(apply_label_ratio(scenes, 1.0, 3)) == 6);
  CHECK(labeled_count(apply_label_ratio(scenes, 0.5, 3)) == 3);
  CHECK(labeled_count(apply_label_ratio(scenes, 0.34, 3)) == 2);
  CHECK(labeled_count(apply_label_ratio(scenes, 0.1, 3)) == 0);
  CHECK_THROWS_AS(apply_label_ratio(scenes, 0.0, 3), ConfigError);
  CHECK_THROWS_AS(apply_label_ratio(scenes, 1.5, 3), ConfigError);

  std::vector<Scene> ten;
  for (int i = 0; i < 10; ++i) ten.push_back(scenes[static_cast<std::size_t>(i % 6)]);
  CHECK(labeled_count(apply_label_ratio(ten, 0.5, 8)) == 5);

  auto mask = [](const std::vector<Scene>& s) {
    std::vector<bool> m;
    for (const auto& sc : s) m.push_back(sc.objects.front().labeled);
    return m;
  };
  CHECK(mask(apply_label_ratio(scenes, 0.5, 3)) == mask(apply_label_ratio(scenes, 0.5, 3)));
  std::set<std::vector<bool>> masks;
  for (std::uint64_t seed = 0; seed < 10; ++seed) masks.insert(mask(apply_label_ratio(scenes, 0.5, seed)));
  CHECK(masks.size() > 1);
}

TEST_CASE("visible supervision is labeled seen ground truth") {
  const Dataset& d = small_data();
  const auto masked = apply_label_ratio(d.train, 0.5, 1);
  for (const auto& s : masked) {
    const auto recs = visible_supervision(s, d.split);
    std::size_t expected = 0;
    for (const auto& o : s.objects) expected += o.labeled && d.split.is_seen(o.class_id);
    CHECK(recs.size() == expected);
    for (const auto& r : recs) {
      CHECK(d.split.is_seen(r.class_id));
      CHECK(r.origin == Origin::kGroundTruth);
    }
  }
}

TEST_CASE("optimizer: sgd") {
  TrainConfig c;
  c.optimizer = OptimizerKind::kSgd;
  c.learning_rate = 0.1;
  OptimizerState state;
  ParamStore p = scalar_param(0.75);
  optimizer_step(p, p.zeros_like(), state, c);
  CHECK(p[0](0, 0) == 0.75);

  // f(x) = (x - 2)^2 decreases monotonically for a small step.
  p = scalar_param(0.0);
  double prev = 4.0;
  for (int i = 0; i < 100; ++i) {
    ParamStore g = p.zeros_like();
    g[0](0, 0) = 2.0 * (p[0](0, 0) - 2.0);
    optimizer_step(p, g, state, c);
    const double f = std::pow(p[0](0, 0) - 2.0, 2);
    CHECK(f <= prev);
    prev = f;
  }
  CHECK(prev < 1e-6);
  // Updates land on float32 values.
  CHECK(static_cast<double>(static_cast<float>(p[0](0, 0))) == p[0](0, 0));
}

TEST_CASE("optimizer: adam reaches the quadratic minimum") {
  TrainConfig c;
  c.learning_rate = 0.05;
  OptimizerState state;
  ParamStore p = scalar_param(0.0);
  int steps = 0;
  double f = 4.0;
  while (steps < 500 && f >= 1e-6) {
    ParamStore g = p.zeros_like();
    g[0](0, 0) = 2.0 * (p[0](0, 0) - 2.0);
    optimizer_step(p, g, state, c);
    f = std::pow(p[0](0, 0) - 2.0, 2);
    ++steps;
  }
  INFO("steps ", steps, " f ", f);
  CHECK(f < 1e-6);
  CHECK(state.step == steps);
}

TEST_CASE("optimizer rejects bad gradients") {
  TrainConfig c;
  OptimizerState state;
  ParamStore p = scalar_param(1.0);
  ParamStore g = p.zeros_like();
  g[0](0, 0) = std::nan("");
  CHECK_THROWS_AS(optimizer_step(p, g, state, c), NonFiniteUpdate);
  ParamStore wrong;
  wrong.add("y", VecX::Zero(2));
  CHECK_THROWS_AS(optimizer_step(p, wrong, state, c), Error);
  CHECK(parse_optimizer("sgd") == OptimizerKind::kSgd);
  CHECK_THROWS_AS(parse_optimizer("rmsprop"), ConfigError);
}

TEST_CASE("divergence is reported") {
  const Model model(tiny_model_config());
  TrainConfig c = quick_config(1);
  c.learning_rate = 1e30;
  c.optimizer = OptimizerKind::kSgd;
  TrainLog log;
  bool threw = false;
  try {
    train_phase1(model, small_data(), c, log);
  } catch (const DivergenceDetected&) {
    threw = true;
  } catch (const NonFiniteUpdate&) {
    threw = true;
  }
  CHECK(threw);
}
