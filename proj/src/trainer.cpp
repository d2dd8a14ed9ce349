#include "ov3d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "ov3d/errors.hpp"
#include "ov3d/rng.hpp"

namespace ov3d {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kLabelStream = 2;
constexpr std::uint64_t kPhase1Stream = 100;
constexpr std::uint64_t kPhase2Stream = 200000;
constexpr std::uint64_t kAugStream = 400000;

std::vector<bool> label_mask(std::size_t n, double ratio, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  const auto keep = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = true;
  return mask;
}

void accumulate(LossTerms& acc, const LossTerms& t) {
  acc.box3d += t.box3d;
  acc.cls3d += t.cls3d;
  acc.box2d += t.box2d;
  acc.cls2d += t.cls2d;
  acc.ign += t.ign;
  acc.decc += t.decc;
  acc.decc_applied = acc.decc_applied || t.decc_applied;
}

void scale_terms(LossTerms& t, double s) {
  t.box3d *= s;
  t.cls3d *= s;
  t.box2d *= s;
  t.cls2d *= s;
  t.ign *= s;
  t.decc *= s;
}

void clip_gradients(ParamStore& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (std::size_t t = 0; t < grads.size(); ++t) sq += grads[t].squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    for (std::size_t t = 0; t < grads.size(); ++t) grads[t] *= max_norm / norm;
  }
}

// Drives one phase: fixed step order, one optimizer, per-epoch records.
class EpochRunner {
 public:
  EpochRunner(const Model& model, const Dataset& data, const TrainConfig& cfg, ParamStore params, int phase)
      : model_(model), data_(data), cfg_(cfg), params_(std::move(params)), phase_(phase) {
    state_.m = params_.zeros_like();
    state_.v = params_.zeros_like();
    const auto mask = label_mask(data.train.size(), cfg.label_ratio, derive_seed(cfg.seed, kLabelStream));
    scenes_ = apply_label_ratio(data.train, cfg.label_ratio, derive_seed(cfg.seed, kLabelStream));
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) pool_.push_back(i);
    }
  }

  const std::vector<std::size_t>& pool() const { return pool_; }
  const std::vector<Scene>& scenes() const { return scenes_; }
  ParamStore& params() { return params_; }

  using TargetFn = std::function<std::vector<SupervisionRecord>(const Scene&)>;

  EpochRecord run_epoch(int epoch, const TargetFn& targets) {
    const std::uint64_t stream = (phase_ == 1 ? kPhase1Stream : kPhase2Stream) + static_cast<std::uint64_t>(epoch);
    Rng rng(derive_seed(cfg_.seed, stream));
    std::vector<std::size_t> order = pool_;
    rng.shuffle(order);
    std::vector<std::size_t> cls_order(data_.classification.size());
    std::iota(cls_order.begin(), cls_order.end(), 0);
    rng.shuffle(cls_order);

    EpochRecord rec;
    rec.phase = phase_;
    rec.epoch = epoch;
    LossTerms acc;
    const std::size_t b = static_cast<std::size_t>(cfg_.batch_size);
    const std::size_t c = static_cast<std::size_t>(cfg_.classification_per_step);
    std::size_t cursor = 0;
    for (std::size_t start = 0; start < order.size(); start += b) {
      std::vector<SceneSample> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + b); ++k) {
        const std::size_t i = order[k];
        batch.push_back({&scenes_[i], &data_.train_images[i], targets(scenes_[i])});
      }
      std::vector<const ClassificationSample*> cls;
      for (std::size_t k = 0; k < c && !cls_order.empty(); ++k) {
        cls.push_back(&data_.classification[cls_order[cursor++ % cls_order.size()]]);
      }
      ParamStore grads = params_.zeros_like();
      const LossTerms terms =
          phase_ == 1 ? assemble_phase1_loss(model_, params_, batch, cls, cfg_.weights, &grads)
                      : assemble_phase2_loss(model_, params_, batch, cls, cfg_.weights, cfg_.contrastive,
                                             derive_seed(cfg_.seed, kAugStream + step_), &grads);
      if (!std::isfinite(terms.total())) {
        throw DivergenceDetected("non-finite loss in phase " + std::to_string(phase_) + " epoch " +
                                 std::to_string(epoch));
      }
      clip_gradients(grads, cfg_.grad_clip);
      optimizer_step(params_, grads, state_, cfg_);
      accumulate(acc, terms);
      ++rec.steps;
      ++step_;
    }
    if (rec.steps > 0) scale_terms(acc, 1.0 / rec.steps);
    rec.mean = acc;
    rec.total = acc.total();
    return rec;
  }

 private:
  const Model& model_;
  const Dataset& data_;
  const TrainConfig& cfg_;
  ParamStore params_;
  int phase_;
  OptimizerState state_;
  std::vector<Scene> scenes_;
  std::vector<std::size_t> pool_;
  std::uint64_t step_ = 0;
};

}  // namespace

const char* to_string(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("train.optimizer", "expected sgd or adam, got '" + name + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (classification_per_step < 0) throw ConfigError("train.classification_per_step", "must be >= 0");
  if (epochs_phase1 < 0) throw ConfigError("train.epochs_phase1", "must be >= 0");
  if (epochs_phase2 < 0) throw ConfigError("train.epochs_phase2", "must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must be in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("train.epsilon", "must be > 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip", "must be >= 0");
  if (!(label_ratio > 0.0 && label_ratio <= 1.0)) throw ConfigError("train.label_ratio", "must be in (0, 1]");
  if (!(weights.background >= 0.0)) throw ConfigError("train.background_weight", "must be >= 0");
  if (!(weights.pseudo >= 0.0)) throw ConfigError("train.pseudo_weight", "must be >= 0");
  schedule.validate();
  contrastive.validate();
}

void optimizer_step(ParamStore& params, const ParamStore& grads, OptimizerState& state, const TrainConfig& cfg) {
  if (!params.same_layout(grads)) throw Error("gradient layout does not match parameters");
  if (!grads.all_finite()) throw NonFiniteUpdate("non-finite gradient");
  if (cfg.optimizer == OptimizerKind::kSgd) {
    for (std::size_t t = 0; t < params.size(); ++t) {
      params[t] = (params[t] - cfg.learning_rate * grads[t]).unaryExpr([](double x) { return to_f32(x); });
    }
  } else {
    if (state.m.size() != params.size()) {
      state.m = params.zeros_like();
      state.v = params.zeros_like();
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
      state.m[t] = cfg.beta1 * state.m[t] + (1.0 - cfg.beta1) * grads[t];
      state.v[t] = cfg.beta2 * state.v[t] + (1.0 - cfg.beta2) * grads[t].cwiseProduct(grads[t]);
      const Mat step = (state.m[t] / c1).array() / ((state.v[t] / c2).array().sqrt() + cfg.epsilon);
      params[t] = (params[t] - cfg.learning_rate * step).unaryExpr([](double x) { return to_f32(x); });
    }
  }
  if (!params.all_finite()) throw NonFiniteUpdate("non-finite parameter after update");
}

std::vector<Scene> apply_label_ratio(const std::vector<Scene>& scenes, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("train.label_ratio", "must be in (0, 1]");
  const auto mask = label_mask(scenes.size(), ratio, seed);
  std::vector<Scene> out = scenes;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (auto& o : out[i].objects) o.labeled = mask[i];
  }
  return out;
}

std::vector<SupervisionRecord> visible_supervision(const Scene& scene, const VocabularySplit& split) {
  std::vector<SupervisionRecord> out;
  for (const auto& o : scene.objects) {
    if (o.labeled && split.is_seen(o.class_id)) out.push_back({o.box, o.class_id, Origin::kGroundTruth});
  }
  return out;
}

ParamStore train_phase1(const Model& model, const Dataset& data, const TrainConfig& cfg, TrainLog& log,
                        const TrainHooks& hooks) {
  cfg.validate();
  EpochRunner runner(model, data, cfg, model.init(derive_seed(cfg.seed, kInitStream)), 1);
  const auto targets = [&](const Scene& s) { return visible_supervision(s, data.split); };
  for (int e = 0; e < cfg.epochs_phase1; ++e) {
    EpochRecord rec = runner.run_epoch(e, targets);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    log.epochs.push_back(std::move(rec));
  }
  return runner.params();
}

ParamStore train_phase2(const Model& model, const Dataset& data, const ParamStore& phase1, const TrainConfig& cfg,
                        TrainLog& log, const TrainHooks& hooks, PseudoStore* final_store) {
  cfg.validate();
  model.check_layout(phase1);
  EpochRunner runner(model, data, cfg, phase1, 2);
  std::vector<PseudoInput> inputs;
  for (std::size_t i : runner.pool()) inputs.push_back({&runner.scenes()[i], &data.train_images[i]});

  PseudoStore store;
  int refreshes = 0;
  const auto snapshot = [&](int epoch) {
    if (!hooks.evaluate) return;
    log.snapshots.push_back({2, epoch, refreshes, hooks.evaluate(runner.params())});
  };
  const auto targets = [&](const Scene& s) {
    auto t = visible_supervision(s, data.split);
    if (cfg.use_pseudo) {
      const auto p = store.records_for(s.id);
      t.insert(t.end(), p.begin(), p.end());
    }
    return t;
  };
  for (int e = 0; e < cfg.epochs_phase2; ++e) {
    bool regenerated = false;
    if (cfg.use_pseudo) {
      if (e > 0 && e % cfg.schedule.period == 0) snapshot(e);
      store = refresh_if_due(
          e, cfg.schedule, store,
          [&](int epoch) {
            return generate_pseudo_labels(model, runner.params(), inputs, data.split, epoch, cfg.schedule);
          },
          &regenerated);
      if (regenerated) {
        ++refreshes;
        ++log.regenerations;
      }
    }
    EpochRecord rec = runner.run_epoch(e, targets);
    rec.regenerated = regenerated;
    rec.pseudo_per_class = store.count_per_class();
    rec.pseudo_k = cfg.use_pseudo ? schedule_k(e, cfg.schedule) : 0;
    if (hooks.on_epoch) hooks.on_epoch(rec);
    log.epochs.push_back(std::move(rec));
  }
  snapshot(cfg.epochs_phase2);
  if (final_store) *final_store = store;
  return runner.params();
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& r : epochs) {
    nlohmann::ordered_json j;
    j["phase"] = r.phase;
    j["epoch"] = r.epoch;
    j["steps"] = r.steps;
    j["box3d"] = r.mean.box3d;
    j["cls3d"] = r.mean.cls3d;
    j["box2d"] = r.mean.box2d;
    j["cls2d"] = r.mean.cls2d;
    j["ign"] = r.mean.ign;
    j["decc"] = r.mean.decc;
    j["total"] = r.total;
    if (r.phase == 2) {
      j["regenerated"] = r.regenerated;
      j["pseudo_k"] = r.pseudo_k;
      nlohmann::ordered_json counts = nlohmann::ordered_json::object();
      for (const auto& [c, n] : r.pseudo_per_class) counts[std::to_string(c)] = n;
      j["pseudo_per_class"] = counts;
    }
    out += j.dump() + "\n";
  }
  for (const auto& s : snapshots) {
    nlohmann::ordered_json j;
    j["snapshot"] = true;
    j["phase"] = s.phase;
    j["epoch"] = s.epoch;
    j["refreshes"] = s.refreshes;
    j["map25"] = s.report.map25;
    j["ar25"] = s.report.ar25;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace ov3d
