#include "ov3d/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>

#include "CLI11.hpp"
#include "ov3d/errors.hpp"

namespace ov3d {

namespace fs = std::filesystem;

Dataset make_dataset(const Config& cfg) {
  cfg.validate();
  return generate_dataset(cfg.scene, cfg.data, cfg.train.seed);
}

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

MetricsReport evaluate_test(const Model& model, const ParamStore& params, const Dataset& data,
                            const std::vector<int>& classes) {
  return evaluate(model, params, data.test, data.split, classes);
}

}  // namespace

std::vector<RatioRow> study_label_ratio(const Config& cfg, const std::vector<double>& ratios,
                                        const std::vector<std::uint64_t>& seeds) {
  if (ratios.empty()) throw ConfigError("ratios", "at least one ratio is required");
  if (seeds.empty()) throw ConfigError("train.seed", "at least one seed is required");
  for (double r : ratios) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("train.label_ratio", "ratios must be in (0, 1]");
  }
  std::vector<RatioRow> rows;
  const Model model(cfg.model);
  for (std::uint64_t seed : seeds) {
    Config c = cfg;
    c.train.seed = seed;
    const Dataset data = make_dataset(c);
    for (double r : ratios) {
      Config rc = c;
      rc.train.label_ratio = r;
      rc.train.epochs_phase1 = static_cast<int>(std::ceil(c.train.epochs_phase1 / r - 1e-9));
      TrainLog log;
      const ParamStore params = train_phase1(model, data, rc.train, log);
      const MetricsReport rep = evaluate_test(model, params, data, data.split.seen);
      rows.push_back({r, seed, rep.ar25, rep.map25});
    }
  }
  return rows;
}

std::string ratio_csv(const std::vector<RatioRow>& rows) {
  std::string out = "ratio,seed,ar25,map25\n";
  for (const auto& r : rows) {
    out += num(r.ratio) + "," + std::to_string(r.seed) + "," + num(r.ar25) + "," + num(r.map25) + "\n";
  }
  return out;
}

std::vector<IterationRow> study_pseudo_iterations(const Config& cfg, const Dataset& data) {
  const Model model(cfg.model);
  const std::vector<int> unseen = data.split.unseen();
  TrainLog log;
  const ParamStore p1 = train_phase1(model, data, cfg.train, log);
  std::vector<IterationRow> rows;
  const MetricsReport base = evaluate_test(model, p1, data, unseen);
  rows.push_back({0, 0, base.map25, base.ar25});
  TrainHooks hooks;
  hooks.evaluate = [&](const ParamStore& p) { return evaluate_test(model, p, data, unseen); };
  train_phase2(model, data, p1, cfg.train, log, hooks);
  for (const auto& s : log.snapshots) rows.push_back({s.refreshes, s.epoch, s.report.map25, s.report.ar25});
  return rows;
}

std::string iteration_csv(const std::vector<IterationRow>& rows) {
  std::string out = "refreshes,epoch,map25,ar25\n";
  for (const auto& r : rows) {
    out += std::to_string(r.refreshes) + "," + std::to_string(r.epoch) + "," + num(r.map25) + "," + num(r.ar25) +
           "\n";
  }
  return out;
}

namespace {

struct Options {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::string data;
  bool phase1_only = false;
  bool no_pseudo = false;
  std::string contrastive;
  std::string distance_temp;
  std::vector<double> ratios{0.1, 0.25, 0.5, 1.0};
  int refresh_period = 0;
  std::string checkpoint;
  std::string detections;
  std::string split = "test";
  std::string classes = "all";
  std::string store;
};

Config resolve_config(const Options& o) {
  Config cfg = o.config.empty() ? Config{} : load_config(o.config);
  if (!o.seeds.empty()) cfg.train.seed = o.seeds.front();
  if (o.phase1_only) cfg.train.epochs_phase2 = 0;
  if (o.no_pseudo) cfg.train.use_pseudo = false;
  if (!o.contrastive.empty()) set_config_value(cfg, "contrastive.mode", o.contrastive);
  if (!o.distance_temp.empty()) set_config_value(cfg, "contrastive.distance_temperature", o.distance_temp);
  if (o.refresh_period != 0) set_config_value(cfg, "pseudo.period", std::to_string(o.refresh_period));
  cfg.validate();
  return cfg;
}

void require_out(const Options& o) {
  if (o.out.empty()) throw ConfigError("out", "an output directory is required");
  fs::create_directories(o.out);
}

std::string path_in(const Options& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

Dataset dataset_for(const Options& o, const Config& cfg) {
  return o.data.empty() ? make_dataset(cfg) : load_dataset(o.data);
}

int cmd_gen_data(const Options& o, std::ostream& out) {
  const Config cfg = resolve_config(o);
  require_out(o);
  const Dataset data = make_dataset(cfg);
  save_dataset(data, o.out);
  write_text(path_in(o, "config.txt"), format_config(cfg));
  std::map<int, int> train_counts, test_counts;
  for (const auto& s : data.train) {
    for (const auto& obj : s.objects) ++train_counts[obj.class_id];
  }
  for (const auto& s : data.test) {
    for (const auto& obj : s.objects) ++test_counts[obj.class_id];
  }
  out << "class  seen  train  test\n";
  for (int c = 0; c < cfg.scene.num_classes; ++c) {
    char line[64];
    std::snprintf(line, sizeof(line), "%5d  %4s  %5d  %4d\n", c, data.split.is_seen(c) ? "yes" : "no",
                  train_counts[c], test_counts[c]);
    out << line;
  }
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  const Config cfg = resolve_config(o);
  require_out(o);
  const Dataset data = dataset_for(o, cfg);
  const Model model(cfg.model);
  write_text(path_in(o, "config.txt"), format_config(cfg));
  const std::vector<int> unseen = data.split.unseen();

  TrainLog log;
  TrainHooks hooks;
  hooks.evaluate = [&](const ParamStore& p) { return evaluate_test(model, p, data, unseen); };
  hooks.on_epoch = [&](const EpochRecord& r) {
    out << "phase " << r.phase << " epoch " << r.epoch << " loss " << num(r.total) << "\n";
  };
  ParamStore params = train_phase1(model, data, cfg.train, log, hooks);
  save_checkpoint(path_in(o, "phase1.ckpt"), params);
  if (cfg.train.epochs_phase2 > 0) {
    PseudoStore store;
    params = train_phase2(model, data, params, cfg.train, log, hooks, &store);
    save_checkpoint(path_in(o, "final.ckpt"), params);
    write_text(path_in(o, "pseudo_labels.jsonl"), dump_store(store));
  }
  write_text(path_in(o, "train_log.jsonl"), log.to_jsonl());

  const MetricsReport seen = evaluate_test(model, params, data, data.split.seen);
  const MetricsReport uns = evaluate_test(model, params, data, unseen);
  std::string report = "seen classes\n" + report_table(seen) + "unseen classes\n" + report_table(uns);
  write_text(path_in(o, "report.txt"), report);
  out << report;
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("checkpoint", "a checkpoint path is required");
  if (o.data.empty()) throw ConfigError("data", "a dataset directory is required");
  if (!fs::exists(o.checkpoint)) throw ConfigError("checkpoint", "no such file " + o.checkpoint);
  const Config cfg = resolve_config(o);
  const Model model(cfg.model);
  const ParamStore params = load_checkpoint(o.checkpoint);
  model.check_layout(params);
  const Dataset data = load_dataset(o.data);
  if (o.split != "test" && o.split != "train") throw ConfigError("split", "expected test or train");
  const std::vector<Scene>& scenes = o.split == "test" ? data.test : data.train;
  std::vector<int> classes;
  if (o.classes == "seen") {
    classes = data.split.seen;
  } else if (o.classes == "unseen") {
    classes = data.split.unseen();
  } else if (o.classes == "all") {
    classes = data.split.test;
  } else {
    throw ConfigError("classes", "expected seen, unseen or all");
  }
  const MetricsReport rep = evaluate(model, params, scenes, data.split, classes);
  if (!o.out.empty()) {
    require_out(o);
    write_text(path_in(o, "report.txt"), report_table(rep));
    write_text(path_in(o, "report.jsonl"), report_jsonl(rep));
  }
  if (!o.detections.empty()) {
    std::vector<Detection> dets;
    for (const auto& s : scenes) {
      const auto d = detect_scene(model, params, s);
      dets.insert(dets.end(), d.begin(), d.end());
    }
    sort_detections(dets);
    write_text(o.detections, dump_detections(dets));
  }
  out << report_table(rep);
  return kExitOk;
}

int cmd_study_label_ratio(const Options& o, std::ostream& out) {
  const Config cfg = resolve_config(o);
  require_out(o);
  const std::vector<std::uint64_t> seeds = o.seeds.empty() ? std::vector<std::uint64_t>{cfg.train.seed} : o.seeds;
  const std::string csv = ratio_csv(study_label_ratio(cfg, o.ratios, seeds));
  write_text(path_in(o, "label_ratio.csv"), csv);
  out << csv;
  return kExitOk;
}

int cmd_study_pseudo_iterations(const Options& o, std::ostream& out) {
  const Config cfg = resolve_config(o);
  require_out(o);
  const std::string csv = iteration_csv(study_pseudo_iterations(cfg, dataset_for(o, cfg)));
  write_text(path_in(o, "pseudo_iterations.csv"), csv);
  out << csv;
  return kExitOk;
}

int cmd_inspect_pseudo(const Options& o, std::ostream& out) {
  if (o.store.empty()) throw ConfigError("store", "a pseudo-label dump is required");
  out << summarize_store(parse_store(read_text(o.store)));
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Open-vocabulary 3D detection toy: data generation, training, evaluation and studies"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", o.config, "key = value config file"); };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", o.seeds, "random seed")->expected(1); };
  auto add_out = [&](CLI::App* sub) { sub->add_option("--out", o.out, "output directory"); };
  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", o.data, "dataset directory (generated in memory when omitted)");
  };
  auto add_toggles = [&](CLI::App* sub) {
    sub->add_flag("--phase1-only", o.phase1_only, "skip phase 2 (baseline)");
    sub->add_flag("--no-pseudo", o.no_pseudo, "phase 2 without pseudo labels");
    sub->add_option("--contrastive", o.contrastive, "off|augmentation|position|class")
        ->check(CLI::IsMember({"off", "augmentation", "position", "class"}));
    sub->add_option("--distance-temp", o.distance_temp, "on|off")->check(CLI::IsMember({"on", "off"}));
    sub->add_option("--refresh-period", o.refresh_period, "epochs between pseudo-label refreshes")
        ->check(CLI::PositiveNumber);
  };

  auto* gen = app.add_subcommand("gen-data", "generate a dataset on disk");
  add_config(gen);
  add_seed(gen);
  add_out(gen);

  auto* train = app.add_subcommand("train", "two-phase training");
  add_config(train);
  add_seed(train);
  add_out(train);
  add_data(train);
  add_toggles(train);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_config(ev);
  add_out(ev);
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  ev->add_option("--data", o.data, "dataset directory");
  ev->add_option("--split", o.split, "test|train");
  ev->add_option("--classes", o.classes, "seen|unseen|all");
  ev->add_option("--detections", o.detections, "write per-proposal detections as JSONL");

  auto* ratio = app.add_subcommand("study-label-ratio", "AR25/mAP25 versus label ratio");
  add_config(ratio);
  ratio->add_option("--seed", o.seeds, "one or more seeds")->delimiter(',');
  add_out(ratio);
  ratio->add_option("--ratios", o.ratios, "comma separated label ratios")->delimiter(',');

  auto* iters = app.add_subcommand("study-pseudo-iterations", "unseen metrics versus pseudo-label refreshes");
  add_config(iters);
  add_seed(iters);
  add_out(iters);
  add_data(iters);
  add_toggles(iters);

  auto* inspect = app.add_subcommand("inspect-pseudo", "summarize a pseudo-label dump");
  inspect->add_option("store", o.store, "pseudo_labels.jsonl")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(o, out);
    if (*train) return cmd_train(o, out);
    if (*ev) return cmd_eval(o, out);
    if (*ratio) return cmd_study_label_ratio(o, out);
    if (*iters) return cmd_study_pseudo_iterations(o, out);
    if (*inspect) return cmd_inspect_pseudo(o, out);
  } catch (const DivergenceDetected& e) {
    err << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const NonFiniteUpdate& e) {
    err << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const NonFiniteGradient& e) {
    err << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ov3d
