#include "ov3d/config.hpp"

#include <cstdio>
#include <functional>
#include <sstream>

#include "ov3d/errors.hpp"

namespace ov3d {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> tokens(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

long long to_integer(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError(key, "expected an integer, got '" + v + "'");
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  const long long x = to_integer(key, v);
  if (x < -2147483647LL || x > 2147483647LL) throw ConfigError(key, "integer out of range");
  return static_cast<int>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

struct Entry {
  std::string key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

template <typename Field>
Entry number(const std::string& key, Field field) {
  return {key, [field](const Config& c) { return fmt(static_cast<double>(field(const_cast<Config&>(c)))); },
          [field, key](Config& c, const std::string& v) { field(c) = to_double(key, v); }};
}

template <typename Field>
Entry integer(const std::string& key, Field field) {
  return {key, [field](const Config& c) { return std::to_string(field(const_cast<Config&>(c))); },
          [field, key](Config& c, const std::string& v) { field(c) = to_int(key, v); }};
}

template <typename Field>
Entry boolean(const std::string& key, Field field) {
  return {key, [field](const Config& c) { return std::string(field(const_cast<Config&>(c)) ? "true" : "false"); },
          [field, key](Config& c, const std::string& v) { field(c) = to_bool(key, v); }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    // scene
    t.push_back(integer("scene.num_classes", [](Config& c) -> int& { return c.scene.num_classes; }));
    t.push_back({"scene.extent",
                 [](const Config& c) {
                   return fmt(c.scene.extent.x()) + " " + fmt(c.scene.extent.y()) + " " + fmt(c.scene.extent.z());
                 },
                 [](Config& c, const std::string& v) {
                   const auto parts = tokens(v);
                   if (parts.size() != 3) throw ConfigError("scene.extent", "expected three numbers");
                   for (int i = 0; i < 3; ++i) c.scene.extent[i] = to_double("scene.extent", parts[i]);
                 }});
    t.push_back(integer("scene.min_objects", [](Config& c) -> int& { return c.scene.min_objects; }));
    t.push_back(integer("scene.max_objects", [](Config& c) -> int& { return c.scene.max_objects; }));
    t.push_back(integer("scene.num_points", [](Config& c) -> int& { return c.scene.num_points; }));
    t.push_back(number("scene.clutter_fraction", [](Config& c) -> double& { return c.scene.clutter_fraction; }));
    t.push_back(number("scene.wall_fraction", [](Config& c) -> double& { return c.scene.wall_fraction; }));
    t.push_back(number("scene.center_margin", [](Config& c) -> double& { return c.scene.center_margin; }));
    t.push_back(number("scene.point_noise", [](Config& c) -> double& { return c.scene.point_noise; }));
    t.push_back(number("scene.yaw_max", [](Config& c) -> double& { return c.scene.yaw_max; }));
    t.push_back(number("scene.color_jitter", [](Config& c) -> double& { return c.scene.color_jitter; }));
    t.push_back(integer("scene.image_width", [](Config& c) -> int& { return c.scene.image_width; }));
    t.push_back(integer("scene.image_height", [](Config& c) -> int& { return c.scene.image_height; }));
    t.push_back(number("scene.camera_fov_deg", [](Config& c) -> double& { return c.scene.camera_fov_deg; }));
    t.push_back(integer("scene.max_attempts", [](Config& c) -> int& { return c.scene.max_attempts; }));
    // data
    t.push_back(integer("data.train_scenes", [](Config& c) -> int& { return c.data.train_scenes; }));
    t.push_back(integer("data.test_scenes", [](Config& c) -> int& { return c.data.test_scenes; }));
    t.push_back(
        integer("data.classification_per_class", [](Config& c) -> int& { return c.data.classification_per_class; }));
    t.push_back(integer("data.unseen_classes", [](Config& c) -> int& { return c.data.unseen_classes; }));
    // model
    t.push_back(integer("model.queries_3d", [](Config& c) -> int& { return c.model.queries_3d; }));
    t.push_back(integer("model.queries_2d", [](Config& c) -> int& { return c.model.queries_2d; }));
    t.push_back(integer("model.point_hidden1", [](Config& c) -> int& { return c.model.point_hidden1; }));
    t.push_back(integer("model.point_hidden2", [](Config& c) -> int& { return c.model.point_hidden2; }));
    t.push_back(integer("model.feature_dim", [](Config& c) -> int& { return c.model.feature_dim; }));
    t.push_back(integer("model.embed_dim", [](Config& c) -> int& { return c.model.embed_dim; }));
    t.push_back(integer("model.global_dim", [](Config& c) -> int& { return c.model.global_dim; }));
    t.push_back(integer("model.box_hidden", [](Config& c) -> int& { return c.model.box_hidden; }));
    t.push_back(integer("model.image_hidden", [](Config& c) -> int& { return c.model.image_hidden; }));
    t.push_back(integer("model.crop_size", [](Config& c) -> int& { return c.model.crop_size; }));
    t.push_back(integer("model.neighborhood_points", [](Config& c) -> int& { return c.model.neighborhood_points; }));
    t.push_back(
        number("model.neighborhood_radius", [](Config& c) -> double& { return c.model.neighborhood_radius; }));
    t.push_back(integer("model.roi_max_points", [](Config& c) -> int& { return c.model.roi_max_points; }));
    t.push_back(integer("model.image_pool", [](Config& c) -> int& { return c.model.image_pool; }));
    t.push_back(integer("model.patch_pool", [](Config& c) -> int& { return c.model.patch_pool; }));
    t.push_back(integer("model.patch_window", [](Config& c) -> int& { return c.model.patch_window; }));
    t.push_back(integer("model.query_dim", [](Config& c) -> int& { return c.model.query_dim; }));
    // train
    t.push_back(number("train.learning_rate", [](Config& c) -> double& { return c.train.learning_rate; }));
    t.push_back(integer("train.batch_size", [](Config& c) -> int& { return c.train.batch_size; }));
    t.push_back(
        integer("train.classification_per_step", [](Config& c) -> int& { return c.train.classification_per_step; }));
    t.push_back(integer("train.epochs_phase1", [](Config& c) -> int& { return c.train.epochs_phase1; }));
    t.push_back(integer("train.epochs_phase2", [](Config& c) -> int& { return c.train.epochs_phase2; }));
    t.push_back({"train.optimizer", [](const Config& c) { return std::string(to_string(c.train.optimizer)); },
                 [](Config& c, const std::string& v) { c.train.optimizer = parse_optimizer(v); }});
    t.push_back(number("train.beta1", [](Config& c) -> double& { return c.train.beta1; }));
    t.push_back(number("train.beta2", [](Config& c) -> double& { return c.train.beta2; }));
    t.push_back(number("train.epsilon", [](Config& c) -> double& { return c.train.epsilon; }));
    t.push_back(number("train.grad_clip", [](Config& c) -> double& { return c.train.grad_clip; }));
    t.push_back({"train.seed", [](const Config& c) { return std::to_string(c.train.seed); },
                 [](Config& c, const std::string& v) {
                   const long long s = to_integer("train.seed", v);
                   if (s < 0) throw ConfigError("train.seed", "must be >= 0");
                   c.train.seed = static_cast<std::uint64_t>(s);
                 }});
    t.push_back(number("train.label_ratio", [](Config& c) -> double& { return c.train.label_ratio; }));
    t.push_back(number("train.background_weight", [](Config& c) -> double& { return c.train.weights.background; }));
    t.push_back(number("train.pseudo_weight", [](Config& c) -> double& { return c.train.weights.pseudo; }));
    t.push_back(boolean("train.use_pseudo", [](Config& c) -> bool& { return c.train.use_pseudo; }));
    // pseudo labels
    t.push_back(integer("pseudo.k0", [](Config& c) -> int& { return c.train.schedule.k0; }));
    t.push_back(integer("pseudo.k_step", [](Config& c) -> int& { return c.train.schedule.k_step; }));
    t.push_back(integer("pseudo.period", [](Config& c) -> int& { return c.train.schedule.period; }));
    t.push_back(
        number("pseudo.confidence_floor", [](Config& c) -> double& { return c.train.schedule.confidence_floor; }));
    t.push_back(number("pseudo.duplicate_iou", [](Config& c) -> double& { return c.train.schedule.duplicate_iou; }));
    t.push_back({"pseudo.objectness",
                 [](const Config& c) { return std::string(to_string(c.train.schedule.objectness)); },
                 [](Config& c, const std::string& v) { c.train.schedule.objectness = parse_objectness(v); }});
    // contrastive
    t.push_back({"contrastive.mode", [](const Config& c) { return std::string(to_string(c.train.contrastive.mode)); },
                 [](Config& c, const std::string& v) { c.train.contrastive.mode = parse_contrastive_mode(v); }});
    t.push_back(number("contrastive.tau0", [](Config& c) -> double& { return c.train.contrastive.tau0; }));
    t.push_back(number("contrastive.gamma", [](Config& c) -> double& { return c.train.contrastive.gamma; }));
    t.push_back(
        number("contrastive.cross_distance", [](Config& c) -> double& { return c.train.contrastive.cross_distance; }));
    t.push_back(boolean("contrastive.distance_temperature",
                        [](Config& c) -> bool& { return c.train.contrastive.distance_temperature; }));
    t.push_back(number("contrastive.weight", [](Config& c) -> double& { return c.train.contrastive.weight; }));
    return t;
  }();
  return table;
}

void check_positive(const std::string& key, int v) {
  if (v < 1) throw ConfigError(key, "must be >= 1");
}

}  // namespace

void Config::validate() const {
  scene.validate();
  data.validate();
  train.validate();
  if (data.unseen_classes >= scene.num_classes) {
    throw ConfigError("data.unseen_classes", "must leave at least one seen class");
  }
  const std::pair<const char*, int> dims[] = {
      {"model.queries_3d", model.queries_3d},       {"model.queries_2d", model.queries_2d},
      {"model.point_hidden1", model.point_hidden1}, {"model.point_hidden2", model.point_hidden2},
      {"model.feature_dim", model.feature_dim},     {"model.embed_dim", model.embed_dim},
      {"model.global_dim", model.global_dim},       {"model.box_hidden", model.box_hidden},
      {"model.image_hidden", model.image_hidden},   {"model.crop_size", model.crop_size},
      {"model.neighborhood_points", model.neighborhood_points},
      {"model.roi_max_points", model.roi_max_points},
      {"model.image_pool", model.image_pool},       {"model.patch_pool", model.patch_pool},
      {"model.patch_window", model.patch_window},   {"model.query_dim", model.query_dim},
  };
  for (const auto& [key, v] : dims) check_positive(key, v);
  if (!(model.neighborhood_radius > 0.0)) throw ConfigError("model.neighborhood_radius", "must be > 0");
  if (model.num_classes != scene.num_classes) throw ConfigError("model.num_classes", "must equal scene.num_classes");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& e : entries()) out.push_back(e.key);
  return out;
}

void set_config_value(Config& cfg, const std::string& key, const std::string& value) {
  for (const auto& e : entries()) {
    if (e.key == key) {
      e.set(cfg, value);
      cfg.model.num_classes = cfg.scene.num_classes;
      return;
    }
  }
  throw ConfigError(key, "unknown key");
}

Config parse_config(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (value.empty()) throw ConfigError(key, "missing value");
    set_config_value(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

Config load_config(const std::string& path) { return parse_config(read_text(path)); }

std::string format_config(const Config& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key + " = " + e.get(cfg) + "\n";
  return out;
}

}  // namespace ov3d
