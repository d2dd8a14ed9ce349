#include "ov3d/dataset.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "ov3d/errors.hpp"
#include "ov3d/rng.hpp"

namespace ov3d {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kSplitStream = 1;
constexpr std::uint64_t kClassificationStream = 2;
constexpr std::uint64_t kTrainStream = 1000;
constexpr std::uint64_t kTestStream = 2000000;

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

std::uint32_t get_u32(const std::vector<char>& in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + k])) << (8 * k);
  return v;
}

json vec_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  json j = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) j.push_back(v[i]);
  return j;
}

Vec3 vec3_of(const json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

std::string scene_stem(std::int64_t id) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << id;
  return os.str();
}

json scene_json(const Scene& s) {
  json j;
  j["id"] = s.id;
  j["points_file"] = scene_stem(s.id) + ".f32";
  j["num_points"] = s.points.size();
  j["extent"] = vec_json(s.extent);
  json cam;
  cam["fx"] = s.camera.fx;
  cam["fy"] = s.camera.fy;
  cam["cx"] = s.camera.cx;
  cam["cy"] = s.camera.cy;
  json rot = json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rot.push_back(s.camera.rotation(r, c));
  }
  cam["rotation"] = rot;
  cam["translation"] = vec_json(s.camera.translation);
  cam["width"] = s.camera.width;
  cam["height"] = s.camera.height;
  j["camera"] = cam;
  json objs = json::array();
  for (const auto& o : s.objects) {
    json oj;
    oj["class"] = o.class_id;
    oj["center"] = vec_json(o.box.center);
    oj["size"] = vec_json(o.box.size);
    oj["yaw"] = o.box.yaw;
    oj["color"] = vec_json(o.color);
    oj["labeled"] = o.labeled;
    objs.push_back(oj);
  }
  j["objects"] = objs;
  return j;
}

Scene scene_from_json(const json& j, const fs::path& dir) {
  Scene s;
  s.id = j.at("id").get<std::int64_t>();
  s.extent = vec3_of(j.at("extent"));
  const auto& cam = j.at("camera");
  s.camera.fx = cam.at("fx").get<double>();
  s.camera.fy = cam.at("fy").get<double>();
  s.camera.cx = cam.at("cx").get<double>();
  s.camera.cy = cam.at("cy").get<double>();
  const auto& rot = cam.at("rotation");
  if (rot.size() != 9) throw FormatError("camera rotation needs 9 values");
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) s.camera.rotation(r, c) = rot[r * 3 + c].get<double>();
  }
  s.camera.translation = vec3_of(cam.at("translation"));
  s.camera.width = cam.at("width").get<int>();
  s.camera.height = cam.at("height").get<int>();
  for (const auto& oj : j.at("objects")) {
    SceneObject o;
    o.class_id = oj.at("class").get<int>();
    o.box.center = vec3_of(oj.at("center"));
    o.box.size = vec3_of(oj.at("size"));
    o.box.yaw = oj.at("yaw").get<double>();
    o.color = vec3_of(oj.at("color"));
    o.labeled = oj.at("labeled").get<bool>();
    s.objects.push_back(o);
  }
  const auto n = j.at("num_points").get<std::size_t>();
  const auto bytes = read_file((dir / j.at("points_file").get<std::string>()).string());
  if (bytes.size() != n * 12) throw FormatError("point file size does not match num_points");
  s.points.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int a = 0; a < 3; ++a) s.points[i][a] = std::bit_cast<float>(get_u32(bytes, (i * 3 + a) * 4));
  }
  return s;
}

void save_split_scenes(const std::vector<Scene>& scenes, const std::vector<Image>& images, const fs::path& scene_dir,
                       const fs::path& image_dir) {
  fs::create_directories(scene_dir);
  fs::create_directories(image_dir);
  std::string index;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    index += scene_json(s).dump() + "\n";
    std::vector<char> pts;
    pts.reserve(s.points.size() * 12);
    for (const auto& p : s.points) {
      for (int a = 0; a < 3; ++a) put_u32(pts, std::bit_cast<std::uint32_t>(static_cast<float>(p[a])));
    }
    write_file((scene_dir / (scene_stem(s.id) + ".f32")).string(), pts);
    write_file((image_dir / (scene_stem(s.id) + ".img")).string(), encode_image(images[i]));
  }
  write_text((scene_dir / "scenes.jsonl").string(), index);
}

void load_split_scenes(const fs::path& scene_dir, const fs::path& image_dir, std::vector<Scene>& scenes,
                       std::vector<Image>& images) {
  std::istringstream in(read_text((scene_dir / "scenes.jsonl").string()));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      scenes.push_back(scene_from_json(json::parse(line), scene_dir));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("scene record in " + scene_dir.string() + ": " + e.what());
    }
    images.push_back(decode_image(read_file((image_dir / (scene_stem(scenes.back().id) + ".img")).string())));
  }
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

void DataConfig::validate() const {
  if (train_scenes < 1) throw ConfigError("data.train_scenes", "must be >= 1");
  if (test_scenes < 1) throw ConfigError("data.test_scenes", "must be >= 1");
  if (classification_per_class < 1) throw ConfigError("data.classification_per_class", "must be >= 1");
  if (unseen_classes < 1) throw ConfigError("data.unseen_classes", "must be >= 1");
}

Dataset generate_dataset(const SceneConfig& scene_cfg, const DataConfig& data_cfg, std::uint64_t seed) {
  scene_cfg.validate();
  data_cfg.validate();
  Dataset d;
  std::vector<int> all;
  for (int c = 0; c < scene_cfg.num_classes; ++c) all.push_back(c);
  d.split = split_vocabulary(all, data_cfg.unseen_classes, derive_seed(seed, kSplitStream));
  for (int i = 0; i < data_cfg.train_scenes; ++i) {
    d.train.push_back(generate_scene(scene_cfg, derive_seed(seed, kTrainStream + i), i));
    d.train_images.push_back(render_paired_image(d.train.back()).image);
  }
  for (int i = 0; i < data_cfg.test_scenes; ++i) {
    d.test.push_back(generate_scene(scene_cfg, derive_seed(seed, kTestStream + i), kTestIdBase + i));
    d.test_images.push_back(render_paired_image(d.test.back()).image);
  }
  ClassificationConfig cc;
  cc.per_class = data_cfg.classification_per_class;
  d.classification =
      generate_classification_set(scene_cfg, cc, d.split.classification, derive_seed(seed, kClassificationStream));
  return d;
}

std::vector<char> encode_image(const Image& img) {
  std::vector<char> out = {'O', 'V', '3', 'I'};
  put_u32(out, static_cast<std::uint32_t>(img.height));
  put_u32(out, static_cast<std::uint32_t>(img.width));
  put_u32(out, static_cast<std::uint32_t>(img.channels));
  out.reserve(out.size() + img.pixels.size() * 4);
  for (float v : img.pixels) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Image decode_image(const std::vector<char>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "OV3I", 4) != 0) throw FormatError("not an image file");
  const auto h = get_u32(bytes, 4);
  const auto w = get_u32(bytes, 8);
  const auto c = get_u32(bytes, 12);
  const std::size_t n = static_cast<std::size_t>(h) * w * c;
  if (bytes.size() != 16 + n * 4) throw FormatError("image payload size mismatch");
  Image img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
  for (std::size_t i = 0; i < n; ++i) img.pixels[i] = std::bit_cast<float>(get_u32(bytes, 16 + i * 4));
  return img;
}

std::string format_split(const VocabularySplit& split) {
  return "seen: " + join(split.seen) + "\ntest: " + join(split.test) + "\nclassification: " +
         join(split.classification) + "\n";
}

VocabularySplit parse_split(const std::string& text) {
  VocabularySplit split;
  std::istringstream in(text);
  std::string line;
  bool have[3] = {false, false, false};
  while (std::getline(in, line)) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    std::istringstream vals(line.substr(colon + 1));
    std::vector<int> ids;
    int v;
    while (vals >> v) ids.push_back(v);
    if (key == "seen") {
      split.seen = ids;
      have[0] = true;
    } else if (key == "test") {
      split.test = ids;
      have[1] = true;
    } else if (key == "classification") {
      split.classification = ids;
      have[2] = true;
    } else {
      throw FormatError("unknown split entry '" + key + "'");
    }
  }
  if (!have[0] || !have[1] || !have[2]) throw FormatError("split file needs seen, test and classification lines");
  split.validate();
  return split;
}

void save_dataset(const Dataset& data, const std::string& dir) {
  const fs::path root(dir);
  save_split_scenes(data.train, data.train_images, root / "scenes" / "train", root / "images" / "train");
  save_split_scenes(data.test, data.test_images, root / "scenes" / "test", root / "images" / "test");
  const fs::path cdir = root / "classification";
  fs::create_directories(cdir);
  std::string index;
  for (std::size_t n = 0; n < data.classification.size(); ++n) {
    const std::string file = scene_stem(static_cast<std::int64_t>(n)) + ".img";
    json j;
    j["file"] = file;
    j["class"] = data.classification[n].class_id;
    index += j.dump() + "\n";
    write_file((cdir / file).string(), encode_image(data.classification[n].image));
  }
  write_text((cdir / "index.jsonl").string(), index);
  write_text((root / "split.txt").string(), format_split(data.split));
}

Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "split.txt")) throw FormatError("no dataset at " + dir + " (split.txt missing)");
  Dataset d;
  d.split = parse_split(read_text((root / "split.txt").string()));
  load_split_scenes(root / "scenes" / "train", root / "images" / "train", d.train, d.train_images);
  load_split_scenes(root / "scenes" / "test", root / "images" / "test", d.test, d.test_images);
  const fs::path cdir = root / "classification";
  std::istringstream in(read_text((cdir / "index.jsonl").string()));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      d.classification.push_back(
          {decode_image(read_file((cdir / j.at("file").get<std::string>()).string())), j.at("class").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("classification index: " + std::string(e.what()));
    }
  }
  return d;
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<char>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::vector<char>(text.begin(), text.end()));
}

std::string read_text(const std::string& path) {
  const auto b = read_file(path);
  return {b.begin(), b.end()};
}

}  // namespace ov3d
