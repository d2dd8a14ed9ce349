#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ov3d/scenegen.hpp"

namespace ov3d {

struct DataConfig {
  int train_scenes = 200;
  int test_scenes = 60;
  int classification_per_class = 40;
  int unseen_classes = 4;

  void validate() const;
};

/// Generated corpus: training and test scenes with paired images, the
/// image-level classification corpus and the vocabulary split.
struct Dataset {
  std::vector<Scene> train;
  std::vector<Image> train_images;
  std::vector<Scene> test;
  std::vector<Image> test_images;
  std::vector<ClassificationSample> classification;
  VocabularySplit split;
};

/// Test scene ids start here so train and test ids never collide.
constexpr std::int64_t kTestIdBase = 100000;

Dataset generate_dataset(const SceneConfig& scene_cfg, const DataConfig& data_cfg, std::uint64_t seed);

/// Layout under `dir`: scenes/{train,test}/scenes.jsonl plus one .f32 point
/// file per scene, images/{train,test}/<id>.img, classification/index.jsonl
/// plus <n>.img, and split.txt.
void save_dataset(const Dataset& data, const std::string& dir);
/// Throws FormatError on malformed files.
Dataset load_dataset(const std::string& dir);

/// Raw image file: "OV3I", u32 height, u32 width, u32 channels, then
/// little-endian float32 pixels row-major with interleaved channels.
std::vector<char> encode_image(const Image& img);
Image decode_image(const std::vector<char>& bytes);

std::string format_split(const VocabularySplit& split);
VocabularySplit parse_split(const std::string& text);

std::vector<char> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<char>& bytes);
void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace ov3d
