#include "ov3d/encoders.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "ov3d/errors.hpp"
#include "ov3d/rng.hpp"

namespace ov3d {

namespace {

constexpr double kOffsetScale3d = 0.5;
constexpr double kMinSize3d = 0.05;
constexpr double kYawScale = 0.5;
constexpr double kOffsetScale2d = 0.25;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Mat relu(const Mat& a) { return a.cwiseMax(0.0); }

Mat relu_backward(const Mat& a, const Mat& dh) { return (a.array() > 0.0).select(dh, 0.0); }

Mat glorot(int rows, int cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / (rows + cols));
  Mat m(rows, cols);
  // Column-major fill order is part of the determinism contract.
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = to_f32(rng.uniform(-limit, limit));
  }
  return m;
}

Mat image_to_row(const Image& img) {
  Mat x(1, static_cast<Eigen::Index>(img.pixels.size()));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = img.pixels[i];
  return x;
}

// Area-average pool to grid x grid cells; row-major (cell row, cell col, channel).
Mat pool_image(const Image& img, int grid) {
  Mat out(1, 3 * grid * grid);
  for (int i = 0; i < grid; ++i) {
    const int y0 = i * img.height / grid;
    const int y1 = std::max(y0 + 1, (i + 1) * img.height / grid);
    for (int j = 0; j < grid; ++j) {
      const int x0 = j * img.width / grid;
      const int x1 = std::max(x0 + 1, (j + 1) * img.width / grid);
      for (int ch = 0; ch < 3; ++ch) {
        double s = 0.0;
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) s += img.at(std::min(y, img.height - 1), std::min(x, img.width - 1), ch);
        }
        out(0, (i * grid + j) * 3 + ch) = s / ((y1 - y0) * (x1 - x0));
      }
    }
  }
  return out;
}

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

std::uint32_t get_u32(const std::vector<char>& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + k])) << (8 * k);
  pos += 4;
  return v;
}

constexpr char kCheckpointMagic[8] = {'O', 'V', '3', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

std::size_t ParamStore::add(const std::string& name, Mat value) {
  if (index_.count(name) != 0) throw FormatError("duplicate parameter '" + name + "'");
  index_.emplace(name, values_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<std::size_t> ParamStore::find(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t ParamStore::index_of(std::string_view name) const {
  auto i = find(name);
  if (!i) throw FormatError("unknown parameter '" + std::string(name) + "'");
  return *i;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out = *this;
  out.set_zero();
  return out;
}

void ParamStore::set_zero() {
  for (auto& v : values_) v.setZero();
}

void ParamStore::add_scaled(const ParamStore& other, double scale) {
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
}

bool ParamStore::same_layout(const ParamStore& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i].rows() != other.values_[i].rows() || values_[i].cols() != other.values_[i].cols()) return false;
  }
  return true;
}

bool ParamStore::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](const Mat& m) { return m.allFinite(); });
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (!same_layout(other)) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (values_[i] != other.values_[i]) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Layers

Linear Linear::create(ParamStore& params, const std::string& name, int in, int out, Rng& rng) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = params.add(name + ".w", glorot(out, in, rng));
  l.bias = params.add(name + ".b", Mat::Zero(out, 1));
  return l;
}

Mat Linear::forward(const ParamStore& params, const Mat& x) const {
  Mat y = x * params[weight].transpose();
  y.rowwise() += params[bias].col(0).transpose();
  return y;
}

Mat Linear::backward(const ParamStore& params, const Mat& x, const Mat& dy, ParamStore& grads,
                     bool want_input) const {
  grads[weight].noalias() += dy.transpose() * x;
  grads[bias].col(0) += dy.colwise().sum().transpose();
  if (!want_input) return {};
  return dy * params[weight];
}

PointEncoder PointEncoder::create(ParamStore& params, const std::string& name, int hidden1, int hidden2, int out,
                                  Rng& rng) {
  PointEncoder e;
  e.l1 = Linear::create(params, name + ".l1", 3, hidden1, rng);
  e.l2 = Linear::create(params, name + ".l2", hidden1, hidden2, rng);
  e.l3 = Linear::create(params, name + ".l3", hidden2, out, rng);
  return e;
}

PointEncoder::Cache PointEncoder::forward(const ParamStore& params, const Mat& points) const {
  if (points.rows() == 0) throw EmptyRoi();
  Cache c;
  c.x = points;
  c.a1 = l1.forward(params, c.x);
  c.h1 = relu(c.a1);
  c.a2 = l2.forward(params, c.h1);
  c.h2 = relu(c.a2);
  const Eigen::Index n = c.h2.rows();
  const Eigen::Index k = c.h2.cols();
  c.pooled.resize(1, k);
  c.argmax.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    Eigen::Index best = 0;
    double v = c.h2(0, j);
    for (Eigen::Index i = 1; i < n; ++i) {
      if (c.h2(i, j) > v) {
        v = c.h2(i, j);
        best = i;
      }
    }
    c.pooled(0, j) = v;
    c.argmax[j] = static_cast<int>(best);
  }
  c.out = l3.forward(params, c.pooled).row(0).transpose();
  return c;
}

Mat PointEncoder::backward(const ParamStore& params, const Cache& c, const VecX& d_out, ParamStore& grads,
                           bool want_input) const {
  const Mat d_pooled = l3.backward(params, c.pooled, d_out.transpose(), grads);
  Mat d_h2 = Mat::Zero(c.h2.rows(), c.h2.cols());
  for (Eigen::Index j = 0; j < d_h2.cols(); ++j) d_h2(c.argmax[j], j) = d_pooled(0, j);
  const Mat d_a2 = relu_backward(c.a2, d_h2);
  const Mat d_h1 = l2.backward(params, c.h1, d_a2, grads);
  const Mat d_a1 = relu_backward(c.a1, d_h1);
  return l1.backward(params, c.x, d_a1, grads, want_input);
}

ImageEncoder ImageEncoder::create(ParamStore& params, const std::string& name, int crop_size, int hidden, int out,
                                  Rng& rng) {
  ImageEncoder e;
  e.crop_size = crop_size;
  e.l1 = Linear::create(params, name + ".l1", 3 * crop_size * crop_size, hidden, rng);
  e.l2 = Linear::create(params, name + ".l2", hidden, out, rng);
  return e;
}

ImageEncoder::Cache ImageEncoder::forward(const ParamStore& params, const Image& crop) const {
  Cache c;
  if (crop.height == crop_size && crop.width == crop_size) {
    c.x = image_to_row(crop);
  } else {
    Box2D full{Vec2::Zero(), Vec2(crop.width, crop.height)};
    c.x = image_to_row(crop_resize(crop, full, crop_size));
  }
  c.a1 = l1.forward(params, c.x);
  c.h1 = relu(c.a1);
  c.out = l2.forward(params, c.h1).row(0).transpose();
  return c;
}

void ImageEncoder::backward(const ParamStore& params, const Cache& c, const VecX& d_out, ParamStore& grads) const {
  const Mat d_h1 = l2.backward(params, c.h1, d_out.transpose(), grads);
  l1.backward(params, c.x, relu_backward(c.a1, d_h1), grads, false);
}

ProjectionHead ProjectionHead::create(ParamStore& params, const std::string& name, int in, int out, Rng& rng) {
  ProjectionHead h;
  h.in = in;
  h.out = out;
  h.weight = params.add(name + ".w", glorot(out, in, rng));
  return h;
}

ProjectionHead::Cache ProjectionHead::forward(const ParamStore& params, const VecX& f) const {
  Cache c;
  c.f = f;
  c.z = params[weight] * f;
  c.norm = c.z.norm();
  if (!(c.norm >= 1e-12)) throw DegenerateNorm();
  c.h = c.z / c.norm;
  return c;
}

VecX ProjectionHead::backward(const ParamStore& params, const Cache& c, const VecX& d_h, ParamStore& grads) const {
  const VecX d_z = (d_h - c.h * c.h.dot(d_h)) / c.norm;
  grads[weight] += d_z * c.f.transpose();
  return params[weight].transpose() * d_z;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  Rng rng(0);
  layout_ = build(rng);
}

ParamStore Model::build(Rng& rng) const {
  // Layer descriptors are identical for every build; only values differ.
  auto* self = const_cast<Model*>(this);
  const ModelConfig& c = cfg_;
  ParamStore p;
  self->global3d = PointEncoder::create(p, "det3d.global", c.point_hidden1, c.point_hidden2, c.global_dim, rng);
  self->local3d = PointEncoder::create(p, "det3d.local", c.point_hidden1, c.point_hidden2, c.global_dim, rng);
  self->box1_3d = Linear::create(p, "det3d.box1", 2 * c.global_dim + 3, c.box_hidden, rng);
  self->box2_3d = Linear::create(p, "det3d.box2", c.box_hidden, 7, rng);
  self->roi3d = PointEncoder::create(p, "det3d.roi", c.point_hidden1, c.point_hidden2, c.feature_dim, rng);
  self->cls3d = Linear::create(p, "det3d.cls", c.feature_dim, c.vocab(), rng);
  self->proj3d = ProjectionHead::create(p, "det3d.proj", c.feature_dim, c.embed_dim, rng);

  self->global2d = Linear::create(p, "det2d.global", 3 * c.image_pool * c.image_pool, c.global_dim, rng);
  self->patch2d = Linear::create(p, "det2d.patch", 3 * c.patch_window * c.patch_window, c.global_dim, rng);
  self->queries2d = p.add("det2d.queries", glorot(c.queries_2d, c.query_dim, rng));
  self->box1_2d = Linear::create(p, "det2d.box1", 2 * c.global_dim + c.query_dim + 2, c.box_hidden, rng);
  self->box2_2d = Linear::create(p, "det2d.box2", c.box_hidden, 4, rng);
  self->roi2d = ImageEncoder::create(p, "det2d.roi", c.crop_size, c.image_hidden, c.feature_dim, rng);
  self->cls2d = Linear::create(p, "det2d.cls", c.feature_dim, c.vocab(), rng);
  self->proj2d = ProjectionHead::create(p, "det2d.proj", c.feature_dim, c.embed_dim, rng);
  return p;
}

ParamStore Model::init(std::uint64_t seed) const {
  Rng rng(seed);
  return build(rng);
}

void Model::check_layout(const ParamStore& params) const {
  if (!layout_.same_layout(params)) throw FormatError("parameter layout does not match the model configuration");
}

// ---------------------------------------------------------------------------
// Single-feature operations

RoiFeature encode_pointcloud_roi(const Model& model, const ParamStore& params, const std::vector<Vec3>& local_points) {
  Mat x(static_cast<Eigen::Index>(local_points.size()), 3);
  for (std::size_t i = 0; i < local_points.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = local_points[i].transpose();
  return {model.roi3d.forward(params, x).out, Modality::kPointCloud, std::nullopt};
}

RoiFeature encode_image_roi(const Model& model, const ParamStore& params, const Image& crop) {
  return {model.roi2d.forward(params, crop).out, Modality::kImage, std::nullopt};
}

EmbeddingVector project_and_normalize(const Model& model, const ParamStore& params, const RoiFeature& f, int label) {
  if (!f.values.allFinite()) throw DegenerateNorm();
  const ProjectionHead& head = f.modality == Modality::kPointCloud ? model.proj3d : model.proj2d;
  EmbeddingVector e;
  e.h = head.forward(params, f.values).h;
  e.label = label;
  e.modality = f.modality;
  e.anchor = f.anchor;
  return e;
}

VecX classify(const ParamStore& params, const Linear& head, const VecX& f) {
  return head.forward(params, f.transpose()).row(0).transpose();
}

VecX softmax(const VecX& logits) {
  const double m = logits.maxCoeff();
  VecX e = (logits.array() - m).exp().matrix();
  return e / e.sum();
}

double foreground_confidence(const VecX& logits) {
  const VecX p = softmax(logits);
  return p.head(p.size() - 1).maxCoeff();
}

int foreground_argmax(const VecX& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i + 1 < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// 3D detector

struct Det3DCache {
  Mat global_in;
  PointEncoder::Cache global;
  std::vector<PointEncoder::Cache> local;
  Mat box_in;
  Mat box_a1;
  Mat box_h1;
  Mat box_out;
  std::vector<std::optional<PointEncoder::Cache>> roi;
};

std::vector<std::size_t> farthest_point_sample(const std::vector<Vec3>& points, int count) {
  std::vector<std::size_t> out;
  if (points.empty() || count <= 0) return out;
  const std::size_t n = points.size();
  const std::size_t m = std::min<std::size_t>(n, static_cast<std::size_t>(count));
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t current = 0;
  for (std::size_t k = 0; k < m; ++k) {
    out.push_back(current);
    std::size_t next = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], (points[i] - points[current]).squaredNorm());
      if (dist[i] > best) {
        best = dist[i];
        next = i;
      }
    }
    current = next;
  }
  return out;
}

namespace {

struct FreezeState {
  bool active = false;
  bool replay = false;
  int passes = 0;
  std::vector<Box3D> boxes3;
  std::vector<Box2D> boxes2;
  std::size_t next3 = 0;
  std::size_t next2 = 0;
};

thread_local FreezeState g_freeze;

template <typename Box>
Box freeze_box(const Box& box, std::vector<Box>& store, std::size_t& next) {
  if (!g_freeze.active) return box;
  if (!g_freeze.replay) {
    store.push_back(box);
    return box;
  }
  if (next >= store.size()) throw Error("ROI replay ran past the recorded pass");
  return store[next++];
}

}  // namespace

RoiGeometryFreeze::RoiGeometryFreeze() {
  if (g_freeze.active) throw Error("nested RoiGeometryFreeze");
  g_freeze = FreezeState{};
  g_freeze.active = true;
}

RoiGeometryFreeze::~RoiGeometryFreeze() { g_freeze = FreezeState{}; }

void RoiGeometryFreeze::begin_pass() {
  g_freeze.replay = g_freeze.passes++ > 0;
  g_freeze.next3 = g_freeze.next2 = 0;
}

Box3D roi_geometry(const Box3D& box) { return freeze_box(box, g_freeze.boxes3, g_freeze.next3); }
Box2D roi_geometry(const Box2D& box) { return freeze_box(box, g_freeze.boxes2, g_freeze.next2); }

Mat roi_points(const std::vector<Vec3>& points, const std::vector<std::size_t>& inside, int max_points) {
  const std::size_t m = std::min<std::size_t>(inside.size(), static_cast<std::size_t>(max_points));
  Vec3 centroid = Vec3::Zero();
  for (std::size_t idx : inside) centroid += points[idx];
  centroid /= static_cast<double>(inside.size());
  Mat local(static_cast<Eigen::Index>(m), 3);
  for (std::size_t j = 0; j < m; ++j) {
    local.row(static_cast<Eigen::Index>(j)) = (points[inside[j * inside.size() / m]] - centroid).transpose();
  }
  return local;
}

Det3DOutput forward_detector_3d(const Model& model, const ParamStore& params, const std::vector<Vec3>& points,
                                const Vec3& extent) {
  const ModelConfig& cfg = model.config();
  if (points.empty()) throw EmptyRoi();
  auto cache = std::make_shared<Det3DCache>();
  const std::size_t n = points.size();
  const Vec3 room_center = 0.5 * extent;
  const double room_scale = 0.5 * extent.maxCoeff();

  cache->global_in.resize(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    cache->global_in.row(static_cast<Eigen::Index>(i)) = ((points[i] - room_center) / room_scale).transpose();
  }
  cache->global = model.global3d.forward(params, cache->global_in);

  const auto seeds = farthest_point_sample(points, cfg.queries_3d);
  const auto q = static_cast<Eigen::Index>(seeds.size());
  const double radius = cfg.neighborhood_radius;
  cache->box_in.resize(q, 2 * cfg.global_dim + 3);
  cache->local.reserve(seeds.size());
  std::vector<std::pair<double, std::size_t>> near;
  for (Eigen::Index k = 0; k < q; ++k) {
    const Vec3& s = points[seeds[k]];
    near.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (points[i] - s).squaredNorm();
      if (d <= radius * radius) near.emplace_back(d, i);
    }
    // Stride over the distance-sorted ball so the sample spans the whole
    // neighborhood rather than the closest patch.
    const std::size_t keep = std::min<std::size_t>(near.size(), static_cast<std::size_t>(cfg.neighborhood_points));
    std::sort(near.begin(), near.end());
    Mat local(static_cast<Eigen::Index>(keep), 3);
    for (std::size_t j = 0; j < keep; ++j) {
      const std::size_t idx = near[j * near.size() / keep].second;
      local.row(static_cast<Eigen::Index>(j)) = ((points[idx] - s) / radius).transpose();
    }
    cache->local.push_back(model.local3d.forward(params, local));
    cache->box_in.row(k) << cache->global.out.transpose(), cache->local.back().out.transpose(),
        ((s - room_center) / room_scale).transpose();
  }
  cache->box_a1 = model.box1_3d.forward(params, cache->box_in);
  cache->box_h1 = relu(cache->box_a1);
  cache->box_out = model.box2_3d.forward(params, cache->box_h1);

  Det3DOutput out;
  out.proposals.resize(seeds.size());
  cache->roi.resize(seeds.size());
  std::vector<Vec3> local_pts;
  for (Eigen::Index k = 0; k < q; ++k) {
    Proposal3D& prop = out.proposals[k];
    const auto o = cache->box_out.row(k);
    prop.seed = points[seeds[k]];
    prop.box.center = prop.seed + kOffsetScale3d * Vec3(o(0), o(1), o(2));
    prop.box.size = Vec3(kMinSize3d + softplus(o(3)), kMinSize3d + softplus(o(4)), kMinSize3d + softplus(o(5)));
    prop.box.yaw = normalize_yaw(kYawScale * o(6));

    auto inside = points_in_box(points, roi_geometry(prop.box));
    if (inside.empty()) {
      prop.empty = true;
      prop.feature = {VecX::Zero(cfg.feature_dim), Modality::kPointCloud, prop.box.center};
      prop.logits = classify(params, model.cls3d, prop.feature.values);
      prop.confidence = 0.0;
      continue;
    }
    cache->roi[k] = model.roi3d.forward(params, roi_points(points, inside, cfg.roi_max_points));
    prop.feature = {cache->roi[k]->out, Modality::kPointCloud, prop.box.center};
    prop.logits = classify(params, model.cls3d, prop.feature.values);
    prop.confidence = foreground_confidence(prop.logits);
  }
  out.cache = std::move(cache);
  return out;
}

void backward_detector_3d(const Model& model, const ParamStore& params, const Det3DOutput& out,
                          const Det3DGrads& g, ParamStore& grads) {
  const Det3DCache& c = *out.cache;
  const auto q = static_cast<Eigen::Index>(out.proposals.size());
  Mat d_box_out = Mat::Zero(q, 7);
  for (Eigen::Index k = 0; k < q; ++k) {
    const Proposal3D& prop = out.proposals[k];
    Box3DGrad db = g.box[k];
    const bool has_logits = g.logits[k].size() > 0;
    const bool has_feature = g.feature[k].size() > 0;
    if (has_logits || has_feature) {
      VecX d_f = VecX::Zero(prop.feature.values.size());
      if (has_logits) {
        d_f += model.cls3d.backward(params, prop.feature.values.transpose(), g.logits[k].transpose(), grads)
                   .row(0)
                   .transpose();
      }
      if (has_feature) d_f += g.feature[k];
      // ROI coordinates depend on the box only through membership, so the
      // classification path has no gradient into the box parameters.
      if (c.roi[k]) model.roi3d.backward(params, *c.roi[k], d_f, grads, false);
    }
    const auto o = c.box_out.row(k);
    d_box_out(k, 0) = kOffsetScale3d * db.center.x();
    d_box_out(k, 1) = kOffsetScale3d * db.center.y();
    d_box_out(k, 2) = kOffsetScale3d * db.center.z();
    for (int a = 0; a < 3; ++a) d_box_out(k, 3 + a) = db.size[a] * sigmoid(o(3 + a));
    d_box_out(k, 6) = kYawScale * db.yaw;
  }
  const Mat d_h1 = model.box2_3d.backward(params, c.box_h1, d_box_out, grads);
  const Mat d_in = model.box1_3d.backward(params, c.box_in, relu_backward(c.box_a1, d_h1), grads);
  const int dg = model.config().global_dim;
  const VecX d_global = d_in.leftCols(dg).colwise().sum().transpose();
  for (Eigen::Index k = 0; k < q; ++k) {
    model.local3d.backward(params, c.local[k], d_in.block(k, dg, 1, dg).transpose(), grads, false);
  }
  model.global3d.backward(params, c.global, d_global, grads, false);
}

// ---------------------------------------------------------------------------
// 2D detector

struct Det2DCache {
  Mat pooled;
  Mat global_a;
  Mat global_h;
  Mat patches;
  Mat patch_a;
  Mat patch_h;
  Mat box_in;
  Mat box_a1;
  Mat box_h1;
  Mat box_out;
  Mat raw;  // q x 4 unclamped normalized (x1, y1, x2, y2)
  std::vector<std::optional<ImageEncoder::Cache>> roi;
  int width = 0;
  int height = 0;
};

namespace {

Vec2 anchor_2d(int k, int q) {
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(q))));
  const int row = k / side;
  const int col = k % side;
  return {(col + 0.5) / side, (row + 0.5) / side};
}

}  // namespace

Det2DOutput forward_detector_2d(const Model& model, const ParamStore& params, const Image& image, bool with_roi) {
  const ModelConfig& cfg = model.config();
  auto cache = std::make_shared<Det2DCache>();
  cache->width = image.width;
  cache->height = image.height;
  cache->pooled = pool_image(image, cfg.image_pool);
  cache->global_a = model.global2d.forward(params, cache->pooled);
  cache->global_h = relu(cache->global_a);

  const int q = cfg.queries_2d;
  const int grid = cfg.patch_pool;
  const int win = cfg.patch_window;
  const Mat fine = pool_image(image, grid);
  cache->patches.resize(q, 3 * win * win);
  for (int k = 0; k < q; ++k) {
    const Vec2 a = anchor_2d(k, q);
    const int r0 = std::clamp(static_cast<int>(a.y() * grid) - win / 2, 0, grid - win);
    const int c0 = std::clamp(static_cast<int>(a.x() * grid) - win / 2, 0, grid - win);
    for (int i = 0; i < win; ++i) {
      for (int j = 0; j < win; ++j) {
        for (int ch = 0; ch < 3; ++ch) {
          cache->patches(k, (i * win + j) * 3 + ch) = fine(0, ((r0 + i) * grid + (c0 + j)) * 3 + ch);
        }
      }
    }
  }
  cache->patch_a = model.patch2d.forward(params, cache->patches);
  cache->patch_h = relu(cache->patch_a);

  const int dg = cfg.global_dim;
  cache->box_in.resize(q, 2 * dg + cfg.query_dim + 2);
  const Mat& queries = params[model.queries2d];
  for (int k = 0; k < q; ++k) {
    const Vec2 a = anchor_2d(k, q);
    cache->box_in.row(k) << cache->global_h.row(0), cache->patch_h.row(k), queries.row(k), a.x(), a.y();
  }
  cache->box_a1 = model.box1_2d.forward(params, cache->box_in);
  cache->box_h1 = relu(cache->box_a1);
  cache->box_out = model.box2_2d.forward(params, cache->box_h1);

  Det2DOutput out;
  out.proposals.resize(q);
  cache->roi.resize(q);
  cache->raw.resize(q, 4);
  for (int k = 0; k < q; ++k) {
    const Vec2 a = anchor_2d(k, q);
    const auto o = cache->box_out.row(k);
    const double cx = a.x() + kOffsetScale2d * o(0);
    const double cy = a.y() + kOffsetScale2d * o(1);
    const double w = sigmoid(o(2));
    const double h = sigmoid(o(3));
    cache->raw.row(k) << cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h;
    Proposal2D& prop = out.proposals[k];
    prop.box.min = Vec2(std::clamp(cache->raw(k, 0), 0.0, 1.0) * image.width,
                        std::clamp(cache->raw(k, 1), 0.0, 1.0) * image.height);
    prop.box.max = Vec2(std::clamp(cache->raw(k, 2), 0.0, 1.0) * image.width,
                        std::clamp(cache->raw(k, 3), 0.0, 1.0) * image.height);
  }
  out.cache = std::move(cache);
  if (with_roi) {
    for (int k = 0; k < q; ++k) compute_roi_2d(model, params, image, out, static_cast<std::size_t>(k));
  }
  return out;
}

void compute_roi_2d(const Model& model, const ParamStore& params, const Image& image, Det2DOutput& out,
                    std::size_t index) {
  Proposal2D& prop = out.proposals.at(index);
  auto& roi = out.cache->roi[index];
  roi = model.roi2d.forward(params, crop_resize(image, roi_geometry(prop.box), model.config().crop_size));
  prop.feature = {roi->out, Modality::kImage, std::nullopt};
  prop.has_feature = true;
  prop.logits = classify(params, model.cls2d, prop.feature.values);
  prop.confidence = foreground_confidence(prop.logits);
}

void backward_detector_2d(const Model& model, const ParamStore& params, const Det2DOutput& out,
                          const Det2DGrads& g, ParamStore& grads) {
  const Det2DCache& c = *out.cache;
  const auto q = static_cast<Eigen::Index>(out.proposals.size());
  Mat d_box_out = Mat::Zero(q, 4);
  bool any_box = false;
  for (Eigen::Index k = 0; k < q; ++k) {
    const Proposal2D& prop = out.proposals[k];
    const bool has_logits = g.logits[k].size() > 0;
    const bool has_feature = g.feature[k].size() > 0;
    if ((has_logits || has_feature) && c.roi[k]) {
      VecX d_f = VecX::Zero(prop.feature.values.size());
      if (has_logits) {
        d_f += model.cls2d.backward(params, prop.feature.values.transpose(), g.logits[k].transpose(), grads)
                   .row(0)
                   .transpose();
      }
      if (has_feature) d_f += g.feature[k];
      model.roi2d.backward(params, *c.roi[k], d_f, grads);
    }
    const Box2DGrad& db = g.box[k];
    // Normalized coordinate gradients; clamped coordinates pass nothing.
    auto pass = [&](int col, double d_pix, double scale) {
      const double v = c.raw(k, col);
      return (v > 0.0 && v < 1.0) ? d_pix * scale : 0.0;
    };
    const double dx1 = pass(0, db.min.x(), c.width);
    const double dy1 = pass(1, db.min.y(), c.height);
    const double dx2 = pass(2, db.max.x(), c.width);
    const double dy2 = pass(3, db.max.y(), c.height);
    if (dx1 == 0.0 && dy1 == 0.0 && dx2 == 0.0 && dy2 == 0.0) continue;
    any_box = true;
    const auto o = c.box_out.row(k);
    const double sw = sigmoid(o(2));
    const double sh = sigmoid(o(3));
    d_box_out(k, 0) = kOffsetScale2d * (dx1 + dx2);
    d_box_out(k, 1) = kOffsetScale2d * (dy1 + dy2);
    d_box_out(k, 2) = 0.5 * (dx2 - dx1) * sw * (1.0 - sw);
    d_box_out(k, 3) = 0.5 * (dy2 - dy1) * sh * (1.0 - sh);
  }
  if (!any_box) return;
  const Mat d_h1 = model.box2_2d.backward(params, c.box_h1, d_box_out, grads);
  const Mat d_in = model.box1_2d.backward(params, c.box_in, relu_backward(c.box_a1, d_h1), grads);
  const int dg = model.config().global_dim;
  const int qd = model.config().query_dim;
  const Mat d_global = d_in.leftCols(dg).colwise().sum();
  const Mat d_patch = d_in.middleCols(dg, dg);
  grads[model.queries2d] += d_in.middleCols(2 * dg, qd);
  model.patch2d.backward(params, c.patches, relu_backward(c.patch_a, d_patch), grads, false);
  model.global2d.backward(params, c.pooled, relu_backward(c.global_a, d_global), grads, false);
}

// ---------------------------------------------------------------------------
// Gradient check

GradientCheckResult gradient_check(const LossClosure& loss, const ParamStore& params, double epsilon,
                                   std::size_t per_tensor, std::uint64_t seed,
                                   const std::vector<std::string>& only_tensors) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) throw Error("gradient_check epsilon must be in [1e-6, 1e-3]");
  ParamStore analytic = params.zeros_like();
  loss(params, &analytic);
  ParamStore probe = params;
  Rng rng(seed);
  GradientCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::string& name = params.names()[t];
    if (!only_tensors.empty() && std::find(only_tensors.begin(), only_tensors.end(), name) == only_tensors.end()) {
      continue;
    }
    const auto count = static_cast<std::size_t>(params[t].size());
    std::vector<std::size_t> coords;
    if (count <= per_tensor) {
      coords.resize(count);
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      std::vector<std::size_t> all(count);
      std::iota(all.begin(), all.end(), 0);
      for (std::size_t i = 0; i < per_tensor; ++i) std::swap(all[i], all[i + rng.index(count - i)]);
      coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(per_tensor));
    }
    for (std::size_t idx : coords) {
      double& v = probe[t].data()[idx];
      const double orig = v;
      v = orig + epsilon;
      const double up = loss(probe, nullptr);
      v = orig - epsilon;
      const double down = loss(probe, nullptr);
      v = orig;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[t].data()[idx];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        throw NonFiniteGradient("non-finite gradient at " + name + "[" + std::to_string(idx) + "]");
      }
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(numeric));
      ++result.coordinates_checked;
      const double top = std::max(std::abs(up), std::abs(down));
      const double resolution = (std::nextafter(top, HUGE_VAL) - top) / epsilon;
      if (std::max(std::abs(a), std::abs(numeric)) >= GradientCheckResult::kResolvedFactor * resolution) {
        result.max_relative_error_resolved = std::max(result.max_relative_error_resolved, rel);
      } else {
        ++result.unresolved;
        result.max_unresolved_error = std::max(result.max_unresolved_error, std::abs(a - numeric) / resolution);
      }
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_tensor = name;
        result.worst_index = idx;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<char> serialize_checkpoint(const ParamStore& params) {
  std::vector<char> out(kCheckpointMagic, kCheckpointMagic + 8);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t t = 0; t < params.size(); ++t) {
    const std::string& name = params.names()[t];
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const Mat& m = params[t];
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(m(i, j))));
      }
    }
  }
  return out;
}

ParamStore deserialize_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("not a checkpoint file");
  }
  std::size_t pos = 8;
  const std::uint32_t version = get_u32(bytes, pos);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = get_u32(bytes, pos);
  ParamStore params;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t len = get_u32(bytes, pos);
    if (pos + len > bytes.size()) throw FormatError("checkpoint truncated");
    std::string name(bytes.data() + pos, len);
    pos += len;
    const std::uint32_t rows = get_u32(bytes, pos);
    const std::uint32_t cols = get_u32(bytes, pos);
    Mat m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i) {
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = std::bit_cast<float>(get_u32(bytes, pos));
    }
    params.add(name, std::move(m));
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes in checkpoint");
  return params;
}

void save_checkpoint(const std::string& path, const ParamStore& params) {
  const auto bytes = serialize_checkpoint(params);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open checkpoint " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace ov3d
