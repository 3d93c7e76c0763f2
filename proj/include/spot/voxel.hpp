#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spot/error.hpp"
#include "spot/rng.hpp"

namespace spot {

struct Dims {
  std::uint32_t x = 0, y = 0, z = 0;

  std::size_t volume() const { return std::size_t(x) * y * z; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

struct Coord {
  std::uint32_t x = 0, y = 0, z = 0;

  friend bool operator==(const Coord&, const Coord&) = default;
};

// Linear index with x varying fastest.
inline std::size_t linear_index(const Coord& c, const Dims& d) {
  return std::size_t(c.x) + std::size_t(d.x) * (std::size_t(c.y) + std::size_t(d.y) * c.z);
}

inline constexpr std::uint32_t kEmptyClass = 0;

// Active voxels of a sparse scene with one feature row per voxel.
// Immutable after construction; the constructor enforces the invariants.
class SparseVoxelGrid {
 public:
  SparseVoxelGrid() = default;

  SparseVoxelGrid(Dims dims, std::vector<Coord> coords, std::vector<float> features, std::size_t channels)
      : dims_(dims), coords_(std::move(coords)), features_(std::move(features)), channels_(channels) {
    if (dims_.x == 0 || dims_.y == 0 || dims_.z == 0) throw Error("grid dims must be positive");
    if (channels_ == 0) throw Error("grid channel count must be positive");
    if (features_.size() != coords_.size() * channels_)
      throw Error("feature matrix has " + std::to_string(features_.size()) + " entries, expected " +
                  std::to_string(coords_.size() * channels_));
    std::vector<std::size_t> lin;
    lin.reserve(coords_.size());
    for (const auto& c : coords_) {
      if (c.x >= dims_.x || c.y >= dims_.y || c.z >= dims_.z) throw Error("voxel coordinate outside grid");
      lin.push_back(linear_index(c, dims_));
    }
    std::sort(lin.begin(), lin.end());
    if (std::adjacent_find(lin.begin(), lin.end()) != lin.end()) throw Error("duplicate voxel coordinate");
    for (float f : features_)
      if (!std::isfinite(f)) throw Error("non-finite voxel feature");
  }

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return coords_.size(); }
  std::size_t channels() const { return channels_; }
  const std::vector<Coord>& coords() const { return coords_; }
  const std::vector<float>& features() const { return features_; }
  std::span<const float> feature(std::size_t i) const {
    return std::span<const float>(features_).subspan(i * channels_, channels_);
  }

  friend bool operator==(const SparseVoxelGrid&, const SparseVoxelGrid&) = default;

 private:
  Dims dims_;
  std::vector<Coord> coords_;
  std::vector<float> features_;
  std::size_t channels_ = 0;
};

struct SceneObject {
  std::uint32_t class_id = 0;
  std::vector<std::uint32_t> voxels;  // ascending indices into the grid's active voxels

  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneGroundTruth {
  std::uint32_t n_classes = 0;
  std::vector<std::uint32_t> labels;  // per active voxel, kEmptyClass for background
  std::vector<SceneObject> objects;

  friend bool operator==(const SceneGroundTruth&, const SceneGroundTruth&) = default;
};

// Throws if `gt` violates the ground-truth invariants relative to a grid of `nv` voxels.
inline void validate_ground_truth(const SceneGroundTruth& gt, std::size_t nv) {
  if (gt.n_classes < 2) throw Error("ground truth needs at least two classes");
  if (gt.labels.size() != nv) throw Error("label count does not match voxel count");
  for (auto l : gt.labels)
    if (l >= gt.n_classes) throw Error("label out of class range");
  std::vector<int> owner(nv, -1);
  for (std::size_t o = 0; o < gt.objects.size(); ++o) {
    const auto& obj = gt.objects[o];
    if (obj.voxels.empty()) throw Error("object mask is empty");
    if (obj.class_id == kEmptyClass || obj.class_id >= gt.n_classes) throw Error("object class out of range");
    for (auto v : obj.voxels) {
      if (v >= nv) throw Error("object mask index out of range");
      if (owner[v] != -1) throw Error("voxel belongs to more than one object");
      if (gt.labels[v] != obj.class_id) throw Error("object class disagrees with voxel label");
      owner[v] = int(o);
    }
  }
  for (std::size_t v = 0; v < nv; ++v)
    if (gt.labels[v] != kEmptyClass && owner[v] == -1) throw Error("non-empty voxel not covered by any object");
}

struct SceneSpec {
  Dims dims{16, 16, 8};
  std::uint32_t n_objects = 3;
  std::uint32_t n_classes = 4;
  std::uint32_t channels = 32;
  std::uint64_t seed = 7;
  // Fraction of the free dense volume activated as background (empty-class) voxels.
  double background_fraction = 0.05;
  double feature_noise = 0.5;
};

struct Scene {
  SparseVoxelGrid grid;
  SceneGroundTruth gt;

  friend bool operator==(const Scene&, const Scene&) = default;
};

// Places n_objects boxes or ellipsoids of distinct non-empty classes in
// disjoint slabs along x, plus sparse background voxels. Features are the
// class mean plus Gaussian noise.
inline Scene generate_scene(const SceneSpec& spec) {
  const Dims d = spec.dims;
  if (d.x < 4 || d.y < 4 || d.z < 4) throw Error("scene dims must be at least 4 in every axis");
  if (spec.n_objects < 1) throw Error("scene needs at least one object");
  if (spec.n_classes < 2) throw Error("scene needs at least two classes");
  if (spec.channels < 1) throw Error("scene needs at least one channel");
  if (spec.n_objects > spec.n_classes - 1)
    throw Error("objects cannot fit: need " + std::to_string(spec.n_objects) + " distinct non-empty classes");
  const std::uint32_t slab = d.x / spec.n_objects;
  if (slab < 2) throw Error("objects cannot fit: dims too small for " + std::to_string(spec.n_objects) + " objects");

  auto eng = rng::engine(spec.seed, "scene");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto uniform_int = [&](std::uint32_t lo, std::uint32_t hi) {  // inclusive
    return lo + std::uint32_t(std::floor(unif(eng) * double(hi - lo + 1)));
  };

  std::vector<std::vector<double>> means(spec.n_classes, std::vector<double>(spec.channels));
  for (auto& m : means)
    for (auto& v : m) v = normal(eng);

  std::vector<std::uint32_t> classes(spec.n_classes - 1);
  std::iota(classes.begin(), classes.end(), 1u);
  for (std::size_t i = classes.size(); i > 1; --i) std::swap(classes[i - 1], classes[uniform_int(0, std::uint32_t(i - 1))]);

  // Dense label volume; UINT32_MAX marks inactive.
  constexpr std::uint32_t kInactive = std::numeric_limits<std::uint32_t>::max();
  std::vector<std::uint32_t> dense(d.volume(), kInactive);
  auto extent = [&](std::uint32_t len) {
    const auto lo = std::max<std::uint32_t>(1, std::uint32_t(std::ceil(0.3 * len)));
    const auto hi = std::max(lo, std::uint32_t(std::floor(0.7 * len)));
    return uniform_int(lo, hi);
  };
  for (std::uint32_t o = 0; o < spec.n_objects; ++o) {
    const std::uint32_t x0 = o * slab;
    const std::array<std::uint32_t, 3> len{slab, d.y, d.z};
    std::array<std::uint32_t, 3> ext{}, lo{};
    for (int a = 0; a < 3; ++a) {
      ext[a] = extent(len[a]);
      lo[a] = uniform_int(0, len[a] - ext[a]);
    }
    lo[0] += x0;
    const bool ellipsoid = unif(eng) < 0.5;
    std::size_t placed = 0;
    for (int pass = 0; pass < 2 && placed == 0; ++pass) {
      const bool use_ellipsoid = ellipsoid && pass == 0;
      for (std::uint32_t z = lo[2]; z < lo[2] + ext[2]; ++z)
        for (std::uint32_t y = lo[1]; y < lo[1] + ext[1]; ++y)
          for (std::uint32_t x = lo[0]; x < lo[0] + ext[0]; ++x) {
            if (use_ellipsoid) {
              const double u = (x + 0.5 - lo[0]) / ext[0] * 2 - 1, v = (y + 0.5 - lo[1]) / ext[1] * 2 - 1,
                           w = (z + 0.5 - lo[2]) / ext[2] * 2 - 1;
              if (u * u + v * v + w * w > 1.0) continue;
            }
            dense[linear_index({x, y, z}, d)] = classes[o];
            ++placed;
          }
    }
  }
  for (auto& cell : dense)
    if (cell == kInactive && unif(eng) < spec.background_fraction) cell = kEmptyClass;

  std::vector<Coord> coords;
  std::vector<std::uint32_t> labels;
  for (std::uint32_t z = 0; z < d.z; ++z)
    for (std::uint32_t y = 0; y < d.y; ++y)
      for (std::uint32_t x = 0; x < d.x; ++x) {
        const auto l = dense[linear_index({x, y, z}, d)];
        if (l == kInactive) continue;
        coords.push_back({x, y, z});
        labels.push_back(l);
      }
  std::vector<float> features;
  features.reserve(coords.size() * spec.channels);
  for (auto l : labels)
    for (std::uint32_t c = 0; c < spec.channels; ++c)
      features.push_back(static_cast<float>(means[l][c] + spec.feature_noise * normal(eng)));

  SceneGroundTruth gt;
  gt.n_classes = spec.n_classes;
  gt.labels = labels;
  for (std::uint32_t o = 0; o < spec.n_objects; ++o) {
    SceneObject obj{classes[o], {}};
    for (std::uint32_t v = 0; v < labels.size(); ++v)
      if (labels[v] == classes[o]) obj.voxels.push_back(v);
    gt.objects.push_back(std::move(obj));
  }
  Scene scene{SparseVoxelGrid(d, std::move(coords), std::move(features), spec.channels), std::move(gt)};
  validate_ground_truth(scene.gt, scene.grid.size());
  return scene;
}

struct Downsampled {
  SparseVoxelGrid grid;
  std::vector<std::uint32_t> parent;  // input voxel index -> output voxel index
};

// Floor-halves coordinates (dims clamp at 1), merges coincident voxels and
// averages their features.
inline Downsampled downsample_with_parent(const SparseVoxelGrid& grid) {
  const Dims in = grid.dims();
  const Dims out{std::max(1u, in.x / 2), std::max(1u, in.y / 2), std::max(1u, in.z / 2)};
  const std::size_t nv = grid.size(), c = grid.channels();
  std::vector<std::pair<std::size_t, std::uint32_t>> keyed(nv);
  for (std::uint32_t i = 0; i < nv; ++i) {
    const auto& p = grid.coords()[i];
    const Coord h{std::min(p.x / 2, out.x - 1), std::min(p.y / 2, out.y - 1), std::min(p.z / 2, out.z - 1)};
    keyed[i] = {linear_index(h, out), i};
  }
  std::sort(keyed.begin(), keyed.end());
  std::vector<Coord> coords;
  std::vector<float> features;
  std::vector<std::uint32_t> parent(nv);
  std::vector<double> acc(c);
  for (std::size_t i = 0; i < nv;) {
    std::size_t j = i;
    std::fill(acc.begin(), acc.end(), 0.0);
    while (j < nv && keyed[j].first == keyed[i].first) {
      const auto f = grid.feature(keyed[j].second);
      for (std::size_t k = 0; k < c; ++k) acc[k] += f[k];
      parent[keyed[j].second] = std::uint32_t(coords.size());
      ++j;
    }
    const auto& p = grid.coords()[keyed[i].second];
    coords.push_back({std::min(p.x / 2, out.x - 1), std::min(p.y / 2, out.y - 1), std::min(p.z / 2, out.z - 1)});
    for (std::size_t k = 0; k < c; ++k) features.push_back(static_cast<float>(acc[k] / double(j - i)));
    i = j;
  }
  return {SparseVoxelGrid(out, std::move(coords), std::move(features), c), std::move(parent)};
}

inline SparseVoxelGrid downsample(const SparseVoxelGrid& grid) { return downsample_with_parent(grid).grid; }

// Multi-scale view of one scene, coarsest level first. `to_level[l][v]` maps a
// finest-level voxel v to its ancestor in level l.
struct ScenePyramid {
  std::vector<SparseVoxelGrid> levels;
  std::vector<std::vector<std::uint32_t>> to_level;

  std::size_t size() const { return levels.size(); }
  const SparseVoxelGrid& finest() const { return levels.back(); }
};

inline ScenePyramid build_pyramid(const SparseVoxelGrid& finest, std::size_t n_levels) {
  if (n_levels < 1) throw Error("pyramid needs at least one level");
  std::vector<SparseVoxelGrid> fine_to_coarse{finest};
  std::vector<std::vector<std::uint32_t>> maps;
  std::vector<std::uint32_t> identity(finest.size());
  std::iota(identity.begin(), identity.end(), 0u);
  maps.push_back(identity);
  for (std::size_t l = 1; l < n_levels; ++l) {
    auto ds = downsample_with_parent(fine_to_coarse.back());
    std::vector<std::uint32_t> m(finest.size());
    for (std::size_t v = 0; v < m.size(); ++v) m[v] = ds.parent[maps.back()[v]];
    fine_to_coarse.push_back(std::move(ds.grid));
    maps.push_back(std::move(m));
  }
  ScenePyramid p;
  for (std::size_t l = n_levels; l-- > 0;) {
    p.levels.push_back(std::move(fine_to_coarse[l]));
    p.to_level.push_back(std::move(maps[l]));
  }
  return p;
}

// Dense scalar volume, x fastest.
template <class T>
struct DenseVolume {
  Dims dims;
  std::vector<T> values;

  T at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const { return values[linear_index({x, y, z}, dims)]; }
};

inline constexpr double kDensifyFill = -1e9;

template <class T>
DenseVolume<T> densify(const SparseVoxelGrid& grid, std::span<const T> values, T fill = T(kDensifyFill)) {
  if (values.size() != grid.size()) throw Error("densify: value count does not match voxel count");
  DenseVolume<T> out{grid.dims(), std::vector<T>(grid.dims().volume(), fill)};
  for (std::size_t i = 0; i < grid.size(); ++i) out.values[linear_index(grid.coords()[i], grid.dims())] = values[i];
  return out;
}

// Trilinear upsampling. Output site o samples input position o / factor, so
// every factor-th site reproduces an input value exactly; positions past the
// last input sample clamp to the edge.
template <class T>
DenseVolume<T> upsample_mask(const DenseVolume<T>& in, std::uint32_t factor) {
  if (factor != 2 && factor != 4) throw Error("upsample factor must be 2 or 4");
  if (in.values.size() != in.dims.volume()) throw Error("upsample: value count does not match dims");
  const Dims od{in.dims.x * factor, in.dims.y * factor, in.dims.z * factor};
  DenseVolume<T> out{od, std::vector<T>(od.volume())};
  struct Tap {
    std::uint32_t i0, i1;
    T w;
  };
  auto taps = [&](std::uint32_t n_in, std::uint32_t n_out) {
    std::vector<Tap> t(n_out);
    for (std::uint32_t o = 0; o < n_out; ++o) {
      const std::uint32_t i0 = std::min(o / factor, n_in - 1);
      const std::uint32_t i1 = std::min(i0 + 1, n_in - 1);
      const T w = (o / factor >= n_in - 1) ? T(0) : T(o % factor) / T(factor);
      t[o] = {i0, i1, w};
    }
    return t;
  };
  const auto tx = taps(in.dims.x, od.x), ty = taps(in.dims.y, od.y), tz = taps(in.dims.z, od.z);
  auto lerp = [](T a, T b, T w) { return w == T(0) ? a : a + w * (b - a); };
  for (std::uint32_t z = 0; z < od.z; ++z)
    for (std::uint32_t y = 0; y < od.y; ++y)
      for (std::uint32_t x = 0; x < od.x; ++x) {
        const auto &a = tx[x], &b = ty[y], &c = tz[z];
        const T c00 = lerp(in.at(a.i0, b.i0, c.i0), in.at(a.i1, b.i0, c.i0), a.w);
        const T c10 = lerp(in.at(a.i0, b.i1, c.i0), in.at(a.i1, b.i1, c.i0), a.w);
        const T c01 = lerp(in.at(a.i0, b.i0, c.i1), in.at(a.i1, b.i0, c.i1), a.w);
        const T c11 = lerp(in.at(a.i0, b.i1, c.i1), in.at(a.i1, b.i1, c.i1), a.w);
        const T c0 = lerp(c00, c10, b.w), c1 = lerp(c01, c11, b.w);
        out.values[linear_index({x, y, z}, od)] = lerp(c0, c1, c.w);
      }
  return out;
}

// Scene file, little-endian:
//   "SPOTSCN1", u32 X, Y, Z, Nv, C, Ncls, Nobj,
//   Nv x (u32 x, y, z), Nv x (C x f32), Nv x u32 label,
//   per object: u32 class_id, u32 mask_size, mask_size x u32 voxel index.
namespace scene_io {

inline constexpr char kMagic[8] = {'S', 'P', 'O', 'T', 'S', 'C', 'N', '1'};

namespace detail {

inline void put_u32(std::vector<char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::span<const char> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool u32(std::uint32_t& v) {
    if (remaining() < 4) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return true;
  }
  void skip(std::size_t n) { pos_ += n; }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

 private:
  std::span<const char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode(const Scene& s) {
  const auto& g = s.grid;
  std::vector<char> buf(kMagic, kMagic + 8);
  for (std::uint32_t v : {g.dims().x, g.dims().y, g.dims().z, std::uint32_t(g.size()), std::uint32_t(g.channels()),
                          s.gt.n_classes, std::uint32_t(s.gt.objects.size())})
    detail::put_u32(buf, v);
  for (const auto& c : g.coords()) {
    detail::put_u32(buf, c.x);
    detail::put_u32(buf, c.y);
    detail::put_u32(buf, c.z);
  }
  for (float f : g.features()) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    detail::put_u32(buf, u);
  }
  for (auto l : s.gt.labels) detail::put_u32(buf, l);
  for (const auto& o : s.gt.objects) {
    detail::put_u32(buf, o.class_id);
    detail::put_u32(buf, std::uint32_t(o.voxels.size()));
    for (auto v : o.voxels) detail::put_u32(buf, v);
  }
  return buf;
}

// Error classes: kBadHeader (magic or header values), kTruncated (file ends
// inside a declared block), kCountMismatch (declared counts disagree with the
// payload, including trailing bytes), kInvalid (content violates invariants).
inline Scene decode(std::span<const char> bytes) {
  using K = FormatError::Kind;
  if (bytes.size() < 8) throw FormatError(K::kTruncated, "scene file truncated: missing magic");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError(K::kBadHeader, "malformed header: bad magic");
  detail::Reader r(bytes.subspan(8));
  std::uint32_t h[7];
  for (auto& v : h)
    if (!r.u32(v)) throw FormatError(K::kTruncated, "scene file truncated: incomplete header");
  const Dims dims{h[0], h[1], h[2]};
  const std::uint32_t nv = h[3], c = h[4], ncls = h[5], nobj = h[6];
  if (dims.x == 0 || dims.y == 0 || dims.z == 0 || c == 0 || ncls < 2)
    throw FormatError(K::kBadHeader, "malformed header: zero dimension, zero channels or fewer than 2 classes");
  if (nv > dims.volume()) throw FormatError(K::kCountMismatch, "count mismatch: Nv exceeds grid volume");
  const std::size_t fixed = std::size_t(nv) * (12 + 4 * std::size_t(c) + 4);
  if (r.remaining() < fixed) throw FormatError(K::kTruncated, "scene file truncated: voxel payload incomplete");

  // Walk the object section before decoding it so that misaligned blocks
  // (a wrong Nv) surface as a count mismatch rather than garbage.
  {
    detail::Reader w = r;
    w.skip(fixed);
    for (std::uint32_t o = 0; o < nobj; ++o) {
      std::uint32_t cls = 0, size = 0;
      if (!w.u32(cls) || !w.u32(size))
        throw FormatError(K::kTruncated, "scene file truncated: object section incomplete");
      if (cls >= ncls || size > nv) throw FormatError(K::kCountMismatch, "count mismatch: object header inconsistent with Nv/Ncls");
      if (w.remaining() < std::size_t(size) * 4) throw FormatError(K::kTruncated, "scene file truncated: object mask incomplete");
      w.skip(std::size_t(size) * 4);
    }
    if (w.remaining() != 0) throw FormatError(K::kCountMismatch, "count mismatch: trailing bytes after declared payload");
  }

  std::vector<Coord> coords(nv);
  for (auto& p : coords) {
    r.u32(p.x);
    r.u32(p.y);
    r.u32(p.z);
  }
  std::vector<float> features(std::size_t(nv) * c);
  for (auto& f : features) {
    std::uint32_t u = 0;
    r.u32(u);
    std::memcpy(&f, &u, 4);
  }
  SceneGroundTruth gt;
  gt.n_classes = ncls;
  gt.labels.resize(nv);
  for (auto& l : gt.labels) r.u32(l);
  for (std::uint32_t o = 0; o < nobj; ++o) {
    SceneObject obj;
    std::uint32_t size = 0;
    r.u32(obj.class_id);
    r.u32(size);
    obj.voxels.resize(size);
    for (auto& v : obj.voxels) r.u32(v);
    gt.objects.push_back(std::move(obj));
  }
  try {
    SparseVoxelGrid grid(dims, std::move(coords), std::move(features), c);
    validate_ground_truth(gt, grid.size());
    return Scene{std::move(grid), std::move(gt)};
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(K::kInvalid, std::string("invalid scene content: ") + e.what());
  }
}

}  // namespace scene_io

inline void save_scene(const Scene& scene, const std::string& path) {
  const auto buf = scene_io::encode(scene);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot open for writing: " + path);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw FormatError(FormatError::Kind::kIo, "write failed: " + path);
}

inline Scene load_scene(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::kIo, "cannot open scene file: " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return scene_io::decode(buf);
}

}  // namespace spot
