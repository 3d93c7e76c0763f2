#pragma once

// Noised queries for denoising training. Each ground-truth object yields
// `groups` queries, each built from the embedding of its (possibly flipped)
// class plus Gaussian feature noise; all are guided by the object's true mask
// and supervised to reconstruct the true class and mask.

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "spot/error.hpp"
#include "spot/nn.hpp"
#include "spot/rng.hpp"
#include "spot/tensor.hpp"
#include "spot/voxel.hpp"

namespace spot {

struct DnConfig {
  bool enabled = true;
  double label_flip_prob = 0.2;
  double noise_std = 0.1;
  std::size_t groups = 3;
  // Noised queries select prototypes inside their object's mask.
  bool gt_guidance = true;

  void validate() const {
    if (!(label_flip_prob >= 0.0 && label_flip_prob <= 1.0)) throw ConfigError("dn.label_flip_prob must lie in [0, 1]");
    if (!(noise_std >= 0.0)) throw ConfigError("dn.noise_std must be nonnegative");
    if (groups == 0) throw ConfigError("dn.groups must be positive");
  }
};

struct DnTarget {
  std::uint32_t gt_class = 0;      // reconstruction target, never flipped
  std::uint32_t object = 0;        // index into SceneGroundTruth::objects
  std::uint32_t noised_class = 0;  // class whose embedding seeded the query

  friend bool operator==(const DnTarget&, const DnTarget&) = default;
};

template <class T>
struct NoisedQueries {
  Tensor<T> queries;  // Nd x C
  std::vector<DnTarget> targets;
  std::vector<std::vector<std::uint32_t>> guidance;  // finest-level voxel lists
};

// Per-class learnable embeddings e_gt.
template <class T>
Tensor<T>& create_class_embedding_table(ParamStore<T>& store, const std::string& name, std::size_t n_classes,
                                        std::size_t channels, rng::Engine& eng) {
  return store.add(name, nn::normal_init<T>({n_classes, channels}, 1.0, eng));
}

template <class T>
NoisedQueries<T> make_noised_queries(Tape<T>& tape, const SceneGroundTruth& gt, const Tensor<T>& table,
                                     const DnConfig& cfg, rng::Engine& eng) {
  if (!cfg.enabled) throw Error("make_noised_queries: denoising disabled");
  if (gt.objects.empty()) throw Error("make_noised_queries: scene has no objects");
  if (table.rows() != gt.n_classes) throw ShapeError("class embedding table must have one row per class");
  const std::size_t nobj = gt.objects.size(), nd = cfg.groups * nobj, c = table.cols();
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  NoisedQueries<T> out;
  std::vector<std::size_t> rows(nd);
  for (std::size_t g = 0; g < cfg.groups; ++g)
    for (std::size_t o = 0; o < nobj; ++o) {
      const std::uint32_t cls = gt.objects[o].class_id;
      std::uint32_t noised = cls;
      if (unif(eng) < cfg.label_flip_prob) {
        // Uniform over the other classes.
        std::uniform_int_distribution<std::uint32_t> pick(0, gt.n_classes - 2);
        noised = pick(eng);
        if (noised >= cls) ++noised;
      }
      rows[g * nobj + o] = noised;
      out.targets.push_back({cls, std::uint32_t(o), noised});
      out.guidance.push_back(gt.objects[o].voxels);
    }
  std::vector<T> delta(nd * c);
  for (auto& d : delta) d = T(cfg.noise_std * normal(eng));
  out.queries = ops::add(tape, ops::gather_rows(tape, table, rows), Tensor<T>({nd, c}, std::move(delta)));
  return out;
}

// Noised query i is supervised by object i mod |objects|.
inline std::vector<std::pair<std::size_t, std::size_t>> dn_assignment(const std::vector<DnTarget>& targets) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) out.emplace_back(i, targets[i].object);
  return out;
}

}  // namespace spot
