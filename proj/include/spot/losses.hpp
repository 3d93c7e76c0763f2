#pragma once

// Set-prediction losses: Hungarian-matched loss for match queries and a
// fixed-assignment loss for noised queries. Both combine class cross-entropy
// with BCE and Dice mask terms evaluated on sampled voxels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "spot/error.hpp"
#include "spot/prediction.hpp"
#include "spot/rng.hpp"
#include "spot/tensor.hpp"
#include "spot/voxel.hpp"

namespace spot {

struct LossWeights {
  double w_ce = 2.0;
  double w_bce = 5.0;
  double w_dice = 5.0;
  double no_object_weight = 0.1;
  std::size_t n_sample_points = 2048;

  void validate() const {
    if (w_ce < 0 || w_bce < 0 || w_dice < 0) throw ConfigError("loss weights must be nonnegative");
    if (w_ce == 0 && w_bce == 0 && w_dice == 0) throw ConfigError("at least one loss weight must be positive");
    if (!(no_object_weight > 0 && no_object_weight <= 1)) throw ConfigError("no_object_weight must lie in (0, 1]");
    if (n_sample_points == 0) throw ConfigError("n_sample_points must be positive");
  }
};

// (query, object) pairs ordered by object index.
struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;

  friend bool operator==(const Assignment&, const Assignment&) = default;
};

namespace loss {

template <class T>
T dice_loss(std::span<const T> logits, std::span<const T> target) {
  if (logits.size() != target.size()) throw ShapeError("dice_loss: length mismatch");
  Tape<T> tape(false);
  Tensor<T> x({logits.size()}, std::vector<T>(logits.begin(), logits.end()));
  return ops::dice_with_logits(tape, x, target).item();
}

// Mean BCE over the sampled indices.
template <class T>
T mask_bce(std::span<const T> logits, std::span<const T> target, std::span<const std::size_t> sampled) {
  if (logits.size() != target.size()) throw ShapeError("mask_bce: length mismatch");
  if (sampled.empty()) throw Error("mask_bce: empty sample set");
  T acc = 0;
  for (auto i : sampled) {
    if (i >= logits.size()) throw ShapeError("mask_bce: sample index out of range");
    acc += ops::bce_with_logits_value(logits[i], target[i]);
  }
  return acc / T(sampled.size());
}

// Uniform sample of min(n, nv) distinct voxel indices, ascending.
inline std::vector<std::size_t> sample_points(std::size_t nv, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(nv);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n >= nv) return idx;
  rng::Engine eng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, nv - 1);
    std::swap(idx[i], idx[u(eng)]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::uint64_t layer_sample_seed(std::uint64_t seed, std::size_t layer) {
  return rng::derive(seed, "sampling", layer);
}

}  // namespace loss

// Exact minimum-cost assignment of every object (column) to a distinct query
// (row). Shortest augmenting paths with potentials, O(Nobj^2 * Nq).
inline Assignment hungarian_match(std::span<const double> cost, std::size_t n_queries, std::size_t n_objects) {
  if (cost.size() != n_queries * n_objects) throw ShapeError("hungarian_match: cost matrix size mismatch");
  for (double c : cost)
    if (!std::isfinite(c)) throw Error("hungarian_match: non-finite cost");
  if (n_objects > n_queries) throw Error("hungarian_match: more objects than queries");
  Assignment out;
  if (n_objects == 0) return out;
  const std::size_t n = n_objects, m = n_queries;
  const double inf = std::numeric_limits<double>::infinity();
  auto a = [&](std::size_t obj1, std::size_t q1) { return cost[(q1 - 1) * n_objects + (obj1 - 1)]; };
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) out.pairs.emplace_back(j - 1, p[j] - 1);
  std::sort(out.pairs.begin(), out.pairs.end(), [](const auto& x, const auto& y) { return x.second < y.second; });
  return out;
}

inline double assignment_cost(std::span<const double> cost, std::size_t n_objects, const Assignment& a) {
  double s = 0;
  for (auto [q, o] : a.pairs) s += cost[q * n_objects + o];
  return s;
}

// w_ce * (-log p_class) + w_bce * BCE + w_dice * Dice on pre-sampled mask values.
template <class T>
double match_cost(std::span<const T> class_logits, std::span<const T> sampled_heat, std::span<const T> sampled_target,
                  std::uint32_t class_id, const LossWeights& w) {
  if (class_id >= class_logits.size()) throw ShapeError("match_cost: class id out of range");
  if (sampled_heat.size() != sampled_target.size()) throw ShapeError("match_cost: mask length mismatch");
  double cost = 0;
  if (w.w_ce > 0) {
    const T mx = *std::max_element(class_logits.begin(), class_logits.end());
    double se = 0;
    for (T x : class_logits) se += std::exp(double(x - mx));
    cost += w.w_ce * (double(mx) + std::log(se) - double(class_logits[class_id]));
  }
  if (w.w_bce > 0 && !sampled_heat.empty()) {
    double acc = 0;
    for (std::size_t i = 0; i < sampled_heat.size(); ++i)
      acc += double(ops::bce_with_logits_value(sampled_heat[i], sampled_target[i]));
    cost += w.w_bce * acc / double(sampled_heat.size());
  }
  if (w.w_dice > 0) cost += w.w_dice * double(loss::dice_loss(sampled_heat, sampled_target));
  return cost;
}

namespace loss {

namespace detail {

template <class T>
std::vector<T> object_target(const SceneObject& obj, std::span<const std::size_t> samples, std::size_t nv) {
  std::vector<std::uint8_t> dense(nv, 0);
  for (auto v : obj.voxels) dense[v] = 1;
  std::vector<T> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out[i] = T(dense[samples[i]]);
  return out;
}

// Class + mask loss of one layer for the rows listed in `pairs` (row, object).
// `class_rows`/`class_targets`/`class_weights` cover every row in the CE term.
template <class T>
Tensor<T> layer_loss(Tape<T>& tape, const LayerPrediction<T>& pred, std::size_t row_begin, std::size_t row_end,
                     std::span<const std::size_t> class_targets, std::span<const T> class_weights,
                     std::span<const std::pair<std::size_t, std::size_t>> pairs, const SceneGroundTruth& gt,
                     std::span<const std::size_t> samples, const LossWeights& w) {
  std::vector<Tensor<T>> terms;
  if (w.w_ce > 0 && row_end > row_begin) {
    auto logits = ops::slice_rows(tape, pred.class_logits, row_begin, row_end);
    terms.push_back(ops::scale(tape, ops::cross_entropy(tape, logits, class_targets, class_weights), T(w.w_ce)));
  }
  if ((w.w_bce > 0 || w.w_dice > 0) && !pairs.empty()) {
    const std::size_t nv = pred.mask_heatmaps.cols();
    std::vector<std::size_t> rows;
    for (auto [r, _] : pairs) rows.push_back(r);
    auto sampled = ops::gather_cols(tape, ops::gather_rows(tape, pred.mask_heatmaps, rows), samples);
    std::vector<T> targets;
    for (auto [_, o] : pairs) {
      auto t = object_target<T>(gt.objects[o], samples, nv);
      targets.insert(targets.end(), t.begin(), t.end());
    }
    if (w.w_bce > 0) terms.push_back(ops::scale(tape, ops::bce_with_logits_mean<T>(tape, sampled, targets), T(w.w_bce)));
    if (w.w_dice > 0) {
      std::vector<Tensor<T>> dice;
      const std::size_t n = samples.size();
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        auto row = ops::slice_rows(tape, sampled, i, i + 1);
        dice.push_back(ops::dice_with_logits<T>(tape, row, std::span<const T>(targets).subspan(i * n, n)));
      }
      terms.push_back(ops::scale(tape, ops::add_scalars(tape, dice), T(w.w_dice / double(pairs.size()))));
    }
  }
  return ops::add_scalars(tape, terms);
}

}  // namespace detail

template <class T>
struct MatchLoss {
  Tensor<T> value;
  std::vector<Assignment> assignments;  // one per layer
};

// Hungarian cost matrix (queries x objects) for the first `n_match` rows of a prediction.
template <class T>
std::vector<double> cost_matrix(const LayerPrediction<T>& pred, std::size_t n_match, const SceneGroundTruth& gt,
                                std::span<const std::size_t> samples, const LossWeights& w) {
  const std::size_t nobj = gt.objects.size(), ncls = pred.class_logits.cols(), nv = pred.mask_heatmaps.cols();
  std::vector<std::vector<T>> targets;
  for (const auto& o : gt.objects) targets.push_back(detail::object_target<T>(o, samples, nv));
  std::vector<double> cost(n_match * nobj);
  std::vector<T> heat(samples.size());
  for (std::size_t q = 0; q < n_match; ++q) {
    std::span<const T> logits = pred.class_logits.data().subspan(q * ncls, ncls);
    for (std::size_t i = 0; i < samples.size(); ++i) heat[i] = pred.mask_heatmaps(q, samples[i]);
    for (std::size_t o = 0; o < nobj; ++o)
      cost[q * nobj + o] = match_cost<T>(logits, heat, targets[o], gt.objects[o].class_id, w);
  }
  return cost;
}

// Sum over layers of the matched loss on match-query rows [0, n_match).
// Unmatched queries target the no-object class with weight no_object_weight.
// `fixed` replaces the Hungarian step (used to freeze matches).
template <class T>
MatchLoss<T> loss_match(Tape<T>& tape, const std::vector<LayerPrediction<T>>& preds, std::size_t n_match,
                        const SceneGroundTruth& gt, const LossWeights& w, std::uint64_t sample_seed,
                        const std::vector<Assignment>* fixed = nullptr) {
  MatchLoss<T> out;
  std::vector<Tensor<T>> layers;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    const auto& pred = preds[l];
    const std::size_t nv = pred.mask_heatmaps.cols();
    const auto samples = sample_points(nv, w.n_sample_points, layer_sample_seed(sample_seed, l));
    Assignment a;
    if (fixed) {
      a = fixed->at(l);
    } else {
      const auto cost = cost_matrix(pred, n_match, gt, samples, w);
      a = hungarian_match(cost, n_match, gt.objects.size());
    }
    std::vector<std::size_t> targets(n_match, kEmptyClass);
    std::vector<T> weights(n_match, T(w.no_object_weight));
    for (auto [q, o] : a.pairs) {
      targets[q] = gt.objects[o].class_id;
      weights[q] = T(1);
    }
    layers.push_back(detail::layer_loss<T>(tape, pred, 0, n_match, targets, weights, a.pairs, gt, samples, w));
    out.assignments.push_back(std::move(a));
  }
  out.value = ops::add_scalars(tape, layers);
  return out;
}

// Sum over layers of the loss on noised rows [n_match, n_match + Nd) under the
// positional assignment (noised query index -> object index).
template <class T>
Tensor<T> loss_dn(Tape<T>& tape, const std::vector<LayerPrediction<T>>& preds, std::size_t n_match,
                  std::span<const std::pair<std::size_t, std::size_t>> assignment, const SceneGroundTruth& gt,
                  const LossWeights& w, std::uint64_t sample_seed) {
  if (assignment.empty()) return Tensor<T>::scalar(T(0));
  const std::size_t nd = assignment.size();
  std::vector<Tensor<T>> layers;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    const auto& pred = preds[l];
    if (pred.class_logits.rows() < n_match + nd) throw ShapeError("loss_dn: prediction lacks noised rows");
    const auto samples = sample_points(pred.mask_heatmaps.cols(), w.n_sample_points, layer_sample_seed(sample_seed, l));
    std::vector<std::size_t> targets(nd);
    std::vector<T> weights(nd, T(1));
    std::vector<std::pair<std::size_t, std::size_t>> rows;
    for (auto [q, o] : assignment) {
      if (q >= nd || o >= gt.objects.size()) throw Error("loss_dn: assignment out of range");
      targets[q] = gt.objects[o].class_id;
      rows.emplace_back(n_match + q, o);
    }
    layers.push_back(detail::layer_loss<T>(tape, pred, n_match, n_match + nd, targets, weights, rows, gt, samples, w));
  }
  return ops::add_scalars(tape, layers);
}

}  // namespace loss

}  // namespace spot
