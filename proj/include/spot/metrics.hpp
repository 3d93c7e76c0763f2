#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "spot/error.hpp"
#include "spot/voxel.hpp"

namespace spot::metrics {

using BinaryMask = std::vector<std::uint8_t>;

// |a & b| / |a | b|; 1 when both are empty.
inline double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw ShapeError("iou: masks over different universes");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]);
    uni += (a[i] || b[i]);
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

// Per-class voxel counts. Additive across scenes.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(std::size_t n_classes) : tp_(n_classes), fp_(n_classes), fn_(n_classes) {}

  std::size_t n_classes() const { return tp_.size(); }

  void add(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> gt) {
    if (pred.size() != gt.size()) throw ShapeError("confusion: label lists differ in length");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] >= n_classes() || gt[i] >= n_classes()) throw Error("confusion: label out of range");
      if (pred[i] == gt[i]) {
        ++tp_[gt[i]];
      } else {
        ++fp_[pred[i]];
        ++fn_[gt[i]];
      }
      const bool po = pred[i] != kEmptyClass, go = gt[i] != kEmptyClass;
      geo_tp_ += po && go;
      geo_fp_ += po && !go;
      geo_fn_ += !po && go;
    }
  }

  void merge(const ConfusionAccumulator& o) {
    if (o.n_classes() != n_classes()) throw Error("confusion: class count mismatch");
    for (std::size_t c = 0; c < n_classes(); ++c) {
      tp_[c] += o.tp_[c];
      fp_[c] += o.fp_[c];
      fn_[c] += o.fn_[c];
    }
    geo_tp_ += o.geo_tp_;
    geo_fp_ += o.geo_fp_;
    geo_fn_ += o.geo_fn_;
  }

  std::uint64_t tp(std::size_t c) const { return tp_[c]; }
  std::uint64_t fp(std::size_t c) const { return fp_[c]; }
  std::uint64_t fn(std::size_t c) const { return fn_[c]; }

  // NaN for a class absent from both prediction and ground truth.
  std::vector<double> per_class_iou() const {
    std::vector<double> out(n_classes());
    for (std::size_t c = 0; c < n_classes(); ++c) {
      const auto den = tp_[c] + fp_[c] + fn_[c];
      out[c] = den == 0 ? std::numeric_limits<double>::quiet_NaN() : double(tp_[c]) / double(den);
    }
    return out;
  }

  // Mean over non-empty classes occurring in prediction or ground truth.
  double miou() const {
    const auto pc = per_class_iou();
    double s = 0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < pc.size(); ++c) {
      if (c == kEmptyClass || std::isnan(pc[c])) continue;
      s += pc[c];
      ++n;
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : s / double(n);
  }

  // Occupied-vs-empty IoU.
  double geometric_iou() const {
    const auto den = geo_tp_ + geo_fp_ + geo_fn_;
    return den == 0 ? 1.0 : double(geo_tp_) / double(den);
  }

  friend bool operator==(const ConfusionAccumulator&, const ConfusionAccumulator&) = default;

 private:
  std::vector<std::uint64_t> tp_, fp_, fn_;
  std::uint64_t geo_tp_ = 0, geo_fp_ = 0, geo_fn_ = 0;
};

struct MiouResult {
  std::vector<double> per_class;
  double miou = 0;
};

inline MiouResult miou(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> gt, std::size_t n_classes) {
  ConfusionAccumulator acc(n_classes);
  acc.add(pred, gt);
  return {acc.per_class_iou(), acc.miou()};
}

// layer_masks[l][q] is query q's binary mask after layer l (index 0 = before
// the first layer). Mean over queries of IoU between layers l-1 and l.
inline double lm_iou(const std::vector<std::vector<BinaryMask>>& layer_masks, std::size_t l) {
  if (l == 0) throw Error("lm_iou: layer index must be at least 1");
  if (l >= layer_masks.size()) throw Error("lm_iou: layer index out of range");
  const auto& prev = layer_masks[l - 1];
  const auto& cur = layer_masks[l];
  if (prev.size() != cur.size()) throw Error("lm_iou: query count differs between layers");
  if (cur.empty()) throw Error("lm_iou: no queries");
  double s = 0;
  for (std::size_t q = 0; q < cur.size(); ++q) s += iou(prev[q], cur[q]);
  return s / double(cur.size());
}

}  // namespace spot::metrics
