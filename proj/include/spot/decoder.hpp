#pragma once

// Query-refinement decoder. Each layer runs
//   (1) self-attention over match + noised queries with the two groups isolated,
//   (2) cross-attention against pyramid level (layer mod levels), guided by the
//       previous stage's predicted masks (match) or GT masks (noised),
//   (3) a feedforward block,
// each followed by a residual layer norm. Prediction heads are shared by all
// stages and by both query groups.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spot/denoise.hpp"
#include "spot/error.hpp"
#include "spot/metrics.hpp"
#include "spot/nn.hpp"
#include "spot/optim.hpp"
#include "spot/prediction.hpp"
#include "spot/spotca.hpp"
#include "spot/tensor.hpp"
#include "spot/voxel.hpp"

namespace spot {

struct DecoderConfig {
  std::size_t channels = 192;
  std::size_t heads = 8;
  std::size_t layers = 9;
  std::size_t queries = 100;
  std::size_t levels = 3;
  std::size_t n_classes = 17;
  double rho = 0.08;
  double dropout = 0.0;
  AttentionBackend backend = AttentionBackend::kPrototype;
  bool per_head_temperature = false;
  bool value_projection = true;
  // Decode with softmax class probabilities (true) or raw logits (false).
  bool class_scaling_softmax = true;
  // Below this class-scaled score a voxel is labeled empty.
  double empty_threshold = 0.25;
  double query_init_std = 0.02;

  SpotCAConfig spotca() const {
    SpotCAConfig c;
    c.channels = channels;
    c.heads = heads;
    c.rho = rho;
    c.dropout_p = dropout;
    c.per_head_temperature = per_head_temperature;
    c.value_projection = value_projection;
    return c;
  }

  void validate() const {
    spotca().validate();
    if (layers == 0) throw ConfigError("model.layers must be positive");
    if (queries == 0) throw ConfigError("model.queries must be positive");
    if (levels == 0) throw ConfigError("model.levels must be positive");
    if (n_classes < 2) throw ConfigError("model.n_classes must be at least 2");
  }
};

template <class T>
struct DecoderLayerParams {
  nn::Linear<T> sa_q, sa_k, sa_v, sa_o;
  nn::LayerNorm<T> sa_norm;
  SpotCAParams<T> ca;
  nn::LayerNorm<T> ca_norm;
  nn::Mlp<T> ffn;
  nn::LayerNorm<T> ffn_norm;
};

inline constexpr const char* kClassEmbeddingParam = "dn.class_embed";

// Owns the parameter store; handles below alias its tensors, so the model is
// move-only.
template <class T>
class DecoderModel {
 public:
  DecoderModel(const DecoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    auto eng = rng::engine(seed, "init");
    const std::size_t c = cfg.channels;
    query_embed = store_.add("query_embed", nn::normal_init<T>({cfg.queries, c}, cfg.query_init_std, eng));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "layer" + std::to_string(l);
      DecoderLayerParams<T> lp;
      lp.sa_q = nn::Linear<T>::create(store_, p + ".self_attn.q", c, c, eng);
      lp.sa_k = nn::Linear<T>::create(store_, p + ".self_attn.k", c, c, eng);
      lp.sa_v = nn::Linear<T>::create(store_, p + ".self_attn.v", c, c, eng);
      lp.sa_o = nn::Linear<T>::create(store_, p + ".self_attn.out", c, c, eng);
      lp.sa_norm = nn::LayerNorm<T>::create(store_, p + ".self_attn.norm", c);
      lp.ca = SpotCAParams<T>::create(store_, p + ".cross_attn", cfg.spotca(), eng);
      lp.ca_norm = nn::LayerNorm<T>::create(store_, p + ".cross_attn.out_norm", c);
      lp.ffn = nn::Mlp<T>::create(store_, p + ".ffn", c, 2 * c, c, eng);
      lp.ffn_norm = nn::LayerNorm<T>::create(store_, p + ".ffn.norm", c);
      layers.push_back(std::move(lp));
    }
    head_norm = nn::LayerNorm<T>::create(store_, "head.norm", c);
    class_head = nn::Mlp<T>::create(store_, "head.class", c, c, cfg.n_classes, eng);
    mask_embed = nn::Mlp<T>::create(store_, "head.mask_embed", c, c, c, eng);
    class_table = create_class_embedding_table<T>(store_, kClassEmbeddingParam, cfg.n_classes, c, eng);
  }

  DecoderModel(const DecoderModel&) = delete;
  DecoderModel& operator=(const DecoderModel&) = delete;
  DecoderModel(DecoderModel&&) = default;
  DecoderModel& operator=(DecoderModel&&) = default;

  const DecoderConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  Tensor<T> query_embed;
  std::vector<DecoderLayerParams<T>> layers;
  nn::LayerNorm<T> head_norm;
  nn::Mlp<T> class_head, mask_embed;
  Tensor<T> class_table;  // used only by noised queries

 private:
  DecoderConfig cfg_;
  ParamStore<T> store_;
};

// Per-scene constants shared by every forward pass.
template <class T>
struct SceneContext {
  ScenePyramid pyramid;
  std::vector<Tensor<T>> level_keys;  // per level, Nv_l x C
  Tensor<T> finest_t;                 // C x Nv, for heatmaps
};

template <class T>
SceneContext<T> make_context(const SparseVoxelGrid& grid, std::size_t levels) {
  SceneContext<T> ctx;
  ctx.pyramid = build_pyramid(grid, levels);
  for (const auto& g : ctx.pyramid.levels) ctx.level_keys.push_back(grid_features<T>(g));
  Tape<T> tape(false);
  ctx.finest_t = ops::transpose(tape, ctx.level_keys.back());
  return ctx;
}

// Concatenated queries: rows [0, n_match) are match queries, the rest noised.
template <class T>
struct QuerySet {
  Tensor<T> x;
  std::size_t n_match = 0;
  std::vector<std::vector<std::uint32_t>> guidance;  // per row, finest-level voxel lists
};

template <class T>
struct ForwardOptions {
  bool train = false;
  const DnConfig* dn = nullptr;  // denoising enabled when non-null and enabled
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  AttentionStats* stats = nullptr;
};

inline std::vector<std::uint32_t> map_to_level(std::span<const std::uint32_t> finest, std::span<const std::uint32_t> to_level) {
  std::vector<std::uint32_t> out;
  out.reserve(finest.size());
  for (auto v : finest) out.push_back(to_level[v]);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Voxels with heatmap > 0 for rows [begin, end).
template <class T>
std::vector<std::vector<std::uint32_t>> predicted_masks(const LayerPrediction<T>& pred, std::size_t begin, std::size_t end) {
  const std::size_t nv = pred.mask_heatmaps.cols();
  std::vector<std::vector<std::uint32_t>> out(end - begin);
  for (std::size_t q = begin; q < end; ++q)
    for (std::size_t v = 0; v < nv; ++v)
      if (pred.mask_heatmaps(q, v) > T(0)) out[q - begin].push_back(std::uint32_t(v));
  return out;
}

template <class T>
std::vector<metrics::BinaryMask> binary_masks(const LayerPrediction<T>& pred, std::size_t n_rows) {
  const std::size_t nv = pred.mask_heatmaps.cols();
  std::vector<metrics::BinaryMask> out(n_rows, metrics::BinaryMask(nv, 0));
  for (std::size_t q = 0; q < n_rows; ++q)
    for (std::size_t v = 0; v < nv; ++v) out[q][v] = pred.mask_heatmaps(q, v) > T(0);
  return out;
}

template <class T>
LayerPrediction<T> predict(Tape<T>& tape, const Tensor<T>& x, const SceneContext<T>& ctx, const DecoderModel<T>& model) {
  if (x.cols() != model.config().channels) throw ShapeError("predict: query width does not match model");
  if (ctx.finest_t.rows() != x.cols()) throw ShapeError("predict: grid channels do not match model");
  auto h = model.head_norm(tape, x);
  return {model.class_head(tape, h), ops::matmul(tape, model.mask_embed(tape, h), ctx.finest_t)};
}

template <class T>
QuerySet<T> decoder_layer(Tape<T>& tape, const QuerySet<T>& qs, const SceneContext<T>& ctx, std::size_t layer_index,
                          const DecoderModel<T>& model, const ForwardOptions<T>& opt) {
  const auto& cfg = model.config();
  if (layer_index >= model.layers.size()) throw Error("decoder_layer: layer index out of range");
  const auto& lp = model.layers[layer_index];
  const std::size_t n = qs.x.rows();
  auto key = [&](std::uint64_t slot) { return ops::DropoutKey{opt.seed, opt.step, layer_index * 8 + slot}; };

  // (1) self-attention; match and noised groups cannot see each other.
  std::vector<std::uint8_t> allowed(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) allowed[i * n + j] = (i < qs.n_match) == (j < qs.n_match);
  auto q = lp.sa_q(tape, qs.x), k = lp.sa_k(tape, qs.x), v = lp.sa_v(tape, qs.x);
  auto logits = ops::scale(tape, ops::matmul(tape, q, ops::transpose(tape, k)), T(1.0 / std::sqrt(double(cfg.channels))));
  auto attn = ops::matmul(tape, ops::masked_softmax_lastdim<T>(tape, logits, allowed), v);
  auto x = lp.sa_norm(tape, ops::add(tape, qs.x, ops::dropout(tape, lp.sa_o(tape, attn), cfg.dropout, opt.train, key(0))));

  // (2) cross-attention against one pyramid level.
  const std::size_t level = layer_index % ctx.pyramid.size();
  std::vector<std::vector<std::uint32_t>> guidance(n);
  for (std::size_t i = 0; i < n; ++i) guidance[i] = map_to_level(qs.guidance[i], ctx.pyramid.to_level[level]);
  AttentionOptions<T> ao;
  ao.dropout = key(1);
  ao.stats = opt.stats;
  x = lp.ca_norm(tape, cross_attention(cfg.backend, tape, x, ctx.level_keys[level], lp.ca, guidance, opt.train, ao));

  // (3) feedforward.
  x = lp.ffn_norm(tape, ops::add(tape, x, ops::dropout(tape, lp.ffn(tape, x), cfg.dropout, opt.train, key(2))));
  return {x, qs.n_match, qs.guidance};
}

template <class T>
struct ForwardOutput {
  std::vector<LayerPrediction<T>> preds;  // stage 0 = before the first layer
  std::size_t n_match = 0;
  std::optional<NoisedQueries<T>> dn;
};

inline std::uint64_t dn_noise_seed(std::uint64_t seed, std::uint64_t step) { return rng::derive(seed, "dn-noise", step); }

template <class T>
ForwardOutput<T> forward(Tape<T>& tape, const SceneContext<T>& ctx, const SceneGroundTruth* gt,
                         const DecoderModel<T>& model, const ForwardOptions<T>& opt) {
  // Noised queries exist only in training; inference ignores the denoising config.
  const bool dn_on = opt.train && opt.dn && opt.dn->enabled;
  if (dn_on && !gt) throw Error("forward: denoising requires ground truth");
  const auto& cfg = model.config();
  ForwardOutput<T> out;
  out.n_match = cfg.queries;

  QuerySet<T> qs;
  qs.n_match = cfg.queries;
  qs.x = model.query_embed;
  qs.guidance.assign(cfg.queries, {});
  if (dn_on) {
    auto eng = rng::Engine(dn_noise_seed(opt.seed, opt.step));
    out.dn = make_noised_queries(tape, *gt, model.class_table, *opt.dn, eng);
    qs.x = ops::concat_rows(tape, {qs.x, out.dn->queries});
    for (const auto& g : out.dn->guidance) qs.guidance.push_back(opt.dn->gt_guidance ? g : std::vector<std::uint32_t>{});
  }

  out.preds.push_back(predict(tape, qs.x, ctx, model));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto masks = predicted_masks(out.preds.back(), 0, qs.n_match);
    for (std::size_t i = 0; i < qs.n_match; ++i) qs.guidance[i] = std::move(masks[i]);
    qs = decoder_layer(tape, qs, ctx, l, model, opt);
    out.preds.push_back(predict(tape, qs.x, ctx, model));
  }
  return out;
}

struct VoxelDecision {
  std::uint32_t query = 0;
  std::uint32_t cls = 0;
  double score = 0;
};

// Per voxel, the (query, non-empty class) maximizing class_scale[q][c] *
// mask_prob[q][v]; ties resolve to the first pair in (query, class) order.
inline std::vector<VoxelDecision> semantic_winners(std::span<const double> class_scale, std::span<const double> mask_prob,
                                                   std::size_t nq, std::size_t ncls, std::size_t nv) {
  if (class_scale.size() != nq * ncls || mask_prob.size() != nq * nv) throw ShapeError("semantic_winners: size mismatch");
  std::vector<VoxelDecision> out(nv, {0, kEmptyClass, -std::numeric_limits<double>::infinity()});
  for (std::size_t q = 0; q < nq; ++q) {
    std::size_t best_c = 1;
    for (std::size_t c = 2; c < ncls; ++c)
      if (class_scale[q * ncls + c] > class_scale[q * ncls + best_c]) best_c = c;
    const double cs = class_scale[q * ncls + best_c];
    for (std::size_t v = 0; v < nv; ++v) {
      const double s = cs * mask_prob[q * nv + v];
      if (s > out[v].score) out[v] = {std::uint32_t(q), std::uint32_t(best_c), s};
    }
  }
  return out;
}

template <class T>
std::vector<std::uint32_t> semantic_argmax(const LayerPrediction<T>& pred, std::size_t n_match, const DecoderConfig& cfg) {
  const std::size_t ncls = pred.class_logits.cols(), nv = pred.mask_heatmaps.cols();
  if (n_match > pred.class_logits.rows()) throw ShapeError("semantic_argmax: n_match exceeds prediction rows");
  std::vector<double> scale(n_match * ncls), prob(n_match * nv);
  for (std::size_t q = 0; q < n_match; ++q) {
    if (cfg.class_scaling_softmax) {
      T mx = pred.class_logits(q, 0);
      for (std::size_t c = 1; c < ncls; ++c) mx = std::max(mx, pred.class_logits(q, c));
      double se = 0;
      for (std::size_t c = 0; c < ncls; ++c) se += std::exp(double(pred.class_logits(q, c) - mx));
      for (std::size_t c = 0; c < ncls; ++c) scale[q * ncls + c] = std::exp(double(pred.class_logits(q, c) - mx)) / se;
    } else {
      for (std::size_t c = 0; c < ncls; ++c) scale[q * ncls + c] = double(pred.class_logits(q, c));
    }
    for (std::size_t v = 0; v < nv; ++v) prob[q * nv + v] = double(ops::sigmoid_value(pred.mask_heatmaps(q, v)));
  }
  const auto win = semantic_winners(scale, prob, n_match, ncls, nv);
  std::vector<std::uint32_t> labels(nv);
  for (std::size_t v = 0; v < nv; ++v) labels[v] = win[v].score >= cfg.empty_threshold ? win[v].cls : kEmptyClass;
  return labels;
}

// Labels on the dense grid upsampled by `factor`: each query's heatmap is
// densified (empty voxels at a large negative value), trilinearly upsampled,
// then decoded per site.
template <class T>
DenseVolume<std::uint32_t> semantic_argmax_upsampled(const LayerPrediction<T>& pred, std::size_t n_match,
                                                     const SparseVoxelGrid& grid, std::uint32_t factor,
                                                     const DecoderConfig& cfg) {
  const std::size_t ncls = pred.class_logits.cols(), nv = pred.mask_heatmaps.cols();
  std::vector<double> scale(n_match * ncls), prob;
  std::size_t n_sites = 0;
  Dims od{};
  for (std::size_t q = 0; q < n_match; ++q) {
    std::vector<double> row(nv);
    for (std::size_t v = 0; v < nv; ++v) row[v] = double(pred.mask_heatmaps(q, v));
    auto up = upsample_mask(densify<double>(grid, row), factor);
    od = up.dims;
    n_sites = up.values.size();
    for (double h : up.values) prob.push_back(ops::sigmoid_value(h));
    double mx = -std::numeric_limits<double>::infinity(), se = 0;
    for (std::size_t c = 0; c < ncls; ++c) mx = std::max(mx, double(pred.class_logits(q, c)));
    for (std::size_t c = 0; c < ncls; ++c) se += std::exp(double(pred.class_logits(q, c)) - mx);
    for (std::size_t c = 0; c < ncls; ++c)
      scale[q * ncls + c] = cfg.class_scaling_softmax ? std::exp(double(pred.class_logits(q, c)) - mx) / se
                                                      : double(pred.class_logits(q, c));
  }
  const auto win = semantic_winners(scale, prob, n_match, ncls, n_sites);
  DenseVolume<std::uint32_t> out{od, std::vector<std::uint32_t>(n_sites)};
  for (std::size_t s = 0; s < n_sites; ++s) out.values[s] = win[s].score >= cfg.empty_threshold ? win[s].cls : kEmptyClass;
  return out;
}

template <class T>
struct EvalResult {
  std::vector<std::uint32_t> labels;
  metrics::ConfusionAccumulator confusion{2};
  std::vector<double> lm_iou;  // index l-1 holds LM-IoU at layer l
  ForwardOutput<T> output;
};

// Inference pass (no tape, no noised queries) plus metrics against `gt`.
template <class T>
EvalResult<T> evaluate(const SceneContext<T>& ctx, const SceneGroundTruth& gt, const DecoderModel<T>& model,
                       AttentionStats* stats = nullptr) {
  Tape<T> tape(false);
  ForwardOptions<T> opt;
  opt.stats = stats;
  EvalResult<T> r;
  r.output = forward(tape, ctx, &gt, model, opt);
  r.labels = semantic_argmax(r.output.preds.back(), r.output.n_match, model.config());
  r.confusion = metrics::ConfusionAccumulator(gt.n_classes);
  r.confusion.add(r.labels, gt.labels);
  std::vector<std::vector<metrics::BinaryMask>> masks;
  for (const auto& p : r.output.preds) masks.push_back(binary_masks(p, r.output.n_match));
  for (std::size_t l = 1; l < masks.size(); ++l) r.lm_iou.push_back(metrics::lm_iou(masks, l));
  return r;
}

}  // namespace spot
