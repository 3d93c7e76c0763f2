#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "spot/decoder.hpp"
#include "spot/denoise.hpp"
#include "spot/losses.hpp"
#include "spot/optim.hpp"

namespace spot {

enum class Optimizer { kAdamW, kSgd };

inline std::string_view optimizer_name(Optimizer o) { return o == Optimizer::kAdamW ? "adamw" : "sgd"; }

inline Optimizer parse_optimizer(std::string_view s) {
  if (s == "adamw") return Optimizer::kAdamW;
  if (s == "sgd") return Optimizer::kSgd;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected adamw or sgd)");
}

struct TrainConfig {
  std::size_t steps = 1000;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::kAdamW;
  // Stop once training mIoU reaches this value (checked every eval_every steps); 0 disables.
  double target_miou = 0.0;
  std::size_t eval_every = 50;

  void validate() const {
    if (steps == 0) throw ConfigError("train.steps must be positive");
    if (!(lr > 0)) throw ConfigError("train.lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be nonnegative");
    if (eval_every == 0) throw ConfigError("train.eval_every must be positive");
    if (!(target_miou >= 0 && target_miou <= 1)) throw ConfigError("train.target_miou must lie in [0, 1]");
  }
};

struct StepLog {
  std::size_t step = 0;
  double match_loss = 0;
  double dn_loss = 0;
  double total = 0;
};

struct TrainResult {
  std::vector<StepLog> log;
  std::size_t steps_run = 0;
  double final_miou = 0;
};

// One optimisation step on a single scene. Returns the step's losses.
template <class T>
StepLog train_step(const SceneContext<T>& ctx, const SceneGroundTruth& gt, DecoderModel<T>& model, const DnConfig& dn,
                   const LossWeights& w, const TrainConfig& tc, std::size_t step, optim::AdamW<T>* adam) {
  Tape<T> tape(true);
  ForwardOptions<T> fo;
  fo.train = true;
  fo.dn = &dn;
  fo.seed = rng::derive(tc.seed, "dropout");
  fo.step = step;
  auto out = forward(tape, ctx, &gt, model, fo);
  const auto sample_seed = rng::derive(tc.seed, "sampling", step);
  auto lm = loss::loss_match(tape, out.preds, out.n_match, gt, w, sample_seed);
  Tensor<T> ld = Tensor<T>::scalar(T(0));
  if (out.dn) {
    const auto a = dn_assignment(out.dn->targets);
    ld = loss::loss_dn<T>(tape, out.preds, out.n_match, a, gt, w, sample_seed);
  }
  auto total = ops::add_scalars(tape, {lm.value, ld});
  model.params().zero_grad();
  tape.backward(total);
  if (tc.optimizer == Optimizer::kAdamW)
    adam->step(model.params(), true);
  else
    optim::sgd_step(model.params(), tc.lr, true);
  return {step, double(lm.value.item()), double(ld.item()), double(total.item())};
}

template <class T>
TrainResult train(const Scene& scene, DecoderModel<T>& model, const DnConfig& dn, const LossWeights& w,
                  const TrainConfig& tc) {
  tc.validate();
  dn.validate();
  w.validate();
  const auto ctx = make_context<T>(scene.grid, model.config().levels);
  optim::AdamWConfig ac;
  ac.lr = tc.lr;
  ac.weight_decay = tc.weight_decay;
  optim::AdamW<T> adam(ac);
  TrainResult r;
  for (std::size_t s = 0; s < tc.steps; ++s) {
    r.log.push_back(train_step(ctx, scene.gt, model, dn, w, tc, s, &adam));
    r.steps_run = s + 1;
    if (tc.target_miou > 0 && (s + 1) % tc.eval_every == 0) {
      r.final_miou = evaluate(ctx, scene.gt, model).confusion.miou();
      if (r.final_miou >= tc.target_miou) return r;
    }
  }
  r.final_miou = evaluate(ctx, scene.gt, model).confusion.miou();
  return r;
}

namespace report {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline void write_file(const std::string& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot write " + path);
  os << body;
  if (!os) throw FormatError(FormatError::Kind::kIo, "write failed: " + path);
}

inline std::string loss_csv(const std::vector<StepLog>& log) {
  std::string s = "step,match_loss,dn_loss,total\n";
  for (const auto& e : log)
    s += std::to_string(e.step) + "," + fmt(e.match_loss) + "," + fmt(e.dn_loss) + "," + fmt(e.total) + "\n";
  return s;
}

// One row, columns layer1..layerL.
inline std::string lm_iou_csv(const std::vector<double>& lm) {
  std::string s;
  for (std::size_t l = 0; l < lm.size(); ++l) s += (l ? ",layer" : "layer") + std::to_string(l + 1);
  s += "\n";
  for (std::size_t l = 0; l < lm.size(); ++l) s += (l ? "," : "") + fmt(lm[l]);
  return s + "\n";
}

inline std::string metrics_csv(const metrics::ConfusionAccumulator& acc) {
  std::string s = "class,iou\n";
  const auto pc = acc.per_class_iou();
  for (std::size_t c = 0; c < pc.size(); ++c) s += std::to_string(c) + "," + (std::isnan(pc[c]) ? "nan" : fmt(pc[c])) + "\n";
  s += "miou," + fmt(acc.miou()) + "\n";
  s += "geometric_iou," + fmt(acc.geometric_iou()) + "\n";
  return s;
}

inline std::string labels_csv(const SparseVoxelGrid& grid, std::span<const std::uint32_t> labels) {
  if (labels.size() != grid.size()) throw ShapeError("labels_csv: one label per active voxel required");
  std::string s = "x,y,z,label\n";
  for (std::size_t v = 0; v < grid.size(); ++v) {
    const auto& c = grid.coords()[v];
    s += std::to_string(c.x) + "," + std::to_string(c.y) + "," + std::to_string(c.z) + "," + std::to_string(labels[v]) + "\n";
  }
  return s;
}

// Label block in the scene file layout: little-endian u32 per active voxel.
inline std::vector<char> labels_block(std::span<const std::uint32_t> labels) {
  std::vector<char> out;
  out.reserve(labels.size() * 4);
  for (auto l : labels)
    for (int b = 0; b < 4; ++b) out.push_back(char((l >> (8 * b)) & 0xff));
  return out;
}

}  // namespace report

}  // namespace spot
