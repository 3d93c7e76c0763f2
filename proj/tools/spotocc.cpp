#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spot/bench.hpp"
#include "spot/config.hpp"
#include "spot/decoder.hpp"
#include "spot/train.hpp"
#include "spot/voxel.hpp"

namespace fs = std::filesystem;
using namespace spot;

namespace {

struct Flags {
  std::string config, out, backend, scene, ckpt;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  std::uint32_t upsample = 0;
};

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : config::load(f.config);
  if (f.seed) {
    c.seed = *f.seed;
    c.bench.seed = *f.seed;
  }
  if (f.precision) c.precision = c.bench.precision = *f.precision;
  if (!f.backend.empty()) c.model.backend = parse_backend(f.backend);
  if (!f.out.empty()) c.out_dir = f.out;
  c.validate();
  fs::create_directories(c.out_dir);
  report::write_file((fs::path(c.out_dir) / "resolved_config.json").string(), config::dump(c));
  return c;
}

std::string out_path(const RunConfig& c, const std::string& name) { return (fs::path(c.out_dir) / name).string(); }

Scene obtain_scene(const RunConfig& c, const std::string& override_path) {
  const std::string& p = override_path.empty() ? c.data.scene_path : override_path;
  Scene s = p.empty() ? generate_scene(c.scene_spec()) : load_scene(p);
  if (s.grid.channels() != c.model.channels)
    throw FormatError(FormatError::Kind::kInvalid, "scene has " + std::to_string(s.grid.channels()) +
                                                       " feature channels but model.channels is " +
                                                       std::to_string(c.model.channels));
  if (s.gt.n_classes != c.model.n_classes)
    throw FormatError(FormatError::Kind::kInvalid, "scene has " + std::to_string(s.gt.n_classes) +
                                                       " classes but model.n_classes is " +
                                                       std::to_string(c.model.n_classes));
  return s;
}

template <class T>
void write_eval(const RunConfig& c, const Scene& scene, const EvalResult<T>& ev, const std::string& prefix) {
  report::write_file(out_path(c, prefix + "metrics.csv"), report::metrics_csv(ev.confusion));
  report::write_file(out_path(c, prefix + "lm_iou.csv"), report::lm_iou_csv(ev.lm_iou));
  report::write_file(out_path(c, prefix + "predictions.csv"), report::labels_csv(scene.grid, ev.labels));
  const auto block = report::labels_block(ev.labels);
  report::write_file(out_path(c, prefix + "labels.bin"), std::string(block.begin(), block.end()));
}

int cmd_scene_gen(const Flags& f) {
  const auto c = resolve(f);
  const Scene s = generate_scene(c.scene_spec());
  save_scene(s, out_path(c, "scene.bin"));
  report::write_file(out_path(c, "scene_labels.csv"), report::labels_csv(s.grid, s.gt.labels));
  std::cout << "scene: " << s.grid.size() << " active voxels, " << s.gt.objects.size() << " objects -> "
            << out_path(c, "scene.bin") << "\n";
  return 0;
}

template <class T>
int cmd_infer(const Flags& f) {
  const auto c = resolve(f);
  const Scene scene = obtain_scene(c, f.scene);
  DecoderModel<T> model(c.model, c.model_seed());
  if (!f.ckpt.empty()) {
    if (!fs::exists(f.ckpt)) throw FormatError(FormatError::Kind::kIo, "checkpoint not found: " + f.ckpt);
    ckpt::load(model.params(), f.ckpt);
  }
  const auto ctx = make_context<T>(scene.grid, c.model.levels);
  const auto ev = evaluate(ctx, scene.gt, model);
  write_eval(c, scene, ev, "");
  if (f.upsample) {
    const auto up = semantic_argmax_upsampled(ev.output.preds.back(), ev.output.n_match, scene.grid, f.upsample, c.model);
    std::string s = "x,y,z,label\n";
    for (std::uint32_t z = 0; z < up.dims.z; ++z)
      for (std::uint32_t y = 0; y < up.dims.y; ++y)
        for (std::uint32_t x = 0; x < up.dims.x; ++x) {
          const auto l = up.values[linear_index({x, y, z}, up.dims)];
          if (l != kEmptyClass) s += std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z) + "," + std::to_string(l) + "\n";
        }
    report::write_file(out_path(c, "predictions_upsampled.csv"), s);
  }
  std::cout << "mIoU " << ev.confusion.miou() << ", IoU " << ev.confusion.geometric_iou() << "\n";
  return 0;
}

template <class T>
int cmd_train_tiny(const Flags& f) {
  const auto c = resolve(f);
  const Scene scene = obtain_scene(c, f.scene);
  DecoderModel<T> model(c.model, c.model_seed());
  const auto r = train(scene, model, c.dn, c.loss, c.train_config());
  ckpt::save(model.params(), out_path(c, "checkpoint.bin"));
  report::write_file(out_path(c, "loss.csv"), report::loss_csv(r.log));
  const auto ctx = make_context<T>(scene.grid, c.model.levels);
  write_eval(c, scene, evaluate(ctx, scene.gt, model), "");
  std::cout << "trained " << r.steps_run << " steps, final loss " << r.log.back().total << ", mIoU " << r.final_miou
            << "\n";
  return 0;
}

int cmd_bench(const Flags& f) {
  const auto c = resolve(f);
  auto bc = c.bench;
  if (!f.backend.empty()) bc.backends = {parse_backend(f.backend)};
  const auto recs = bench::run_bench(bc);
  bench::emit_report(recs, out_path(c, "bench"));
  std::cout << "bench: " << recs.size() << " cells -> " << out_path(c, "bench.csv") << "\n";
  return 0;
}

struct AblateRow {
  std::string name;
  double miou = 0, median_us = 0;
};

template <class T>
AblateRow ablate_run(const RunConfig& base, const Scene& scene, const std::string& name, AttentionBackend backend,
                     const DnConfig& dn, double rho) {
  RunConfig c = base;
  c.model.backend = backend;
  c.model.rho = rho;
  DecoderModel<T> model(c.model, c.model_seed());
  train(scene, model, dn, c.loss, c.train_config());
  const auto ctx = make_context<T>(scene.grid, c.model.levels);
  const double miou = evaluate(ctx, scene.gt, model).confusion.miou();
  std::vector<double> us;
  for (std::size_t i = 0; i < c.ablate.latency_repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    evaluate(ctx, scene.gt, model);
    us.push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(us.begin(), us.end());
  const std::size_t n = us.size();
  return {name, miou, n % 2 ? us[n / 2] : 0.5 * (us[n / 2 - 1] + us[n / 2])};
}

std::string table(const std::string& key, const std::vector<AblateRow>& rows) {
  std::string s = key + ",miou,median_us\n";
  for (const auto& r : rows) s += r.name + "," + report::fmt(r.miou) + "," + bench::num(r.median_us) + "\n";
  return s;
}

template <class T>
int cmd_ablate(const Flags& f) {
  const auto c = resolve(f);
  const Scene scene = obtain_scene(c, f.scene);
  DnConfig on = c.dn, off = c.dn;
  on.enabled = true;
  off.enabled = false;
  const auto P = AttentionBackend::kPrototype, M = AttentionBackend::kMasked;
  const double rho = c.model.rho;

  std::vector<AblateRow> main{ablate_run<T>(c, scene, "baseline", M, off, rho),
                              ablate_run<T>(c, scene, "spotca", P, off, rho),
                              ablate_run<T>(c, scene, "dn", M, on, rho),
                              ablate_run<T>(c, scene, "spotca+dn", P, on, rho)};
  report::write_file(out_path(c, "ablate_main.csv"), table("variant", main));

  std::vector<AblateRow> sweep;
  for (double r : c.ablate.rho) sweep.push_back(ablate_run<T>(c, scene, bench::num(r), P, on, r));
  report::write_file(out_path(c, "ablate_rho.csv"), table("rho", sweep));

  DnConfig no_gt = on, no_label = on, no_feat = on;
  no_gt.gt_guidance = false;
  no_label.label_flip_prob = 0;
  no_feat.noise_std = 0;
  std::vector<AblateRow> dn{ablate_run<T>(c, scene, "full", P, on, rho),
                            ablate_run<T>(c, scene, "no_gt_guidance", P, no_gt, rho),
                            ablate_run<T>(c, scene, "no_label_noise", P, no_label, rho),
                            ablate_run<T>(c, scene, "no_feature_noise", P, no_feat, rho)};
  report::write_file(out_path(c, "ablate_dn.csv"), table("dn_variant", dn));
  std::cout << table("variant", main);
  return 0;
}

template <template <class> class Cmd>
int by_precision(const Flags& f, int precision) {
  return precision == 32 ? Cmd<float>::run(f) : Cmd<double>::run(f);
}

template <class T>
struct Infer {
  static int run(const Flags& f) { return cmd_infer<T>(f); }
};
template <class T>
struct TrainTiny {
  static int run(const Flags& f) { return cmd_train_tiny<T>(f); }
};
template <class T>
struct Ablate {
  static int run(const Flags& f) { return cmd_ablate<T>(f); }
};

int effective_precision(const Flags& f) {
  if (f.precision) return *f.precision;
  return f.config.empty() ? RunConfig{}.precision : config::load(f.config).precision;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse prototype-guided occupancy decoder toolkit"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "root seed override");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--precision", f.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
    sub->add_option("--backend", f.backend, "dense, masked or prototype")
        ->check(CLI::IsMember({"dense", "masked", "prototype"}));
  };
  auto* gen = app.add_subcommand("scene-gen", "generate a synthetic scene");
  auto* infer = app.add_subcommand("infer", "decode a scene and report metrics");
  auto* tiny = app.add_subcommand("train-tiny", "train on one scene");
  auto* bench = app.add_subcommand("bench", "benchmark attention backends");
  auto* ablate = app.add_subcommand("ablate", "ablation tables");
  for (auto* s : {gen, infer, tiny, bench, ablate}) common(s);
  for (auto* s : {infer, tiny, ablate}) s->add_option("--scene", f.scene, "scene file");
  infer->add_option("--ckpt", f.ckpt, "checkpoint file");
  infer->add_option("--upsample", f.upsample, "also write labels upsampled by 2 or 4")->check(CLI::IsMember({2, 4}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*gen) return cmd_scene_gen(f);
    if (*bench) return cmd_bench(f);
    const int p = effective_precision(f);
    if (*infer) return by_precision<Infer>(f, p);
    if (*tiny) return by_precision<TrainTiny>(f, p);
    if (*ablate) return by_precision<Ablate>(f, p);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
