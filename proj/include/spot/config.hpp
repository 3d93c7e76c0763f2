#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spot/bench.hpp"
#include "spot/decoder.hpp"
#include "spot/denoise.hpp"
#include "spot/losses.hpp"
#include "spot/train.hpp"
#include "spot/voxel.hpp"

namespace spot {

struct DataConfig {
  SceneSpec scene;         // seed is derived from the root seed
  std::string scene_path;  // when set, the scene is loaded instead of generated
};

struct AblateConfig {
  std::vector<double> rho{0.02, 0.04, 0.06, 0.08, 0.10, 0.12};
  std::size_t latency_repeats = 5;
};

// Everything a command needs. All randomness derives from `seed`:
//   scene     derive(seed, "scene")
//   init      derive(derive(seed, "model"), "init")
//   dropout   derive(seed, "dropout")
//   dn-noise  derive(seed, "dn-noise", step)
//   sampling  derive(seed, "sampling", step), then per layer
struct RunConfig {
  std::uint64_t seed = 0;
  int precision = 64;
  DecoderConfig model;
  DnConfig dn;
  LossWeights loss;
  TrainConfig train;
  DataConfig data;
  bench::BenchConfig bench;
  AblateConfig ablate;
  std::string out_dir = "out";

  RunConfig() {
    model.channels = 32;
    model.heads = 4;
    model.n_classes = 4;
    train.steps = 300;
    bench.precision = 32;
  }

  std::uint64_t model_seed() const { return rng::derive(seed, "model"); }

  SceneSpec scene_spec() const {
    SceneSpec s = data.scene;
    s.seed = rng::derive(seed, "scene");
    return s;
  }

  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }

  void validate() const {
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    model.validate();
    dn.validate();
    loss.validate();
    train.validate();
    bench.validate();
    if (ablate.rho.empty()) throw ConfigError("ablate.rho must be nonempty");
    for (double r : ablate.rho)
      if (!(r > 0 && r <= 1)) throw ConfigError("ablate.rho entries must lie in (0, 1]");
    if (ablate.latency_repeats < 5) throw ConfigError("ablate.latency_repeats must be at least 5");
    if (data.scene_path.empty()) {
      if (data.scene.channels != model.channels)
        throw ConfigError("model.channels must equal data.scene.channels");
      if (data.scene.n_classes != model.n_classes)
        throw ConfigError("model.n_classes must equal data.scene.n_classes");
    }
  }

  friend bool operator==(const RunConfig& a, const RunConfig& b);
};

namespace config {

using Json = nlohmann::ordered_json;

// 1-based line of byte offset `pos` in `text`.
inline std::size_t line_at(const std::string& text, std::size_t pos) {
  pos = std::min(pos, text.size());
  return 1 + std::size_t(std::count(text.begin(), text.begin() + std::ptrdiff_t(pos), '\n'));
}

// Line of `"key"` following the chain of enclosing section keys; 0 if unknown.
inline std::size_t line_of_path(const std::string& text, const std::vector<std::string>& path) {
  std::size_t pos = 0;
  for (const auto& k : path) {
    const auto p = text.find("\"" + k + "\"", pos);
    if (p == std::string::npos) return 0;
    pos = p;
  }
  return line_at(text, pos);
}

class Reader {
 public:
  Reader(const Json& j, std::vector<std::string> path, const std::string& text)
      : j_(j), path_(std::move(path)), text_(text) {
    if (!j_.is_object()) fail("expected an object");
    for (auto it = j_.begin(); it != j_.end(); ++it) unseen_.push_back(it.key());
  }

  [[noreturn]] void fail(const std::string& msg, const std::string& key = "") const {
    auto p = path_;
    if (!key.empty()) p.push_back(key);
    std::string dotted;
    for (const auto& k : p) dotted += (dotted.empty() ? "" : ".") + k;
    const std::size_t line = line_of_path(text_, p);
    throw ConfigError("config" + (line ? ":" + std::to_string(line) : std::string()) + ": key '" + dotted +
                      "': " + msg);
  }

  const Json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    unseen_.erase(std::remove(unseen_.begin(), unseen_.end(), key), unseen_.end());
    return &*it;
  }

  void get(const std::string& key, bool& out) {
    if (auto v = find(key)) {
      if (!v->is_boolean()) fail("expected a boolean", key);
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, double& out) {
    if (auto v = find(key)) {
      if (!v->is_number()) fail("expected a number", key);
      out = v->get<double>();
    }
  }
  template <class U>
    requires std::is_unsigned_v<U>
  void get(const std::string& key, U& out) {
    if (auto v = find(key)) {
      if (!v->is_number_unsigned()) fail("expected a nonnegative integer", key);
      const auto x = v->get<std::uint64_t>();
      if (x > std::numeric_limits<U>::max()) fail("value out of range", key);
      out = U(x);
    }
  }
  void get(const std::string& key, int& out) {
    if (auto v = find(key)) {
      if (!v->is_number_integer()) fail("expected an integer", key);
      out = v->get<int>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (auto v = find(key)) {
      if (!v->is_string()) fail("expected a string", key);
      out = v->get<std::string>();
    }
  }
  template <class U>
  void get_list(const std::string& key, std::vector<U>& out) {
    if (auto v = find(key)) {
      if (!v->is_array()) fail("expected an array", key);
      std::vector<U> r;
      for (const auto& e : *v) {
        if constexpr (std::is_same_v<U, double>) {
          if (!e.is_number()) fail("expected an array of numbers", key);
        } else {
          if (!e.is_number_unsigned()) fail("expected an array of nonnegative integers", key);
        }
        r.push_back(e.get<U>());
      }
      out = std::move(r);
    }
  }
  template <class F>
  void section(const std::string& key, F&& f) {
    if (auto v = find(key)) {
      auto p = path_;
      p.push_back(key);
      Reader sub(*v, p, text_);
      f(sub);
      sub.finish();
    }
  }
  // Rethrows parse errors of enum-like values with the key's location.
  template <class F>
  void parsed(const std::string& key, F&& f) {
    std::string s;
    get(key, s);
    if (j_.contains(key)) {
      try {
        f(s);
      } catch (const ConfigError& e) {
        fail(e.what(), key);
      }
    }
  }
  void finish() const {
    if (!unseen_.empty()) fail("unknown key", unseen_.front());
  }

 private:
  const Json& j_;
  std::vector<std::string> path_;
  const std::string& text_;
  std::vector<std::string> unseen_;
};

inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  const auto& m = c.model;
  j["model"] = {{"channels", m.channels},
                {"heads", m.heads},
                {"layers", m.layers},
                {"queries", m.queries},
                {"levels", m.levels},
                {"n_classes", m.n_classes},
                {"rho", m.rho},
                {"dropout", m.dropout},
                {"backend", std::string(backend_name(m.backend))},
                {"per_head_temperature", m.per_head_temperature},
                {"value_projection", m.value_projection},
                {"class_scaling_softmax", m.class_scaling_softmax},
                {"empty_threshold", m.empty_threshold},
                {"query_init_std", m.query_init_std}};
  j["dn"] = {{"enabled", c.dn.enabled},
             {"label_flip_prob", c.dn.label_flip_prob},
             {"noise_std", c.dn.noise_std},
             {"groups", c.dn.groups},
             {"gt_guidance", c.dn.gt_guidance}};
  j["loss"] = {{"w_ce", c.loss.w_ce},
               {"w_bce", c.loss.w_bce},
               {"w_dice", c.loss.w_dice},
               {"no_object_weight", c.loss.no_object_weight},
               {"n_sample_points", c.loss.n_sample_points}};
  j["train"] = {{"steps", c.train.steps},
                {"lr", c.train.lr},
                {"weight_decay", c.train.weight_decay},
                {"optimizer", std::string(optimizer_name(c.train.optimizer))},
                {"target_miou", c.train.target_miou},
                {"eval_every", c.train.eval_every}};
  const auto& s = c.data.scene;
  j["data"] = {{"scene",
                {{"dims", {s.dims.x, s.dims.y, s.dims.z}},
                 {"n_objects", s.n_objects},
                 {"n_classes", s.n_classes},
                 {"channels", s.channels},
                 {"background_fraction", s.background_fraction},
                 {"feature_noise", s.feature_noise}}},
               {"scene_path", c.data.scene_path}};
  Json backends = Json::array();
  for (auto b : c.bench.backends) backends.push_back(std::string(backend_name(b)));
  j["bench"] = {{"backends", backends},
                {"nv", c.bench.nv},
                {"rho", c.bench.rho},
                {"nq", c.bench.nq},
                {"channels", c.bench.channels},
                {"heads", c.bench.heads},
                {"repeats", c.bench.repeats},
                {"warmup", c.bench.warmup},
                {"precision", c.bench.precision},
                {"mask_density", c.bench.mask_density},
                {"threads", c.bench.threads},
                {"interleave", c.bench.interleave}};
  j["ablate"] = {{"rho", c.ablate.rho}, {"latency_repeats", c.ablate.latency_repeats}};
  j["output"] = {{"dir", c.out_dir}};
  return j;
}

// Strict: unknown keys, wrong types and invalid values are errors that cite
// the key path and, when it can be located, the line.
inline RunConfig parse(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config:" + std::to_string(line_at(text, e.byte == 0 ? 0 : e.byte - 1)) +
                      ": malformed JSON: " + e.what());
  }
  RunConfig c;
  Reader r(j, {}, text);
  r.get("seed", c.seed);
  r.get("precision", c.precision);
  r.section("model", [&](Reader& m) {
    m.get("channels", c.model.channels);
    m.get("heads", c.model.heads);
    m.get("layers", c.model.layers);
    m.get("queries", c.model.queries);
    m.get("levels", c.model.levels);
    m.get("n_classes", c.model.n_classes);
    m.get("rho", c.model.rho);
    m.get("dropout", c.model.dropout);
    m.parsed("backend", [&](const std::string& s) { c.model.backend = parse_backend(s); });
    m.get("per_head_temperature", c.model.per_head_temperature);
    m.get("value_projection", c.model.value_projection);
    m.get("class_scaling_softmax", c.model.class_scaling_softmax);
    m.get("empty_threshold", c.model.empty_threshold);
    m.get("query_init_std", c.model.query_init_std);
  });
  r.section("dn", [&](Reader& d) {
    d.get("enabled", c.dn.enabled);
    d.get("label_flip_prob", c.dn.label_flip_prob);
    d.get("noise_std", c.dn.noise_std);
    d.get("groups", c.dn.groups);
    d.get("gt_guidance", c.dn.gt_guidance);
  });
  r.section("loss", [&](Reader& l) {
    l.get("w_ce", c.loss.w_ce);
    l.get("w_bce", c.loss.w_bce);
    l.get("w_dice", c.loss.w_dice);
    l.get("no_object_weight", c.loss.no_object_weight);
    l.get("n_sample_points", c.loss.n_sample_points);
  });
  r.section("train", [&](Reader& t) {
    t.get("steps", c.train.steps);
    t.get("lr", c.train.lr);
    t.get("weight_decay", c.train.weight_decay);
    t.parsed("optimizer", [&](const std::string& s) { c.train.optimizer = parse_optimizer(s); });
    t.get("target_miou", c.train.target_miou);
    t.get("eval_every", c.train.eval_every);
  });
  r.section("data", [&](Reader& d) {
    d.section("scene", [&](Reader& s) {
      std::vector<std::uint32_t> dims;
      s.get_list("dims", dims);
      if (s.find("dims")) {
        if (dims.size() != 3) s.fail("expected [x, y, z]", "dims");
        c.data.scene.dims = {dims[0], dims[1], dims[2]};
      }
      s.get("n_objects", c.data.scene.n_objects);
      s.get("n_classes", c.data.scene.n_classes);
      s.get("channels", c.data.scene.channels);
      s.get("background_fraction", c.data.scene.background_fraction);
      s.get("feature_noise", c.data.scene.feature_noise);
    });
    d.get("scene_path", c.data.scene_path);
    if (!c.data.scene_path.empty() && !std::filesystem::exists(c.data.scene_path))
      d.fail("file does not exist: " + c.data.scene_path, "scene_path");
  });
  r.section("bench", [&](Reader& b) {
    if (auto v = b.find("backends")) {
      if (!v->is_array()) b.fail("expected an array of backend names", "backends");
      c.bench.backends.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) b.fail("expected an array of backend names", "backends");
        try {
          c.bench.backends.push_back(parse_backend(e.get<std::string>()));
        } catch (const ConfigError& err) {
          b.fail(err.what(), "backends");
        }
      }
    }
    b.get_list("nv", c.bench.nv);
    b.get_list("rho", c.bench.rho);
    b.get("nq", c.bench.nq);
    b.get("channels", c.bench.channels);
    b.get("heads", c.bench.heads);
    b.get("repeats", c.bench.repeats);
    b.get("warmup", c.bench.warmup);
    b.get("precision", c.bench.precision);
    b.get("mask_density", c.bench.mask_density);
    b.get("threads", c.bench.threads);
    b.get("interleave", c.bench.interleave);
  });
  r.section("ablate", [&](Reader& a) {
    a.get_list("rho", c.ablate.rho);
    a.get("latency_repeats", c.ablate.latency_repeats);
  });
  r.section("output", [&](Reader& o) { o.get("dir", c.out_dir); });
  r.finish();
  c.bench.seed = c.seed;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

inline std::string dump(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace config

inline bool operator==(const RunConfig& a, const RunConfig& b) { return config::to_json(a) == config::to_json(b); }

}  // namespace spot
