#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "spot/error.hpp"
#include "spot/optim.hpp"
#include "spot/rng.hpp"
#include "spot/spotca.hpp"
#include "spot/train.hpp"

namespace spot::bench {

struct BenchConfig {
  std::vector<AttentionBackend> backends{AttentionBackend::kDense, AttentionBackend::kMasked,
                                         AttentionBackend::kPrototype};
  std::vector<std::size_t> nv{10000, 30000, 100000};
  std::vector<double> rho{0.08};
  std::size_t nq = 100;
  std::size_t channels = 192;
  std::size_t heads = 8;
  std::size_t repeats = 5;
  std::size_t warmup = 2;
  int precision = 32;
  std::uint64_t seed = 0;
  // Fraction of voxels each query may see under the masked backend.
  double mask_density = 0.5;
  std::size_t threads = 1;
  // Sample all cells of one Nv round-robin instead of one cell at a time.
  bool interleave = false;

  void validate() const {
    if (backends.empty() || nv.empty() || rho.empty()) throw ConfigError("bench sweeps must be nonempty");
    if (repeats < 5) throw ConfigError("bench.repeats must be at least 5");
    if (warmup < 2) throw ConfigError("bench.warmup must be at least 2");
    if (precision != 32 && precision != 64) throw ConfigError("bench.precision must be 32 or 64");
    for (auto n : nv)
      if (n == 0) throw ConfigError("bench.nv entries must be positive");
    for (double r : rho)
      if (!(r > 0 && r <= 1)) throw ConfigError("bench.rho entries must lie in (0, 1]");
    if (!(mask_density > 0 && mask_density <= 1)) throw ConfigError("bench.mask_density must lie in (0, 1]");
    if (threads == 0) throw ConfigError("bench.threads must be positive");
    SpotCAConfig c;
    c.channels = channels;
    c.heads = heads;
    c.validate();
  }
};

struct BenchRecord {
  AttentionBackend backend = AttentionBackend::kPrototype;
  std::size_t nv = 0, nq = 0, channels = 0, heads = 0;
  double rho = 0;
  std::size_t repeats = 0;
  std::size_t batch = 1;  // iterations per timing sample
  double median_us = 0, mean_us = 0, p95_us = 0;
  double score_median_us = 0, post_median_us = 0;
  std::uint64_t score_macs = 0, agg_macs = 0;  // per forward
};

// Closed-form per-forward MAC counts.
inline std::uint64_t expected_score_macs(std::size_t nq, std::size_t nv, std::size_t c) {
  return std::uint64_t(nq) * nv * c;
}

inline std::uint64_t expected_agg_macs(AttentionBackend b, std::size_t nq, std::size_t nv, std::size_t c, double rho) {
  const std::size_t k = b == AttentionBackend::kPrototype ? prototype_count(nv, rho) : nv;
  return std::uint64_t(nq) * k * c;
}

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Nearest-rank 95th percentile.
inline double p95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t r = std::size_t(std::ceil(0.95 * double(v.size())));
  return v[std::max<std::size_t>(r, 1) - 1];
}

template <class T>
struct Workload {
  Tensor<T> queries, keys;
  std::vector<std::vector<std::uint32_t>> mask;
};

template <class T>
Workload<T> make_workload(const BenchConfig& cfg, std::size_t nv) {
  auto eng = rng::engine(cfg.seed, "bench-workload", nv);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<T> q(cfg.nq * cfg.channels), k(nv * cfg.channels);
  for (auto& x : q) x = T(normal(eng));
  for (auto& x : k) x = T(normal(eng));
  Workload<T> w{Tensor<T>({cfg.nq, cfg.channels}, std::move(q)), Tensor<T>({nv, cfg.channels}, std::move(k)), {}};
  std::bernoulli_distribution keep(cfg.mask_density);
  w.mask.resize(cfg.nq);
  for (auto& m : w.mask) {
    for (std::size_t j = 0; j < nv; ++j)
      if (keep(eng)) m.push_back(std::uint32_t(j));
    if (m.empty()) m.push_back(0);
  }
  return w;
}

// One (backend, Nv, rho) measurement: warmed up and batch-calibrated on
// construction, then sampled any number of times.
template <class T>
class Cell {
 public:
  Cell(const BenchConfig& cfg, const Workload<T>& w, AttentionBackend backend, double rho)
      : cfg_(cfg), w_(w), backend_(backend), rho_(rho) {
    SpotCAConfig sc;
    sc.channels = cfg.channels;
    sc.heads = cfg.heads;
    sc.rho = rho;
    auto eng = rng::engine(cfg.seed, "bench-params");
    p_ = SpotCAParams<T>::create(store_, "ca", sc, eng);
    if (backend == AttentionBackend::kMasked) g_ = Guidance(w.mask);
    for (std::size_t i = 0; i < cfg.warmup; ++i) {
      AttentionStats st;
      call(&st);
      if (i == 0) first_ = st;
    }
    // Batch iterations until one sample spans at least 1 ms.
    for (;;) {
      const auto t0 = Clock::now();
      for (std::size_t i = 0; i < batch_; ++i) call(nullptr);
      if (std::chrono::duration<double>(Clock::now() - t0).count() > 1e-3 || batch_ >= (1u << 20)) break;
      batch_ *= 2;
    }
  }

  void sample() {
    AttentionStats st;
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < batch_; ++i) call(&st);
    total_.push_back(std::chrono::duration<double, std::micro>(Clock::now() - t0).count() / double(batch_));
    score_.push_back(st.score_seconds * 1e6 / double(batch_));
    post_.push_back(st.post_seconds * 1e6 / double(batch_));
  }

  BenchRecord record() const {
    const std::size_t nv = w_.keys.rows();
    BenchRecord rec;
    rec.backend = backend_;
    rec.nv = nv;
    rec.nq = cfg_.nq;
    rec.channels = cfg_.channels;
    rec.heads = cfg_.heads;
    rec.rho = rho_;
    rec.repeats = total_.size();
    rec.batch = batch_;
    rec.median_us = median(total_);
    rec.mean_us = std::accumulate(total_.begin(), total_.end(), 0.0) / double(total_.size());
    rec.p95_us = p95(total_);
    rec.score_median_us = median(score_);
    rec.post_median_us = median(post_);
    rec.score_macs = first_.score_macs;
    rec.agg_macs = first_.agg_macs;
    if (rec.score_macs != expected_score_macs(cfg_.nq, nv, cfg_.channels) ||
        rec.agg_macs != expected_agg_macs(backend_, cfg_.nq, nv, cfg_.channels, rho_))
      throw Error("bench: MAC counters disagree with closed form for " + std::string(backend_name(backend_)));
    return rec;
  }

 private:
  using Clock = std::chrono::steady_clock;

  Tensor<T> call(AttentionStats* st) const {
    Tape<T> tape(false);
    AttentionOptions<T> ao;
    ao.stats = st;
    ao.threads = cfg_.threads;
    return cross_attention(backend_, tape, w_.queries, w_.keys, p_, g_, false, ao);
  }

  const BenchConfig& cfg_;
  const Workload<T>& w_;
  AttentionBackend backend_;
  double rho_;
  ParamStore<T> store_;
  SpotCAParams<T> p_;
  Guidance g_;
  AttentionStats first_;
  std::size_t batch_ = 1;
  std::vector<double> total_, score_, post_;
};

template <class T>
BenchRecord run_cell(const BenchConfig& cfg, const Workload<T>& w, AttentionBackend backend, double rho) {
  Cell<T> cell(cfg, w, backend, rho);
  for (std::size_t r = 0; r < cfg.repeats; ++r) cell.sample();
  return cell.record();
}

template <class T>
std::vector<BenchRecord> run_typed(const BenchConfig& cfg) {
  const std::size_t nb = cfg.backends.size(), nn = cfg.nv.size(), nr = cfg.rho.size();
  std::vector<BenchRecord> out(nb * nn * nr);
  auto slot = [&](std::size_t b, std::size_t n, std::size_t r) -> BenchRecord& { return out[(b * nn + n) * nr + r]; };
  for (std::size_t n = 0; n < nn; ++n) {
    const auto w = make_workload<T>(cfg, cfg.nv[n]);
    if (!cfg.interleave) {
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t r = 0; r < nr; ++r) slot(b, n, r) = run_cell<T>(cfg, w, cfg.backends[b], cfg.rho[r]);
      continue;
    }
    // Round-robin sampling across all cells of this Nv.
    std::vector<std::unique_ptr<Cell<T>>> cells;
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t r = 0; r < nr; ++r) cells.push_back(std::make_unique<Cell<T>>(cfg, w, cfg.backends[b], cfg.rho[r]));
    for (std::size_t rep = 0; rep < cfg.repeats; ++rep)
      for (auto& c : cells) c->sample();
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t r = 0; r < nr; ++r) slot(b, n, r) = cells[b * nr + r]->record();
  }
  return out;
}

}  // namespace detail

// Records ordered by backend (config order), then Nv, then rho.
inline std::vector<BenchRecord> run_bench(const BenchConfig& cfg) {
  cfg.validate();
  return cfg.precision == 64 ? detail::run_typed<double>(cfg) : detail::run_typed<float>(cfg);
}

// Shortest round-trip decimal form.
inline std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline constexpr const char* kCsvHeader = "backend,Nv,rho,repeats,median_us,mean_us,p95_us,score_macs,agg_macs";

inline std::string report_csv(const std::vector<BenchRecord>& recs) {
  std::string s = std::string(kCsvHeader) + "\n";
  for (const auto& r : recs)
    s += std::string(backend_name(r.backend)) + "," + std::to_string(r.nv) + "," + num(r.rho) + "," +
         std::to_string(r.repeats) + "," + num(r.median_us) + "," + num(r.mean_us) + "," + num(r.p95_us) + "," +
         std::to_string(r.score_macs) + "," + std::to_string(r.agg_macs) + "\n";
  return s;
}

inline std::string phases_csv(const std::vector<BenchRecord>& recs) {
  std::string s = "backend,Nv,rho,batch,score_median_us,post_median_us\n";
  for (const auto& r : recs)
    s += std::string(backend_name(r.backend)) + "," + std::to_string(r.nv) + "," + num(r.rho) + "," +
         std::to_string(r.batch) + "," + num(r.score_median_us) + "," + num(r.post_median_us) + "\n";
  return s;
}

// x = Nv; one median_us column per (backend, rho) series; blank where absent.
inline std::string plot_data(const std::vector<BenchRecord>& recs) {
  std::vector<std::string> series;
  std::vector<std::size_t> xs;
  auto name = [](const BenchRecord& r) { return std::string(backend_name(r.backend)) + "_rho" + num(r.rho); };
  for (const auto& r : recs) {
    if (std::find(series.begin(), series.end(), name(r)) == series.end()) series.push_back(name(r));
    if (std::find(xs.begin(), xs.end(), r.nv) == xs.end()) xs.push_back(r.nv);
  }
  std::sort(xs.begin(), xs.end());
  std::string s = "Nv";
  for (const auto& n : series) s += "," + n;
  s += "\n";
  for (auto x : xs) {
    s += std::to_string(x);
    for (const auto& n : series) {
      s += ",";
      for (const auto& r : recs)
        if (r.nv == x && name(r) == n) {
          s += num(r.median_us);
          break;
        }
    }
    s += "\n";
  }
  return s;
}

// Writes <prefix>.csv, <prefix>_plot.csv and <prefix>_phases.csv.
inline void emit_report(const std::vector<BenchRecord>& recs, const std::string& prefix) {
  report::write_file(prefix + ".csv", report_csv(recs));
  report::write_file(prefix + "_plot.csv", plot_data(recs));
  report::write_file(prefix + "_phases.csv", phases_csv(recs));
}

// Least-squares slope of y against x.
inline double slope(std::span<const double> x, std::span<const double> y) {
  const double n = double(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

}  // namespace spot::bench
