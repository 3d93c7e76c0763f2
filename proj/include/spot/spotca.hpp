#pragma once

// Sparse prototype-guided cross-attention and its dense / masked references.
//
// Per (query, head) the prototype backend scores every candidate key by cosine
// similarity of the projected head vectors, keeps the ceil(rho * m) best
// (ties to the lower voxel index), and aggregates their values with
// softmax(score / temperature). The aggregate gates the query update:
//
//   i     = FFN1(Proj_Q(q) * v_agg)
//   o     = FFN2(gate * LayerNorm(i) + v_agg)
//   q_out = q + Dropout(o)
//
// Softmax and aggregation always run over the kept keys in ascending voxel
// order, which is also the order the dense reference uses. With rho = 1 the
// two backends therefore perform the same floating-point operations.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "spot/error.hpp"
#include "spot/nn.hpp"
#include "spot/tensor.hpp"
#include "spot/voxel.hpp"

namespace spot {

enum class AttentionBackend { kDense, kMasked, kPrototype };

inline std::string_view backend_name(AttentionBackend b) {
  switch (b) {
    case AttentionBackend::kDense: return "dense";
    case AttentionBackend::kMasked: return "masked";
    case AttentionBackend::kPrototype: return "prototype";
  }
  return "?";
}

inline AttentionBackend parse_backend(std::string_view s) {
  if (s == "dense") return AttentionBackend::kDense;
  if (s == "masked") return AttentionBackend::kMasked;
  if (s == "prototype") return AttentionBackend::kPrototype;
  throw ConfigError("unknown attention backend '" + std::string(s) + "'");
}

struct SpotCAConfig {
  std::size_t channels = 192;
  std::size_t heads = 8;
  double rho = 0.08;
  double dropout_p = 0.0;
  // Softmax temperature sqrt(C) by default; sqrt(C / H) when set.
  bool per_head_temperature = false;
  // Values are Proj_V(features) by default; raw features when unset.
  bool value_projection = true;

  void validate() const {
    if (channels == 0 || heads == 0 || channels % heads != 0) throw ConfigError("channels must be a positive multiple of heads");
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in (0, 1]");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
  }
  std::size_t head_dim() const { return channels / heads; }
  double inv_temperature() const {
    return 1.0 / std::sqrt(double(per_head_temperature ? head_dim() : channels));
  }
};

template <class T>
struct SpotCAParams {
  SpotCAConfig cfg;
  nn::Linear<T> proj_q, proj_k, proj_v;
  nn::Mlp<T> ffn1, ffn2;
  Tensor<T> gate;
  nn::LayerNorm<T> norm;

  static SpotCAParams create(ParamStore<T>& store, const std::string& prefix, const SpotCAConfig& cfg,
                             rng::Engine& eng) {
    cfg.validate();
    const std::size_t c = cfg.channels;
    SpotCAParams p;
    p.cfg = cfg;
    p.proj_q = nn::Linear<T>::create(store, prefix + ".proj_q", c, c, eng);
    p.proj_k = nn::Linear<T>::create(store, prefix + ".proj_k", c, c, eng);
    if (cfg.value_projection) p.proj_v = nn::Linear<T>::create(store, prefix + ".proj_v", c, c, eng);
    p.ffn1 = nn::Mlp<T>::create(store, prefix + ".ffn1", c, 2 * c, c, eng);
    p.ffn2 = nn::Mlp<T>::create(store, prefix + ".ffn2", c, 2 * c, c, eng);
    p.gate = store.add(prefix + ".gate", Tensor<T>::scalar(T(1)));
    p.norm = nn::LayerNorm<T>::create(store, prefix + ".norm", c);
    return p;
  }
};

// k = ceil(rho * n) clamped to [1, n]. The 1e-9 slack keeps products such as
// 0.07 * 100 = 7.000000000000001 from rounding up.
inline std::size_t prototype_count(std::size_t n, double rho) {
  if (n == 0) return 0;
  const double raw = std::ceil(rho * double(n) - 1e-9);
  return std::clamp<std::size_t>(raw < 1.0 ? 1 : std::size_t(raw), 1, n);
}

// Cosine similarity; 0 when either vector is zero.
template <class T>
T saliency(std::span<const T> q, std::span<const T> k) {
  if (q.size() != k.size()) throw ShapeError("saliency: dimension mismatch");
  T dot = 0, qq = 0, kk = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    dot += q[i] * k[i];
    qq += q[i] * q[i];
    kk += k[i] * k[i];
  }
  if (qq == T(0) || kk == T(0)) return T(0);
  return dot / (std::sqrt(qq) * std::sqrt(kk));
}

namespace detail {

// k-th largest value of s (1-based k <= s.size()).
template <class T>
T kth_largest(std::span<const T> s, std::size_t k, std::vector<T>& scratch) {
  scratch.assign(s.begin(), s.end());
  std::nth_element(scratch.begin(), scratch.begin() + (k - 1), scratch.end(), std::greater<T>());
  return scratch[k - 1];
}

// Appends positions j in [0, m) (ascending) from `from` whose score exceeds
// tau, plus the first `need_eq` ties.
template <class T>
void emit_selected(std::span<const T> s, std::span<const std::uint32_t> from, T tau, std::size_t need_eq,
                   std::vector<std::uint32_t>& out) {
  const std::size_t base = out.size();
  out.resize(base + from.size());
  std::size_t n = base;
  for (auto j : from) {
    const T x = s[j];
    const bool tie = x == tau && need_eq > 0;
    need_eq -= tie;
    out[n] = j;
    n += (x > tau) | tie;
  }
  out.resize(n);
}

// Positions of the k largest entries of s, ascending; ties at the threshold go
// to the lower position.
template <class T>
void select_positions(std::span<const T> s, std::size_t k, std::vector<std::uint32_t>& out, std::vector<T>& scratch) {
  constexpr std::size_t kSmall = 2048, kBuckets = 2048;
  out.clear();
  const std::size_t m = s.size();
  if (k >= m) {
    out.resize(m);
    std::iota(out.begin(), out.end(), 0u);
    return;
  }
  thread_local std::vector<std::uint32_t> cand;
  thread_local std::vector<std::uint16_t> ids;
  auto finish = [&](std::span<const std::uint32_t> from, std::size_t above) {
    // scratch holds the scores of the boundary bucket; the threshold is its
    // (k - above)-th largest.
    const std::size_t need = k - above;
    std::nth_element(scratch.begin(), scratch.begin() + (need - 1), scratch.end(), std::greater<T>());
    const T tau = scratch[need - 1];
    std::size_t greater = above;
    for (T x : scratch) greater += x > tau;
    out.reserve(k);
    emit_selected(s, from, tau, k - greater, out);
  };
  if (m <= kSmall) {
    cand.resize(m);
    std::iota(cand.begin(), cand.end(), 0u);
    scratch.assign(s.begin(), s.end());
    finish(cand, 0);
    return;
  }
  {
    // Lower bracket for the threshold from a strided sample; one pass keeps
    // everything at or above it. Falls back to the histogram when the bracket
    // keeps fewer than k entries.
    constexpr std::size_t kSample = 1024;
    scratch.resize(kSample);
    for (std::size_t i = 0; i < kSample; ++i) scratch[i] = s[i * m / kSample];
    const double expect = double(k) * double(kSample) / double(m);
    const std::size_t r = std::min(kSample, std::size_t(expect + 4.0 * std::sqrt(expect) + 8.0));
    std::nth_element(scratch.begin(), scratch.begin() + (r - 1), scratch.end(), std::greater<T>());
    const T t_low = scratch[r - 1];
    cand.resize(m);
    std::size_t n = 0;
    for (std::size_t j = 0; j < m; ++j) {
      cand[n] = std::uint32_t(j);
      n += s[j] >= t_low;
    }
    if (n >= k) {
      cand.resize(n);
      scratch.resize(n);
      for (std::size_t i = 0; i < n; ++i) scratch[i] = s[cand[i]];
      finish(cand, 0);
      return;
    }
  }
  T lo = s[0], hi = s[0];
  for (std::size_t j = 1; j < m; ++j) {
    lo = s[j] < lo ? s[j] : lo;
    hi = s[j] > hi ? s[j] : hi;
  }
  if (lo == hi) {
    out.resize(k);
    std::iota(out.begin(), out.end(), 0u);
    return;
  }
  // Bucket ids are monotone in the score, so every entry of a higher bucket
  // beats every entry of a lower one.
  const T scale = T(double(kBuckets) / (double(hi) - double(lo)));
  ids.resize(m);
  std::size_t counts[kBuckets] = {};
  for (std::size_t j = 0; j < m; ++j) {
    const T f = (s[j] - lo) * scale;
    const std::uint16_t b = f >= T(kBuckets - 1) ? std::uint16_t(kBuckets - 1) : std::uint16_t(f);
    ids[j] = b;
    ++counts[b];
  }
  std::size_t b = kBuckets, above = 0;
  while (b-- > 0) {
    if (above + counts[b] >= k) break;
    above += counts[b];
  }
  cand.resize(above + counts[b]);
  std::size_t n = 0;
  for (std::size_t j = 0; j < m; ++j) {
    cand[n] = std::uint32_t(j);
    n += ids[j] >= b;
    if (n == cand.size()) break;
  }
  scratch.clear();
  for (auto j : cand)
    if (ids[j] == b) scratch.push_back(s[j]);
  finish(cand, above);
}

}  // namespace detail

// Indices of the ceil(rho * n) largest scores ordered by score descending,
// then index ascending.
template <class T>
std::vector<std::uint32_t> select_top_rho(std::span<const T> scores, double rho) {
  if (scores.empty()) throw Error("select_top_rho: empty score list");
  if (!(rho > 0.0 && rho <= 1.0)) throw Error("select_top_rho: rho must lie in (0, 1]");
  std::vector<std::uint32_t> idx;
  std::vector<T> scratch;
  detail::select_positions(scores, prototype_count(scores.size(), rho), idx, scratch);
  std::sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
  });
  return idx;
}

// v_agg = sum_j softmax(scores * inv_temp)_j * values[j]; values is k x dim row-major.
template <class T>
std::vector<T> aggregate(std::span<const T> values, std::size_t dim, std::span<const T> scores, T inv_temp) {
  const std::size_t k = scores.size();
  if (k == 0) throw Error("aggregate: empty selection");
  if (values.size() != k * dim) throw ShapeError("aggregate: values must be k x dim");
  std::vector<T> w(k);
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < k; ++j) {
    w[j] = scores[j] * inv_temp;
    mx = std::max(mx, w[j]);
  }
  T sum = 0;
  for (auto& x : w) {
    x = std::exp(x - mx);
    sum += x;
  }
  std::vector<T> out(dim, T(0));
  for (std::size_t j = 0; j < k; ++j) {
    const T a = w[j] / sum;
    for (std::size_t c = 0; c < dim; ++c) out[c] += a * values[j * dim + c];
  }
  return out;
}

template <class T>
struct HeadSelection {
  std::vector<std::uint32_t> indices;  // rank order: score descending, index ascending
  std::vector<T> scores;               // cosine saliency
  std::vector<T> weights;              // attention weights, sum to 1
};

template <class T>
struct PrototypeSelection {
  std::size_t n_queries = 0, heads = 0;
  std::vector<HeadSelection<T>> entries;  // query-major

  const HeadSelection<T>& at(std::size_t q, std::size_t h) const { return entries[q * heads + h]; }

  // query_id,head,rank,voxel_index,score,weight
  void write_csv(std::ostream& os) const {
    os << "query_id,head,rank,voxel_index,score,weight\n";
    os.precision(9);
    for (std::size_t q = 0; q < n_queries; ++q)
      for (std::size_t h = 0; h < heads; ++h) {
        const auto& e = at(q, h);
        for (std::size_t r = 0; r < e.indices.size(); ++r)
          os << q << ',' << h << ',' << r << ',' << e.indices[r] << ',' << e.scores[r] << ',' << e.weights[r] << '\n';
      }
  }
};

// Multiply-accumulate counters and phase timings for one or more attention calls.
struct AttentionStats {
  std::uint64_t score_macs = 0;
  std::uint64_t agg_macs = 0;
  double score_seconds = 0;  // projections, normalization and saliency
  double post_seconds = 0;   // selection, softmax and aggregation

  void merge(const AttentionStats& o) {
    score_macs += o.score_macs;
    agg_macs += o.agg_macs;
    score_seconds += o.score_seconds;
    post_seconds += o.post_seconds;
  }
};

// Per-query candidate voxel lists (ascending); an empty list, or an empty
// span, means the query may select from every key.
using Guidance = std::span<const std::vector<std::uint32_t>>;

template <class T>
struct AttentionOptions {
  ops::DropoutKey dropout{};
  PrototypeSelection<T>* selection = nullptr;
  AttentionStats* stats = nullptr;
  std::size_t threads = 1;  // used only when the tape does not record
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline std::vector<std::vector<std::uint32_t>> normalized_guidance(Guidance g, std::size_t nq, std::size_t nv) {
  std::vector<std::vector<std::uint32_t>> out(nq);
  if (g.empty()) return out;
  if (g.size() != nq) throw ShapeError("guidance must provide one candidate list per query");
  for (std::size_t i = 0; i < nq; ++i) {
    out[i] = g[i];
    if (!std::is_sorted(out[i].begin(), out[i].end())) std::sort(out[i].begin(), out[i].end());
    out[i].erase(std::unique(out[i].begin(), out[i].end()), out[i].end());
    if (!out[i].empty() && out[i].back() >= nv) throw ShapeError("guidance index outside the key set");
  }
  return out;
}

// Rows of x (N x C) split into H heads, each head vector scaled to unit norm.
template <class T>
Tensor<T> normalize_heads(Tape<T>& tape, const Tensor<T>& x, std::size_t heads) {
  const std::size_t n = x.rows(), c = x.cols();
  auto split = ops::reshape(tape, x, {n * heads, c / heads});
  return ops::reshape(tape, ops::l2_normalize_lastdim(tape, split), {n, c});
}

}  // namespace detail

// Fused Top-rho selection + softmax + aggregation over head-normalized
// queries qn (Nq x C), keys kn (Nv x C) and values v (Nv x C). Gradients flow
// to qn, kn and v through the selected entries only.
template <class T>
Tensor<T> prototype_aggregate(Tape<T>& tape, const Tensor<T>& qn, const Tensor<T>& kn, const Tensor<T>& v,
                              std::size_t heads, double rho, T inv_temp, Guidance guidance,
                              const AttentionOptions<T>& opt = {}) {
  const std::size_t nq = qn.rows(), nv = kn.rows(), c = qn.cols();
  if (kn.cols() != c || v.cols() != c || v.rows() != nv) throw ShapeError("prototype_aggregate: shape mismatch");
  if (nv == 0) throw Error("prototype_aggregate: empty key set");
  if (heads == 0 || c % heads != 0) throw ShapeError("prototype_aggregate: channels not divisible by heads");
  const std::size_t d = c / heads;
  const auto cands = detail::normalized_guidance(guidance, nq, nv);
  const bool record = tape.wants_grad({&qn, &kn, &v});

  auto t0 = detail::Clock::now();
  // Keys transposed per channel so unrestricted scoring streams contiguous rows.
  std::vector<T> knt(c * nv);
  for (std::size_t j = 0; j < nv; ++j)
    for (std::size_t ch = 0; ch < c; ++ch) knt[ch * nv + j] = kn.data()[j * c + ch];
  AttentionStats setup;
  setup.score_seconds = detail::seconds_since(t0);
  // Values head-major: each head's (Nv x d) slice is contiguous.
  t0 = detail::Clock::now();
  std::vector<T> vt(nv * c);
  for (std::size_t j = 0; j < nv; ++j)
    for (std::size_t h = 0; h < heads; ++h)
      std::copy_n(v.data().data() + j * c + h * d, d, vt.data() + (h * nv + j) * d);
  setup.post_seconds = detail::seconds_since(t0);

  auto out = Tensor<T>::zeros({nq, c});
  // Saved per (query, head): kept voxel indices ascending and their weights.
  std::vector<std::vector<std::uint32_t>> kept(record ? nq * heads : 0);
  std::vector<std::vector<T>> alphas(record ? nq * heads : 0);
  if (opt.selection) {
    opt.selection->n_queries = nq;
    opt.selection->heads = heads;
    opt.selection->entries.assign(nq * heads, {});
  }

  auto run_queries = [&](std::size_t begin, std::size_t end, AttentionStats& st) {
    std::vector<T> scores, scratch, w;
    std::vector<std::uint32_t> pos;
    const T* qd = qn.data().data();
    const T* kd = kn.data().data();
    const T* vd = vt.data();
    T* od = out.mutable_data().data();
    for (std::size_t i = begin; i < end; ++i) {
      auto ts = detail::Clock::now();
      const auto& cand = cands[i];
      const bool restricted = !cand.empty();
      const std::size_t m = restricted ? cand.size() : nv;
      scores.assign(heads * m, T(0));
      for (std::size_t h = 0; h < heads; ++h) {
        T* s = scores.data() + h * m;
        const T* qh = qd + i * c + h * d;
        if (restricted) {
          for (std::size_t jj = 0; jj < m; ++jj) {
            const T* kj = kd + std::size_t(cand[jj]) * c + h * d;
            T acc = 0;
            for (std::size_t e = 0; e < d; ++e) acc += qh[e] * kj[e];
            s[jj] = acc;
          }
        } else {
          for (std::size_t e = 0; e < d; ++e) {
            const T a = qh[e];
            const T* row = knt.data() + (h * d + e) * nv;
            for (std::size_t j = 0; j < nv; ++j) s[j] += a * row[j];
          }
        }
      }
      st.score_macs += std::uint64_t(m) * c;
      auto tp = detail::Clock::now();
      st.score_seconds += std::chrono::duration<double>(tp - ts).count();

      const std::size_t k = prototype_count(m, rho);
      for (std::size_t h = 0; h < heads; ++h) {
        std::span<const T> s(scores.data() + h * m, m);
        detail::select_positions(s, k, pos, scratch);
        w.resize(k);
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
          w[j] = s[pos[j]] * inv_temp;
          mx = std::max(mx, w[j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j < k; ++j) {
          w[j] = std::exp(w[j] - mx);
          sum += w[j];
        }
        for (std::size_t j = 0; j < k; ++j) w[j] /= sum;
        T* oh = od + i * c + h * d;
        constexpr std::size_t kAhead = 16;
        for (std::size_t j = 0; j < k; ++j) {
          if (j + kAhead < k) {
            const std::size_t ahead = restricted ? cand[pos[j + kAhead]] : pos[j + kAhead];
            __builtin_prefetch(vd + (h * nv + ahead) * d);
          }
          const std::size_t vox = restricted ? cand[pos[j]] : pos[j];
          const T* vj = vd + (h * nv + vox) * d;
          const T a = w[j];
          for (std::size_t e = 0; e < d; ++e) oh[e] += a * vj[e];
        }
        st.agg_macs += std::uint64_t(k) * d;
        if (record || opt.selection) {
          std::vector<std::uint32_t> vox(k);
          for (std::size_t j = 0; j < k; ++j) vox[j] = restricted ? cand[pos[j]] : pos[j];
          if (opt.selection) {
            std::vector<std::size_t> order(k);
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
              const T sa = s[pos[a]], sb = s[pos[b]];
              return sa != sb ? sa > sb : vox[a] < vox[b];
            });
            auto& e = opt.selection->entries[i * heads + h];
            for (auto r : order) {
              e.indices.push_back(vox[r]);
              e.scores.push_back(s[pos[r]]);
              e.weights.push_back(w[r]);
            }
          }
          if (record) {
            kept[i * heads + h] = std::move(vox);
            alphas[i * heads + h].assign(w.begin(), w.end());
          }
        }
      }
      st.post_seconds += detail::seconds_since(tp);
    }
  };

  AttentionStats total = setup;
  const std::size_t threads = record ? 1 : std::max<std::size_t>(1, std::min(opt.threads, nq));
  if (threads == 1) {
    run_queries(0, nq, total);
  } else {
    std::vector<AttentionStats> part(threads);
    std::vector<std::thread> pool;
    const std::size_t chunk = (nq + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] { run_queries(t * chunk, std::min(nq, (t + 1) * chunk), part[t]); });
    for (auto& th : pool) th.join();
    for (const auto& p : part) total.merge(p);
  }
  if (opt.stats) opt.stats->merge(total);
  ops::detail::check_finite("prototype_aggregate", out);

  if (record) {
    tape.record("prototype_aggregate", {qn, kn, v}, out,
                [qn, kn, v, out, kept = std::move(kept), alphas = std::move(alphas), nq, heads, c, d,
                 inv_temp]() mutable {
                  auto g = out.grad();
                  const bool gq = qn.requires_grad(), gk = kn.requires_grad(), gv = v.requires_grad();
                  std::span<T> dq = gq ? qn.mutable_grad() : std::span<T>();
                  std::span<T> dk = gk ? kn.mutable_grad() : std::span<T>();
                  std::span<T> dv = gv ? v.mutable_grad() : std::span<T>();
                  auto qd = qn.data(), kd = kn.data(), vd = v.data();
                  std::vector<T> dalpha;
                  for (std::size_t i = 0; i < nq; ++i)
                    for (std::size_t h = 0; h < heads; ++h) {
                      const auto& idx = kept[i * heads + h];
                      const auto& a = alphas[i * heads + h];
                      const T* gh = g.data() + i * c + h * d;
                      dalpha.assign(idx.size(), T(0));
                      T mean = 0;
                      for (std::size_t j = 0; j < idx.size(); ++j) {
                        const std::size_t off = std::size_t(idx[j]) * c + h * d;
                        T acc = 0;
                        for (std::size_t e = 0; e < d; ++e) acc += gh[e] * vd[off + e];
                        dalpha[j] = acc;
                        mean += a[j] * acc;
                        if (gv)
                          for (std::size_t e = 0; e < d; ++e) dv[off + e] += a[j] * gh[e];
                      }
                      if (!gq && !gk) continue;
                      for (std::size_t j = 0; j < idx.size(); ++j) {
                        const T ds = a[j] * (dalpha[j] - mean) * inv_temp;
                        const std::size_t koff = std::size_t(idx[j]) * c + h * d, qoff = i * c + h * d;
                        for (std::size_t e = 0; e < d; ++e) {
                          if (gq) dq[qoff + e] += ds * kd[koff + e];
                          if (gk) dk[koff + e] += ds * qd[qoff + e];
                        }
                      }
                    }
                });
  }
  return out;
}

// Full-matrix attention over all keys. With a non-empty guidance span each
// query's softmax is restricted to its list (the masked regime); queries with an
// empty list attend to every key.
template <class T>
Tensor<T> dense_aggregate(Tape<T>& tape, const Tensor<T>& qn, const Tensor<T>& kn, const Tensor<T>& v,
                          std::size_t heads, T inv_temp, Guidance mask, AttentionStats* stats = nullptr) {
  const std::size_t nq = qn.rows(), nv = kn.rows(), c = qn.cols();
  if (kn.cols() != c || v.cols() != c || v.rows() != nv) throw ShapeError("dense_aggregate: shape mismatch");
  if (nv == 0) throw Error("dense_aggregate: empty key set");
  const std::size_t d = c / heads;
  const auto cands = detail::normalized_guidance(mask, nq, nv);
  std::vector<std::uint8_t> allowed;
  if (!mask.empty()) {
    allowed.assign(nq * nv, 0);
    for (std::size_t i = 0; i < nq; ++i) {
      if (cands[i].empty()) {
        std::fill_n(allowed.begin() + i * nv, nv, std::uint8_t(1));
      } else {
        for (auto j : cands[i]) allowed[i * nv + j] = 1;
      }
    }
  }
  AttentionStats st;
  std::vector<Tensor<T>> heads_out;
  for (std::size_t h = 0; h < heads; ++h) {
    auto ts = detail::Clock::now();
    auto qh = ops::slice_cols(tape, qn, h * d, (h + 1) * d);
    auto kh = ops::slice_cols(tape, kn, h * d, (h + 1) * d);
    auto logits = ops::scale(tape, ops::matmul(tape, qh, ops::transpose(tape, kh)), inv_temp);
    auto tp = detail::Clock::now();
    st.score_seconds += std::chrono::duration<double>(tp - ts).count();
    auto probs = allowed.empty() ? ops::softmax_lastdim(tape, logits)
                                 : ops::masked_softmax_lastdim<T>(tape, logits, allowed);
    auto vh = ops::slice_cols(tape, v, h * d, (h + 1) * d);
    heads_out.push_back(ops::matmul(tape, probs, vh));
    st.post_seconds += detail::seconds_since(tp);
  }
  st.score_macs = std::uint64_t(nq) * nv * c;
  st.agg_macs = std::uint64_t(nq) * nv * c;
  auto tc = detail::Clock::now();
  auto out = heads == 1 ? heads_out.front() : ops::concat_cols(tape, heads_out);
  st.post_seconds += detail::seconds_since(tc);
  if (stats) stats->merge(st);
  return out;
}

// Gated query update around an aggregate. `qp` is Proj_Q(q), shared with scoring.
template <class T>
Tensor<T> refine_query(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& qp, const Tensor<T>& v_agg,
                       const SpotCAParams<T>& p, bool train, ops::DropoutKey key = {}) {
  if (q.rows() != v_agg.rows() || q.cols() != v_agg.cols())
    throw ShapeError("refine_query: query and aggregate shapes differ");
  auto inter = p.ffn1(tape, ops::mul(tape, qp, v_agg));
  auto gated = ops::mul_scalar(tape, p.norm(tape, inter), p.gate);
  auto o = p.ffn2(tape, ops::add(tape, gated, v_agg));
  return ops::add(tape, q, ops::dropout(tape, o, p.cfg.dropout_p, train, key));
}

template <class T>
Tensor<T> refine_query(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& v_agg, const SpotCAParams<T>& p,
                       bool train, ops::DropoutKey key = {}) {
  return refine_query(tape, q, p.proj_q(tape, q), v_agg, p, train, key);
}

namespace detail {

template <class T>
struct Projected {
  Tensor<T> qp, qn, kn, v;
};

template <class T>
Projected<T> project(Tape<T>& tape, const Tensor<T>& queries, const Tensor<T>& keys, const SpotCAParams<T>& p,
                     AttentionStats* stats) {
  if (queries.cols() != p.cfg.channels || keys.cols() != p.cfg.channels)
    throw ShapeError("cross-attention: channel count does not match parameters");
  if (keys.rows() == 0) throw Error("cross-attention: empty voxel grid");
  auto t0 = Clock::now();
  Projected<T> r;
  r.qp = p.proj_q(tape, queries);
  r.qn = normalize_heads(tape, r.qp, p.cfg.heads);
  r.kn = normalize_heads(tape, p.proj_k(tape, keys), p.cfg.heads);
  r.v = p.cfg.value_projection ? p.proj_v(tape, keys) : keys;
  if (stats) stats->score_seconds += seconds_since(t0);
  return r;
}

}  // namespace detail

template <class T>
Tensor<T> grid_features(const SparseVoxelGrid& grid) {
  std::vector<T> data(grid.features().begin(), grid.features().end());
  return Tensor<T>({grid.size(), grid.channels()}, std::move(data));
}

// Prototype backend. `keys` holds the grid's feature rows (Nv x C).
template <class T>
Tensor<T> spot_cross_attention(Tape<T>& tape, const Tensor<T>& queries, const Tensor<T>& keys,
                               const SpotCAParams<T>& p, Guidance guidance, bool train,
                               const AttentionOptions<T>& opt = {}) {
  auto pr = detail::project(tape, queries, keys, p, opt.stats);
  auto v_agg = prototype_aggregate(tape, pr.qn, pr.kn, pr.v, p.cfg.heads, p.cfg.rho, T(p.cfg.inv_temperature()),
                                   guidance, opt);
  return refine_query(tape, queries, pr.qp, v_agg, p, train, opt.dropout);
}

template <class T>
Tensor<T> spot_cross_attention(Tape<T>& tape, const Tensor<T>& queries, const SparseVoxelGrid& grid,
                               const SpotCAParams<T>& p, Guidance guidance, bool train,
                               const AttentionOptions<T>& opt = {}) {
  return spot_cross_attention(tape, queries, grid_features<T>(grid), p, guidance, train, opt);
}

// Dense (empty mask) or masked reference; same gated pipeline as the prototype
// backend with selection replaced by a full softmax.
template <class T>
Tensor<T> dense_reference(Tape<T>& tape, const Tensor<T>& queries, const Tensor<T>& keys, const SpotCAParams<T>& p,
                          Guidance mask, bool train, const AttentionOptions<T>& opt = {}) {
  auto pr = detail::project(tape, queries, keys, p, opt.stats);
  auto v_agg = dense_aggregate(tape, pr.qn, pr.kn, pr.v, p.cfg.heads, T(p.cfg.inv_temperature()), mask, opt.stats);
  return refine_query(tape, queries, pr.qp, v_agg, p, train, opt.dropout);
}

template <class T>
Tensor<T> cross_attention(AttentionBackend backend, Tape<T>& tape, const Tensor<T>& queries, const Tensor<T>& keys,
                          const SpotCAParams<T>& p, Guidance guidance, bool train,
                          const AttentionOptions<T>& opt = {}) {
  switch (backend) {
    case AttentionBackend::kDense: return dense_reference(tape, queries, keys, p, Guidance{}, train, opt);
    case AttentionBackend::kMasked: return dense_reference(tape, queries, keys, p, guidance, train, opt);
    case AttentionBackend::kPrototype: break;
  }
  return spot_cross_attention(tape, queries, keys, p, guidance, train, opt);
}

}  // namespace spot
