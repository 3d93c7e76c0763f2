#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "spot/error.hpp"
#include "spot/tensor.hpp"

namespace spot {

// Ordered collection of named trainable leaves.
template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw Error("duplicate parameter name: " + name);
    value.set_requires_grad(true);
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(value));
    return params_.back().second;
  }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return params_[it->second].second;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return params_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

namespace optim {

namespace detail {
template <class T>
void require_grad(const std::string& name, const Tensor<T>& p, bool allow_missing) {
  if (!p.has_grad() && !allow_missing) throw Error("optimizer: missing gradient for " + name);
}
}  // namespace detail

// Parameters that never received a gradient are an error unless
// `allow_missing` (parts of a model may be unused in a given step).
template <class T>
void sgd_step(ParamStore<T>& params, double lr, bool allow_missing = false) {
  for (auto& [name, p] : params) {
    detail::require_grad(name, p, allow_missing);
    if (!p.has_grad()) continue;
    auto x = p.mutable_data();
    auto g = p.grad();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= T(lr) * g[i];
  }
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay: x <- x - lr*wd*x - lr * m_hat / (sqrt(v_hat) + eps).
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }

  void step(ParamStore<T>& params, bool allow_missing = false) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (auto& [name, p] : params) {
      detail::require_grad(name, p, allow_missing);
      auto& st = state_[name];
      auto x = p.mutable_data();
      if (st.m.empty()) {
        st.m.assign(x.size(), 0.0);
        st.v.assign(x.size(), 0.0);
      }
      auto g = p.grad();
      const bool has = p.has_grad();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double gi = has ? double(g[i]) : 0.0;
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mh = st.m[i] / bc1, vh = st.v[i] / bc2;
        double xi = double(x[i]);
        xi -= cfg_.lr * cfg_.weight_decay * xi;
        xi -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        x[i] = T(xi);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Functional single-step form for callers that keep no optimizer object.
template <class T>
void adamw_step(ParamStore<T>& params, AdamW<T>& opt, bool allow_missing = false) {
  opt.step(params, allow_missing);
}

}  // namespace optim

// Checkpoint file: "SPOTCKPT", then until EOF per parameter:
// u32 name_len, name bytes (UTF-8), u32 rank, rank x u32 dims, numel x f32.
// 64-bit models are rounded to f32 on save.
namespace ckpt {

inline constexpr char kMagic[8] = {'S', 'P', 'O', 'T', 'C', 'K', 'P', 'T'};

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_f32(std::ostream& os, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(os, u);
}
inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  return true;
}
}  // namespace detail

template <class T>
void save(const ParamStore<T>& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot open for writing: " + path);
  os.write(kMagic, 8);
  for (const auto& [name, p] : params) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(p.shape().size()));
    for (auto d : p.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (T v : p.data()) detail::put_f32(os, static_cast<float>(v));
  }
  if (!os) throw FormatError(FormatError::Kind::kIo, "write failed: " + path);
}

// Loads into an existing model definition; every stored shape must match and
// every model parameter must be present.
template <class T>
void load(ParamStore<T>& params, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::kIo, "cannot open checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError(FormatError::Kind::kBadHeader, "bad checkpoint magic");
  std::map<std::string, bool> seen;
  while (is.peek() != std::char_traits<char>::eof()) {
    std::uint32_t len = 0, rank = 0;
    if (!detail::get_u32(is, len) || len > (1u << 16))
      throw FormatError(FormatError::Kind::kTruncated, "truncated parameter name");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError(FormatError::Kind::kTruncated, "truncated parameter name");
    if (!detail::get_u32(is, rank) || rank > 8) throw FormatError(FormatError::Kind::kTruncated, "truncated rank");
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t v;
      if (!detail::get_u32(is, v)) throw FormatError(FormatError::Kind::kTruncated, "truncated shape");
      d = v;
    }
    if (!params.contains(name)) throw FormatError(FormatError::Kind::kInvalid, "unknown parameter in checkpoint: " + name);
    auto& p = params.get(name);
    if (p.shape() != shape)
      throw FormatError(FormatError::Kind::kCountMismatch,
                        "shape mismatch for " + name + ": " + shape_str(shape) + " vs model " + shape_str(p.shape()));
    auto x = p.mutable_data();
    for (auto& v : x) {
      std::uint32_t u;
      if (!detail::get_u32(is, u)) throw FormatError(FormatError::Kind::kTruncated, "truncated data for " + name);
      float f;
      std::memcpy(&f, &u, 4);
      v = static_cast<T>(f);
    }
    seen[name] = true;
  }
  for (const auto& [name, _] : params)
    if (!seen.count(name)) throw FormatError(FormatError::Kind::kCountMismatch, "checkpoint lacks parameter " + name);
}

}  // namespace ckpt

}  // namespace spot
