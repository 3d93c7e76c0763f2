#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "spot/losses.hpp"
#include "spot/tensor.hpp"

namespace spot::testing {

using Td = Tensor<double>;
using Tp = Tape<double>;

inline Td random_tensor(Shape shape, std::mt19937_64& eng, double lo = -1.0, double hi = 1.0, bool rg = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(numel_of(shape));
  for (auto& x : d) x = u(eng);
  return Td(std::move(shape), std::move(d), rg);
}

// Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor).
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 0.0) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::max(std::sqrt(std::max(na, nb)), floor);
  return den == 0 ? std::sqrt(diff) : std::sqrt(diff) / den;
}

// Largest per-input relative error between tape gradients and central
// differences of the scalar f over every entry of `inputs`. Gradients whose
// norm is below `floor` (exactly zero in theory, e.g. shift-invariant biases)
// are compared absolutely.
inline double gradient_error(const std::function<Td(Tp&)>& f, const std::vector<Td>& inputs, double h = 1e-5,
                             double floor = 1e-6) {
  for (const auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  Tp tape;
  auto loss = f(tape);
  tape.backward(loss);
  double worst = 0;
  for (const auto& x : inputs) {
    std::vector<double> analytic(x.numel(), 0.0), numeric(x.numel());
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    auto d = x.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double keep = d[i];
      Tp t(false);
      d[i] = keep + h;
      const double up = f(t).item();
      d[i] = keep - h;
      const double dn = f(t).item();
      d[i] = keep;
      numeric[i] = (up - dn) / (2 * h);
    }
    worst = std::max(worst, rel_error(analytic, numeric, floor));
  }
  return worst;
}

// Relative error over the concatenation of every input's gradient.
inline double joint_gradient_error(const std::function<Td(Tp&)>& f, const std::vector<Td>& inputs, double h = 1e-6) {
  for (const auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  Tp tape;
  auto loss = f(tape);
  tape.backward(loss);
  std::vector<double> analytic, numeric;
  for (const auto& x : inputs) {
    for (std::size_t i = 0; i < x.numel(); ++i) analytic.push_back(x.has_grad() ? x.grad()[i] : 0.0);
    auto d = x.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double keep = d[i];
      Tp t(false);
      d[i] = keep + h;
      const double up = f(t).item();
      d[i] = keep - h;
      const double dn = f(t).item();
      d[i] = keep;
      numeric.push_back((up - dn) / (2 * h));
    }
  }
  return rel_error(analytic, numeric);
}

// Indices of the k largest scores by full sort: score descending, index ascending.
template <class T>
std::vector<std::uint32_t> sort_oracle_top(const std::vector<T>& s, std::size_t k) {
  std::vector<std::uint32_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) { return s[a] > s[b]; });
  idx.resize(k);
  return idx;
}

// Minimum total cost over all injections objects -> queries.
inline double brute_force_assignment(const std::vector<double>& cost, std::size_t nq, std::size_t nobj) {
  std::vector<std::size_t> q(nq);
  std::iota(q.begin(), q.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Enumerate ordered selections of nobj distinct queries via permutations of
  // all queries, taking the first nobj; duplicates are harmless.
  do {
    double s = 0;
    for (std::size_t o = 0; o < nobj; ++o) s += cost[q[o] * nobj + o];
    best = std::min(best, s);
  } while (std::next_permutation(q.begin(), q.end()));
  return best;
}

}  // namespace spot::testing
