#pragma once

#include <cmath>
#include <random>
#include <string>

#include "spot/optim.hpp"
#include "spot/rng.hpp"
#include "spot/tensor.hpp"

namespace spot::nn {

template <class T>
Tensor<T> uniform_init(Shape shape, double bound, rng::Engine& eng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> data(numel_of(shape));
  for (auto& v : data) v = T(u(eng));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <class T>
Tensor<T> normal_init(Shape shape, double stddev, rng::Engine& eng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<T> data(numel_of(shape));
  for (auto& v : data) v = T(n(eng));
  return Tensor<T>(std::move(shape), std::move(data));
}

// y = x W + b with W stored (in x out).
template <class T>
struct Linear {
  Tensor<T> weight, bias;

  static Linear create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                       rng::Engine& eng) {
    Linear l;
    l.weight = store.add(name + ".weight", uniform_init<T>({in, out}, 1.0 / std::sqrt(double(in)), eng));
    l.bias = store.add(name + ".bias", Tensor<T>::zeros({out}));
    return l;
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const { return ops::linear(tape, x, weight, bias); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain, bias;

  static LayerNorm create(ParamStore<T>& store, const std::string& name, std::size_t dim) {
    return {store.add(name + ".gain", Tensor<T>::filled({dim}, T(1))), store.add(name + ".bias", Tensor<T>::zeros({dim}))};
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const { return ops::layer_norm(tape, x, gain, bias); }
};

// linear -> relu -> linear
template <class T>
struct Mlp {
  Linear<T> fc1, fc2;

  static Mlp create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden,
                    std::size_t out, rng::Engine& eng) {
    return {Linear<T>::create(store, name + ".fc1", in, hidden, eng),
            Linear<T>::create(store, name + ".fc2", hidden, out, eng)};
  }

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return fc2(tape, ops::relu(tape, fc1(tape, x)));
  }
};

}  // namespace spot::nn
