#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "tgk/autodiff.hpp"
#include "tgk/ops.hpp"

namespace tgk {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// Independent, reproducible stream per named component.
inline Rng component_rng(std::uint64_t seed, std::string_view name) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(name)), static_cast<std::uint32_t>(fnv1a(name) >> 32)};
  return Rng(seq);
}

using ParamList = std::vector<Parameter*>;

// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor fan_in_uniform(std::size_t fan_in, std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(rows, cols, -bound, bound, rng);
}

// y = x W + b, W: in x out, b: 1 x out.
struct Linear {
  Parameter weight;
  Parameter bias;
  bool has_bias = true;

  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, Rng& rng, bool with_bias = true)
      : weight(name + ".weight", fan_in_uniform(in, in, out, rng)), has_bias(with_bias) {
    bias = Parameter(name + ".bias", with_bias ? fan_in_uniform(in, 1, out, rng) : Tensor::zeros(1, out));
  }

  std::size_t in_dim() const { return weight.value.rows(); }
  std::size_t out_dim() const { return weight.value.cols(); }

  Var operator()(Tape& t, const Var& x) {
    if (x.cols() != in_dim())
      throw ShapeError(weight.name + ": input has " + std::to_string(x.cols()) + " columns, expected " +
                       std::to_string(in_dim()));
    Var y = ops::matmul(x, t.param(weight));
    return has_bias ? ops::add_row(y, t.param(bias)) : y;
  }

  void collect(ParamList& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }

  void set_identity() {
    weight.value = Tensor::zeros(in_dim(), out_dim());
    for (std::size_t i = 0; i < std::min(in_dim(), out_dim()); ++i) weight.value(i, i) = 1.0;
    bias.value.fill(0.0);
  }
  void set_zero() {
    weight.value.fill(0.0);
    bias.value.fill(0.0);
  }
};

// Two affine layers with ReLU in between.
struct Mlp2 {
  Linear first, second;

  Mlp2() = default;
  Mlp2(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
      : first(name + ".0", in, hidden, rng), second(name + ".1", hidden, out, rng) {}

  Var operator()(Tape& t, const Var& x) { return second(t, ops::relu(first(t, x))); }

  void collect(ParamList& out) {
    first.collect(out);
    second.collect(out);
  }
};

}  // namespace tgk
