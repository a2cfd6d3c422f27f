#pragma once

#include <stdexcept>

#include "coopadapt/autograd.hpp"

namespace coopadapt::grl {

// Gradient reversal factor; strictly negative.
struct GrlFactor {
  double gamma;

  explicit GrlFactor(double g) : gamma(g) {
    if (!(g < 0.0)) throw std::invalid_argument("GrlFactor: gamma must be strictly negative");
  }
};

// Identity in the forward pass; the backward pass multiplies the upstream
// gradient by gamma. The returned tensor is bit-identical to the input.
inline ad::Value grl_forward(const ad::Value& x, const GrlFactor& f) {
  return ad::grl(x, f.gamma);
}

// The raw backward rule, exposed for direct use and testing.
inline ad::Tensor grl_backward(const ad::Tensor& upstream, const GrlFactor& f) {
  ad::Tensor out = upstream;
  for (auto& v : out.data) v *= f.gamma;
  return out;
}

}  // namespace coopadapt::grl
