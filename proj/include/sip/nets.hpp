#pragma once

#include <string>
#include <vector>

#include "sip/optim.hpp"
#include "sip/rng.hpp"
#include "sip/tape.hpp"

namespace sip {

enum class Activation { kTanh, kRelu, kLeakyRelu };

Activation activation_from_string(const std::string& s);
const char* to_string(Activation a);

Var apply_activation(Tape& t, Var h, Activation a);  // leaky slope fixed at 0.2

/// Register "prefix.w{l}" / "prefix.b{l}" for a feed-forward stack
/// widths[0] -> ... -> widths.back(). Weights start N(0, 1/fan_in), biases 0.
void init_mlp_params(ParamStore& store, const std::string& prefix,
                     const std::vector<int>& widths, Rng& rng);

/// Shared-weight forward pass for a 2D batch [B, widths[0]] -> [B, widths.back()];
/// the activation is applied to hidden layers only.
Var mlp_forward(Tape& t, const VarMap& v, const std::string& prefix,
                const std::vector<int>& widths, Var x, Activation act);

/// Inverse of softplus: returns r with log(1 + e^r) = y (y > 0).
double softplus_inverse(double y);

}  // namespace sip
