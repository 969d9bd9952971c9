#pragma once

// Tensor-level building blocks of the update-time interventions. They live
// below the transformer so that its forward pass can route through them.

#include "cotlab/roles.hpp"
#include "cotlab/tensor.hpp"

namespace cotlab {

/// G[i][j] = 1 iff query i is on the answer side and key j is a prompt
/// position. Always a subset of the causal pairs.
EdgeMask answer_to_prompt_edges(const RoleSpans& spans, std::size_t length);
/// Same construction with CoT keys.
EdgeMask answer_to_cot_edges(const RoleSpans& spans, std::size_t length);

/// z~ = sg(G o z) + (1 - G) o z. Forward equals z; no gradient reaches z on G.
Var gradient_masked_attention(Var z, const EdgeMask& G);

/// Y = X W + b.
Var linear(Var x, Var w, Var b);

/// Y = (X o m) W + (X o (1 - m)) sg(W) + b, with m a row mask. Forward equals
/// X W + b; dW only accumulates from rows with m = 1; dX and db are unchanged.
Var cot_gradient_linear(Var x, Var w, Var b, const RowMask& m);

}  // namespace cotlab
