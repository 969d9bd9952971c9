#include "cotlab/intervention_ops.hpp"

namespace cotlab {

namespace {

EdgeMask answer_to_span_edges(const RoleSpans& spans, std::size_t length, Span keys) {
  EdgeMask g(length, length, false);
  const Span queries = answer_query_rows(spans);
  for (std::size_t i = queries.begin; i < std::min(queries.end, length); ++i)
    for (std::size_t j = keys.begin; j < std::min(keys.end, length); ++j)
      if (j <= i) g.set(i, j, true);
  return g;
}

}  // namespace

EdgeMask answer_to_prompt_edges(const RoleSpans& spans, std::size_t length) {
  return answer_to_span_edges(spans, length, spans.prompt);
}

EdgeMask answer_to_cot_edges(const RoleSpans& spans, std::size_t length) {
  return answer_to_span_edges(spans, length, spans.cot);
}

Var gradient_masked_attention(Var z, const EdgeMask& G) {
  const Tensor& zv = z.value();
  if (G.rows != zv.rows() || G.cols != zv.cols()) {
    throw ShapeError("gradient_masked_attention: edge set does not match " + zv.shape_str());
  }
  Tensor on(zv.shape(), 0.0);
  Tensor off(zv.shape(), 1.0);
  for (std::size_t i = 0; i < G.bits.size(); ++i) {
    if (G.bits[i]) {
      on[i] = 1.0;
      off[i] = 0.0;
    }
  }
  return add(stop_gradient(mul_const(z, on)), mul_const(z, off));
}

Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

Var cot_gradient_linear(Var x, Var w, Var b, const RowMask& m) {
  RowMask not_m(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) not_m[i] = !m[i];
  Var live = matmul(mask_rows(x, m), w);
  Var frozen = matmul(mask_rows(x, not_m), stop_gradient(w));
  return add_bias(add(live, frozen), b);
}

}  // namespace cotlab
