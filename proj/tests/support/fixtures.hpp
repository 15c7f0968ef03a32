#pragma once

// Randomized parameters for oracle and gradient tests. Weights are scaled well
// above the 0.02 init so activations are far from the near-linear regime.

#include "softmask/layers.hpp"

namespace softmask::testing {

inline void rescale(num::Tensor t, double factor) {
  for (double& v : t.data()) v *= factor;
}

inline layers::GruCellParams random_gru(std::size_t d, std::size_t h, Rng& rng) {
  layers::GruCellParams p = layers::GruCellParams::init(d, h, rng);
  for (num::Tensor* t : {&p.w_z, &p.w_r, &p.w_h, &p.u_z, &p.u_r, &p.u_h}) rescale(*t, 25.0);
  for (num::Tensor* b : {&p.b_z, &p.b_r, &p.b_h}) {
    for (double& v : b->data()) v = 0.3 * standard_normal(rng);
  }
  return p;
}

inline layers::EncoderBlockParams random_block(std::size_t d, std::size_t heads, std::size_t ffn, Rng& rng) {
  layers::EncoderBlockParams p = layers::EncoderBlockParams::init(d, heads, ffn, rng);
  for (auto& h : p.heads) {
    for (num::Tensor* t : {&h.w_q, &h.w_k, &h.w_v}) rescale(*t, 25.0);
  }
  for (num::Tensor* t : {&p.w_o, &p.w_1, &p.w_2}) rescale(*t, 25.0);
  for (num::Tensor* t : {&p.b_1, &p.b_2, &p.ln1_bias, &p.ln2_bias, &p.ln1_gain, &p.ln2_gain}) {
    for (double& v : t->data()) v += 0.2 * standard_normal(rng);
  }
  return p;
}

}  // namespace softmask::testing
