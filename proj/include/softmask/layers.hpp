#pragma once

// Differentiable building blocks: embeddings, GRU / Bi-GRU, layer norm and the
// post-norm transformer encoder block. Each block is a plain parameter bundle
// plus free functions over it.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "softmask/common.hpp"
#include "softmask/numerics.hpp"

namespace softmask::layers {

using num::Tensor;

/// Ordered, named parameter list. Order is registration order and drives
/// checkpoint layout and optimizer state.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor) {
    for (const auto& [existing, _] : items_) {
      if (existing == name) {
        throw ContractError("duplicate parameter name: " + name);
      }
    }
    items_.emplace_back(std::move(name), std::move(tensor));
  }

  std::size_t size() const { return items_.size(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }

  const Tensor* find(std::string_view name) const {
    for (const auto& [n, t] : items_) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& [_, t] : items_) total += t.size();
    return total;
  }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

constexpr double kInitStd = 0.02;

inline Tensor normal_init(num::Shape shape, Rng& rng, double stddev = kInitStd) {
  std::vector<double> v(num::shape_size(shape));
  for (double& x : v) x = stddev * standard_normal(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor zeros_param(num::Shape shape) { return Tensor::zeros(std::move(shape), true); }

inline Tensor ones_param(num::Shape shape) {
  const std::size_t n = num::shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 1.0), true);
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

struct EmbeddingTables {
  Tensor word;      // [V x d]
  Tensor position;  // [L_max x d]
  Tensor segment;   // [2 x d]
  std::size_t mask_id = 0;

  static EmbeddingTables init(std::size_t vocab, std::size_t width, std::size_t max_len, std::size_t mask_id,
                              Rng& rng) {
    if (mask_id >= vocab) {
      throw ContractError("mask id " + std::to_string(mask_id) + " outside vocabulary of size " +
                          std::to_string(vocab));
    }
    return {normal_init({vocab, width}, rng), normal_init({max_len, width}, rng), normal_init({2, width}, rng),
            mask_id};
  }

  std::size_t width() const { return word.dim(1); }
  std::size_t max_len() const { return position.dim(0); }

  void register_into(ParameterSet& params, const std::string& prefix) const {
    params.add(prefix + "word", word);
    params.add(prefix + "position", position);
    params.add(prefix + "segment", segment);
  }
};

/// Row i = word[ids[i]] + position[i] + segment[0].
inline Tensor embed(std::span<const std::size_t> ids, const EmbeddingTables& tables) {
  if (ids.empty()) {
    throw ContractError("embed: empty sequence");
  }
  if (ids.size() > tables.max_len()) {
    throw ContractError("embed: sequence length " + std::to_string(ids.size()) + " exceeds maximum " +
                        std::to_string(tables.max_len()));
  }
  std::vector<std::size_t> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = i;
  const std::vector<std::size_t> segments(ids.size(), 0);
  Tensor words = num::gather_rows(tables.word, ids);
  Tensor pos = num::gather_rows(tables.position, positions);
  Tensor seg = num::gather_rows(tables.segment, segments);
  return num::add(num::add(words, pos), seg);
}

/// The [MASK] embedding at each of the first n positions.
inline Tensor mask_embedding(std::size_t n, const EmbeddingTables& tables) {
  const std::vector<std::size_t> ids(n, tables.mask_id);
  return embed(ids, tables);
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------
//
//   z  = sigmoid(x W_z + h U_z + b_z)          update gate
//   r  = sigmoid(x W_r + h U_r + b_r)          reset gate
//   h~ = tanh(x W_h + (r * h) U_h + b_h)       candidate, reset applied inside
//   h' = (1 - z) * h + z * h~

struct GruCellParams {
  Tensor w_z, w_r, w_h;  // [d x h]
  Tensor u_z, u_r, u_h;  // [h x h]
  Tensor b_z, b_r, b_h;  // [h]

  static GruCellParams init(std::size_t input, std::size_t hidden, Rng& rng) {
    GruCellParams p;
    p.w_z = normal_init({input, hidden}, rng);
    p.w_r = normal_init({input, hidden}, rng);
    p.w_h = normal_init({input, hidden}, rng);
    p.u_z = normal_init({hidden, hidden}, rng);
    p.u_r = normal_init({hidden, hidden}, rng);
    p.u_h = normal_init({hidden, hidden}, rng);
    p.b_z = zeros_param({hidden});
    p.b_r = zeros_param({hidden});
    p.b_h = zeros_param({hidden});
    p.validate();
    return p;
  }

  std::size_t input_size() const { return w_z.dim(0); }
  std::size_t hidden_size() const { return w_z.dim(1); }

  void validate() const {
    const std::size_t d = input_size(), h = hidden_size();
    for (const Tensor* w : {&w_z, &w_r, &w_h}) {
      if (w->shape() != num::Shape{d, h}) throw ShapeError("GRU input weight must be " + num::shape_str({d, h}));
    }
    for (const Tensor* u : {&u_z, &u_r, &u_h}) {
      if (u->shape() != num::Shape{h, h}) throw ShapeError("GRU hidden weight must be " + num::shape_str({h, h}));
    }
    for (const Tensor* b : {&b_z, &b_r, &b_h}) {
      if (b->shape() != num::Shape{h}) throw ShapeError("GRU bias must be " + num::shape_str({h}));
    }
  }

  void register_into(ParameterSet& params, const std::string& prefix) const {
    params.add(prefix + "w_z", w_z);
    params.add(prefix + "w_r", w_r);
    params.add(prefix + "w_h", w_h);
    params.add(prefix + "u_z", u_z);
    params.add(prefix + "u_r", u_r);
    params.add(prefix + "u_h", u_h);
    params.add(prefix + "b_z", b_z);
    params.add(prefix + "b_r", b_r);
    params.add(prefix + "b_h", b_h);
  }
};

namespace detail {

// One recurrence step with the input projections (x W + b) precomputed, all [1 x h].
inline Tensor gru_step_projected(const Tensor& prev, const Tensor& xz, const Tensor& xr, const Tensor& xh,
                                 const GruCellParams& p) {
  Tensor z = num::sigmoid(num::add(xz, num::matmul(prev, p.u_z)));
  Tensor r = num::sigmoid(num::add(xr, num::matmul(prev, p.u_r)));
  Tensor cand = num::tanh(num::add(xh, num::matmul(num::mul(r, prev), p.u_h)));
  return num::add(prev, num::mul(z, num::sub(cand, prev)));
}

struct GruProjections {
  Tensor z, r, h;  // [n x h]
};

inline GruProjections project_inputs(const Tensor& inputs, const GruCellParams& p) {
  return {num::add(num::matmul(inputs, p.w_z), p.b_z), num::add(num::matmul(inputs, p.w_r), p.b_r),
          num::add(num::matmul(inputs, p.w_h), p.b_h)};
}

inline std::vector<Tensor> gru_sweep(const Tensor& inputs, const GruCellParams& p, bool reverse) {
  const std::size_t n = inputs.dim(0);
  const auto proj = project_inputs(inputs, p);
  std::vector<Tensor> states(n);
  Tensor h = Tensor::zeros({1, p.hidden_size()});
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t i = reverse ? n - 1 - step : step;
    h = gru_step_projected(h, num::slice(proj.z, 0, i, i + 1), num::slice(proj.r, 0, i, i + 1),
                           num::slice(proj.h, 0, i, i + 1), p);
    states[i] = h;
  }
  return states;
}

}  // namespace detail

/// Single GRU step: prev_hidden [h], input [d] -> next hidden [h].
inline Tensor gru_step(const Tensor& prev_hidden, const Tensor& input, const GruCellParams& params) {
  const std::size_t d = params.input_size(), h = params.hidden_size();
  if (prev_hidden.size() != h || input.size() != d) {
    throw ShapeError("gru_step: expected hidden " + num::shape_str({h}) + " and input " + num::shape_str({d}) +
                     ", got " + num::shape_str(prev_hidden.shape()) + " and " + num::shape_str(input.shape()));
  }
  Tensor x = num::reshape(input, {1, d});
  Tensor prev = num::reshape(prev_hidden, {1, h});
  const auto proj = detail::project_inputs(x, params);
  return num::reshape(detail::gru_step_projected(prev, proj.z, proj.r, proj.h, params), {h});
}

/// Bidirectional GRU over inputs [n x d]; row i is [forward_i ; backward_i], width 2h.
/// Both directions start from zero hidden state.
inline Tensor bi_gru(const Tensor& inputs, const GruCellParams& fwd, const GruCellParams& bwd) {
  if (inputs.rank() != 2 || inputs.dim(0) == 0) {
    throw ContractError("bi_gru: expected a non-empty [n x d] sequence");
  }
  if (inputs.dim(1) != fwd.input_size() || inputs.dim(1) != bwd.input_size()) {
    throw ShapeError("bi_gru: input width " + std::to_string(inputs.dim(1)) + " does not match GRU input sizes");
  }
  Tensor forward = num::concat(detail::gru_sweep(inputs, fwd, false), 0);
  Tensor backward = num::concat(detail::gru_sweep(inputs, bwd, true), 0);
  return num::concat({forward, backward}, 1);
}

// ---------------------------------------------------------------------------
// Layer norm and encoder block
// ---------------------------------------------------------------------------

constexpr double kLayerNormEps = 1e-12;

/// Per-row zero mean / unit variance, then gain and bias. Requires width >= 2.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() != 2 || x.dim(1) < 2) {
    throw ContractError("layer_norm: needs an [n x d] input with d >= 2, got " + num::shape_str(x.shape()));
  }
  Tensor normalized = num::normalize_rows(x, kLayerNormEps);
  return num::add(num::mul(normalized, num::broadcast_rows(gain, x.dim(0))), bias);
}

struct AttentionHead {
  Tensor w_q, w_k, w_v;  // [d x d/heads]
};

struct EncoderBlockParams {
  std::vector<AttentionHead> heads;
  Tensor w_o;             // [d x d]
  Tensor w_1, b_1;        // [d x f], [f]
  Tensor w_2, b_2;        // [f x d], [d]
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;

  static EncoderBlockParams init(std::size_t width, std::size_t num_heads, std::size_t ffn, Rng& rng) {
    if (num_heads == 0 || width % num_heads != 0) {
      throw ContractError("head count " + std::to_string(num_heads) + " must divide width " + std::to_string(width));
    }
    if (ffn < width) {
      throw ContractError("FFN width " + std::to_string(ffn) + " must be at least model width " +
                          std::to_string(width));
    }
    const std::size_t dk = width / num_heads;
    EncoderBlockParams p;
    for (std::size_t h = 0; h < num_heads; ++h) {
      AttentionHead head;
      head.w_q = normal_init({width, dk}, rng);
      head.w_k = normal_init({width, dk}, rng);
      head.w_v = normal_init({width, dk}, rng);
      p.heads.push_back(std::move(head));
    }
    p.w_o = normal_init({width, width}, rng);
    p.w_1 = normal_init({width, ffn}, rng);
    p.b_1 = zeros_param({ffn});
    p.w_2 = normal_init({ffn, width}, rng);
    p.b_2 = zeros_param({width});
    p.ln1_gain = ones_param({width});
    p.ln1_bias = zeros_param({width});
    p.ln2_gain = ones_param({width});
    p.ln2_bias = zeros_param({width});
    return p;
  }

  std::size_t width() const { return w_o.dim(0); }
  std::size_t head_width() const { return width() / heads.size(); }

  void register_into(ParameterSet& params, const std::string& prefix) const {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const std::string hp = prefix + "head" + std::to_string(h) + ".";
      params.add(hp + "w_q", heads[h].w_q);
      params.add(hp + "w_k", heads[h].w_k);
      params.add(hp + "w_v", heads[h].w_v);
    }
    params.add(prefix + "w_o", w_o);
    params.add(prefix + "w_1", w_1);
    params.add(prefix + "b_1", b_1);
    params.add(prefix + "w_2", w_2);
    params.add(prefix + "b_2", b_2);
    params.add(prefix + "ln1_gain", ln1_gain);
    params.add(prefix + "ln1_bias", ln1_bias);
    params.add(prefix + "ln2_gain", ln2_gain);
    params.add(prefix + "ln2_bias", ln2_bias);
  }
};

/// Scaled dot-product attention weights of one head: softmax(Q K^T / sqrt(d_k)), [n x n].
inline Tensor attention_weights(const Tensor& x, const AttentionHead& head) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head.w_q.dim(1)));
  Tensor q = num::matmul(x, head.w_q);
  Tensor k = num::matmul(x, head.w_k);
  return num::softmax(num::scale(num::matmul(q, num::transpose(k)), scale), 1);
}

inline Tensor multi_head_attention(const Tensor& x, const EncoderBlockParams& p) {
  std::vector<Tensor> outputs;
  outputs.reserve(p.heads.size());
  for (const AttentionHead& head : p.heads) {
    outputs.push_back(num::matmul(attention_weights(x, head), num::matmul(x, head.w_v)));
  }
  Tensor joined = outputs.size() == 1 ? outputs.front() : num::concat(outputs, 1);
  return num::matmul(joined, p.w_o);
}

/// max(0, x W_1 + b_1) W_2 + b_2
inline Tensor feed_forward(const Tensor& x, const EncoderBlockParams& p) {
  return num::add(num::matmul(num::relu(num::add(num::matmul(x, p.w_1), p.b_1)), p.w_2), p.b_2);
}

/// Post-norm block: y = LN(x + MHA(x)); out = LN(y + FFN(y)).
inline Tensor encoder_block(const Tensor& x, const EncoderBlockParams& p) {
  if (x.rank() != 2 || x.dim(1) != p.width()) {
    throw ShapeError("encoder_block: expected [n x " + std::to_string(p.width()) + "], got " +
                     num::shape_str(x.shape()));
  }
  Tensor y = layer_norm(num::add(x, multi_head_attention(x, p)), p.ln1_gain, p.ln1_bias);
  return layer_norm(num::add(y, feed_forward(y, p)), p.ln2_gain, p.ln2_bias);
}

}  // namespace softmask::layers
