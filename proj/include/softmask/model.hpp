#pragma once

// Detector (Bi-GRU + sigmoid head), soft-masking connector, and transformer
// corrector, with the joint loss and the masking-mode variants used for ablations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "softmask/common.hpp"
#include "softmask/datagen.hpp"
#include "softmask/layers.hpp"
#include "softmask/numerics.hpp"
#include "softmask/text.hpp"

namespace softmask::model {

using layers::ParameterSet;
using num::Tensor;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class MaskKind { Soft, Hard, Random, NoDetector, ForceOracle };

struct MaskingMode {
  MaskKind kind = MaskKind::Soft;
  double threshold = 0.5;  // Hard only

  static MaskingMode soft() { return {MaskKind::Soft, 0.5}; }
  static MaskingMode hard(double t) { return {MaskKind::Hard, t}; }
  static MaskingMode random() { return {MaskKind::Random, 0.5}; }
  static MaskingMode no_detector() { return {MaskKind::NoDetector, 0.5}; }
  static MaskingMode force_oracle() { return {MaskKind::ForceOracle, 0.5}; }

  void validate() const {
    if (kind == MaskKind::Hard && !(threshold > 0.0 && threshold < 1.0)) {
      throw ContractError("hard masking threshold must lie in (0, 1), got " + std::to_string(threshold));
    }
  }

  /// Whether the detector's probabilities influence the corrector or the loss.
  bool uses_detector() const { return kind != MaskKind::NoDetector && kind != MaskKind::ForceOracle; }

  friend bool operator==(const MaskingMode& a, const MaskingMode& b) {
    return a.kind == b.kind && (a.kind != MaskKind::Hard || a.threshold == b.threshold);
  }
};

inline std::string mode_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::Soft: return "soft";
    case MaskKind::Hard: return "hard";
    case MaskKind::Random: return "random";
    case MaskKind::NoDetector: return "none";
    case MaskKind::ForceOracle: return "force";
  }
  return "?";
}

inline MaskKind parse_mode(const std::string& name) {
  for (MaskKind k : {MaskKind::Soft, MaskKind::Hard, MaskKind::Random, MaskKind::NoDetector, MaskKind::ForceOracle}) {
    if (mode_name(k) == name) return k;
  }
  throw ContractError("unknown masking mode '" + name + "' (expected soft, hard, random, none or force)");
}

/// Short human-readable label, e.g. "soft", "hard(0.9)".
inline std::string mode_label(const MaskingMode& mode) {
  if (mode.kind != MaskKind::Hard) return mode_name(mode.kind);
  std::ostringstream s;
  s << "hard(" << mode.threshold << ")";
  return s.str();
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t width = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t gru_hidden = 64;
  std::size_t max_len = 64;
  double lambda = 0.8;
  MaskingMode mode;
  bool residual = true;

  void validate() const {
    if (vocab_size <= Vocabulary::kNumSpecial) {
      throw ContractError("vocab_size must exceed the " + std::to_string(Vocabulary::kNumSpecial) +
                          " reserved ids, got " + std::to_string(vocab_size));
    }
    if (width < 2) throw ContractError("width must be at least 2");
    if (heads == 0 || width % heads != 0) {
      throw ContractError("heads (" + std::to_string(heads) + ") must divide width (" + std::to_string(width) + ")");
    }
    if (layers > 0 && ffn < width) throw ContractError("ffn must be at least width");
    if (gru_hidden == 0) throw ContractError("gru_hidden must be positive");
    if (max_len == 0) throw ContractError("max_len must be positive");
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw ContractError("lambda must lie in [0, 1], got " + std::to_string(lambda));
    }
    mode.validate();
  }

  /// True when two configs describe the same parameter shapes.
  bool same_architecture(const ModelConfig& o) const {
    return vocab_size == o.vocab_size && width == o.width && layers == o.layers && heads == o.heads &&
           ffn == o.ffn && gru_hidden == o.gru_hidden && max_len == o.max_len;
  }
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["width"] = c.width;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["ffn"] = c.ffn;
  j["gru_hidden"] = c.gru_hidden;
  j["max_len"] = c.max_len;
  j["lambda"] = c.lambda;
  j["mode"] = mode_name(c.mode.kind);
  j["threshold"] = c.mode.threshold;
  j["residual"] = c.residual;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn = j.at("ffn").get<std::size_t>();
  c.gru_hidden = j.at("gru_hidden").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.lambda = j.at("lambda").get<double>();
  c.mode.kind = parse_mode(j.at("mode").get<std::string>());
  c.mode.threshold = j.at("threshold").get<double>();
  c.residual = j.at("residual").get<bool>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct DetectorParams {
  layers::GruCellParams forward;
  layers::GruCellParams backward;
  Tensor w_d;  // [2h x 1]
  Tensor b_d;  // [1]
};

struct ModelParams {
  layers::EmbeddingTables embedding;
  DetectorParams detector;
  std::vector<layers::EncoderBlockParams> encoder;
  Tensor w_out;  // [d x V]
  Tensor b_out;  // [V]

  static ModelParams init(const ModelConfig& c, Rng& rng) {
    c.validate();
    ModelParams p;
    p.embedding = layers::EmbeddingTables::init(c.vocab_size, c.width, c.max_len, Vocabulary::kMask, rng);
    p.detector.forward = layers::GruCellParams::init(c.width, c.gru_hidden, rng);
    p.detector.backward = layers::GruCellParams::init(c.width, c.gru_hidden, rng);
    p.detector.w_d = layers::normal_init({2 * c.gru_hidden, 1}, rng);
    p.detector.b_d = layers::zeros_param({1});
    for (std::size_t l = 0; l < c.layers; ++l) {
      p.encoder.push_back(layers::EncoderBlockParams::init(c.width, c.heads, c.ffn, rng));
    }
    p.w_out = layers::normal_init({c.width, c.vocab_size}, rng);
    p.b_out = layers::zeros_param({c.vocab_size});
    return p;
  }

  /// Named view in a fixed order; tensors share storage with this struct.
  ParameterSet named() const {
    ParameterSet set;
    embedding.register_into(set, "embedding.");
    detector.forward.register_into(set, "detector.gru_fwd.");
    detector.backward.register_into(set, "detector.gru_bwd.");
    set.add("detector.w_d", detector.w_d);
    set.add("detector.b_d", detector.b_d);
    for (std::size_t l = 0; l < encoder.size(); ++l) {
      encoder[l].register_into(set, "encoder.layer" + std::to_string(l) + ".");
    }
    set.add("output.w", w_out);
    set.add("output.b", b_out);
    return set;
  }
};

inline bool is_detector_parameter(std::string_view name) { return name.starts_with("detector."); }

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Detector logits z_i = W_d h_i + b_d over the Bi-GRU states, shape [n].
inline Tensor detection_logits(const Tensor& embeddings, const DetectorParams& d) {
  const std::size_t two_h = d.w_d.dim(0);
  const std::size_t h = d.forward.hidden_size();
  if (two_h != 2 * h || d.backward.hidden_size() != h) {
    throw ShapeError("detector head expects width " + std::to_string(two_h) + " but the Bi-GRU emits " +
                     std::to_string(2 * h));
  }
  Tensor states = layers::bi_gru(embeddings, d.forward, d.backward);
  Tensor z = num::add(num::matmul(states, d.w_d), d.b_d);
  return num::reshape(z, {embeddings.dim(0)});
}

/// Error probabilities p_i = sigmoid(z_i), shape [n].
inline Tensor detect(const Tensor& embeddings, const DetectorParams& d) {
  return num::sigmoid(detection_logits(embeddings, d));
}

/// e'_i = p_i * e_mask_i + (1 - p_i) * e_i, row by row.
inline Tensor soft_mask(const Tensor& e, const Tensor& e_mask, const Tensor& p) {
  if (e.shape() != e_mask.shape() || e.rank() != 2 || p.rank() != 1 || p.dim(0) != e.dim(0)) {
    throw ShapeError("soft_mask: shapes " + num::shape_str(e.shape()) + ", " + num::shape_str(e_mask.shape()) +
                     ", " + num::shape_str(p.shape()) + " do not agree");
  }
  for (double v : p.values()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError("soft_mask: probability " + std::to_string(v) + " outside [0, 1]");
    }
  }
  const std::size_t d = e.dim(1);
  Tensor keep = num::add_scalar(num::scale(p, -1.0), 1.0);
  return num::add(num::mul(num::broadcast_cols(p, d), e_mask), num::mul(num::broadcast_cols(keep, d), e));
}

/// Encoder stack over e', optional residual with e, then the output projection: [n x V].
inline Tensor correct(const Tensor& e_prime, const Tensor& e, const ModelParams& params, bool residual) {
  if (e_prime.shape() != e.shape()) {
    throw ShapeError("correct: e' " + num::shape_str(e_prime.shape()) + " and e " + num::shape_str(e.shape()) +
                     " differ");
  }
  Tensor h = e_prime;
  for (const auto& block : params.encoder) h = layers::encoder_block(h, block);
  if (residual) h = num::add(h, e);
  return num::add(num::matmul(h, params.w_out), params.b_out);
}

struct ForwardOptions {
  const std::vector<int>* gold_labels = nullptr;  // required by ForceOracle
  std::uint64_t noise_seed = 0;                    // Random mode draws
  bool with_detector = true;                       // may be skipped when the mode ignores it
};

struct ModelOutput {
  Tensor embeddings;              // e, [n x d]
  Tensor detection_logits;        // z, [n]; undefined when the detector was skipped
  Tensor error_probs;             // p = sigmoid(z), [n]; undefined when skipped
  Tensor mask_weights;            // weight actually applied to e_mask, [n]
  Tensor soft_masked_embeddings;  // e', [n x d]
  Tensor correction_logits;       // [n x V]
};

struct LossTerms {
  Tensor total;       // lambda * correction + (1 - lambda) * detection (mode dependent)
  Tensor detection;   // L_d
  Tensor correction;  // L_c
};

struct Prediction {
  TokenIds output;
  std::vector<double> error_probs;
  std::vector<double> mask_weights;
};

class SoftMaskedModel {
 public:
  SoftMaskedModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    Rng rng(derive_seed(seed, 0x1417u));
    params_ = ModelParams::init(config_, rng);
  }

  SoftMaskedModel(ModelConfig config, ModelParams params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }
  ParameterSet parameters() const { return params_.named(); }

  /// Deep copy of the parameters, optionally under a different (shape-compatible) config.
  SoftMaskedModel clone(std::optional<ModelConfig> config = std::nullopt) const {
    ModelConfig c = config.value_or(config_);
    if (!c.same_architecture(config_)) {
      throw ContractError("clone: configuration changes parameter shapes");
    }
    SoftMaskedModel copy(c, 0);
    copy.copy_values_from(*this);
    return copy;
  }

  void copy_values_from(const SoftMaskedModel& other) {
    const ParameterSet src = other.parameters();
    ParameterSet dst = parameters();
    auto s = src.begin();
    for (auto& [name, t] : dst) {
      if (s == src.end() || s->first != name || s->second.shape() != t.shape()) {
        throw ContractError("copy_values_from: parameter layout differs at " + name);
      }
      std::copy(s->second.values().begin(), s->second.values().end(), t.data().begin());
      ++s;
    }
  }

  void set_mode(const MaskingMode& mode) {
    mode.validate();
    config_.mode = mode;
  }
  void set_lambda(double lambda) {
    ModelConfig c = config_;
    c.lambda = lambda;
    c.validate();
    config_ = c;
  }
  void set_residual(bool residual) { config_.residual = residual; }

  ModelOutput forward(const TokenIds& ids, const ForwardOptions& options = {}) const {
    if (ids.empty()) throw ContractError("forward: empty sequence");
    if (ids.size() > config_.max_len) {
      throw ContractError("forward: sequence length " + std::to_string(ids.size()) + " exceeds max_len " +
                          std::to_string(config_.max_len));
    }
    const std::size_t n = ids.size();
    const MaskingMode& mode = config_.mode;
    if (mode.kind == MaskKind::ForceOracle) {
      if (options.gold_labels == nullptr) {
        throw ContractError("forward: ForceOracle mode needs gold error labels");
      }
      if (options.gold_labels->size() != n) {
        throw ContractError("forward: gold labels length differs from input length");
      }
    }
    ModelOutput out;
    out.embeddings = layers::embed(ids, params_.embedding);
    if (options.with_detector || mode.uses_detector()) {
      out.detection_logits = detection_logits(out.embeddings, params_.detector);
      out.error_probs = num::sigmoid(out.detection_logits);
    }
    std::vector<double> weights(n, 0.0);
    switch (mode.kind) {
      case MaskKind::Soft:
        out.mask_weights = out.error_probs;
        break;
      case MaskKind::Hard:
        for (std::size_t i = 0; i < n; ++i) weights[i] = out.error_probs(i) > mode.threshold ? 1.0 : 0.0;
        break;
      case MaskKind::Random: {
        Rng rng(options.noise_seed);
        for (double& w : weights) w = uniform01(rng);
        break;
      }
      case MaskKind::NoDetector:
        break;
      case MaskKind::ForceOracle:
        for (std::size_t i = 0; i < n; ++i) weights[i] = (*options.gold_labels)[i] != 0 ? 1.0 : 0.0;
        break;
    }
    if (!out.mask_weights.defined()) out.mask_weights = Tensor::vector(std::move(weights));
    if (mode.kind == MaskKind::NoDetector) {
      out.soft_masked_embeddings = out.embeddings;
    } else {
      out.soft_masked_embeddings =
          soft_mask(out.embeddings, layers::mask_embedding(n, params_.embedding), out.mask_weights);
    }
    out.correction_logits = correct(out.soft_masked_embeddings, out.embeddings, params_, config_.residual);
    return out;
  }

  /// Joint loss with the configured lambda. Modes without a detector train on
  /// the correction loss alone.
  LossTerms loss(const ModelOutput& out, const data::ExamplePair& pair) const {
    return loss(out, pair, config_.mode.uses_detector() ? config_.lambda : 1.0);
  }

  LossTerms loss(const ModelOutput& out, const data::ExamplePair& pair, double lambda) const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw ContractError("lambda must lie in [0, 1], got " + std::to_string(lambda));
    }
    const std::size_t n = out.correction_logits.dim(0);
    if (pair.size() != n) {
      throw ContractError("loss: gold length " + std::to_string(pair.size()) + " differs from output length " +
                          std::to_string(n));
    }
    LossTerms terms;
    terms.correction = correction_loss(out.correction_logits, pair.y());
    terms.detection =
        out.detection_logits.defined() ? detection_loss(out.detection_logits, pair.labels()) : Tensor::scalar(0.0);
    if (lambda == 1.0) {
      terms.total = terms.correction;
    } else if (lambda == 0.0) {
      terms.total = terms.detection;
    } else {
      terms.total = num::add(num::scale(terms.correction, lambda), num::scale(terms.detection, 1.0 - lambda));
    }
    return terms;
  }

  /// Argmax correction per position over ordinary characters; ties go to the
  /// lowest id. ForceOracle only rewrites gold error positions and never keeps
  /// the observed character there.
  Prediction predict(const TokenIds& ids, const ForwardOptions& options = {}) const {
    ForwardOptions o = options;
    o.with_detector = true;
    const ModelOutput out = forward(ids, o);
    Prediction pred;
    pred.output.resize(ids.size());
    pred.error_probs.assign(out.error_probs.values().begin(), out.error_probs.values().end());
    pred.mask_weights.assign(out.mask_weights.values().begin(), out.mask_weights.values().end());
    const std::size_t v = config_.vocab_size;
    const auto logits = out.correction_logits.values();
    const bool force = config_.mode.kind == MaskKind::ForceOracle;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (force && (*options.gold_labels)[i] == 0) {
        pred.output[i] = ids[i];
        continue;
      }
      std::size_t best = v;
      for (std::size_t c = Vocabulary::kNumSpecial; c < v; ++c) {
        if (force && c == ids[i]) continue;
        if (best == v || logits[i * v + c] > logits[i * v + best]) best = c;
      }
      pred.output[i] = best;
    }
    return pred;
  }

  static Tensor correction_loss(const Tensor& logits, const TokenIds& gold) {
    return num::scale(num::sum(num::pick(num::log_softmax(logits, 1), gold)), -1.0);
  }

  /// Binary cross-entropy summed over positions, computed from logits.
  static Tensor detection_loss(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t n = logits.dim(0);
    std::vector<double> g(n), not_g(n);
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = labels[i] != 0 ? 1.0 : 0.0;
      not_g[i] = 1.0 - g[i];
    }
    Tensor pos = num::mul(num::log_sigmoid(logits), Tensor::vector(std::move(g)));
    Tensor neg = num::mul(num::log_sigmoid(num::scale(logits, -1.0)), Tensor::vector(std::move(not_g)));
    return num::scale(num::sum(num::add(pos, neg)), -1.0);
  }

 private:
  ModelConfig config_;
  ModelParams params_;
};

}  // namespace softmask::model
