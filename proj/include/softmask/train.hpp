#pragma once

// Adam, checkpoints, masked-language-model pretraining and joint fine-tuning.
//
// Every random choice in training is drawn from a stream derived from
// (seed, step, example slot), so a run is fully determined by its seed, config
// and data, and resuming from a checkpoint reproduces an uninterrupted run.

#include <spdlog/spdlog.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "softmask/datagen.hpp"
#include "softmask/eval.hpp"
#include "softmask/hash.hpp"
#include "softmask/model.hpp"

namespace softmask::train {

using data::ExamplePair;
using layers::ParameterSet;
using model::SoftMaskedModel;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState init(const ParameterSet& params, AdamConfig config = {}) {
    AdamState s;
    s.config = config;
    for (const auto& [name, t] : params) {
      s.names.push_back(name);
      s.m.emplace_back(t.size(), 0.0);
      s.v.emplace_back(t.size(), 0.0);
    }
    return s;
  }
};

/// Bias-corrected Adam update from the gradients currently stored on `params`.
/// A non-finite gradient aborts before any parameter changes.
inline void adam_step(ParameterSet& params, AdamState& state) {
  if (params.size() != state.names.size()) {
    throw ContractError("adam_step: optimizer tracks " + std::to_string(state.names.size()) +
                        " tensors, model has " + std::to_string(params.size()));
  }
  std::size_t k = 0;
  for (auto& [name, t] : params) {
    if (state.names[k] != name || state.m[k].size() != t.size()) {
      throw ContractError("adam_step: optimizer state does not match parameter " + name);
    }
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
    }
    ++k;
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  k = 0;
  for (auto& [name, p] : params) {
    auto values = p.data();
    const auto grads = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grads[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      values[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
    ++k;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// Layout (little-endian):
//   "SMBERTCK"  u32 version  u64 json_length  json
//   u64 tensor_count, then per tensor:
//   u32 name_length  name  u32 rank  u64 dims[rank]  f64 values[prod(dims)]

inline constexpr char kCheckpointMagic[8] = {'S', 'M', 'B', 'E', 'R', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { CorruptHeader, UnknownVersion, TruncatedTensor, Mismatch, Io };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct NamedArray {
  std::string name;
  num::Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::ordered_json meta;
  std::vector<NamedArray> tensors;

  const NamedArray* find(std::string_view name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  bool has(std::size_t n) const { return bytes_.size() - pos_ >= n; }
  std::uint64_t uint(int width) {
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string_view take(std::size_t n) {
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  const std::string json = ck.meta.dump();
  detail::put_u64(out, json.size());
  out += json;
  detail::put_u64(out, ck.tensors.size());
  for (const auto& t : ck.tensors) {
    if (num::shape_size(t.shape) != t.values.size()) {
      throw ContractError("checkpoint tensor " + t.name + " has inconsistent shape");
    }
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) detail::put_u64(out, d);
    for (double v : t.values) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  using Kind = CheckpointError::Kind;
  detail::Reader r(bytes);
  if (!r.has(12) || std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError(Kind::CorruptHeader, "checkpoint: corrupt header (bad magic)");
  }
  r.take(sizeof(kCheckpointMagic));
  const auto version = static_cast<std::uint32_t>(r.uint(4));
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::UnknownVersion, "checkpoint: unknown format version " + std::to_string(version));
  }
  if (!r.has(8)) throw CheckpointError(Kind::CorruptHeader, "checkpoint: corrupt header (no metadata length)");
  const std::uint64_t json_len = r.uint(8);
  if (!r.has(json_len)) throw CheckpointError(Kind::CorruptHeader, "checkpoint: corrupt header (metadata cut short)");
  Checkpoint ck;
  try {
    ck.meta = nlohmann::ordered_json::parse(r.take(json_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::CorruptHeader, std::string("checkpoint: corrupt header metadata: ") + e.what());
  }
  if (!r.has(8)) throw CheckpointError(Kind::CorruptHeader, "checkpoint: corrupt header (no tensor count)");
  const std::uint64_t count = r.uint(8);
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string label = "#" + std::to_string(k);
    if (!r.has(4)) throw CheckpointError(Kind::TruncatedTensor, "checkpoint: truncated tensor " + label);
    const auto name_len = r.uint(4);
    if (!r.has(name_len)) throw CheckpointError(Kind::TruncatedTensor, "checkpoint: truncated tensor " + label);
    NamedArray t;
    t.name = std::string(r.take(name_len));
    if (!r.has(4)) throw CheckpointError(Kind::TruncatedTensor, "checkpoint: truncated tensor " + t.name);
    const auto rank = r.uint(4);
    if (rank > 8 || !r.has(8 * rank)) {
      throw CheckpointError(Kind::TruncatedTensor, "checkpoint: truncated tensor " + t.name);
    }
    std::uint64_t n = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.uint(8));
      n *= t.shape.back();
    }
    if (n > (bytes.size() / 8) || !r.has(8 * n)) {
      throw CheckpointError(Kind::TruncatedTensor, "checkpoint: truncated tensor " + t.name);
    }
    t.values.resize(n);
    for (auto& v : t.values) v = std::bit_cast<double>(r.uint(8));
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError(Kind::CorruptHeader, "checkpoint: trailing bytes after last tensor");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  try {
    data::write_file(path, serialize_checkpoint(ck));
  } catch (const std::runtime_error& e) {
    throw CheckpointError(CheckpointError::Kind::Io, e.what());
  }
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::string bytes;
  try {
    bytes = data::read_file(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(CheckpointError::Kind::Io, e.what());
  }
  return parse_checkpoint(bytes);
}

inline std::string vocab_string(const Vocabulary& v) { return utf8_encode(std::u32string(v.chars().begin(), v.chars().end())); }

/// Everything needed to rebuild a model, and optionally continue training it.
struct ModelBundle {
  Vocabulary vocab;
  std::optional<AdamState> optimizer;
  std::uint64_t seed = 0;
  nlohmann::ordered_json run;  // free-form provenance (run config, metrics)
};

inline Checkpoint make_checkpoint(const SoftMaskedModel& m, const ModelBundle& bundle) {
  Checkpoint ck;
  ck.meta["config"] = model::to_json(m.config());
  ck.meta["vocab"] = vocab_string(bundle.vocab);
  ck.meta["seed"] = bundle.seed;
  if (bundle.optimizer) {
    const auto& o = *bundle.optimizer;
    ck.meta["optimizer"] = {{"lr", o.config.lr},
                            {"beta1", o.config.beta1},
                            {"beta2", o.config.beta2},
                            {"eps", o.config.eps},
                            {"step", o.step}};
  } else {
    ck.meta["optimizer"] = nullptr;
  }
  ck.meta["run"] = bundle.run.is_null() ? nlohmann::ordered_json::object() : bundle.run;
  for (const auto& [name, t] : m.parameters()) {
    ck.tensors.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
  }
  if (bundle.optimizer) {
    const auto& o = *bundle.optimizer;
    const ParameterSet params = m.parameters();
    std::size_t k = 0;
    for (const auto& [name, t] : params) {
      ck.tensors.push_back({"adam.m/" + name, t.shape(), o.m[k]});
      ck.tensors.push_back({"adam.v/" + name, t.shape(), o.v[k]});
      ++k;
    }
  }
  return ck;
}

/// Model config stored in a checkpoint.
inline model::ModelConfig checkpoint_config(const Checkpoint& ck) {
  try {
    return model::config_from_json(ck.meta.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::CorruptHeader, std::string("checkpoint: bad config: ") + e.what());
  }
}

inline std::pair<SoftMaskedModel, ModelBundle> restore_checkpoint(const Checkpoint& ck) {
  using Kind = CheckpointError::Kind;
  const model::ModelConfig config = checkpoint_config(ck);
  SoftMaskedModel m(config, 0);
  ModelBundle bundle;
  try {
    const std::u32string chars = utf8_decode(ck.meta.at("vocab").get<std::string>());
    bundle.vocab = Vocabulary(std::vector<char32_t>(chars.begin(), chars.end()));
    bundle.seed = ck.meta.at("seed").get<std::uint64_t>();
    bundle.run = ck.meta.at("run");
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::CorruptHeader, std::string("checkpoint: bad metadata: ") + e.what());
  }
  if (bundle.vocab.size() != config.vocab_size) {
    throw CheckpointError(Kind::Mismatch, "checkpoint: vocabulary has " + std::to_string(bundle.vocab.size()) +
                                              " ids but config says " + std::to_string(config.vocab_size));
  }
  ParameterSet params = m.parameters();
  auto load_into = [&](const std::string& name, num::Shape shape, std::span<double> dst) {
    const NamedArray* src = ck.find(name);
    if (src == nullptr) throw CheckpointError(Kind::Mismatch, "checkpoint: missing tensor " + name);
    if (src->shape != shape) {
      throw CheckpointError(Kind::Mismatch, "checkpoint: tensor " + name + " has shape " +
                                                num::shape_str(src->shape) + ", model expects " +
                                                num::shape_str(shape));
    }
    std::copy(src->values.begin(), src->values.end(), dst.begin());
  };
  for (auto& [name, t] : params) load_into(name, t.shape(), t.data());
  const auto& opt = ck.meta.at("optimizer");
  if (!opt.is_null()) {
    AdamConfig c{opt.at("lr").get<double>(), opt.at("beta1").get<double>(), opt.at("beta2").get<double>(),
                 opt.at("eps").get<double>()};
    AdamState s = AdamState::init(params, c);
    s.step = opt.at("step").get<std::uint64_t>();
    std::size_t k = 0;
    for (const auto& [name, t] : params) {
      load_into("adam.m/" + name, t.shape(), s.m[k]);
      load_into("adam.v/" + name, t.shape(), s.v[k]);
      ++k;
    }
    bundle.optimizer = std::move(s);
  }
  return {std::move(m), std::move(bundle)};
}

/// Digest of parameter names, shapes and values (not the config), used to
/// confirm that experiment rows start from the same initialization.
inline std::string parameter_digest(const SoftMaskedModel& m) {
  std::string bytes;
  for (const auto& [name, t] : m.parameters()) {
    bytes += name;
    bytes.push_back('\0');
    for (std::size_t d : t.shape()) detail::put_u64(bytes, d);
    for (double v : t.values()) detail::put_u64(bytes, std::bit_cast<std::uint64_t>(v));
  }
  return sha1_hex(bytes);
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Indices of the examples in batch `step`: each epoch visits every example once
/// in an order drawn from (seed, epoch); the last batch of an epoch may be short.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t examples, std::size_t batch_size, std::uint64_t seed)
      : examples_(examples), batch_size_(batch_size), seed_(seed) {
    if (examples == 0) throw ContractError("training data is empty");
    if (batch_size == 0) throw ContractError("batch size must be positive");
  }

  std::size_t steps_per_epoch() const { return (examples_ + batch_size_ - 1) / batch_size_; }

  std::vector<std::size_t> batch(std::uint64_t step) {
    const std::uint64_t epoch = step / steps_per_epoch();
    if (epoch != cached_epoch_ || order_.empty()) {
      order_.resize(examples_);
      for (std::size_t i = 0; i < examples_; ++i) order_[i] = i;
      Rng rng(derive_seed(seed_, 0xE90Cu, epoch));
      shuffle(order_, rng);
      cached_epoch_ = epoch;
    }
    const std::size_t start = static_cast<std::size_t>(step % steps_per_epoch()) * batch_size_;
    const std::size_t end = std::min(start + batch_size_, examples_);
    return {order_.begin() + static_cast<std::ptrdiff_t>(start), order_.begin() + static_cast<std::ptrdiff_t>(end)};
  }

 private:
  std::size_t examples_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t cached_epoch_ = 0;
  std::vector<std::size_t> order_;
};

// ---------------------------------------------------------------------------
// Masked-language-model pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  std::uint64_t seed = 1;
  std::size_t batch_size = 32;
  AdamConfig adam;
  double select_rate = 0.15;
};

struct MlmExample {
  TokenIds input;
  std::vector<double> selected;  // 1 where the loss applies
};

/// Selects ~15% of ordinary positions (at least one); of those 80% become
/// [MASK], 10% a random ordinary character, 10% stay unchanged.
inline MlmExample mlm_mask(const TokenIds& clean, std::size_t vocab_size, double rate, Rng& rng) {
  MlmExample ex{clean, std::vector<double>(clean.size(), 0.0)};
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (!Vocabulary::is_special(clean[i])) eligible.push_back(i);
  }
  if (eligible.empty()) return ex;
  std::vector<std::size_t> chosen;
  for (std::size_t i : eligible) {
    if (uniform01(rng) < rate) chosen.push_back(i);
  }
  if (chosen.empty()) chosen.push_back(eligible[uniform_index(rng, eligible.size())]);
  for (std::size_t i : chosen) {
    ex.selected[i] = 1.0;
    const double u = uniform01(rng);
    if (u < 0.8) {
      ex.input[i] = Vocabulary::kMask;
    } else if (u < 0.9) {
      ex.input[i] = Vocabulary::kNumSpecial + uniform_index(rng, vocab_size - Vocabulary::kNumSpecial);
    }
  }
  return ex;
}

/// Mean cross-entropy over selected positions of one example, and their count.
/// Runs embeddings, encoder and output layer only (no detector, no residual).
inline std::pair<num::Tensor, double> mlm_loss(const SoftMaskedModel& m, const MlmExample& ex, const TokenIds& gold) {
  const auto& p = m.params();
  num::Tensor e = layers::embed(ex.input, p.embedding);
  num::Tensor logits = model::correct(e, e, p, false);
  num::Tensor picked = num::pick(num::log_softmax(logits, 1), gold);
  double count = 0.0;
  for (double s : ex.selected) count += s;
  return {num::scale(num::sum(num::mul(picked, num::Tensor::vector(ex.selected))), -1.0), count};
}

/// Runs `steps` MLM updates; returns the per-step loss (mean over selected positions).
inline std::vector<double> mlm_pretrain(SoftMaskedModel& m, const std::vector<TokenIds>& corpus,
                                        const PretrainConfig& cfg, std::int64_t steps, AdamState* resume = nullptr) {
  if (steps <= 0) throw ContractError("mlm_pretrain: steps must be positive, got " + std::to_string(steps));
  if (corpus.empty()) throw ContractError("mlm_pretrain: corpus is empty");
  ParameterSet params = m.parameters();
  AdamState local = resume ? *resume : AdamState::init(params, cfg.adam);
  AdamState& state = resume ? *resume : local;
  BatchSchedule schedule(corpus.size(), cfg.batch_size, derive_seed(cfg.seed, 0x3A11u));
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(steps));
  for (std::int64_t s = 0; s < steps; ++s) {
    const std::uint64_t step = state.step;
    params.zero_grad();
    const auto batch = schedule.batch(step);
    std::vector<MlmExample> examples;
    double selected = 0.0;
    for (std::size_t j = 0; j < batch.size(); ++j) {
      Rng rng(derive_seed(cfg.seed, step, j));
      examples.push_back(mlm_mask(corpus[batch[j]], m.config().vocab_size, cfg.select_rate, rng));
      for (double v : examples.back().selected) selected += v;
    }
    double total = 0.0;
    for (std::size_t j = 0; j < batch.size(); ++j) {
      auto [loss, count] = mlm_loss(m, examples[j], corpus[batch[j]]);
      if (count == 0.0) continue;
      total += loss.item();
      num::backward(num::scale(loss, 1.0 / selected));
    }
    adam_step(params, state);
    losses.push_back(total / selected);
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Joint fine-tuning
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t batch_size = 32;
  AdamConfig adam;
  std::size_t epochs = 10;
  bool drop_unchanged = false;  // discard pairs whose input is already correct
  bool keep_best = true;        // restore the best-dev parameters at the end
  bool check_numerics = false;  // NaN/Inf scan after every op
};

struct StepLoss {
  double total = 0.0;
  double detection = 0.0;
  double correction = 0.0;
};

/// One optimizer step on the batch given by the schedule at `state.step`.
/// Loss is the batch mean of per-sentence sums.
inline StepLoss train_step(SoftMaskedModel& m, AdamState& state, const std::vector<ExamplePair>& data,
                           BatchSchedule& schedule, const TrainConfig& cfg) {
  num::NanCheckScope nan_scope(cfg.check_numerics);
  ParameterSet params = m.parameters();
  params.zero_grad();
  const std::uint64_t step = state.step;
  const auto batch = schedule.batch(step);
  const double scale = 1.0 / static_cast<double>(batch.size());
  model::ForwardOptions opts;
  opts.with_detector = m.config().mode.uses_detector();
  StepLoss out;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    const ExamplePair& pair = data[batch[j]];
    opts.gold_labels = &pair.labels();
    opts.noise_seed = derive_seed(cfg.seed, 0x7A5Du, derive_seed(step, j));
    const auto terms = m.loss(m.forward(pair.x(), opts), pair);
    num::backward(num::scale(terms.total, scale));
    out.total += scale * terms.total.item();
    out.detection += scale * terms.detection.item();
    out.correction += scale * terms.correction.item();
  }
  adam_step(params, state);
  return out;
}

inline std::vector<ExamplePair> training_pairs(const std::vector<ExamplePair>& pairs, bool drop_unchanged) {
  if (!drop_unchanged) return pairs;
  std::vector<ExamplePair> kept;
  for (const auto& p : pairs) {
    if (p.has_error()) kept.push_back(p);
  }
  return kept;
}

/// Runs `steps` joint updates continuing from `state`; returns per-step losses.
inline std::vector<StepLoss> run_steps(SoftMaskedModel& m, AdamState& state, const std::vector<ExamplePair>& train,
                                       const TrainConfig& cfg, std::uint64_t steps) {
  const auto data = training_pairs(train, cfg.drop_unchanged);
  BatchSchedule schedule(data.size(), cfg.batch_size, derive_seed(cfg.seed, 0xF17Eu));
  std::vector<StepLoss> losses;
  for (std::uint64_t s = 0; s < steps; ++s) losses.push_back(train_step(m, state, data, schedule, cfg));
  return losses;
}

struct EpochRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double train_loss = 0.0;
  eval::MetricsReport dev;
  double seconds = 0.0;
};

struct FinetuneResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_dev_f1 = -1.0;
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&, const SoftMaskedModel&, const AdamState&)>;

/// Minimizes the joint loss for cfg.epochs epochs, scoring dev after each.
/// With keep_best, the model ends holding the parameters of the epoch with the
/// highest dev correction F1, then correction accuracy (earliest on ties).
/// Accuracy matters when dev has no errors and F1 is always 0.
inline FinetuneResult finetune(SoftMaskedModel& m, const std::vector<ExamplePair>& train,
                               const std::vector<ExamplePair>& dev, const TrainConfig& cfg,
                               AdamState* resume = nullptr, const EpochCallback& on_epoch = {}) {
  m.config().validate();
  const auto data = training_pairs(train, cfg.drop_unchanged);
  ParameterSet params = m.parameters();
  AdamState local = resume ? *resume : AdamState::init(params, cfg.adam);
  AdamState& state = resume ? *resume : local;
  BatchSchedule schedule(data.size(), cfg.batch_size, derive_seed(cfg.seed, 0xF17Eu));
  const std::size_t per_epoch = schedule.steps_per_epoch();

  FinetuneResult result;
  std::optional<SoftMaskedModel> best;
  double best_accuracy = -1.0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = static_cast<std::size_t>(state.step / per_epoch); epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t loss_steps = 0;
    while (state.step < (epoch + 1) * per_epoch) {
      loss_sum += train_step(m, state, data, schedule, cfg).total;
      ++loss_steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = state.step;
    rec.train_loss = loss_steps ? loss_sum / static_cast<double>(loss_steps) : 0.0;
    rec.dev = eval::evaluate(m, dev, derive_seed(cfg.seed, 0xDEu));
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    spdlog::info("epoch {} step {} loss {:.4f} dev detection F1 {:.4f} correction F1 {:.4f} ({:.1f}s)", epoch + 1,
                 rec.step, rec.train_loss, rec.dev.detection.f1, rec.dev.correction.f1, rec.seconds);
    const auto& c = rec.dev.correction;
    if (c.f1 > result.best_dev_f1 || (c.f1 == result.best_dev_f1 && c.accuracy > best_accuracy)) {
      result.best_dev_f1 = c.f1;
      best_accuracy = c.accuracy;
      result.best_epoch = epoch;
      if (cfg.keep_best) best = m.clone();
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec, m, state);
  }
  if (cfg.keep_best && best) m.copy_values_from(*best);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace softmask::train
