#pragma once

// Ablation matrix and lambda sweep. Every row or grid point starts from the
// same initial parameters and trains with the same data, seed and budget.

#include <spdlog/spdlog.h>

#include <optional>
#include <string>
#include <vector>

#include "softmask/eval.hpp"
#include "softmask/train.hpp"

namespace softmask::experiments {

using data::ExamplePair;
using model::MaskingMode;
using model::ModelConfig;
using model::SoftMaskedModel;

struct AblationEntry {
  std::string label;
  MaskingMode mode;
  bool residual = true;
};

using AblationSpec = std::vector<AblationEntry>;

/// The eight variants, in reporting order.
inline AblationSpec default_ablation() {
  return {
      {"Soft", MaskingMode::soft(), true},
      {"Soft-R", MaskingMode::soft(), false},
      {"Hard(0.95)", MaskingMode::hard(0.95), true},
      {"Hard(0.9)", MaskingMode::hard(0.9), true},
      {"Hard(0.7)", MaskingMode::hard(0.7), true},
      {"Random", MaskingMode::random(), true},
      {"NoDetector", MaskingMode::no_detector(), true},
      {"ForceOracle (upper bound)", MaskingMode::force_oracle(), true},
  };
}

inline void validate(const AblationSpec& spec) {
  for (std::size_t i = 0; i < spec.size(); ++i) {
    spec[i].mode.validate();
    for (std::size_t j = 0; j < i; ++j) {
      if (spec[i].mode == spec[j].mode && spec[i].residual == spec[j].residual) {
        throw ContractError("ablation rows " + spec[j].label + " and " + spec[i].label + " are the same variant");
      }
    }
  }
}

struct ExperimentData {
  std::vector<ExamplePair> train;
  std::vector<ExamplePair> dev;
  std::vector<ExamplePair> test;
};

struct RowResult {
  std::string label;
  ModelConfig config;
  std::string init_digest;
  train::FinetuneResult fit;
  eval::MetricsReport test;
};

inline std::uint64_t test_seed(const train::TrainConfig& budget) { return derive_seed(budget.seed, 0x7E57u); }

/// Fine-tunes a copy of `init` under `config` and scores it on the test split.
/// Throws if the copy does not start from `init_digest`.
inline RowResult train_variant(const SoftMaskedModel& init, const std::string& init_digest, const std::string& label,
                               const ModelConfig& config, const ExperimentData& data,
                               const train::TrainConfig& budget) {
  SoftMaskedModel m = init.clone(config);
  const std::string digest = train::parameter_digest(m);
  if (digest != init_digest) {
    throw ContractError("row " + label + " starts from " + digest + ", expected shared init " + init_digest);
  }
  RowResult row{label, config, digest, {}, {}};
  spdlog::info("training {} ({})", label, model::mode_label(config.mode));
  row.fit = train::finetune(m, data.train, data.dev, budget);
  row.test = eval::evaluate(m, data.test, test_seed(budget));
  row.test.mode = label;
  return row;
}

/// One trained-and-scored row per spec entry. `init` supplies the shared
/// starting parameters (for example a pretrained checkpoint); its config's
/// mode and residual are overridden per row.
inline std::vector<RowResult> run_ablation(const AblationSpec& spec, const SoftMaskedModel& init,
                                           const ExperimentData& data, const train::TrainConfig& budget) {
  validate(spec);
  const std::string digest = train::parameter_digest(init);
  std::vector<RowResult> rows;
  for (const auto& entry : spec) {
    ModelConfig c = init.config();
    c.mode = entry.mode;
    c.residual = entry.residual;
    rows.push_back(train_variant(init, digest, entry.label, c, data, budget));
  }
  return rows;
}

inline std::vector<double> default_lambda_grid() { return {0.2, 0.5, 0.8, 1.0}; }

struct SweepResult {
  std::vector<RowResult> rows;  // one per requested lambda, in order
  double best_lambda = 0.0;     // highest dev correction F1, earliest on ties
};

inline SweepResult lambda_sweep(const std::vector<double>& lambdas, const SoftMaskedModel& init,
                                const ExperimentData& data, const train::TrainConfig& budget) {
  if (lambdas.empty()) throw ContractError("lambda_sweep: no values given");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw ContractError("lambda_sweep: lambda " + std::to_string(l) + " outside [0, 1]");
  }
  const std::string digest = train::parameter_digest(init);
  SweepResult out;
  double best_f1 = -1.0;
  for (double l : lambdas) {
    ModelConfig c = init.config();
    c.lambda = l;
    std::ostringstream label;
    label << "lambda=" << l;
    out.rows.push_back(train_variant(init, digest, label.str(), c, data, budget));
    const double f1 = out.rows.back().fit.best_dev_f1;
    if (f1 > best_f1) {
      best_f1 = f1;
      out.best_lambda = l;
    }
  }
  return out;
}

inline std::vector<eval::TableRow> table_rows(const std::vector<RowResult>& rows) {
  std::vector<eval::TableRow> out;
  for (const auto& r : rows) out.push_back({r.label, r.test});
  return out;
}

}  // namespace softmask::experiments
