#pragma once

// Sentence-level detection and correction metrics.
//
// Per sentence, with G the gold error positions and P the predicted ones:
//   detection  TP: G nonempty and P == G     FN: G nonempty and P != G
//              FP: G empty and P nonempty    TN: G empty and P empty
//   correction TP: G nonempty and output == y  FN: G nonempty and output != y
//              FP: G empty and output != y     TN: G empty and output == y
// accuracy = (TP + TN) / N, precision = TP / (TP + FP), recall = TP / (TP + FN);
// any 0/0 is reported as 0.

#include <cstdio>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "softmask/datagen.hpp"
#include "softmask/model.hpp"

namespace softmask::eval {

struct Counts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t total() const { return tp + fp + fn + tn; }
};

struct TaskMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  Counts counts;

  static TaskMetrics from_counts(const Counts& c) {
    auto ratio = [](std::size_t num, std::size_t den) {
      return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    TaskMetrics m;
    m.counts = c;
    m.accuracy = ratio(c.tp + c.tn, c.total());
    m.precision = ratio(c.tp, c.tp + c.fp);
    m.recall = ratio(c.tp, c.tp + c.fn);
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
  }
};

struct MetricsReport {
  std::string mode;
  TaskMetrics detection;
  TaskMetrics correction;

  std::size_t sentences() const { return detection.counts.total(); }
};

/// One model output; `flags` lists predicted error positions as 0/1 per
/// position. When empty, flags are the positions where output differs from input.
struct SentencePrediction {
  TokenIds output;
  std::vector<int> flags;
};

inline MetricsReport score(const std::vector<SentencePrediction>& predictions,
                           const std::vector<data::ExamplePair>& gold, std::string mode = "") {
  if (predictions.size() != gold.size()) {
    throw ContractError("score: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(gold.size()) + " gold pairs");
  }
  Counts det, cor;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    const auto& pred = predictions[s];
    const auto& pair = gold[s];
    if (pred.output.size() != pair.size() || (!pred.flags.empty() && pred.flags.size() != pair.size())) {
      throw ContractError("score: sentence " + std::to_string(s) + " has prediction length " +
                          std::to_string(pred.output.size()) + " but gold length " + std::to_string(pair.size()));
    }
    bool flagged_any = false, flags_exact = true;
    for (std::size_t i = 0; i < pair.size(); ++i) {
      const bool flagged = pred.flags.empty() ? pred.output[i] != pair.x()[i] : pred.flags[i] != 0;
      flagged_any = flagged_any || flagged;
      flags_exact = flags_exact && (flagged == (pair.labels()[i] != 0));
    }
    const bool output_exact = pred.output == pair.y();
    if (pair.has_error()) {
      ++(flags_exact ? det.tp : det.fn);
      ++(output_exact ? cor.tp : cor.fn);
    } else {
      ++(flagged_any ? det.fp : det.tn);
      ++(output_exact ? cor.tn : cor.fp);
    }
  }
  return {std::move(mode), TaskMetrics::from_counts(det), TaskMetrics::from_counts(cor)};
}

inline MetricsReport score(const std::vector<TokenIds>& outputs, const std::vector<data::ExamplePair>& gold,
                           std::string mode = "") {
  std::vector<SentencePrediction> preds;
  preds.reserve(outputs.size());
  for (const auto& o : outputs) preds.push_back({o, {}});
  return score(preds, gold, std::move(mode));
}

/// Predictions of `model` over `pairs`. Random-mode draws use (seed, index) streams;
/// ForceOracle receives the gold labels.
inline std::vector<model::Prediction> predict_all(const model::SoftMaskedModel& m,
                                                  const std::vector<data::ExamplePair>& pairs, std::uint64_t seed) {
  std::vector<model::Prediction> out;
  out.reserve(pairs.size());
  const bool force = m.config().mode.kind == model::MaskKind::ForceOracle;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    model::ForwardOptions o;
    o.noise_seed = derive_seed(seed, 0xE7A1u, i);
    if (force) o.gold_labels = &pairs[i].labels();
    out.push_back(m.predict(pairs[i].x(), o));
  }
  return out;
}

/// Scores `model` on `pairs`. Predicted error positions are the characters the
/// model changed, except under ForceOracle, whose positions are the supplied gold ones.
inline MetricsReport evaluate(const model::SoftMaskedModel& m, const std::vector<data::ExamplePair>& pairs,
                              std::uint64_t seed) {
  const bool force = m.config().mode.kind == model::MaskKind::ForceOracle;
  auto preds = predict_all(m, pairs, seed);
  std::vector<SentencePrediction> scored;
  scored.reserve(preds.size());
  for (std::size_t s = 0; s < preds.size(); ++s) {
    scored.push_back({std::move(preds[s].output), force ? pairs[s].labels() : std::vector<int>{}});
  }
  return score(scored, pairs, model::mode_label(m.config().mode));
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

inline void add_task_json(nlohmann::ordered_json& j, const std::string& prefix, const TaskMetrics& m) {
  j[prefix + ".acc"] = m.accuracy;
  j[prefix + ".prec"] = m.precision;
  j[prefix + ".rec"] = m.recall;
  j[prefix + ".f1"] = m.f1;
  j[prefix + ".tp"] = m.counts.tp;
  j[prefix + ".fp"] = m.counts.fp;
  j[prefix + ".fn"] = m.counts.fn;
  j[prefix + ".tn"] = m.counts.tn;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["mode"] = r.mode;
  j["sentences"] = r.sentences();
  add_task_json(j, "detection", r.detection);
  add_task_json(j, "correction", r.correction);
  return j;
}

inline TaskMetrics task_from_json(const nlohmann::json& j, const std::string& prefix) {
  Counts c{j.at(prefix + ".tp").get<std::size_t>(), j.at(prefix + ".fp").get<std::size_t>(),
           j.at(prefix + ".fn").get<std::size_t>(), j.at(prefix + ".tn").get<std::size_t>()};
  return TaskMetrics::from_counts(c);
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  return {j.at("mode").get<std::string>(), task_from_json(j, "detection"), task_from_json(j, "correction")};
}

struct TableRow {
  std::string label;
  MetricsReport report;
};

/// Fixed-width table: one row per report, detection then correction columns.
inline std::string format_table(const std::vector<TableRow>& rows) {
  std::size_t label_width = 5;
  for (const auto& r : rows) label_width = std::max(label_width, r.label.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(label_width)) << "model" << std::right;
  for (const char* h : {"D-acc", "D-prec", "D-rec", "D-F1", "C-acc", "C-prec", "C-rec", "C-F1"}) {
    out << std::setw(8) << h;
  }
  out << '\n';
  out << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(label_width)) << r.label << std::right;
    for (const TaskMetrics* t : {&r.report.detection, &r.report.correction}) {
      out << std::setw(8) << t->accuracy << std::setw(8) << t->precision << std::setw(8) << t->recall
          << std::setw(8) << t->f1;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace softmask::eval
