// Acceptance gate: runs criteria A1-A8 and prints one PASS/FAIL line for each.
//
//   acceptance            run everything
//   acceptance A2 A7      run a subset
//
// Exit status is 0 only if every selected criterion passes. A4 and A5 train 15
// toy models and take the bulk of the runtime (roughly 30 minutes on one core).

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "softmask/eval.hpp"
#include "softmask/experiments.hpp"
#include "softmask/train.hpp"

using namespace softmask;
using model::MaskingMode;
using model::ModelConfig;
using model::SoftMaskedModel;
using num::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Timer {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt_double(double v, int precision = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

ModelConfig tiny_config(MaskingMode mode = MaskingMode::soft()) {
  ModelConfig c;
  c.vocab_size = 9;
  c.width = 4;
  c.layers = 1;
  c.heads = 2;
  c.ffn = 8;
  c.gru_hidden = 3;
  c.max_len = 8;
  c.mode = mode;
  return c;
}

void spread(SoftMaskedModel& m, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& [name, t] : m.parameters()) {
    for (double& v : t.data()) v = scale * standard_normal(rng);
  }
}

TokenIds random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  TokenIds ids(n);
  for (auto& id : ids) id = Vocabulary::kNumSpecial + uniform_index(rng, vocab - Vocabulary::kNumSpecial);
  return ids;
}

// ---- A1 ---------------------------------------------------------------------

Outcome a1_gradients() {
  constexpr int kSeeds = 20;
  constexpr double kTol = 1e-4;
  Timer timer;
  std::map<std::string, double> worst;
  auto check = [&](const std::string& name, const std::function<num::Tensor()>& loss,
                   std::vector<std::pair<std::string, Tensor>> params, std::size_t max_coords, std::uint64_t seed) {
    const auto r = testing::grad_check(loss, std::move(params), 1e-5, max_coords, seed);
    worst[name] = std::max(worst[name], r.worst_relative_error);
  };

  for (int s = 0; s < kSeeds; ++s) {
    Rng rng(derive_seed(0xA1, s));
    {
      auto t = layers::EmbeddingTables::init(7, 4, 5, 2, rng);
      for (Tensor* x : {&t.word, &t.position, &t.segment}) testing::rescale(*x, 25.0);
      const std::vector<std::size_t> ids{3, 6, 3};
      Tensor w = testing::random_tensor({3, 4}, rng, 1.0, false);
      layers::ParameterSet ps;
      t.register_into(ps, "");
      check("embedding", [&] { return num::sum(num::mul(num::tanh(layers::embed(ids, t)), w)); },
            {ps.begin(), ps.end()}, 0, s);
    }
    {
      auto g = testing::random_gru(3, 4, rng);
      Tensor h = testing::random_tensor({4}, rng);
      Tensor x = testing::random_tensor({3}, rng);
      Tensor w = testing::random_tensor({4}, rng, 1.0, false);
      layers::ParameterSet ps;
      g.register_into(ps, "");
      ps.add("h", h);
      ps.add("x", x);
      check("gru step", [&] { return num::sum(num::mul(layers::gru_step(h, x, g), w)); }, {ps.begin(), ps.end()}, 0, s);
    }
    {
      auto f = testing::random_gru(3, 4, rng), b = testing::random_gru(3, 4, rng);
      Tensor x = testing::random_tensor({4, 3}, rng);
      Tensor w = testing::random_tensor({4, 8}, rng, 1.0, false);
      layers::ParameterSet ps;
      f.register_into(ps, "f.");
      b.register_into(ps, "b.");
      ps.add("x", x);
      check("bi-gru", [&] { return num::sum(num::mul(layers::bi_gru(x, f, b), w)); }, {ps.begin(), ps.end()}, 0, s);
    }
    {
      Tensor x = testing::random_tensor({3, 5}, rng, 2.0);
      Tensor g = testing::random_tensor({5}, rng), b = testing::random_tensor({5}, rng);
      Tensor w = testing::random_tensor({3, 5}, rng, 1.0, false);
      check("layer norm", [&] { return num::sum(num::mul(layers::layer_norm(x, g, b), w)); },
            {{"x", x}, {"gain", g}, {"bias", b}}, 0, s);
    }
    {
      auto p = testing::random_block(4, 2, 8, rng);
      Tensor x = testing::random_tensor({3, 4}, rng);
      Tensor w = testing::random_tensor({3, 4}, rng, 1.0, false);
      layers::ParameterSet ps;
      p.register_into(ps, "");
      ps.add("x", x);
      const std::vector<std::pair<std::string, Tensor>> all(ps.begin(), ps.end());
      check("attention", [&] { return num::sum(num::mul(layers::multi_head_attention(x, p), w)); }, all, 0, s);
      check("feed-forward", [&] { return num::sum(num::mul(layers::feed_forward(x, p), w)); }, all, 0, s);
      check("encoder block", [&] { return num::sum(num::mul(layers::encoder_block(x, p), w)); }, all, 0, s);
    }
    {
      model::DetectorParams d{testing::random_gru(4, 3, rng), testing::random_gru(4, 3, rng),
                              testing::random_tensor({6, 1}, rng), testing::random_tensor({1}, rng)};
      Tensor e = testing::random_tensor({5, 4}, rng);
      Tensor w = testing::random_tensor({5}, rng, 1.0, false);
      layers::ParameterSet ps;
      d.forward.register_into(ps, "f.");
      d.backward.register_into(ps, "b.");
      ps.add("w_d", d.w_d);
      ps.add("b_d", d.b_d);
      ps.add("e", e);
      check("detector", [&] { return num::sum(num::mul(model::detect(e, d), w)); }, {ps.begin(), ps.end()}, 0, s);
    }
    {
      Tensor e = testing::random_tensor({4, 3}, rng), em = testing::random_tensor({4, 3}, rng);
      Tensor z = testing::random_tensor({4}, rng, 3.0);
      Tensor w = testing::random_tensor({4, 3}, rng, 1.0, false);
      check("soft mask", [&] { return num::sum(num::mul(model::soft_mask(e, em, num::sigmoid(z)), w)); },
            {{"e", e}, {"e_mask", em}, {"z", z}}, 0, s);
    }
    {
      SoftMaskedModel m(tiny_config(), s);
      spread(m, 500 + s, 0.4);
      Tensor ep = testing::random_tensor({3, 4}, rng), e = testing::random_tensor({3, 4}, rng);
      const TokenIds gold = random_ids(3, 9, rng);
      auto params = m.parameters();
      std::vector<std::pair<std::string, Tensor>> ps;
      for (const auto& [name, t] : params) {
        if (!model::is_detector_parameter(name) && name.rfind("embedding.", 0) != 0) ps.emplace_back(name, t);
      }
      ps.emplace_back("e'", ep);
      ps.emplace_back("e", e);
      check("corrector",
            [&] { return SoftMaskedModel::correction_loss(model::correct(ep, e, m.params(), s % 2 == 0), gold); }, ps,
            0, s);
    }
    {
      SoftMaskedModel m(tiny_config(), s);
      spread(m, 100 + s, 0.4);
      const TokenIds x = random_ids(3 + s % 3, 9, rng);
      TokenIds y = x;
      y[s % x.size()] = Vocabulary::kNumSpecial + (x[s % x.size()] - 3) % 5;
      const data::ExamplePair pair(x, y);
      auto params = m.parameters();
      check("full soft model", [&] { return m.loss(m.forward(pair.x()), pair).total; }, {params.begin(), params.end()},
            12, s);
    }
  }
  Outcome o;
  std::string worst_name;
  double worst_err = 0.0;
  for (const auto& [name, err] : worst) {
    if (err > kTol) o.pass = false;
    if (err >= worst_err) {
      worst_err = err;
      worst_name = name;
    }
  }
  const double secs = timer.seconds();
  if (secs >= 120.0) o.pass = false;
  o.detail = std::to_string(worst.size()) + " components x " + std::to_string(kSeeds) +
             " seeds, worst relative error " + fmt_double(worst_err * 1e6, 3) + "e-6 (" + worst_name + "), " +
             fmt_double(secs, 1) + "s";
  return o;
}

// ---- A2 ---------------------------------------------------------------------

Outcome a2_degeneracy() {
  int zero_ok = 0, one_ok = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(derive_seed(0xA2, s));
    const TokenIds ids = random_ids(1 + uniform_index(rng, 8), 9, rng);
    for (double bias : {-800.0, 800.0}) {
      SoftMaskedModel soft(tiny_config(), s);
      spread(soft, 1000 + s, 0.5);
      for (double& v : soft.params().detector.w_d.data()) v = 0.0;
      soft.params().detector.b_d.data()[0] = bias;
      const auto out = soft.forward(ids);
      const double want = bias > 0 ? 1.0 : 0.0;
      const bool probs_exact =
          std::all_of(out.error_probs.values().begin(), out.error_probs.values().end(), [&](double p) { return p == want; });
      if (bias < 0) {
        SoftMaskedModel none = soft.clone();
        none.set_mode(MaskingMode::no_detector());
        zero_ok += probs_exact && bit_equal(out.correction_logits.values(), none.forward(ids).correction_logits.values());
      } else {
        const Tensor em = layers::mask_embedding(ids.size(), soft.params().embedding);
        const Tensor all_masked = model::correct(em, out.embeddings, soft.params(), true);
        SoftMaskedModel hard = soft.clone();
        hard.set_mode(MaskingMode::hard(0.5));
        one_ok += probs_exact && bit_equal(out.correction_logits.values(), all_masked.values()) &&
                  bit_equal(out.correction_logits.values(), hard.forward(ids).correction_logits.values());
      }
    }
  }
  return {zero_ok == 100 && one_ok == 100, "p=0 matches NoDetector on " + std::to_string(zero_ok) +
                                              "/100 inputs, p=1 matches all-positions hard masking on " +
                                              std::to_string(one_ok) + "/100"};
}

// ---- A3 ---------------------------------------------------------------------

Outcome a3_loss_algebra() {
  double worst = 0.0;
  int cases = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    SoftMaskedModel m(tiny_config(), s);
    spread(m, 2000 + s, 0.5);
    Rng rng(derive_seed(0xA3, s));
    const TokenIds x = random_ids(1 + uniform_index(rng, 8), 9, rng);
    const TokenIds y = random_ids(x.size(), 9, rng);
    const data::ExamplePair pair(x, y);
    const auto out = m.forward(x);
    for (double lambda : {0.0, 0.3, 0.8, 1.0}) {
      const auto t = m.loss(out, pair, lambda);
      worst = std::max(worst, std::abs(t.total.item() - (lambda * t.correction.item() +
                                                           (1.0 - lambda) * t.detection.item())));
      ++cases;
    }
  }
  const auto grid = experiments::default_lambda_grid();
  const bool has_point_eight = std::find(grid.begin(), grid.end(), 0.8) != grid.end();
  return {worst <= 1e-12 && has_point_eight,
          std::to_string(cases) + " cases, max |L - (lambda Lc + (1-lambda) Ld)| = " + fmt_double(worst * 1e15, 3) +
              "e-15; default grid " + (has_point_eight ? "contains" : "lacks") + " 0.8"};
}

// ---- A4 / A5 ----------------------------------------------------------------

ModelConfig toy_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.width = 32;
  c.layers = 2;
  c.heads = 4;
  c.ffn = 128;
  c.gru_hidden = 32;
  c.max_len = 64;
  c.lambda = 0.8;
  return c;
}

train::TrainConfig toy_budget(std::uint64_t seed) {
  train::TrainConfig b;
  b.seed = seed;
  b.batch_size = 32;
  b.adam.lr = 2e-3;
  b.epochs = 5;
  b.keep_best = true;
  return b;
}

const std::vector<std::pair<std::string, MaskingMode>> kToyRows = {
    {"Soft", MaskingMode::soft()},
    {"NoDetector", MaskingMode::no_detector()},
    {"Hard(0.7)", MaskingMode::hard(0.7)},
    {"Random", MaskingMode::random()},
    {"ForceOracle", MaskingMode::force_oracle()},
};

struct ToySeed {
  std::map<std::string, experiments::RowResult> rows;
};

// One seed of the toy task: data, initialization and training all follow it.
// `soft_only` stops after the Soft row.
ToySeed run_toy_seed(std::uint64_t seed, bool soft_only) {
  data::SyntheticTaskOptions opts;  // 20k/2k/2k pairs, rate 0.15, one substitute per character
  opts.seed = seed;
  const auto task = data::build_synthetic_task(opts);
  const experiments::ExperimentData data{task.train, task.dev, task.test};
  const SoftMaskedModel init(toy_config(task.vocab.size()), seed);
  const std::string digest = train::parameter_digest(init);
  ToySeed out;
  for (const auto& [label, mode] : kToyRows) {
    ModelConfig c = init.config();
    c.mode = mode;
    out.rows[label] = experiments::train_variant(init, digest, label, c, data, toy_budget(seed));
    spdlog::info("seed {} {}: test correction F1 {:.4f} in {:.0f}s", seed, label, out.rows[label].test.correction.f1,
                 out.rows[label].fit.seconds);
    if (soft_only) break;
  }
  return out;
}

std::vector<ToySeed>& toy_runs(bool soft_only) {
  static std::vector<ToySeed> runs;
  static bool complete = false;
  if (runs.empty() || (!soft_only && !complete)) {
    runs.clear();
    for (std::uint64_t seed : {1, 2, 3}) runs.push_back(run_toy_seed(seed, soft_only));
    complete = !soft_only;
  }
  return runs;
}

Outcome a4_toy_end_to_end(bool with_ablation) {
  const auto& runs = toy_runs(!with_ablation);
  Outcome o;
  std::string parts;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& soft = runs[i].rows.at("Soft");
    const bool ok = soft.test.correction.f1 >= 0.90 && soft.fit.seconds < 600.0;
    o.pass = o.pass && ok;
    parts += (i ? ", " : "") + std::string("seed ") + std::to_string(i + 1) + " C-F1 " +
             fmt_double(soft.test.correction.f1) + " in " + fmt_double(soft.fit.seconds, 0) + "s";
  }
  o.detail = parts + " (need >= 0.90 within 600s)";
  return o;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

Outcome a5_ablation_direction() {
  const auto& runs = toy_runs(false);
  std::map<std::string, double> med;
  bool shared_init = true;
  for (const auto& [label, _] : kToyRows) {
    std::vector<double> f1;
    for (const auto& r : runs) {
      f1.push_back(r.rows.at(label).test.correction.f1);
      shared_init = shared_init && r.rows.at(label).init_digest == r.rows.at("Soft").init_digest;
    }
    med[label] = median3(f1);
  }
  const double soft = med["Soft"];
  const bool i = soft >= med["NoDetector"], ii = soft >= med["Hard(0.7)"], iii = soft >= med["Random"],
             iv = med["ForceOracle"] >= soft;
  std::string detail = "median C-F1 Soft " + fmt_double(soft) + ", NoDetector " + fmt_double(med["NoDetector"]) +
                       ", Hard(0.7) " + fmt_double(med["Hard(0.7)"]) + ", Random " + fmt_double(med["Random"]) +
                       ", ForceOracle " + fmt_double(med["ForceOracle"]);
  std::string failed;
  if (!i) failed += " (i)";
  if (!ii) failed += " (ii)";
  if (!iii) failed += " (iii)";
  if (!iv) failed += " (iv)";
  if (!shared_init) failed += " shared-init";
  if (!failed.empty()) detail += "; violated:" + failed;
  return {failed.empty(), detail};
}

// ---- A6 ---------------------------------------------------------------------

Outcome a6_corruption_statistics() {
  const auto grammar = data::toy_grammar(61);
  Rng rng(62);
  std::vector<std::string> sentences;
  std::size_t chars = 0;
  while (chars < 110000) {
    sentences.push_back(data::generate_sentence(grammar, rng));
    chars += utf8_decode(sentences.back()).size();
  }
  const Vocabulary vocab = build_vocab(sentences);
  const auto table = data::ConfusionTable::synthetic(vocab, 63, 1, 4);
  std::vector<TokenIds> clean;
  for (const auto& s : sentences) clean.push_back(vocab.encode(s));
  data::CorruptionPolicy policy;
  policy.seed = 64;
  data::CorruptionStats stats;
  data::corrupt_all(clean, table, policy, &stats);

  const double n = static_cast<double>(stats.eligible);
  const double mean = 0.15 * n, sd = std::sqrt(n * 0.15 * 0.85);
  const double k = static_cast<double>(stats.replaced);
  const double table_mean = 0.8 * k, table_sd = std::sqrt(k * 0.8 * 0.2);
  const double z_rate = (k - mean) / sd;
  const double z_split = (static_cast<double>(stats.from_table) - table_mean) / table_sd;
  const bool ok = stats.eligible >= 100000 && std::abs(z_rate) <= 3.0 && std::abs(z_split) <= 3.0 &&
                  stats.from_table + stats.random == stats.replaced;
  return {ok, std::to_string(stats.replaced) + " of " + std::to_string(stats.eligible) + " replaced (z = " +
                  fmt_double(z_rate, 2) + "), " + std::to_string(stats.from_table) + " from table / " +
                  std::to_string(stats.random) + " random (z = " + fmt_double(z_split, 2) + ")"};
}

// ---- A7 ---------------------------------------------------------------------

Outcome a7_metrics_oracle() {
  auto pair = [](TokenIds x, TokenIds y) { return data::ExamplePair(std::move(x), std::move(y)); };
  // Clean untouched, clean changed, fixed, wrong character, one of two errors fixed, untouched error.
  const std::vector<data::ExamplePair> gold = {pair({4, 5, 6}, {4, 5, 6}), pair({4, 5, 6}, {4, 5, 6}),
                                               pair({4, 9, 6}, {4, 5, 6}), pair({4, 9, 6}, {4, 5, 6}),
                                               pair({9, 9, 6}, {4, 5, 6}), pair({4, 9, 6}, {4, 5, 6})};
  const std::vector<TokenIds> out = {{4, 5, 6}, {4, 7, 6}, {4, 5, 6}, {4, 8, 6}, {9, 5, 6}, {4, 9, 6}};
  const auto r = eval::score(out, gold);
  // Hand tally: detection TP 2 FP 1 FN 2 TN 1; correction TP 1 FP 1 FN 3 TN 1.
  const std::vector<double> got = {r.detection.accuracy,  r.detection.precision,  r.detection.recall,
                                   r.detection.f1,        r.correction.accuracy, r.correction.precision,
                                   r.correction.recall,   r.correction.f1};
  const std::vector<double> want = {3.0 / 6.0, 2.0 / 3.0, 2.0 / 4.0, 4.0 / 7.0, 2.0 / 6.0, 1.0 / 2.0, 1.0 / 4.0, 1.0 / 3.0};
  int fixture_ok = 0;
  for (std::size_t i = 0; i < 8; ++i) fixture_ok += std::abs(got[i] - want[i]) <= 1e-15;

  Rng rng(0xA7);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<data::ExamplePair> g;
    std::vector<TokenIds> o;
    const std::size_t n = 1 + uniform_index(rng, 30);
    for (std::size_t s = 0; s < n; ++s) {
      TokenIds y = random_ids(2 + uniform_index(rng, 5), 9, rng), x = y;
      for (auto& id : x) {
        if (uniform01(rng) < 0.15) id = random_ids(1, 9, rng)[0];
      }
      TokenIds pred = uniform01(rng) < 0.5 ? y : x;
      if (uniform01(rng) < 0.3) pred[uniform_index(rng, pred.size())] = random_ids(1, 9, rng)[0];
      g.emplace_back(x, y);
      o.push_back(pred);
    }
    const auto rep = eval::score(o, g);
    for (const auto* t : {&rep.detection, &rep.correction}) {
      const double expect = t->precision + t->recall > 0 ? 2 * t->precision * t->recall / (t->precision + t->recall) : 0;
      worst = std::max(worst, std::abs(t->f1 - expect));
    }
  }
  return {fixture_ok == 8 && worst <= 1e-12,
          "fixture " + std::to_string(fixture_ok) + "/8 metrics exact; fuzzed |F1 - 2PR/(P+R)| <= " +
              fmt_double(worst * 1e16, 2) + "e-16 over 1000 report pairs"};
}

// ---- A8 ---------------------------------------------------------------------

Outcome a8_determinism_and_resume() {
  data::SyntheticTaskOptions opts;
  opts.seed = 88;
  opts.train = 400;
  opts.dev = 60;
  opts.test = 10;
  const auto task = data::build_synthetic_task(opts);
  ModelConfig c;
  c.vocab_size = task.vocab.size();
  c.width = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn = 32;
  c.gru_hidden = 8;
  train::TrainConfig tc;
  tc.batch_size = 32;
  tc.epochs = 3;
  tc.seed = 5;
  tc.adam.lr = 2e-3;

  // Fixed-seed retraining.
  auto full_run = [&] {
    SoftMaskedModel m(c, 9);
    const auto r = train::finetune(m, task.train, task.dev, tc);
    std::string losses;
    for (const auto& e : r.history) losses += fmt_double(e.train_loss, 17) + eval::to_json(e.dev).dump();
    return std::make_pair(train::parameter_digest(m), losses);
  };
  const auto first = full_run(), second = full_run();
  const bool retrain_ok = first == second;

  // Resume after k steps through a serialized checkpoint, for every mode.
  int modes_ok = 0;
  const std::uint64_t total = 30, split = 11;
  for (const auto& [label, mode] : kToyRows) {
    ModelConfig mc = c;
    mc.mode = mode;
    SoftMaskedModel straight(mc, 9);
    auto s1 = train::AdamState::init(straight.parameters(), tc.adam);
    const auto whole = train::run_steps(straight, s1, task.train, tc, total);

    SoftMaskedModel part(mc, 9);
    auto s2 = train::AdamState::init(part.parameters(), tc.adam);
    auto losses = train::run_steps(part, s2, task.train, tc, split);
    train::ModelBundle b{task.vocab, s2, 9, {}};
    const auto bytes = train::serialize_checkpoint(train::make_checkpoint(part, b));
    auto [resumed, bundle] = train::restore_checkpoint(train::parse_checkpoint(bytes));
    const auto rest = train::run_steps(resumed, *bundle.optimizer, task.train, tc, total - split);
    losses.insert(losses.end(), rest.begin(), rest.end());

    bool same = losses.size() == whole.size() &&
                train::parameter_digest(resumed) == train::parameter_digest(straight);
    for (std::size_t i = 0; same && i < whole.size(); ++i) {
      same = std::memcmp(&losses[i].total, &whole[i].total, sizeof(double)) == 0;
    }
    modes_ok += same;
  }
  return {retrain_ok && modes_ok == static_cast<int>(kToyRows.size()),
          std::string("retraining ") + (retrain_ok ? "bit-identical" : "differs") + "; resume after " +
              std::to_string(split) + " of " + std::to_string(total) + " steps matches step-for-step in " +
              std::to_string(modes_ok) + "/" + std::to_string(kToyRows.size()) + " modes"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<std::string> only(argv + 1, argv + argc);
  auto selected = [&](const std::string& id) { return only.empty() || only.count(id) > 0; };
  spdlog::set_level(spdlog::level::warn);
  if (const char* lvl = std::getenv("SOFTMASK_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));

  const bool need_ablation = selected("A5");
  const std::vector<std::tuple<std::string, std::string, std::function<Outcome()>>> criteria = {
      {"A1", "gradient suite", a1_gradients},
      {"A2", "degeneracy identities", a2_degeneracy},
      {"A3", "loss algebra", a3_loss_algebra},
      {"A4", "toy end-to-end", [&] { return a4_toy_end_to_end(need_ablation); }},
      {"A5", "ablation direction", a5_ablation_direction},
      {"A6", "corruption statistics", a6_corruption_statistics},
      {"A7", "metrics oracle", a7_metrics_oracle},
      {"A8", "determinism and resume", a8_determinism_and_resume},
  };
  int failed = 0, run = 0;
  for (const auto& [id, title, fn] : criteria) {
    if (!selected(id)) continue;
    ++run;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s  %s: %s\n", id.c_str(), o.pass ? "PASS" : "FAIL", title.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", run - failed, run);
  return failed == 0 ? 0 : 1;
}
