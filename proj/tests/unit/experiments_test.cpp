#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "softmask/experiments.hpp"

namespace softmask {
namespace {

using experiments::ExperimentData;

ExperimentData tiny_data() {
  data::SyntheticTaskOptions o;
  o.seed = 21;
  o.train = 48;
  o.dev = 16;
  o.test = 40;
  auto task = data::build_synthetic_task(o);
  return {task.train, task.dev, task.test};
}

model::SoftMaskedModel tiny_model(std::size_t vocab) {
  model::ModelConfig c;
  c.vocab_size = vocab;
  c.width = 8;
  c.layers = 1;
  c.heads = 2;
  c.ffn = 16;
  c.gru_hidden = 6;
  return model::SoftMaskedModel(c, 13);
}

train::TrainConfig tiny_budget() {
  train::TrainConfig b;
  b.batch_size = 16;
  b.epochs = 1;
  b.seed = 3;
  return b;
}

TEST(Ablation, DefaultSpecHasEightDistinctRowsInOrder) {
  const auto spec = experiments::default_ablation();
  ASSERT_EQ(spec.size(), 8u);
  const std::vector<std::string> labels = {"Soft",   "Soft-R",     "Hard(0.95)", "Hard(0.9)",
                                           "Hard(0.7)", "Random", "NoDetector", "ForceOracle (upper bound)"};
  for (std::size_t i = 0; i < spec.size(); ++i) EXPECT_EQ(spec[i].label, labels[i]);
  EXPECT_FALSE(spec[1].residual);
  EXPECT_EQ(spec[3].mode, model::MaskingMode::hard(0.9));
  EXPECT_NO_THROW(experiments::validate(spec));
}

TEST(Ablation, DuplicateVariantRejected) {
  auto spec = experiments::default_ablation();
  spec.push_back({"again", model::MaskingMode::hard(0.7), true});
  EXPECT_THROW(experiments::validate(spec), ContractError);
}

TEST(Ablation, RowsShareInitializationAndOracleRecallIsOne) {
  const auto data = tiny_data();
  const auto init = tiny_model(60);
  const auto rows = experiments::run_ablation(experiments::default_ablation(), init, data, tiny_budget());
  ASSERT_EQ(rows.size(), 8u);
  std::set<std::string> digests;
  for (const auto& r : rows) digests.insert(r.init_digest);
  EXPECT_EQ(digests.size(), 1u);
  EXPECT_EQ(*digests.begin(), train::parameter_digest(init));
  const auto& oracle = rows.back().test.detection;
  EXPECT_EQ(oracle.recall, 1.0);
  EXPECT_EQ(oracle.counts.fp, 0u);
  EXPECT_EQ(rows[4].config.mode, model::MaskingMode::hard(0.7));
  EXPECT_FALSE(rows[1].config.residual);
  const std::string table = eval::format_table(experiments::table_rows(rows));
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 9);
}

TEST(Sweep, DefaultGridContainsPointEight) {
  const auto grid = experiments::default_lambda_grid();
  EXPECT_EQ(grid, (std::vector<double>{0.2, 0.5, 0.8, 1.0}));
}

TEST(Sweep, OneRowPerLambdaAndBestByDevF1) {
  const auto data = tiny_data();
  const auto init = tiny_model(60);
  const std::vector<double> grid = {0.0, 0.8, 1.0};
  const auto r = experiments::lambda_sweep(grid, init, data, tiny_budget());
  ASSERT_EQ(r.rows.size(), 3u);
  double best = -1.0, best_lambda = -1.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    EXPECT_EQ(r.rows[i].config.lambda, grid[i]);
    if (r.rows[i].fit.best_dev_f1 > best) {
      best = r.rows[i].fit.best_dev_f1;
      best_lambda = grid[i];
    }
  }
  EXPECT_EQ(r.best_lambda, best_lambda);
}

TEST(Sweep, RejectsOutOfRangeLambda) {
  const auto data = tiny_data();
  const auto init = tiny_model(60);
  EXPECT_THROW(experiments::lambda_sweep({0.5, 1.2}, init, data, tiny_budget()), ContractError);
  EXPECT_THROW(experiments::lambda_sweep({}, init, data, tiny_budget()), ContractError);
}

}  // namespace
}  // namespace softmask
