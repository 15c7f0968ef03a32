// Trains a small soft-masked corrector on the synthetic language and shows what
// it does to a few corrupted sentences.
//
//   quickstart [train_pairs] [epochs]

#include <cstdio>
#include <string>

#include "softmask/eval.hpp"
#include "softmask/train.hpp"

using namespace softmask;

int main(int argc, char** argv) {
  data::SyntheticTaskOptions opts;
  opts.train = argc > 1 ? std::stoul(argv[1]) : 4000;
  opts.dev = 300;
  opts.test = 300;
  const auto task = data::build_synthetic_task(opts);
  std::printf("vocabulary %zu ids, %zu training pairs\n", task.vocab.size(), task.train.size());

  model::ModelConfig config;
  config.vocab_size = task.vocab.size();
  config.width = 32;
  config.heads = 4;
  config.ffn = 128;
  config.gru_hidden = 32;
  model::SoftMaskedModel m(config, 1);

  train::TrainConfig tc;
  tc.epochs = argc > 2 ? std::stoul(argv[2]) : 4;
  tc.adam.lr = 2e-3;
  train::finetune(m, task.train, task.dev, tc);

  const auto report = eval::evaluate(m, task.test, 1);
  std::printf("\n%s\n", eval::format_table({{"soft", report}}).c_str());

  int shown = 0;
  for (const auto& pair : task.test) {
    if (!pair.has_error() || shown == 5) continue;
    ++shown;
    const auto pred = m.predict(pair.x());
    std::printf("input   %s\noutput  %s\ngold    %s\nflagged ", task.vocab.decode(pair.x()).c_str(),
                task.vocab.decode(pred.output).c_str(), task.vocab.decode(pair.y()).c_str());
    for (double p : pred.error_probs) std::printf("%c", p > 0.5 ? '^' : ' ');
    std::printf("\n\n");
  }
  return 0;
}
