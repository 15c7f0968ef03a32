#pragma once

// The `softmask` command: synth, pretrain, train, eval, ablate, sweep, predict.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
// Every command accepts --config FILE holding `key = <JSON value>` lines, where
// key is a long flag name without dashes; flags on the command line win. Each
// run writes run.conf in the same format, so `--config run.conf` repeats it.
// SOFTMASK_LOG sets the log level (trace, debug, info, warn, error, off).

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "softmask/datagen.hpp"
#include "softmask/eval.hpp"
#include "softmask/experiments.hpp"
#include "softmask/hash.hpp"
#include "softmask/model.hpp"
#include "softmask/train.hpp"

namespace softmask::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Bad arguments or incompatible inputs; exits with code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string json_scalar_text(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

/// `key = <JSON value>` lines; blank lines and lines starting with '#' are skipped.
class KeyJsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App* app, bool, bool, std::string) const override {
    std::string out;
    for (const CLI::Option* opt : app->get_options()) {
      if (opt->get_lnames().empty() || opt->count() == 0) continue;
      out += opt->get_lnames().front() + " = " + nlohmann::json(opt->as<std::string>()).dump() + "\n";
    }
    return out;
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    std::vector<CLI::ConfigItem> items;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw CLI::ConversionError("config line " + std::to_string(n) + ": expected key = value");
      CLI::ConfigItem item;
      item.name = trim(std::string_view(t).substr(0, eq));
      nlohmann::json value;
      try {
        value = nlohmann::json::parse(t.substr(eq + 1));
      } catch (const nlohmann::json::exception&) {
        throw CLI::ConversionError("config line " + std::to_string(n) + ": value of " + item.name + " is not JSON");
      }
      if (value.is_object() || value.is_null()) {
        throw CLI::ConversionError("config line " + std::to_string(n) + ": " + item.name + " needs a scalar or array");
      }
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(json_scalar_text(v));
      } else {
        item.inputs.push_back(json_scalar_text(value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }
};

/// Binds options to variables and remembers them so the effective run
/// configuration can be written back out.
class Recorder {
 public:
  explicit Recorder(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* option(const std::string& name, T& var, const std::string& help) {
    entries_.emplace_back(name, [&var] { return json(var); });
    return app_->add_option("--" + name, var, help)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    entries_.emplace_back(name, [&var] { return json(var); });
    return app_->add_flag("--" + name, var, help);
  }

  bool given(const std::string& name) const { return app_->count("--" + name) > 0; }

  void add_config() {
    app_->add_option("--config", config_path_,
                     "file of `key = <JSON value>` lines; command-line flags take precedence");
  }

  const std::string& config_path() const { return config_path_; }

  /// Fills options not given on the command line from the config file text.
  void merge_config(const std::string& text) {
    std::istringstream in(text);
    for (const auto& item : KeyJsonConfig().from_config(in)) {
      CLI::Option* opt = app_->get_option_no_throw("--" + item.name);
      if (opt == nullptr || item.name == "config") {
        throw CLI::ConversionError("config key " + item.name + " is not an option of " + app_->get_name());
      }
      if (opt->count() > 0) continue;
      opt->add_result(item.inputs);
      opt->run_callback();
    }
  }

  void require(std::initializer_list<const char*> names) const {
    for (const char* name : names) {
      if (!given(name)) throw CLI::RequiredError("--" + std::string(name));
    }
  }

  json snapshot() const {
    json j = json::object();
    for (const auto& [name, get] : entries_) j[name] = get();
    return j;
  }

  /// The snapshot in config-file form, skipping empty strings.
  std::string config_text() const {
    std::string out;
    const json snap = snapshot();
    for (const auto& [name, value] : snap.items()) {
      if (value.is_string() && value.get<std::string>().empty()) continue;
      out += name + " = " + value.dump() + "\n";
    }
    return out;
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::string config_path_;
  std::vector<std::pair<std::string, std::function<json()>>> entries_;
};

// ---------------------------------------------------------------------------
// Shared options
// ---------------------------------------------------------------------------

struct ArchOptions {
  std::size_t width = model::ModelConfig{}.width;
  std::size_t layers = model::ModelConfig{}.layers;
  std::size_t heads = model::ModelConfig{}.heads;
  std::size_t ffn = model::ModelConfig{}.ffn;
  std::size_t gru_hidden = model::ModelConfig{}.gru_hidden;
  std::size_t max_len = model::ModelConfig{}.max_len;

  void add(Recorder& r) {
    r.option("width", width, "hidden width")->check(CLI::PositiveNumber);
    r.option("layers", layers, "encoder blocks");
    r.option("heads", heads, "attention heads")->check(CLI::PositiveNumber);
    r.option("ffn", ffn, "feed-forward width")->check(CLI::PositiveNumber);
    r.option("gru-hidden", gru_hidden, "detector GRU state size per direction")->check(CLI::PositiveNumber);
    r.option("max-len", max_len, "longest accepted sentence")->check(CLI::PositiveNumber);
  }
};

struct ModeOptions {
  std::string mode = "soft";
  double threshold = 0.5;
  double lambda = model::ModelConfig{}.lambda;
  bool no_residual = false;

  void add(Recorder& r) {
    r.option("mode", mode, "masking mode")->check(CLI::IsMember({"soft", "hard", "random", "none", "force"}));
    r.option("threshold", threshold, "hard-masking threshold")->check(CLI::Range(0.0, 1.0));
    r.option("lambda", lambda, "weight of the correction loss")->check(CLI::Range(0.0, 1.0));
    r.flag("no-residual", no_residual, "drop the residual connection before the output layer");
  }

  model::MaskingMode masking() const { return {model::parse_mode(mode), threshold}; }
};

struct BudgetOptions {
  std::size_t epochs = train::TrainConfig{}.epochs;
  std::size_t batch = train::TrainConfig{}.batch_size;
  double lr = train::AdamConfig{}.lr;
  bool drop_unchanged = false;
  bool keep_last = false;
  bool check_numerics = false;

  void add(Recorder& r) {
    r.option("epochs", epochs, "training epochs")->check(CLI::PositiveNumber);
    r.option("batch", batch, "sentences per step")->check(CLI::PositiveNumber);
    r.option("lr", lr, "Adam learning rate")->check(CLI::PositiveNumber);
    r.flag("drop-unchanged", drop_unchanged, "skip training pairs without errors");
    r.flag("keep-last", keep_last, "keep final parameters instead of the best dev epoch");
    r.flag("check-numerics", check_numerics, "abort on the first NaN or Inf");
  }

  train::TrainConfig config(std::uint64_t seed) const {
    train::TrainConfig c;
    c.seed = seed;
    c.batch_size = batch;
    c.adam.lr = lr;
    c.epochs = epochs;
    c.drop_unchanged = drop_unchanged;
    c.keep_best = !keep_last;
    c.check_numerics = check_numerics;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Inputs and outputs
// ---------------------------------------------------------------------------

/// Files read by a command, with their content hashes for the manifest.
class Inputs {
 public:
  std::string read(const std::string& path) {
    std::string text = data::read_file(path);
    hashes_[path] = git_blob_hash(text);
    return text;
  }
  const json& hashes() const { return hashes_; }

 private:
  json hashes_ = json::object();
};

struct Dataset {
  Vocabulary vocab;
  bool vocab_from_file = false;
  std::vector<data::ExamplePair> train, dev, test;
  std::vector<std::string> corpus;
};

inline std::string vocab_path(const std::string& dir) { return (fs::path(dir) / "vocab.txt").string(); }

inline Vocabulary read_vocab_file(Inputs& inputs, const std::string& path) {
  std::string text = inputs.read(path);
  if (!text.empty() && text.back() == '\n') text.pop_back();
  const std::u32string chars = utf8_decode(text);
  return Vocabulary(std::vector<char32_t>(chars.begin(), chars.end()));
}

/// Loads `which` of {train, dev, test, corpus} from a directory written by `synth`.
/// Without vocab.txt the vocabulary is built from the loaded text.
inline Dataset load_dataset(Inputs& inputs, const std::string& dir, const std::vector<std::string>& which,
                            const Vocabulary* fixed_vocab = nullptr) {
  if (!fs::is_directory(dir)) throw UsageError("data directory " + dir + " does not exist");
  Dataset d;
  std::map<std::string, std::vector<data::TextPair>> text;
  for (const auto& name : which) {
    const std::string path = (fs::path(dir) / name).string() + (name == "corpus" ? ".txt" : ".jsonl");
    if (name == "corpus") {
      d.corpus = data::split_lines(inputs.read(path));
    } else {
      text[name] = data::parse_jsonl(inputs.read(path));
    }
  }
  if (fixed_vocab != nullptr) {
    d.vocab = *fixed_vocab;
  } else if (fs::exists(vocab_path(dir))) {
    d.vocab = read_vocab_file(inputs, vocab_path(dir));
    d.vocab_from_file = true;
  } else {
    std::vector<std::string> all = d.corpus;
    for (const auto& [_, pairs] : text) {
      for (const auto& p : pairs) {
        all.push_back(p.x);
        all.push_back(p.y);
      }
    }
    d.vocab = build_vocab(all);
  }
  if (text.count("train")) d.train = data::encode_pairs(text["train"], d.vocab);
  if (text.count("dev")) d.dev = data::encode_pairs(text["dev"], d.vocab);
  if (text.count("test")) d.test = data::encode_pairs(text["test"], d.vocab);
  return d;
}

inline std::string checkpoint_path(const std::string& p) {
  return fs::is_directory(p) ? (fs::path(p) / "model.ck").string() : p;
}

struct Loaded {
  model::SoftMaskedModel model;
  train::ModelBundle bundle;
};

inline Loaded load_model(Inputs& inputs, const std::string& path) {
  const std::string file = checkpoint_path(path);
  auto [m, b] = train::restore_checkpoint(train::parse_checkpoint(inputs.read(file)));
  return {std::move(m), std::move(b)};
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("--out: cannot create directory " + dir);
}

inline void write_manifest(const std::string& dir, const std::string& command, const Recorder& rec,
                           std::uint64_t seed, const Inputs& inputs, const json& metrics,
                           const std::vector<std::string>& outputs = {}) {
  json m;
  m["command"] = command;
  m["config"] = rec.snapshot();
  m["seed"] = seed;
  m["inputs"] = inputs.hashes();
  m["metrics"] = metrics;
  json out = json::object();
  for (const auto& name : outputs) out[name] = git_blob_hash(data::read_file((fs::path(dir) / name).string()));
  m["outputs"] = out;
  data::write_file((fs::path(dir) / "run.conf").string(), rec.config_text());
  data::write_file((fs::path(dir) / "manifest.json").string(), m.dump(2) + "\n");
}

/// Architecture for a new model, or the checkpoint's when initializing from
/// one; explicitly given size flags must then agree with it.
inline model::ModelConfig resolve_config(const Recorder& rec, const ArchOptions& arch, const ModeOptions* mode,
                                         std::size_t vocab_size, const model::ModelConfig* from) {
  model::ModelConfig c;
  if (from != nullptr) {
    c = *from;
    const std::vector<std::tuple<std::string, std::size_t, std::size_t>> sizes = {
        {"width", arch.width, from->width},          {"layers", arch.layers, from->layers},
        {"heads", arch.heads, from->heads},          {"ffn", arch.ffn, from->ffn},
        {"gru-hidden", arch.gru_hidden, from->gru_hidden}, {"max-len", arch.max_len, from->max_len}};
    for (const auto& [name, wanted, have] : sizes) {
      if (rec.given(name) && wanted != have) {
        throw UsageError("--" + name + " is " + std::to_string(wanted) + " but the checkpoint has " +
                         std::to_string(have));
      }
    }
    if (vocab_size != from->vocab_size) {
      throw UsageError("vocabulary size mismatch: checkpoint has " + std::to_string(from->vocab_size) +
                       ", data has " + std::to_string(vocab_size));
    }
  } else {
    c.vocab_size = vocab_size;
    c.width = arch.width;
    c.layers = arch.layers;
    c.heads = arch.heads;
    c.ffn = arch.ffn;
    c.gru_hidden = arch.gru_hidden;
    c.max_len = arch.max_len;
  }
  if (mode != nullptr) {
    c.mode = mode->masking();
    c.lambda = mode->lambda;
    c.residual = !mode->no_residual;
  }
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  return c;
}

/// Data used with a checkpoint must fit its vocabulary: an explicit vocab.txt
/// must match it, and otherwise every data character must be known to it.
inline void check_vocab(const Vocabulary& checkpoint, const Dataset& d) {
  bool fits = d.vocab == checkpoint;
  if (!fits && !d.vocab_from_file) {
    fits = std::all_of(d.vocab.chars().begin(), d.vocab.chars().end(),
                       [&](char32_t c) { return checkpoint.contains(c); });
  }
  if (!fits) {
    throw UsageError("vocabulary mismatch: checkpoint has " + std::to_string(checkpoint.size()) + " ids, data has " +
                     std::to_string(d.vocab.size()) + (d.vocab_from_file ? " (vocab.txt)" : ""));
  }
}

inline void check_lengths(const std::vector<data::ExamplePair>& pairs, std::size_t max_len, const std::string& what) {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].size() > max_len) {
      throw UsageError(what + " line " + std::to_string(i + 1) + " has " + std::to_string(pairs[i].size()) +
                       " characters; the model accepts at most " + std::to_string(max_len));
    }
  }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct Streams {
  std::istream& in;
  std::ostream& out;
  std::ostream& err;
};

struct SynthOptions {
  std::uint64_t seed = 7;
  std::string out;
  std::size_t sentences = 20000;
  std::size_t dev = 2000;
  std::size_t test = 2000;
  double replace_rate = 0.15;
  double confusion_share = 0.8;
  std::size_t substitutes = 1;
};

inline int cmd_synth(const SynthOptions& o, const Recorder& rec, Inputs& inputs, Streams io) {
  ensure_dir(o.out);
  data::SyntheticTaskOptions t;
  t.seed = o.seed;
  t.train = o.sentences;
  t.dev = o.dev;
  t.test = o.test;
  t.corruption.replace_rate = o.replace_rate;
  t.corruption.confusion_share = o.confusion_share;
  t.corruption.random_share = 1.0 - o.confusion_share;
  t.min_substitutes = 1;
  t.max_substitutes = o.substitutes;
  const auto task = data::build_synthetic_task(t);
  const fs::path dir(o.out);
  data::write_file((dir / "corpus.txt").string(), data::join_lines(task.corpus));
  data::write_file((dir / "vocab.txt").string(), train::vocab_string(task.vocab) + "\n");
  data::write_file((dir / "confusion.tsv").string(), task.confusion.to_tsv(task.vocab));
  data::write_file((dir / "train.jsonl").string(), data::pairs_to_jsonl(task.train, task.vocab));
  data::write_file((dir / "dev.jsonl").string(), data::pairs_to_jsonl(task.dev, task.vocab));
  data::write_file((dir / "test.jsonl").string(), data::pairs_to_jsonl(task.test, task.vocab));
  const auto& s = task.stats;
  const double rate = s.eligible ? static_cast<double>(s.replaced) / static_cast<double>(s.eligible) : 0.0;
  json stats = {{"eligible", s.eligible}, {"replaced", s.replaced}, {"rate", rate},
                {"from_table", s.from_table}, {"random", s.random}, {"fallbacks", s.fallbacks},
                {"vocab_size", task.vocab.size()}};
  io.out << "vocabulary " << task.vocab.size() << " ids, " << task.train.size() << "/" << task.dev.size() << "/"
         << task.test.size() << " train/dev/test pairs\n"
         << "replaced " << s.replaced << " of " << s.eligible << " positions (rate " << rate << "): "
         << s.from_table << " from the confusion table, " << s.random << " random\n";
  write_manifest(o.out, "synth", rec, o.seed, inputs, stats,
                 {"corpus.txt", "vocab.txt", "confusion.tsv", "train.jsonl", "dev.jsonl", "test.jsonl"});
  return kExitOk;
}

struct PretrainOptions {
  std::uint64_t seed = 7;
  std::string out;
  std::string data;
  std::string init_from;
  std::int64_t steps = 1000;
  std::size_t batch = 32;
  double lr = train::AdamConfig{}.lr;
  ArchOptions arch;
};

inline int cmd_pretrain(const PretrainOptions& o, const Recorder& rec, Inputs& inputs, Streams io) {
  std::optional<Loaded> init;
  if (!o.init_from.empty()) init = load_model(inputs, o.init_from);
  Dataset d = load_dataset(inputs, o.data, {"corpus"});
  if (init) {
    check_vocab(init->bundle.vocab, d);
    d.vocab = init->bundle.vocab;
  }
  const auto config = resolve_config(rec, o.arch, nullptr, d.vocab.size(), init ? &init->model.config() : nullptr);
  model::SoftMaskedModel m = init ? std::move(init->model) : model::SoftMaskedModel(config, o.seed);
  std::vector<TokenIds> corpus;
  for (const auto& line : d.corpus) {
    if (line.empty()) continue;
    corpus.push_back(d.vocab.encode(line));
    if (corpus.back().size() > config.max_len) {
      throw UsageError("corpus line " + std::to_string(corpus.size()) + " is longer than --max-len " +
                       std::to_string(config.max_len));
    }
  }
  train::PretrainConfig pc;
  pc.seed = o.seed;
  pc.batch_size = o.batch;
  pc.adam.lr = o.lr;
  const auto losses = train::mlm_pretrain(m, corpus, pc, o.steps);
  const std::size_t tail = std::min<std::size_t>(losses.size(), 100);
  double tail_mean = 0.0;
  for (std::size_t i = losses.size() - tail; i < losses.size(); ++i) tail_mean += losses[i] / static_cast<double>(tail);
  ensure_dir(o.out);
  train::ModelBundle bundle{d.vocab, std::nullopt, o.seed, rec.snapshot()};
  train::save_checkpoint((fs::path(o.out) / "model.ck").string(), train::make_checkpoint(m, bundle));
  json metrics = {{"first_loss", losses.front()}, {"final_loss", losses.back()}, {"mean_loss_last_100", tail_mean}};
  io.out << "pretrained " << o.steps << " steps, loss " << losses.front() << " -> " << tail_mean
         << " (mean of last " << tail << ")\n";
  write_manifest(o.out, "pretrain", rec, o.seed, inputs, metrics, {"model.ck"});
  return kExitOk;
}

struct TrainOptions {
  std::uint64_t seed = 7;
  std::string out;
  std::string data;
  std::string init_from;
  std::string resume;
  ArchOptions arch;
  ModeOptions mode;
  BudgetOptions budget;
};

inline json history_json(const train::FinetuneResult& r) {
  json h = json::array();
  for (const auto& e : r.history) {
    h.push_back({{"epoch", e.epoch + 1},
                 {"step", e.step},
                 {"train_loss", e.train_loss},
                 {"dev.detection.f1", e.dev.detection.f1},
                 {"dev.correction.f1", e.dev.correction.f1}});
  }
  return h;
}

inline int cmd_train(const TrainOptions& o, const Recorder& rec, Inputs& inputs, Streams io) {
  if (!o.init_from.empty() && !o.resume.empty()) throw UsageError("--init-from and --resume are exclusive");
  std::optional<Loaded> init;
  if (!o.init_from.empty()) init = load_model(inputs, o.init_from);
  if (!o.resume.empty()) init = load_model(inputs, o.resume);
  Dataset d = load_dataset(inputs, o.data, {"train", "dev"}, nullptr);
  if (init) {
    check_vocab(init->bundle.vocab, d);
    d = load_dataset(inputs, o.data, {"train", "dev"}, &init->bundle.vocab);
  }
  const bool has_test = fs::exists(fs::path(o.data) / "test.jsonl");
  if (has_test) d.test = load_dataset(inputs, o.data, {"test"}, &d.vocab).test;
  const auto config = resolve_config(rec, o.arch, &o.mode, d.vocab.size(), init ? &init->model.config() : nullptr);
  check_lengths(d.train, config.max_len, "train.jsonl");
  check_lengths(d.dev, config.max_len, "dev.jsonl");
  check_lengths(d.test, config.max_len, "test.jsonl");

  model::SoftMaskedModel m = init ? init->model.clone(config) : model::SoftMaskedModel(config, o.seed);
  const train::TrainConfig tc = o.budget.config(o.seed);
  train::AdamState state = train::AdamState::init(m.parameters(), tc.adam);
  if (!o.resume.empty()) {
    if (!init->bundle.optimizer) throw UsageError("--resume: checkpoint has no optimizer state");
    state = *init->bundle.optimizer;
  }
  const auto fit = train::finetune(m, d.train, d.dev, tc, &state);

  json metrics;
  metrics["best_epoch"] = fit.best_epoch + 1;
  metrics["dev"] = nullptr;
  for (const auto& rec_epoch : fit.history) {
    if (rec_epoch.epoch == fit.best_epoch) metrics["dev"] = eval::to_json(rec_epoch.dev);
  }
  if (has_test) {
    const auto report = eval::evaluate(m, d.test, experiments::test_seed(tc));
    metrics["test"] = eval::to_json(report);
    io.out << eval::format_table({{model::mode_label(config.mode), report}});
  }
  metrics["history"] = history_json(fit);
  metrics["seconds"] = fit.seconds;
  ensure_dir(o.out);
  train::ModelBundle bundle{d.vocab, state, o.seed, rec.snapshot()};
  train::save_checkpoint((fs::path(o.out) / "model.ck").string(), train::make_checkpoint(m, bundle));
  write_manifest(o.out, "train", rec, o.seed, inputs, metrics, {"model.ck"});
  return kExitOk;
}

struct EvalOptions {
  std::string model;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::string mode;
  double threshold = 0.5;
};

inline int cmd_eval(const EvalOptions& o, const Recorder& rec, Inputs& inputs, Streams io) {
  Loaded l = load_model(inputs, o.model);
  std::string file = o.data;
  if (fs::is_directory(o.data)) {
    if (fs::exists(vocab_path(o.data))) {
      Dataset d;
      d.vocab = read_vocab_file(inputs, vocab_path(o.data));
      d.vocab_from_file = true;
      check_vocab(l.bundle.vocab, d);
    }
    file = (fs::path(o.data) / "test.jsonl").string();
  }
  const auto pairs = data::encode_pairs(data::parse_jsonl(inputs.read(file)), l.bundle.vocab);
  model::ModelConfig config = l.model.config();
  if (!o.mode.empty()) config.mode = {model::parse_mode(o.mode), o.threshold};
  try {
    config.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  check_lengths(pairs, config.max_len, file);
  l.model.set_mode(config.mode);
  const std::uint64_t seed = rec.given("seed") ? o.seed : l.bundle.seed;
  train::TrainConfig tc;
  tc.seed = seed;
  const auto report = eval::evaluate(l.model, pairs, experiments::test_seed(tc));
  io.out << eval::format_table({{model::mode_label(config.mode), report}});
  if (!o.out.empty()) {
    ensure_dir(o.out);
    write_manifest(o.out, "eval", rec, seed, inputs, eval::to_json(report));
  }
  return kExitOk;
}

struct ExperimentOptions {
  std::uint64_t seed = 7;
  std::string out;
  std::string data;
  std::string init_from;
  std::vector<double> lambdas = experiments::default_lambda_grid();
  ArchOptions arch;
  ModeOptions mode;
  BudgetOptions budget;
};

inline json rows_json(const std::vector<experiments::RowResult>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"label", r.label},
                   {"config", model::to_json(r.config)},
                   {"init_digest", r.init_digest},
                   {"best_epoch", r.fit.best_epoch + 1},
                   {"dev.correction.f1", r.fit.best_dev_f1},
                   {"test", eval::to_json(r.test)}});
  }
  return out;
}

inline int cmd_experiment(const ExperimentOptions& o, const Recorder& rec, Inputs& inputs, Streams io, bool sweep) {
  std::optional<Loaded> init;
  if (!o.init_from.empty()) init = load_model(inputs, o.init_from);
  Dataset d = load_dataset(inputs, o.data, {"train", "dev", "test"});
  if (init) {
    check_vocab(init->bundle.vocab, d);
    d = load_dataset(inputs, o.data, {"train", "dev", "test"}, &init->bundle.vocab);
  }
  const auto config = resolve_config(rec, o.arch, sweep ? &o.mode : nullptr, d.vocab.size(),
                                     init ? &init->model.config() : nullptr);
  check_lengths(d.train, config.max_len, "train.jsonl");
  check_lengths(d.dev, config.max_len, "dev.jsonl");
  check_lengths(d.test, config.max_len, "test.jsonl");
  const model::SoftMaskedModel start = init ? init->model.clone(config) : model::SoftMaskedModel(config, o.seed);
  const experiments::ExperimentData data{d.train, d.dev, d.test};
  const train::TrainConfig tc = o.budget.config(o.seed);
  json metrics;
  std::vector<experiments::RowResult> rows;
  if (sweep) {
    for (double l : o.lambdas) {
      if (!(l >= 0.0 && l <= 1.0)) throw UsageError("--lambdas: " + std::to_string(l) + " is outside [0, 1]");
    }
    auto r = experiments::lambda_sweep(o.lambdas, start, data, tc);
    rows = std::move(r.rows);
    metrics["best_lambda"] = r.best_lambda;
  } else {
    rows = experiments::run_ablation(experiments::default_ablation(), start, data, tc);
  }
  metrics["rows"] = rows_json(rows);
  const std::string table = eval::format_table(experiments::table_rows(rows));
  io.out << table;
  if (sweep) io.out << "best lambda by dev correction F1: " << metrics["best_lambda"].get<double>() << "\n";
  ensure_dir(o.out);
  data::write_file((fs::path(o.out) / "table.txt").string(), table);
  write_manifest(o.out, sweep ? "sweep" : "ablate", rec, o.seed, inputs, metrics, {"table.txt"});
  return kExitOk;
}

struct PredictOptions {
  std::string model;
  std::string input = "-";
  std::string out = "-";
  bool probs = false;
  std::uint64_t seed = 0;
};

/// One corrected line per input line. Characters outside the vocabulary pass
/// through unchanged; --probs appends the detector probability of each position.
inline int cmd_predict(const PredictOptions& o, const Recorder& rec, Inputs& inputs, Streams io) {
  const Loaded l = load_model(inputs, o.model);
  const auto& config = l.model.config();
  if (config.mode.kind == model::MaskKind::ForceOracle) {
    throw UsageError("a force-mode model needs gold error positions, which predict does not have");
  }
  std::string text;
  if (o.input == "-") {
    std::ostringstream buf;
    buf << io.in.rdbuf();
    text = buf.str();
  } else {
    text = inputs.read(o.input);
  }
  const auto lines = data::split_lines(text);
  std::vector<std::u32string> decoded;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    decoded.push_back(utf8_decode(lines[i]));
    if (decoded.back().size() > config.max_len) {
      throw UsageError("input line " + std::to_string(i + 1) + " has " + std::to_string(decoded.back().size()) +
                       " characters; the model accepts at most " + std::to_string(config.max_len));
    }
  }
  const std::uint64_t seed = rec.given("seed") ? o.seed : l.bundle.seed;
  const Vocabulary& vocab = l.bundle.vocab;
  std::string result;
  for (std::size_t i = 0; i < decoded.size(); ++i) {
    const std::u32string& chars = decoded[i];
    std::u32string fixed = chars;
    std::vector<double> probs;
    if (!chars.empty()) {
      TokenIds ids;
      for (char32_t c : chars) ids.push_back(vocab.id(c));
      model::ForwardOptions fo;
      fo.noise_seed = derive_seed(seed, 0xE7A1u, i);
      const auto pred = l.model.predict(ids, fo);
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (ids[k] != Vocabulary::kUnk) fixed[k] = vocab.symbol(pred.output[k]);
      }
      probs = pred.error_probs;
    }
    result += utf8_encode(fixed);
    if (o.probs) {
      for (double p : probs) result += fmt::format("\t{:.6f}", p);
    }
    result += '\n';
  }
  if (o.out == "-") {
    io.out << result;
  } else {
    data::write_file(o.out, result);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Routes spdlog to `err` for the duration of a command.
class LogScope {
 public:
  explicit LogScope(std::ostream& err) : previous_(spdlog::default_logger()) {
    auto logger = std::make_shared<spdlog::logger>("softmask", std::make_shared<spdlog::sinks::ostream_sink_mt>(err));
    logger->set_pattern("[%H:%M:%S] [%l] %v");
    const char* level = std::getenv("SOFTMASK_LOG");
    logger->set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
    spdlog::set_default_logger(logger);
  }
  ~LogScope() { spdlog::set_default_logger(previous_); }
  LogScope(const LogScope&) = delete;
  LogScope& operator=(const LogScope&) = delete;

 private:
  std::shared_ptr<spdlog::logger> previous_;
};

inline int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  LogScope log(err);
  Streams io{in, out, err};
  CLI::App app("Soft-masked spelling correction: data synthesis, training, evaluation and inference", "softmask");
  app.require_subcommand(1);

  SynthOptions synth;
  CLI::App* s = app.add_subcommand("synth", "write a synthetic corpus, confusion table and train/dev/test pairs");
  Recorder synth_rec(s);
  synth_rec.add_config();
  synth_rec.option("seed", synth.seed, "random seed");
  synth_rec.option("out", synth.out, "output directory");
  synth_rec.option("sentences", synth.sentences, "training pairs")->check(CLI::PositiveNumber);
  synth_rec.option("dev", synth.dev, "development pairs");
  synth_rec.option("test", synth.test, "test pairs");
  synth_rec.option("replace-rate", synth.replace_rate, "fraction of characters replaced")->check(CLI::Range(0.0, 1.0));
  synth_rec.option("confusion-share", synth.confusion_share, "share of replacements drawn from the confusion table")
      ->check(CLI::Range(0.0, 1.0));
  synth_rec.option("substitutes", synth.substitutes, "confusable characters per character")->check(CLI::PositiveNumber);

  PretrainOptions pre;
  CLI::App* p = app.add_subcommand("pretrain", "masked-language-model pretraining of embeddings and encoder");
  Recorder pre_rec(p);
  pre_rec.add_config();
  pre_rec.option("seed", pre.seed, "random seed");
  pre_rec.option("data", pre.data, "directory written by synth");
  pre_rec.option("out", pre.out, "output directory");
  pre_rec.option("init-from", pre.init_from, "continue from this checkpoint");
  pre_rec.option("steps", pre.steps, "optimizer steps");
  pre_rec.option("batch", pre.batch, "sentences per step")->check(CLI::PositiveNumber);
  pre_rec.option("lr", pre.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  pre.arch.add(pre_rec);

  TrainOptions tr;
  CLI::App* t = app.add_subcommand("train", "joint fine-tuning of detector and corrector");
  Recorder train_rec(t);
  train_rec.add_config();
  train_rec.option("seed", tr.seed, "random seed (initialization, batch order, noise)");
  train_rec.option("data", tr.data, "directory with train.jsonl, dev.jsonl and optionally test.jsonl");
  train_rec.option("out", tr.out, "output directory");
  train_rec.option("init-from", tr.init_from, "initialize parameters from this checkpoint");
  train_rec.option("resume", tr.resume, "continue training from this checkpoint and its optimizer state");
  tr.arch.add(train_rec);
  tr.mode.add(train_rec);
  tr.budget.add(train_rec);

  EvalOptions ev;
  CLI::App* e = app.add_subcommand("eval", "score a checkpoint on JSONL pairs");
  Recorder eval_rec(e);
  eval_rec.add_config();
  eval_rec.option("model", ev.model, "checkpoint file or training output directory");
  eval_rec.option("data", ev.data, "JSONL file, or a directory holding test.jsonl");
  eval_rec.option("out", ev.out, "write a manifest to this directory");
  eval_rec.option("seed", ev.seed, "seed for random masking (default: the checkpoint's)");
  eval_rec.option("mode", ev.mode, "override the masking mode")
      ->check(CLI::IsMember({"soft", "hard", "random", "none", "force"}));
  eval_rec.option("threshold", ev.threshold, "hard-masking threshold with --mode hard")->check(CLI::Range(0.0, 1.0));

  ExperimentOptions ab;
  CLI::App* a = app.add_subcommand("ablate", "train and score the eight masking variants from one initialization");
  Recorder ablate_rec(a);
  ablate_rec.add_config();
  ablate_rec.option("seed", ab.seed, "random seed");
  ablate_rec.option("data", ab.data, "directory written by synth");
  ablate_rec.option("out", ab.out, "output directory");
  ablate_rec.option("init-from", ab.init_from, "shared initial checkpoint, e.g. from pretrain");
  ab.arch.add(ablate_rec);
  ab.budget.add(ablate_rec);

  ExperimentOptions sw;
  CLI::App* w = app.add_subcommand("sweep", "train and score one model per lambda from one initialization");
  Recorder sweep_rec(w);
  sweep_rec.add_config();
  sweep_rec.option("seed", sw.seed, "random seed");
  sweep_rec.option("data", sw.data, "directory written by synth");
  sweep_rec.option("out", sw.out, "output directory");
  sweep_rec.option("init-from", sw.init_from, "shared initial checkpoint, e.g. from pretrain");
  sweep_rec.option("lambdas", sw.lambdas, "lambda values")->delimiter(',');
  sw.arch.add(sweep_rec);
  sw.mode.add(sweep_rec);
  sw.budget.add(sweep_rec);

  PredictOptions pr;
  CLI::App* r = app.add_subcommand("predict", "correct text line by line");
  Recorder predict_rec(r);
  predict_rec.add_config();
  predict_rec.option("model", pr.model, "checkpoint file or training output directory");
  predict_rec.option("input", pr.input, "input file, - for stdin");
  predict_rec.option("out", pr.out, "output file, - for stdout");
  predict_rec.flag("probs", pr.probs, "append tab-separated detector probabilities");
  predict_rec.option("seed", pr.seed, "seed for random masking (default: the checkpoint's)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h, out, err);
  } catch (const CLI::CallForAllHelp& h) {
    return app.exit(h, out, err);
  } catch (const CLI::ParseError& pe) {
    app.exit(pe, out, err);
    return kExitUsage;
  }

  const std::vector<std::pair<CLI::App*, Recorder*>> commands = {
      {s, &synth_rec}, {p, &pre_rec}, {t, &train_rec}, {e, &eval_rec},
      {a, &ablate_rec}, {w, &sweep_rec}, {r, &predict_rec}};
  Inputs inputs;
  try {
    for (const auto& [sub, rec] : commands) {
      if (!sub->parsed() || rec->config_path().empty()) continue;
      rec->merge_config(inputs.read(rec->config_path()));
    }
    if (s->parsed()) synth_rec.require({"out"});
    if (p->parsed()) pre_rec.require({"data", "out"});
    if (t->parsed()) train_rec.require({"data", "out"});
    if (e->parsed()) eval_rec.require({"model", "data"});
    if (a->parsed()) ablate_rec.require({"data", "out"});
    if (w->parsed()) sweep_rec.require({"data", "out"});
    if (r->parsed()) predict_rec.require({"model"});
  } catch (const CLI::ParseError& pe) {
    err << pe.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, synth_rec, inputs, io);
    if (p->parsed()) return cmd_pretrain(pre, pre_rec, inputs, io);
    if (t->parsed()) return cmd_train(tr, train_rec, inputs, io);
    if (e->parsed()) return cmd_eval(ev, eval_rec, inputs, io);
    if (a->parsed()) return cmd_experiment(ab, ablate_rec, inputs, io, false);
    if (w->parsed()) return cmd_experiment(sw, sweep_rec, inputs, io, true);
    if (r->parsed()) return cmd_predict(pr, predict_rec, inputs, io);
  } catch (const UsageError& ue) {
    err << "error: " << ue.what() << "\n";
    return kExitUsage;
  } catch (const ContractError& ce) {
    err << "error: " << ce.what() << "\n";
    return kExitUsage;
  } catch (const train::CheckpointError& ck) {
    err << "error: " << ck.what() << "\n";
    return ck.kind() == train::CheckpointError::Kind::Mismatch ? kExitUsage : kExitRuntime;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cin, std::cout, std::cerr);
}

}  // namespace softmask::cli
