// Long-running end-to-end checks. The acceptance driver runs these by name;
// they are not part of the fast unit suites.
#include <algorithm>
#include <chrono>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "model_fixtures.h"
#include "seqforge/cli.h"
#include "seqforge/corpus.h"
#include "seqforge/decode.h"
#include "seqforge/metrics.h"
#include "seqforge/tokenizer.h"
#include "seqforge/train.h"

using namespace seqforge;
using seqforge::testing::jitter;

namespace {

  const std::string kData = SEQFORGE_DATA_DIR;

  struct SymbolTask {
    SubwordModel tok;
    std::vector<Example> examples;
    int32_t tag = 0;
  };

  SymbolTask symbol_task(const std::string& name) {
    SymbolTask task;
    const auto src = read_lines(kData + "/" + name + ".src");
    const auto tgt = read_lines(kData + "/" + name + ".tgt");
    task.tok = SubwordModel::train(src, 64, {lang_tag("xx")});
    task.tag = task.tok.tag_id("xx");
    for (size_t i = 0; i < src.size(); ++i)
      task.examples.push_back(
          make_translation_example(task.tok.encode(src[i]), task.tok.encode(tgt[i]), task.tag, task.tag));
    return task;
  }

  ModelConfig copy_config(const SymbolTask& task, int layers, int unique) {
    ModelConfig cfg;
    cfg.enc_layers = cfg.dec_layers = layers;
    cfg.unique_enc_layers = cfg.unique_dec_layers = unique;
    cfg.hidden = 64;
    cfg.ffn = 256;
    cfg.heads = 4;
    cfg.dropout = 0.1;
    cfg.vocab_size = task.tok.vocab().size();
    cfg.max_positions = 64;
    return cfg;
  }

  // Fraction of reference positions (including </s>) reproduced by greedy
  // decoding; missing positions count as errors.
  double greedy_token_accuracy(const TransformerModel& model, const std::vector<Example>& examples) {
    int64_t correct = 0, total = 0;
    for (const auto& ex : examples) {
      const auto out = greedy_decode(model, ex.src, ex.tgt_in.front(), static_cast<int>(ex.tgt_out.size()) + 4);
      for (size_t i = 0; i < ex.tgt_out.size(); ++i)
        correct += i < out.tokens.size() && out.tokens[i] == ex.tgt_out[i];
      total += static_cast<int64_t>(ex.tgt_out.size());
    }
    return static_cast<double>(correct) / static_cast<double>(total);
  }

  // Trains on the copy task, checking accuracy every 100 steps, and returns
  // the first step at which accuracy reached 99% (or -1). Training stops there.
  int64_t steps_to_copy(const ModelConfig& cfg, const SymbolTask& task, int64_t max_steps, double& final_acc) {
    TrainRun run;
    run.cfg.max_steps = max_steps;
    run.cfg.warmup_steps = 200;
    run.cfg.peak_lr = 0.003;
    run.cfg.token_budget = 512;
    run.cfg.eval_every = 100;
    run.cfg.seed = 3;
    ExampleBatches batches(task.examples, run.cfg.token_budget, run.cfg.seed);
    run.primary = &batches;
    int64_t reached = -1;
    final_acc = 0;
    run.evaluator = [&](const TransformerModel& m) {
      final_acc = greedy_token_accuracy(m, task.examples);
      return std::map<std::string, double>{{"copy", 100 * final_acc}};
    };
    run.on_eval = [&](int64_t step, const std::map<std::string, double>& scores) {
      MESSAGE("step " << step << " accuracy " << scores.at("copy"));
      if (reached < 0 && scores.at("copy") >= 99.0)
        reached = step;
    };
    run.stop_after_eval = [&](int64_t, const std::map<std::string, double>&) { return reached > 0; };
    Rng rng(run.cfg.seed);
    run_training(TransformerModel(cfg, rng), run);
    return reached;
  }

  double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

}  // namespace

TEST_CASE("acceptance: copy task overfit") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto task = symbol_task("copy");
  REQUIRE(task.examples.size() == 200);
  double acc = 0;
  const int64_t reached = steps_to_copy(copy_config(task, 2, 2), task, 2000, acc);
  MESSAGE("99% reached at step " << reached << ", accuracy " << acc << ", " << seconds_since(t0) << " s");
  CHECK(reached > 0);
  CHECK(reached <= 2000);
  CHECK(seconds_since(t0) < 300);
}

TEST_CASE("acceptance: tied layers") {
  const auto task = symbol_task("copy");
  const auto untied = copy_config(task, 6, 6);
  const auto tied = copy_config(task, 6, 1);
  const int64_t full = expected_layer_parameter_count(untied);
  const int64_t shared = expected_layer_parameter_count(tied);
  Rng r1(1), r2(1);
  CHECK(TransformerModel(untied, r1).layer_parameter_count() == full);
  CHECK(TransformerModel(tied, r2).layer_parameter_count() == shared);
  // Exactly 5/6 of the layer parameters disappear: 6 * shared == full.
  CHECK(6 * shared == full);
  MESSAGE("layer parameters untied " << full << ", tied " << shared);

  const auto t0 = std::chrono::steady_clock::now();
  double acc = 0;
  const int64_t reached = steps_to_copy(tied, task, 4000, acc);
  MESSAGE("tied model reached 99% at step " << reached << ", " << seconds_since(t0) << " s");
  CHECK(reached > 0);
  CHECK(reached <= 4000);
}

TEST_CASE("acceptance: wait-k over random configurations") {
  ModelConfig cfg = seqforge::testing::tiny_config();
  cfg.vocab_size = 16;
  Rng init(5);
  TransformerModel model(cfg, init);
  jitter(model, 6, 0.5);
  Rng rng(7);
  int64_t masked_entries = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 1 + static_cast<int>(rng.uniform_int(6));
    const int64_t s = 1 + rng.uniform_int(9), t = 1 + rng.uniform_int(9);
    std::vector<int32_t> src, tgt_in, tgt_out;
    for (int64_t i = 0; i < s; ++i)
      src.push_back(5 + static_cast<int32_t>(rng.uniform_int(11)));
    tgt_in.push_back(2);
    for (int64_t i = 0; i < t; ++i) {
      tgt_out.push_back(5 + static_cast<int32_t>(rng.uniform_int(11)));
      if (i + 1 < t)
        tgt_in.push_back(tgt_out.back());
    }
    INFO("k=" << k << " S=" << s << " T=" << t);
    ForwardOptions opts;
    opts.wait_k = k;
    const auto out = model.forward(collate(std::vector<Example>{seqforge::testing::pair_example(src, tgt_in, tgt_out)}),
                                   opts);
    // Target position i (0-based) may read source positions j < k + i.
    for (const auto& cross : out.decoder_cross_attn)
      for (int64_t h = 0; h < cfg.heads; ++h)
        for (int64_t i = 0; i < t; ++i)
          for (int64_t j = k + i; j < s; ++j) {
            REQUIRE(cross.at((h * t + i) * s + j) == 0.0);
            ++masked_entries;
          }

    const auto decoded = wait_k_decode(model, src, 2, k, static_cast<int>(t));
    for (size_t step = 1; step <= decoded.tokens.size(); ++step) {
      auto mutated = src;
      for (int64_t j = k + static_cast<int64_t>(step) - 1; j < s; ++j)
        mutated[j] = 5 + static_cast<int32_t>(rng.uniform_int(11));
      const auto again = wait_k_decode(model, mutated, 2, k, static_cast<int>(t));
      REQUIRE(again.tokens.size() >= step);
      REQUIRE(std::equal(decoded.tokens.begin(), decoded.tokens.begin() + static_cast<int64_t>(step),
                         again.tokens.begin()));
    }
  }
  MESSAGE(masked_entries << " masked attention entries checked");
  CHECK(masked_entries > 0);
}

TEST_CASE("acceptance: resume after interruption") {
  const auto task = symbol_task("reverse");
  ModelConfig cfg = copy_config(task, 2, 2);
  cfg.hidden = 32;
  cfg.ffn = 64;
  const auto mono_lines = read_lines(kData + "/mono.aa");
  SubwordModel tok = SubwordModel::train({mono_lines.begin(), mono_lines.begin() + 500}, 200, {lang_tag("aa")});
  DenoisingBatches::Language lang;
  lang.tag = tok.tag_id("aa");
  for (size_t i = 0; i < 500; ++i)
    lang.units.push_back({tok.encode(mono_lines[i])});
  cfg.vocab_size = std::max(cfg.vocab_size, tok.vocab().size());

  const auto dir = std::filesystem::temp_directory_path() / "seqforge_acceptance_resume";
  std::filesystem::remove_all(dir);
  auto train = [&](int64_t steps, const std::string& out_dir, const std::string& resume) {
    TrainRun run;
    run.mode = TrainMode::Joint;
    run.cfg.max_steps = steps;
    run.cfg.warmup_steps = 50;
    run.cfg.peak_lr = 0.003;
    run.cfg.token_budget = 256;
    run.cfg.eval_every = 100;
    run.cfg.loss_mix = 0.5;
    run.cfg.seed = 11;
    ExampleBatches parallel(task.examples, run.cfg.token_budget, run.cfg.seed);
    DenoisingBatches denoise({lang}, NoiseConfig{}, 1.0, run.cfg.token_budget, tok.vocab().special_ids());
    run.primary = &parallel;
    run.auxiliary = &denoise;
    run.out_dir = out_dir;
    run.resume_from = resume;
    Rng rng(run.cfg.seed);
    return run_training(TransformerModel(cfg, rng), run);
  };
  const auto full = train(600, "", "");
  const auto first = train(100, dir.string(), "");
  REQUIRE(first.steps == 100);
  const auto resumed = train(600, "", (dir / "last.ckpt").string());
  REQUIRE(resumed.steps == 600);
  double worst = 0;
  bool bitwise = true;
  for (const auto& [name, t] : full.model.params()) {
    const auto& other = resumed.model.params().get(name);
    for (int64_t i = 0; i < t.numel(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(t.at(i)) - static_cast<double>(other.at(i))));
      bitwise = bitwise && t.at(i) == other.at(i);
    }
  }
  const std::string note = bitwise ? " (bitwise equal)" : "";
  MESSAGE("max parameter difference after 500 resumed steps: " << worst << note);
  CHECK(worst < 1e-6);
}

namespace {

  int cli_run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::dispatch(args, out, err);
    if (code != 0)
      MESSAGE("command failed: " << args.front() << "\n" << err.str());
    return code;
  }

  double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[1];
  }

}  // namespace

TEST_CASE("acceptance: pretraining helps") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = std::filesystem::temp_directory_path() / "seqforge_acceptance_pretrain";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto p = [&](const std::string& name) { return (dir / name).string(); };
  const auto d = [&](const std::string& name) { return kData + "/" + name; };

  REQUIRE(cli_run({"create-tokenizer", "--input", d("mono.aa"), d("mono.bb"), d("train.aa"), d("train.bb"),
                   "--vocab-size", "400", "--languages", "aa", "bb", "--output", p("tok.bpe")}) == 0);
  const std::vector<std::string> arch = {"--enc-layers", "2",   "--dec-layers", "2",  "--hidden",
                                         "64",           "--ffn", "256",         "--heads", "4"};
  const auto with = [](std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  const std::vector<std::string> finetune = {
    "--tokenizer", p("tok.bpe"), "--train-src", d("train.aa"), "--train-tgt", d("train.bb"),
    "--src-lang", "aa", "--tgt-lang", "bb", "--dev-src", d("dev.aa"), "--dev-tgt", d("dev.bb"),
    "--warmup", "200", "--lr", "0.002", "--token-budget", "512", "--eval-every", "250",
    "--eval-max-len", "40", "--log-every", "1000000"};

  const auto test_bleu = [&](const std::string& run_dir) {
    const std::string ckpt = run_dir + "/best.aa-bb.ckpt";
    const std::string hyp = run_dir + "/test.hyp";
    if (cli_run({"decode", "--model", ckpt, "--input", d("test.aa"), "--src-lang", "aa", "--tgt-lang", "bb",
                 "--max-len", "40", "--output", hyp}) != 0)
      return -1.0;
    return corpus_bleu(read_lines(hyp), read_lines(d("test.bb")));
  };

  std::vector<double> base, tuned, delta;
  for (const std::string seed : {"1", "2", "3"}) {
    const std::string pre = p("pre" + seed), scratch = p("base" + seed), ft = p("ft" + seed);
    REQUIRE(cli_run(with({"pretrain", "--tokenizer", p("tok.bpe"), "--mono", d("mono.aa"), d("mono.bb"),
                          "--mono-lang", "aa", "bb", "--max-steps", "1000", "--warmup", "300", "--lr", "0.002",
                          "--token-budget", "1024", "--log-every", "1000000", "--seed", seed, "--out-dir", pre},
                         arch)) == 0);
    // The baseline gets twice the parallel-data steps of the fine-tuned
    // model; 3000 steps is past its dev plateau.
    REQUIRE(cli_run(with(with({"train", "--seed", seed, "--max-steps", "3000", "--out-dir", scratch}, arch),
                         finetune)) == 0);
    REQUIRE(cli_run(with({"train", "--seed", seed, "--max-steps", "1500", "--out-dir", ft, "--init-from",
                          pre + "/last.ckpt"},
                         finetune)) == 0);
    base.push_back(test_bleu(scratch));
    tuned.push_back(test_bleu(ft));
    delta.push_back(tuned.back() - base.back());
    MESSAGE("seed " << seed << ": baseline " << base.back() << " fine-tuned " << tuned.back() << " ("
                    << seconds_since(t0) << " s)");
  }
  MESSAGE("median test BLEU: baseline " << median3(base) << ", fine-tuned " << median3(tuned)
                                        << ", median gain " << median3(delta));
  CHECK(median3(delta) >= 2.0);
  CHECK(seconds_since(t0) < 1800);
}
