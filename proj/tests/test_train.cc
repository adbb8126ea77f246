#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "model_fixtures.h"
#include "reference_model.h"
#include "seqforge/checkpoint.h"
#include "seqforge/train.h"

using namespace seqforge;
using namespace seqforge::testing;

namespace {

  std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("seqforge_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
  }

  std::vector<Example> copy_examples(int n, uint64_t seed, int min_len = 2, int max_len = 5) {
    Rng rng(seed);
    std::vector<Example> out;
    for (int i = 0; i < n; ++i) {
      const int len = min_len + static_cast<int>(rng.uniform_int(max_len - min_len + 1));
      std::vector<int32_t> words;
      for (int j = 0; j < len; ++j)
        words.push_back(5 + static_cast<int32_t>(rng.uniform_int(4)));
      out.push_back(make_translation_example(words, words, 9, 9));
    }
    return out;
  }

  DenoisingBatches::Language mono_language(int n, uint64_t seed) {
    DenoisingBatches::Language lang;
    lang.tag = 10;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
      std::vector<int32_t> s;
      const int len = 3 + static_cast<int>(rng.uniform_int(4));
      for (int j = 0; j < len; ++j)
        s.push_back(5 + static_cast<int32_t>(rng.uniform_int(4)));
      lang.units.push_back({s});
    }
    return lang;
  }

  TransformerModel small_model(uint64_t seed, double dropout = 0) {
    ModelConfig cfg = tiny_config();
    cfg.dropout = dropout;
    Rng rng(seed);
    return TransformerModel(cfg, rng);
  }

  double max_param_diff(const TransformerModel& a, const TransformerModel& b) {
    double worst = 0;
    for (const auto& name : a.params().names()) {
      const auto x = a.params().get(name).data();
      const auto y = b.params().get(name).data();
      for (size_t i = 0; i < x.size(); ++i)
        worst = std::max(worst, std::abs(double(x[i]) - double(y[i])));
    }
    return worst;
  }

  bool params_bitwise_equal(const TransformerModel& a, const TransformerModel& b) {
    for (const auto& name : a.params().names()) {
      const auto x = a.params().get(name).data();
      const auto y = b.params().get(name).data();
      if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(Real)) != 0)
        return false;
    }
    return true;
  }

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  CHECK(lr_at(16000, cfg) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_at(4000, cfg) == doctest::Approx(0.00025).epsilon(1e-12));
  CHECK(lr_at(64000, cfg) == doctest::Approx(0.0005).epsilon(1e-12));
  CHECK(lr_at(15999, cfg) < lr_at(16000, cfg));
  CHECK(lr_at(16001, cfg) < lr_at(16000, cfg));
  CHECK(std::abs(lr_at(15999, cfg) - lr_at(16001, cfg)) < 1e-7);
  CHECK_THROWS(lr_at(0, cfg));
  cfg.warmup_steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("Adam") {
  TrainConfig cfg;
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParameterStore store;
    store.add("w", Tensor({3}, {0.5f, -1.0f, 2.0f}, true));
    auto state = OptimizerState::for_params(store, cfg);
    store.get("w").grad_mut();
    adam_step(store, state, 0.1);
    CHECK(store.get("w").data()[0] == 0.5f);
    CHECK(store.get("w").data()[2] == 2.0f);
  }
  SUBCASE("first step moves by the learning rate against the gradient sign") {
    ParameterStore store;
    store.add("w", Tensor({2}, {0.25f, 0.25f}, true));
    auto state = OptimizerState::for_params(store, cfg);
    auto g = store.get("w").grad_mut();
    g[0] = 3;
    g[1] = -0.02f;
    adam_step(store, state, 0.01);
    CHECK(store.get("w").data()[0] == doctest::Approx(0.24).epsilon(1e-6));
    CHECK(store.get("w").data()[1] == doctest::Approx(0.26).epsilon(1e-6));
  }
  SUBCASE("three-step trace against a scalar recurrence") {
    ParameterStore store;
    store.add("w", Tensor({1}, {0.25f}, true));
    auto state = OptimizerState::for_params(store, cfg);
    const double grads[3] = {0.3, -0.7, 0.05};
    const double lrs[3] = {0.01, 0.02, 0.015};
    double p = 0.25, m = 0, v = 0;
    for (int t = 1; t <= 3; ++t) {
      store.get("w").grad_mut()[0] = static_cast<Real>(grads[t - 1]);
      adam_step(store, state, lrs[t - 1]);
      const double g = grads[t - 1];
      m = 0.9 * m + 0.1 * g;
      v = 0.98 * v + 0.02 * g * g;
      const double mhat = m / (1 - std::pow(0.9, t));
      const double vhat = v / (1 - std::pow(0.98, t));
      p -= lrs[t - 1] * mhat / (std::sqrt(vhat) + 1e-9);
      CHECK(std::abs(store.get("w").data()[0] - p) < 1e-7);
    }
    CHECK(state.step == 3);
  }
  SUBCASE("non-finite gradient aborts with the parameter name") {
    ParameterStore store;
    store.add("encoder.x", Tensor({1}, {0.f}, true));
    auto state = OptimizerState::for_params(store, cfg);
    store.get("encoder.x").grad_mut()[0] = std::nanf("");
    try {
      adam_step(store, state, 0.1);
      FAIL("expected an error");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("encoder.x") != std::string::npos);
    }
  }
}

TEST_CASE("training loss") {
  SUBCASE("untrained model is close to uniform") {
    auto model = small_model(1);
    TrainConfig cfg;
    Rng rng(2);
    const double loss = train_step(model, two_sentence_batch(), cfg, rng);
    CHECK(std::abs(loss - std::log(11.0)) < 0.2 * std::log(11.0));
    Rng rng2(2);
    auto again = small_model(1);
    CHECK(train_step(again, two_sentence_batch(), cfg, rng2) == loss);
  }
  SUBCASE("matches the straight-line reference") {
    auto model = small_model(3);
    jitter(model, 4, 0.4);
    const Batch batch = two_sentence_batch();
    const double eps = 0.1;
    NoGradGuard guard;
    const double loss = batch_loss(model, batch, eps, {}).item();

    const ReferenceModel reference(model.config(), model.params());
    const std::vector<std::vector<int32_t>> srcs{{5, 6, 7, 3}, {10, 7, 3}};
    const std::vector<std::vector<int32_t>> ins{{9, 8, 5, 6}, {9, 6, 7}};
    const std::vector<std::vector<int32_t>> outs{{8, 5, 6, 3}, {6, 7, 3}};
    double total = 0;
    int count = 0;
    for (size_t b = 0; b < 2; ++b) {
      const auto logits = reference.logits(srcs[b], ins[b]);
      for (size_t t = 0; t < outs[b].size(); ++t) {
        double mx = -1e300;
        for (double v : logits[t])
          mx = std::max(mx, v);
        double z = 0;
        for (double v : logits[t])
          z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        double uniform = 0;
        for (double v : logits[t])
          uniform += lse - v;
        total += (1 - eps) * (lse - logits[t][outs[b][t]]) + eps * uniform / logits[t].size();
        ++count;
      }
    }
    CHECK(std::abs(loss - total / count) < 1e-5);
  }
  SUBCASE("multi-layer softmax averages the per-layer losses") {
    ModelConfig cfg = tiny_config();
    cfg.multi_layer_softmax = true;
    Rng rng(5);
    TransformerModel model(cfg, rng);
    jitter(model, 6, 0.4);
    const Batch batch = two_sentence_batch();
    NoGradGuard guard;
    const auto out = model.forward(batch);
    REQUIRE(out.layer_logits.size() == 2);
    double expected = 0;
    for (const auto& l : out.layer_logits)
      expected += cross_entropy_label_smoothed(reshape(l, {batch.batch_size * batch.tgt_len, 11}), batch.tgt_out,
                                               0.1f, Vocabulary::kPad)
                      .item();
    CHECK(batch_loss(model, batch, 0.1, {}).item() == doctest::Approx(expected / 2).epsilon(1e-6));
  }
}

TEST_CASE("gradient averaging") {
  auto a = small_model(7), b = small_model(7);
  for (auto* m : {&a, &b})
    for (auto& [name, t] : m->params()) {
      auto g = t.grad_mut();
      for (size_t i = 0; i < g.size(); ++i)
        g[i] = static_cast<Real>(m == &a ? i : 3.0 * i);
    }
  all_reduce_mean({&a.params()});
  CHECK(a.params().get("output.bias").grad()[2] == 2.0f);
  all_reduce_mean({&a.params(), &b.params()});
  CHECK(a.params().get("output.bias").grad()[2] == 4.0f);
  CHECK(b.params().get("output.bias").grad()[2] == 4.0f);
  all_reduce_mean({&a.params(), &b.params()});
  CHECK(b.params().get("output.bias").grad()[3] == 6.0f);
}

TEST_CASE("data-parallel equivalence") {
  // Equal target lengths give every shard the same token count.
  std::vector<Example> examples;
  Rng rng(8);
  for (int i = 0; i < 8; ++i) {
    std::vector<int32_t> src, tgt;
    for (int j = 0; j < 2 + i % 3; ++j)
      src.push_back(5 + static_cast<int32_t>(rng.uniform_int(5)));
    for (int j = 0; j < 4; ++j)
      tgt.push_back(5 + static_cast<int32_t>(rng.uniform_int(5)));
    examples.push_back(make_translation_example(src, tgt, 9, 9));
  }
  auto init = small_model(9);
  jitter(init, 10, 0.3);
  TrainConfig cfg;
  cfg.warmup_steps = 1;
  cfg.peak_lr = 0.01;
  cfg.label_smoothing = 0.1;

  DataParallelTrainer single(init, cfg);
  for (int step = 0; step < 2; ++step)
    single.step({WorkerInput{collate(examples), std::nullopt}});
  CHECK(max_param_diff(single.model(), init) > 1e-3);

  for (int w : {2, 4}) {
    cfg.num_workers = w;
    DataParallelTrainer parallel(init, cfg);
    for (int step = 0; step < 2; ++step) {
      std::vector<WorkerInput> inputs;
      const size_t per = examples.size() / w;
      for (int k = 0; k < w; ++k)
        inputs.push_back({collate(std::span<const Example>(examples).subspan(k * per, per)), std::nullopt});
      parallel.step(inputs);
    }
    INFO("workers " << w);
    CHECK(max_param_diff(parallel.model(), single.model()) < 1e-5);
    for (int k = 1; k < w; ++k)
      CHECK(params_bitwise_equal(parallel.replica(k), parallel.model()));
  }

  SUBCASE("identical shards leave the single-worker step unchanged") {
    cfg.num_workers = 3;
    DataParallelTrainer parallel(init, cfg);
    cfg.num_workers = 1;
    DataParallelTrainer one(init, cfg);
    const Batch b = collate(std::span<const Example>(examples).subspan(0, 2));
    parallel.step({{b, std::nullopt}, {b, std::nullopt}, {b, std::nullopt}});
    one.step({{b, std::nullopt}});
    CHECK(max_param_diff(parallel.model(), one.model()) < 1e-6);
  }

  SUBCASE("a failing worker aborts the step") {
    cfg.num_workers = 2;
    DataParallelTrainer parallel(init, cfg);
    Batch bad = collate(std::span<const Example>(examples).subspan(0, 2));
    std::fill(bad.tgt_out.begin(), bad.tgt_out.end(), Vocabulary::kPad);
    CHECK_THROWS(parallel.step({{collate(std::span<const Example>(examples).subspan(2, 2)), std::nullopt},
                                {bad, std::nullopt}}));
    CHECK(parallel.steps_done() == 0);
  }
}

TEST_CASE("checkpoint container") {
  auto model = small_model(11);
  jitter(model, 12);
  const auto dir = temp_dir("ckpt");
  const std::string path = (dir / "m.ckpt").string();
  Checkpoint ckpt = model_checkpoint(model);
  ckpt.meta["step"] = 42;
  ckpt.save(path);

  SUBCASE("layout") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(bytes.substr(0, 4) == "YNMT");
    uint32_t version, count;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&count, bytes.data() + 8, 4);
    CHECK(version == 1);
    CHECK(count == model.params().size());
    uint16_t name_len;
    std::memcpy(&name_len, bytes.data() + 12, 2);
    const std::string first = model.params().names().front();
    CHECK(bytes.substr(14, name_len) == first);
    const auto& t = model.params().get(first);
    CHECK(static_cast<uint8_t>(bytes[14 + name_len]) == t.rank());
    uint64_t d0;
    std::memcpy(&d0, bytes.data() + 15 + name_len, 8);
    CHECK(static_cast<int64_t>(d0) == t.dim(0));
    float v0;
    std::memcpy(&v0, bytes.data() + 15 + name_len + 8 * t.rank(), 4);
    CHECK(v0 == t.data()[0]);
    // The metadata block closes the file.
    const size_t meta_at = bytes.rfind('{');
    uint64_t meta_len;
    std::memcpy(&meta_len, bytes.data() + bytes.find("{\"config\"") - 8, 8);
    CHECK(meta_len == bytes.size() - bytes.find("{\"config\""));
    CHECK(meta_at != std::string::npos);
  }
  SUBCASE("round trip is bit-identical") {
    const auto loaded = load_model(path);
    CHECK(loaded.model.config() == model.config());
    CHECK(params_bitwise_equal(loaded.model, model));
    CHECK(loaded.meta.at("step") == 42);
    CHECK(Checkpoint::load(path).to_bytes() == ckpt.to_bytes());
  }
  SUBCASE("corrupt files are rejected") {
    std::string bytes = ckpt.to_bytes();
    CHECK_THROWS_AS(Checkpoint::from_bytes(bytes.substr(0, bytes.size() - 3)), CheckpointError);
    bytes[0] = 'X';
    CHECK_THROWS_AS(Checkpoint::from_bytes(bytes), CheckpointError);
    CHECK_THROWS_AS(Checkpoint::load((dir / "missing.ckpt").string()), CheckpointError);
  }
}

TEST_CASE("batch sources") {
  SUBCASE("example batches cover each example once per epoch and resume") {
    const auto examples = copy_examples(30, 13);
    ExampleBatches source(examples, 40, 14);
    Rng rng(0);
    std::vector<int64_t> seen;
    for (size_t i = 0; i < source.batches_per_epoch(); ++i) {
      const Batch b = source.next(rng);
      CHECK(b.token_count <= 40);
      seen.insert(seen.end(), b.example_ids.begin(), b.example_ids.end());
    }
    std::sort(seen.begin(), seen.end());
    CHECK(seen.size() == 30);
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());

    for (int i = 0; i < 3; ++i)
      source.next(rng);
    ExampleBatches resumed(examples, 40, 14);
    resumed.restore(source.state());
    for (int i = 0; i < 10; ++i)
      CHECK(resumed.next(rng).example_ids == source.next(rng).example_ids);
  }
  SUBCASE("denoising batches respect the budget") {
    DenoisingBatches source({mono_language(40, 15), mono_language(10, 16)}, NoiseConfig{}, 5.0, 48, {9, 10});
    CHECK(source.probabilities().size() == 2);
    Rng rng(17);
    for (int i = 0; i < 20; ++i) {
      const Batch b = source.next(rng);
      CHECK(b.token_count <= 48);
      CHECK(b.batch_size >= 1);
    }
  }
}

namespace {

  TrainResult run_scripted(const std::vector<std::map<std::string, double>>& script, const std::string& out_dir) {
    auto examples = copy_examples(20, 18);
    ExampleBatches source(examples, 64, 19);
    TrainRun run;
    run.cfg.max_steps = static_cast<int64_t>(script.size());
    run.cfg.eval_every = 1;
    run.cfg.warmup_steps = 10;
    run.primary = &source;
    run.out_dir = out_dir;
    auto calls = std::make_shared<size_t>(0);
    run.evaluator = [script, calls](const TransformerModel&) { return script.at((*calls)++); };
    return run_training(small_model(20), run);
  }

  // Independent simulation of which files each evaluation writes.
  std::vector<std::pair<int64_t, std::string>> expected_writes(
      const std::vector<std::map<std::string, double>>& script) {
    std::vector<std::pair<int64_t, std::string>> out;
    std::map<std::string, double> best;
    double best_avg = -1;
    for (size_t i = 0; i < script.size(); ++i) {
      const int64_t step = static_cast<int64_t>(i) + 1;
      double sum = 0;
      for (const auto& [dir, s] : script[i]) {
        sum += s;
        if (!best.count(dir) || s > best[dir]) {
          best[dir] = s;
          out.emplace_back(step, "best." + dir + ".ckpt");
        }
      }
      const double avg = sum / script[i].size();
      if (best_avg < 0 || avg > best_avg) {
        best_avg = avg;
        out.emplace_back(step, "best.avg.ckpt");
      }
      out.emplace_back(step, "last.ckpt");
    }
    return out;
  }

}  // namespace

TEST_CASE("dev-score checkpoint selection") {
  SUBCASE("two directions with ties and regressions") {
    const std::vector<std::map<std::string, double>> script{
      {{"de-en", 1}, {"en-de", 2}}, {{"de-en", 3}, {"en-de", 2}}, {{"de-en", 3}, {"en-de", 1}},
      {{"de-en", 2}, {"en-de", 4}}, {{"de-en", 5}, {"en-de", 4}}, {{"de-en", 0}, {"en-de", 4.5}},
    };
    const auto dir = temp_dir("select2");
    const auto result = run_scripted(script, dir.string());
    CHECK(result.writes == expected_writes(script));
    CHECK(result.best.at("de-en") == 5);
    CHECK(result.best.at("en-de") == 4.5);
    CHECK(*result.best_average == 4.5);
    // Ties keep the earlier checkpoint: de-en's best was written at step 5.
    CHECK(load_model((dir / "best.de-en.ckpt").string()).meta.at("step") == 5);
    CHECK(load_model((dir / "best.en-de.ckpt").string()).meta.at("step") == 6);
    CHECK(load_model((dir / "best.avg.ckpt").string()).meta.at("step") == 5);
    std::set<std::string> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
      files.insert(e.path().filename().string());
    CHECK(files == std::set<std::string>{"best.avg.ckpt", "best.de-en.ckpt", "best.en-de.ckpt", "last.ckpt"});
  }
  SUBCASE("strictly improving scores rewrite every evaluation") {
    const std::vector<std::map<std::string, double>> script{{{"x-y", 1}}, {{"x-y", 2}}, {{"x-y", 3}}};
    const auto result = run_scripted(script, "");
    int bests = 0;
    for (const auto& [step, file] : result.writes)
      bests += file == "best.x-y.ckpt";
    CHECK(bests == 3);
    CHECK(result.writes == expected_writes(script));
  }
  SUBCASE("single direction writes identical best files") {
    const auto dir = temp_dir("select1");
    run_scripted({{{"x-y", 1}}, {{"x-y", 0.5}}}, dir.string());
    std::ifstream a(dir / "best.x-y.ckpt", std::ios::binary), b(dir / "best.avg.ckpt", std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(!sa.empty());
    CHECK(sa == sb);
  }
  SUBCASE("randomized score sequences") {
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<std::map<std::string, double>> script;
      for (int i = 0; i < 6; ++i)
        script.push_back({{"a-b", static_cast<double>(rng.uniform_int(4))},
                          {"b-a", static_cast<double>(rng.uniform_int(4))},
                          {"c-a", static_cast<double>(rng.uniform_int(4))}});
      CHECK(run_scripted(script, "").writes == expected_writes(script));
    }
  }
}

namespace {

  TrainResult joint_run(TrainMode mode, double mix, int64_t steps, const std::string& out, const std::string& resume,
                        double dropout = 0.1) {
    ExampleBatches parallel(copy_examples(24, 22), 48, 23);
    DenoisingBatches mono({mono_language(30, 24)}, NoiseConfig{}, 5.0, 48, {9, 10});
    TrainRun run;
    run.mode = mode;
    run.cfg.max_steps = steps;
    run.cfg.eval_every = 10;
    run.cfg.warmup_steps = 20;
    run.cfg.peak_lr = 0.005;
    run.cfg.loss_mix = mix;
    run.cfg.seed = 25;
    run.primary = &parallel;
    run.auxiliary = mode == TrainMode::Joint ? &mono : nullptr;
    run.out_dir = out;
    run.resume_from = resume;
    return run_training(small_model(26, dropout), run);
  }

}  // namespace

TEST_CASE("training loops") {
  SUBCASE("joint training with zero mix follows fine-tuning exactly") {
    const auto a = joint_run(TrainMode::Finetune, 0, 15, "", "");
    const auto b = joint_run(TrainMode::Joint, 0, 15, "", "");
    CHECK(params_bitwise_equal(a.model, b.model));
    const auto c = joint_run(TrainMode::Joint, 0.5, 15, "", "");
    CHECK_FALSE(params_bitwise_equal(a.model, c.model));
  }
  SUBCASE("resume reproduces the uninterrupted trajectory") {
    const auto full = joint_run(TrainMode::Joint, 0.5, 40, "", "");
    const auto dir = temp_dir("resume");
    const auto first = joint_run(TrainMode::Joint, 0.5, 17, dir.string(), "");
    CHECK(first.steps == 17);
    const auto resumed = joint_run(TrainMode::Joint, 0.5, 40, "", (dir / "last.ckpt").string());
    CHECK(resumed.steps == 40);
    CHECK(max_param_diff(full.model, resumed.model) < 1e-6);
    CHECK(params_bitwise_equal(full.model, resumed.model));
  }
  SUBCASE("an evaluation can end the run early") {
    ExampleBatches parallel(copy_examples(8, 31), 64, 32);
    TrainRun run;
    run.cfg.max_steps = 100;
    run.cfg.warmup_steps = 5;
    run.cfg.eval_every = 10;
    run.primary = &parallel;
    std::vector<int64_t> asked;
    run.stop_after_eval = [&](int64_t step, const std::map<std::string, double>&) {
      asked.push_back(step);
      return step == 20;
    };
    const auto result = run_training(small_model(33), run);
    CHECK(result.steps == 20);
    CHECK(asked == std::vector<int64_t>{10, 20});
    REQUIRE_FALSE(result.writes.empty());
    CHECK(result.writes.back() == std::make_pair<int64_t, std::string>(20, "last.ckpt"));
  }
  SUBCASE("loss drops on a small copy task") {
    ExampleBatches parallel(copy_examples(24, 27), 64, 28);
    TrainRun run;
    run.cfg.max_steps = 150;
    run.cfg.warmup_steps = 20;
    run.cfg.peak_lr = 0.01;
    run.cfg.eval_every = 1000;
    run.primary = &parallel;
    std::vector<double> losses;
    run.on_step = [&](const StepLog& log) { losses.push_back(log.loss); };
    run_training(small_model(29), run);
    REQUIRE(losses.size() == 150);
    CHECK(losses.back() < 0.7 * losses.front());
  }
}
