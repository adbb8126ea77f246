#include "seqforge/train.h"

#include <algorithm>
#include <barrier>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <thread>

#include "seqforge/decode.h"
#include "seqforge/metrics.h"

namespace seqforge {

  using nlohmann::json;

  void TrainConfig::validate() const {
    if (warmup_steps < 1)
      throw ConfigError("warmup_steps must be >= 1");
    if (eval_every < 1)
      throw ConfigError("eval_every must be >= 1");
    if (num_workers < 1)
      throw ConfigError("num_workers must be >= 1");
    if (max_steps < 0)
      throw ConfigError("max_steps must be >= 0");
    if (token_budget < 1)
      throw ConfigError("token_budget must be >= 1");
    if (!(peak_lr > 0))
      throw ConfigError("peak_lr must be positive");
    if (label_smoothing < 0 || label_smoothing >= 1)
      throw ConfigError("label_smoothing must lie in [0, 1)");
    if (loss_mix < 0)
      throw ConfigError("loss_mix must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
      throw ConfigError("invalid Adam hyper-parameters");
  }

  json TrainConfig::to_json() const {
    return {{"peak_lr", peak_lr},
            {"warmup_steps", warmup_steps},
            {"token_budget", token_budget},
            {"label_smoothing", label_smoothing},
            {"eval_every", eval_every},
            {"max_steps", max_steps},
            {"seed", seed},
            {"num_workers", num_workers},
            {"loss_mix", loss_mix},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps}};
  }

  TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.peak_lr = j.at("peak_lr");
    c.warmup_steps = j.at("warmup_steps");
    c.token_budget = j.at("token_budget");
    c.label_smoothing = j.at("label_smoothing");
    c.eval_every = j.at("eval_every");
    c.max_steps = j.at("max_steps");
    c.seed = j.at("seed");
    c.num_workers = j.at("num_workers");
    c.loss_mix = j.at("loss_mix");
    c.beta1 = j.at("beta1");
    c.beta2 = j.at("beta2");
    c.adam_eps = j.at("adam_eps");
    return c;
  }

  double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 1)
      throw std::invalid_argument("lr_at: step must be >= 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup_steps);
    return cfg.peak_lr * std::min(s / w, std::sqrt(w / s));
  }

  // --- optimizer -------------------------------------------------------------------------

  OptimizerState OptimizerState::for_params(const ParameterStore& params, const TrainConfig& cfg) {
    OptimizerState s;
    s.beta1 = cfg.beta1;
    s.beta2 = cfg.beta2;
    s.eps = cfg.adam_eps;
    for (const auto& [name, t] : params) {
      s.m.emplace_back(t.numel(), Real(0));
      s.v.emplace_back(t.numel(), Real(0));
    }
    return s;
  }

  void adam_step(ParameterStore& params, OptimizerState& state, double lr) {
    if (state.m.size() != params.size() || state.v.size() != params.size())
      throw TrainingError("optimizer state does not match the parameters");
    size_t i = 0;
    for (auto& [name, t] : params) {
      if (t.has_grad())
        for (Real g : t.grad())
          if (!std::isfinite(g))
            throw TrainingError("non-finite gradient in " + name);
      if (state.m[i].size() != static_cast<size_t>(t.numel()))
        throw TrainingError("optimizer buffer shape mismatch for " + name);
      ++i;
    }
    ++state.step;
    const double c1 = 1 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1 - std::pow(state.beta2, static_cast<double>(state.step));
    i = 0;
    for (auto& [name, t] : params) {
      auto& m = state.m[i];
      auto& v = state.v[i];
      ++i;
      if (!t.has_grad())
        continue;
      const auto g = t.grad();
      auto p = t.data_mut();
      for (size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j];
        const double mj = state.beta1 * m[j] + (1 - state.beta1) * gj;
        const double vj = state.beta2 * v[j] + (1 - state.beta2) * gj * gj;
        m[j] = static_cast<Real>(mj);
        v[j] = static_cast<Real>(vj);
        p[j] = static_cast<Real>(p[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps));
      }
    }
  }

  // --- loss ------------------------------------------------------------------------------

  Tensor batch_loss(const TransformerModel& model, const Batch& batch, double smoothing, const ForwardOptions& opts) {
    const ForwardOutput out = model.forward(batch, opts);
    const int64_t v = model.config().vocab_size;
    const int64_t rows = batch.batch_size * batch.tgt_len;
    auto ce = [&](const Tensor& logits) {
      return cross_entropy_label_smoothed(reshape(logits, {rows, v}), batch.tgt_out, static_cast<Real>(smoothing),
                                          Vocabulary::kPad);
    };
    if (out.layer_logits.empty())
      return ce(out.logits);
    Tensor total = ce(out.layer_logits.front());
    for (size_t i = 1; i < out.layer_logits.size(); ++i)
      total = add(total, ce(out.layer_logits[i]));
    return scale(total, Real(1) / static_cast<Real>(out.layer_logits.size()));
  }

  double train_step(TransformerModel& model, const Batch& batch, const TrainConfig& cfg, Rng& rng) {
    model.params().zero_grad();
    ForwardOptions opts;
    opts.training = true;
    opts.rng = &rng;
    Tensor loss = batch_loss(model, batch, cfg.label_smoothing, opts);
    const double value = loss.item();
    loss.backward();
    return value;
  }

  void all_reduce_mean(const std::vector<ParameterStore*>& replicas) {
    if (replicas.empty())
      return;
    const size_t n = replicas.front()->size();
    for (const auto* r : replicas)
      if (r->size() != n || r->names() != replicas.front()->names())
        throw TrainingError("workers disagree on the parameter namespace");
    const Real inv = Real(1) / static_cast<Real>(replicas.size());
    std::vector<std::vector<std::span<Real>>> grads(n);
    for (auto* r : replicas) {
      size_t i = 0;
      for (auto& [name, t] : *r) {
        (void)name;
        grads[i++].push_back(t.grad_mut());
      }
    }
    for (auto& per_param : grads) {
      const size_t len = per_param.front().size();
      for (size_t j = 0; j < len; ++j) {
        Real total = 0;
        for (const auto& g : per_param)
          total += g[j];
        const Real mean = total * inv;
        for (auto& g : per_param)
          g[j] = mean;
      }
    }
  }

  // --- data parallel ---------------------------------------------------------------------

  DataParallelTrainer::DataParallelTrainer(const TransformerModel& init, const TrainConfig& cfg, LossFn loss)
      : cfg_(cfg), loss_(std::move(loss)) {
    cfg_.validate();
    for (int w = 0; w < cfg_.num_workers; ++w) {
      replicas_.push_back(init.clone());
      optimizer_.push_back(OptimizerState::for_params(init.params(), cfg_));
    }
  }

  double DataParallelTrainer::worker_loss(int w, const WorkerInput& input) {
    auto& model = replicas_[w];
    model.params().zero_grad();
    // Dropout and sampled wait-k draw from a stream fixed by (seed, step, worker).
    Rng rng = Rng(cfg_.seed).fork(static_cast<uint64_t>(steps_done()) * 4096 + static_cast<uint64_t>(w));
    ForwardOptions opts;
    opts.training = true;
    opts.rng = &rng;
    Tensor loss = loss_ ? loss_(model, input.primary, opts) : batch_loss(model, input.primary, cfg_.label_smoothing, opts);
    if (input.auxiliary && cfg_.loss_mix > 0)
      loss = add(loss, scale(batch_loss(model, *input.auxiliary, cfg_.label_smoothing, opts),
                             static_cast<Real>(cfg_.loss_mix)));
    const double value = loss.item();
    loss.backward();
    return value;
  }

  double DataParallelTrainer::step(const std::vector<WorkerInput>& inputs) {
    const int w_count = workers();
    if (static_cast<int>(inputs.size()) != w_count)
      throw TrainingError("expected one input per worker");
    const double lr = lr_at(steps_done() + 1, cfg_);

    if (w_count == 1) {
      const double loss = worker_loss(0, inputs[0]);
      adam_step(replicas_[0].params(), optimizer_[0], lr);
      return loss;
    }

    std::vector<double> losses(w_count, 0);
    std::vector<std::exception_ptr> errors(w_count);
    std::atomic<bool> failed{false};
    std::barrier sync(w_count);

    auto work = [&](int w) {
      try {
        losses[w] = worker_loss(w, inputs[w]);
      } catch (...) {
        errors[w] = std::current_exception();
        failed = true;
      }
      // Nobody averages before every worker has contributed.
      sync.arrive_and_wait();
      if (failed)
        return;
      if (w == 0) {
        try {
          std::vector<ParameterStore*> stores;
          for (auto& r : replicas_)
            stores.push_back(&r.params());
          all_reduce_mean(stores);
        } catch (...) {
          errors[0] = std::current_exception();
          failed = true;
        }
      }
      sync.arrive_and_wait();
      if (failed)
        return;
      try {
        adam_step(replicas_[w].params(), optimizer_[w], lr);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    };

    std::vector<std::thread> threads;
    for (int w = 1; w < w_count; ++w)
      threads.emplace_back(work, w);
    work(0);
    for (auto& t : threads)
      t.join();
    for (auto& e : errors)
      if (e)
        std::rethrow_exception(e);
    return std::accumulate(losses.begin(), losses.end(), 0.0) / w_count;
  }

  void DataParallelTrainer::save_optimizer(Checkpoint& ckpt) const {
    const auto& state = optimizer_.front();
    size_t i = 0;
    for (const auto& [name, t] : replicas_.front().params()) {
      ckpt.tensors.emplace_back("optim.m." + name, Tensor(t.shape(), state.m[i]));
      ckpt.tensors.emplace_back("optim.v." + name, Tensor(t.shape(), state.v[i]));
      ++i;
    }
    ckpt.meta["optim_step"] = state.step;
  }

  void DataParallelTrainer::restore(const Checkpoint& ckpt) {
    for (int w = 0; w < workers(); ++w) {
      load_parameters(replicas_[w], ckpt);
      auto& state = optimizer_[w];
      state.step = ckpt.meta.at("optim_step").get<int64_t>();
      size_t i = 0;
      for (const auto& [name, t] : replicas_[w].params()) {
        const Tensor* m = ckpt.find("optim.m." + name);
        const Tensor* v = ckpt.find("optim.v." + name);
        if (!m || !v || m->shape() != t.shape() || v->shape() != t.shape())
          throw CheckpointError("checkpoint lacks optimizer state for " + name);
        state.m[i].assign(m->data().begin(), m->data().end());
        state.v[i].assign(v->data().begin(), v->data().end());
        ++i;
      }
    }
  }

  // --- batch sources ---------------------------------------------------------------------

  ExampleBatches::ExampleBatches(std::vector<Example> examples, int64_t token_budget, uint64_t seed) : seed_(seed) {
    BatchingReport report;
    batches_ = make_batches(examples, token_budget, &report);
    skipped_ = report.skipped;
    if (batches_.empty())
      throw TrainingError("no training batch fits the token budget");
    shuffle();
  }

  void ExampleBatches::shuffle() {
    order_.resize(batches_.size());
    std::iota(order_.begin(), order_.end(), size_t{0});
    Rng rng = Rng(seed_).fork(0x5eed0000ULL + static_cast<uint64_t>(epoch_));
    order_ = permute_sentences(order_, rng);
  }

  Batch ExampleBatches::next(Rng&) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      cursor_ = 0;
      shuffle();
    }
    return batches_[order_[cursor_++]];
  }

  json ExampleBatches::state() const { return {{"epoch", epoch_}, {"cursor", cursor_}}; }

  void ExampleBatches::restore(const json& state) {
    epoch_ = state.at("epoch");
    cursor_ = state.at("cursor");
    shuffle();
  }

  DenoisingBatches::DenoisingBatches(std::vector<Language> languages,
                                     NoiseConfig noise,
                                     double temperature,
                                     int64_t token_budget,
                                     std::vector<int32_t> special_ids)
      : languages_(std::move(languages)),
        noise_(noise),
        budget_(token_budget),
        special_ids_(std::move(special_ids)),
        cursors_(languages_.size(), 0) {
    noise_.validate();
    if (languages_.empty())
      throw TrainingError("denoising needs at least one language");
    SamplerConfig sc;
    sc.temperature = temperature;
    for (const auto& l : languages_) {
      if (l.units.empty())
        throw TrainingError("empty monolingual corpus");
      int64_t tokens = 0;
      for (const auto& unit : l.units)
        for (const auto& s : unit)
          tokens += static_cast<int64_t>(s.size());
      sc.sizes.push_back(tokens);
    }
    probs_ = language_sample_probs(sc);
  }

  Example DenoisingBatches::build(const std::vector<std::vector<int32_t>>& unit, int32_t tag, Rng& rng) const {
    if (unit.size() == 1 && !noise_.permute_sentences)
      return build_denoising_example(unit.front(), tag, noise_, rng, special_ids_);
    return build_document_denoising_example(unit, tag, noise_, rng, special_ids_);
  }

  Batch DenoisingBatches::next(Rng& rng) {
    const size_t l = languages_.size() == 1 ? 0 : sample_index(probs_, rng);
    const auto& lang = languages_[l];
    std::vector<Example> examples;
    int64_t max_src = 0, max_tgt = 0;
    size_t attempts = 0;
    while (attempts < lang.units.size()) {
      const auto& unit = lang.units[cursors_[l]];
      Example ex = build(unit, lang.tag, rng);
      const int64_t s = std::max<int64_t>(max_src, static_cast<int64_t>(ex.src.size()));
      const int64_t t = std::max<int64_t>(max_tgt, static_cast<int64_t>(ex.tgt_in.size()));
      const int64_t cost = static_cast<int64_t>(examples.size() + 1) * std::max(s, t);
      if (cost > budget_) {
        if (!examples.empty())
          break;
        // Too long to fit even alone: skip it.
        cursors_[l] = (cursors_[l] + 1) % lang.units.size();
        ++attempts;
        continue;
      }
      examples.push_back(std::move(ex));
      max_src = s;
      max_tgt = t;
      cursors_[l] = (cursors_[l] + 1) % lang.units.size();
      ++attempts;
    }
    if (examples.empty())
      throw TrainingError("no monolingual unit fits the token budget");
    return collate(examples);
  }

  json DenoisingBatches::state() const { return {{"cursors", cursors_}}; }

  void DenoisingBatches::restore(const json& state) {
    auto c = state.at("cursors").get<std::vector<size_t>>();
    if (c.size() != cursors_.size())
      throw CheckpointError("denoising cursor count mismatch");
    cursors_ = std::move(c);
  }

  // --- checkpoint selection --------------------------------------------------------------

  std::vector<std::string> CheckpointSelector::update(const std::map<std::string, double>& scores) {
    if (scores.empty())
      throw TrainingError("evaluation produced no directions");
    std::vector<std::string> files;
    double total = 0;
    for (const auto& [dir, score] : scores) {
      total += score;
      auto it = best_.find(dir);
      if (it == best_.end() || score > it->second) {
        best_[dir] = score;
        files.push_back("best." + dir + ".ckpt");
      }
    }
    const double avg = total / static_cast<double>(scores.size());
    if (!best_avg_ || avg > *best_avg_) {
      best_avg_ = avg;
      files.push_back("best.avg.ckpt");
    }
    return files;
  }

  json CheckpointSelector::state() const {
    json j = {{"best", best_}};
    j["best_avg"] = best_avg_ ? json(*best_avg_) : json(nullptr);
    return j;
  }

  void CheckpointSelector::restore(const json& state) {
    best_ = state.at("best").get<std::map<std::string, double>>();
    if (state.at("best_avg").is_null())
      best_avg_.reset();
    else
      best_avg_ = state.at("best_avg").get<double>();
  }

  Evaluator bleu_evaluator(const SubwordModel& tokenizer, std::vector<DevSet> dev, int max_len) {
    return [&tokenizer, dev = std::move(dev), max_len](const TransformerModel& model) {
      std::map<std::string, double> scores;
      for (const auto& set : dev) {
        std::vector<std::string> hyps;
        for (const auto& src : set.sources) {
          const auto hyp = greedy_decode(model, src, set.start_token, max_len);
          hyps.push_back(tokenizer.decode(hyp.tokens, true));
        }
        scores[set.direction] = corpus_bleu(hyps, set.references);
      }
      return scores;
    };
  }

  std::string to_string(TrainMode mode) {
    switch (mode) {
      case TrainMode::Pretrain:
        return "pretrain";
      case TrainMode::Finetune:
        return "finetune";
      case TrainMode::Joint:
        return "joint";
    }
    return "?";
  }

  // --- loop ------------------------------------------------------------------------------

  namespace {

    Checkpoint full_state(DataParallelTrainer& trainer,
                          const TrainRun& run,
                          const Rng& data_rng,
                          const CheckpointSelector& selector,
                          const std::map<std::string, double>& scores) {
      Checkpoint ckpt = model_checkpoint(trainer.model(), run.tokenizer);
      trainer.save_optimizer(ckpt);
      ckpt.meta["step"] = trainer.steps_done();
      ckpt.meta["mode"] = to_string(run.mode);
      ckpt.meta["train_config"] = run.cfg.to_json();
      ckpt.meta["rng"] = data_rng.state();
      ckpt.meta["primary"] = run.primary->state();
      if (run.auxiliary)
        ckpt.meta["auxiliary"] = run.auxiliary->state();
      ckpt.meta["selector"] = selector.state();
      ckpt.meta["bleu"] = scores;
      if (!scores.empty()) {
        double total = 0;
        for (const auto& [d, s] : scores)
          total += s;
        ckpt.meta["avg_bleu"] = total / static_cast<double>(scores.size());
      }
      return ckpt;
    }

  }  // namespace

  TrainResult run_training(const TransformerModel& init, TrainRun& run) {
    run.cfg.validate();
    if (!run.primary)
      throw ConfigError("training needs a batch source");
    if (run.mode == TrainMode::Joint && !run.auxiliary)
      throw ConfigError("joint training needs a denoising batch source");

    std::optional<Checkpoint> resume;
    if (!run.resume_from.empty())
      resume = Checkpoint::load(run.resume_from);
    const TransformerModel start = resume ? model_from_checkpoint(*resume).model : init.clone();

    DataParallelTrainer trainer(start, run.cfg, run.loss);
    Rng data_rng(run.cfg.seed);
    CheckpointSelector selector;
    if (resume) {
      trainer.restore(*resume);
      data_rng.set_state(resume->meta.at("rng").get<std::string>());
      run.primary->restore(resume->meta.at("primary"));
      if (run.auxiliary && resume->meta.contains("auxiliary"))
        run.auxiliary->restore(resume->meta.at("auxiliary"));
      selector.restore(resume->meta.at("selector"));
    }

    TrainResult result;
    if (!run.out_dir.empty())
      std::filesystem::create_directories(run.out_dir);
    auto write = [&](const std::string& file, const Checkpoint& ckpt) {
      if (!run.out_dir.empty())
        ckpt.save((std::filesystem::path(run.out_dir) / file).string());
      result.writes.emplace_back(trainer.steps_done(), file);
    };

    std::map<std::string, double> last_scores;
    const bool joint = run.mode == TrainMode::Joint && run.cfg.loss_mix > 0;
    while (trainer.steps_done() < run.cfg.max_steps) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<WorkerInput> inputs(trainer.workers());
      int64_t tokens = 0;
      for (auto& in : inputs) {
        in.primary = run.primary->next(data_rng);
        tokens += in.primary.target_tokens();
        if (joint) {
          in.auxiliary = run.auxiliary->next(data_rng);
          tokens += in.auxiliary->target_tokens();
        }
      }
      result.last_loss = trainer.step(inputs);
      const int64_t step = trainer.steps_done();
      if (run.on_step) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        run.on_step({step, result.last_loss, lr_at(step, run.cfg), secs > 0 ? tokens / secs : 0.0});
      }
      if (step % run.cfg.eval_every == 0) {
        std::vector<std::string> files;
        if (run.evaluator) {
          // Worker 0's replica; the others are idle between steps.
          last_scores = (*run.evaluator)(trainer.model());
          files = selector.update(last_scores);
          if (run.on_eval)
            run.on_eval(step, last_scores);
        }
        const Checkpoint ckpt = full_state(trainer, run, data_rng, selector, last_scores);
        for (const auto& f : files)
          write(f, ckpt);
        write("last.ckpt", ckpt);
        if (run.stop_after_eval && run.stop_after_eval(step, last_scores))
          break;
      }
    }
    if (result.writes.empty() || result.writes.back().first != trainer.steps_done())
      write("last.ckpt", full_state(trainer, run, data_rng, selector, last_scores));

    result.model = trainer.model().clone();
    result.steps = trainer.steps_done();
    result.best = selector.best();
    result.best_average = selector.best_average();
    return result;
  }

}  // namespace seqforge
