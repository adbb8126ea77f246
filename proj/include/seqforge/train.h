#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "seqforge/checkpoint.h"
#include "seqforge/corpus.h"
#include "seqforge/model.h"
#include "seqforge/tokenizer.h"

namespace seqforge {

  class TrainingError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
  };

  struct TrainConfig {
    double peak_lr = 0.001;
    int64_t warmup_steps = 16000;
    int64_t token_budget = 2048;
    double label_smoothing = 0.1;
    int64_t eval_every = 1000;
    int64_t max_steps = 100000;
    uint64_t seed = 1;
    int num_workers = 1;
    // Weight of the denoising loss in joint training.
    double loss_mix = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-9;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
  };

  // peak_lr * min(step / warmup, sqrt(warmup / step)); step >= 1.
  double lr_at(int64_t step, const TrainConfig& cfg);

  // Adam moments, aligned with the parameter store's order.
  struct OptimizerState {
    int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    std::vector<std::vector<Real>> m;
    std::vector<std::vector<Real>> v;

    static OptimizerState for_params(const ParameterStore& params, const TrainConfig& cfg);
  };

  // Bias-corrected Adam update from the gradients held by the parameters.
  // Throws TrainingError naming the parameter on a non-finite gradient.
  void adam_step(ParameterStore& params, OptimizerState& state, double lr);

  // Label-smoothed cross entropy, per target token, averaged over decoder
  // layers when the model uses multi-layer softmax.
  Tensor batch_loss(const TransformerModel& model, const Batch& batch, double smoothing, const ForwardOptions& opts);

  // Zeroes gradients, runs forward and backward; returns the loss.
  double train_step(TransformerModel& model, const Batch& batch, const TrainConfig& cfg, Rng& rng);

  // Installs the elementwise mean of all replicas' gradients in every replica.
  void all_reduce_mean(const std::vector<ParameterStore*>& replicas);

  // Per-batch objective; the default is batch_loss with the configured
  // label smoothing.
  using LossFn = std::function<Tensor(const TransformerModel&, const Batch&, const ForwardOptions&)>;

  struct WorkerInput {
    Batch primary;
    // Second objective of joint training, weighted by loss_mix.
    std::optional<Batch> auxiliary;
  };

  // W model replicas stepping in lock-step: each worker computes its
  // gradients, all meet at a barrier, gradients are averaged, then every
  // replica applies the same Adam update.
  class DataParallelTrainer {
  public:
    DataParallelTrainer(const TransformerModel& init, const TrainConfig& cfg, LossFn loss = {});

    // inputs.size() must equal the worker count. Returns the mean loss.
    double step(const std::vector<WorkerInput>& inputs);

    int workers() const { return static_cast<int>(replicas_.size()); }
    int64_t steps_done() const { return optimizer_.front().step; }
    TransformerModel& model() { return replicas_.front(); }
    const TransformerModel& replica(int w) const { return replicas_.at(w); }
    const OptimizerState& optimizer() const { return optimizer_.front(); }

    // Checkpoint tensors "optim.m.<name>" / "optim.v.<name>" and the step.
    void save_optimizer(Checkpoint& ckpt) const;
    // Restores model parameters and optimizer state into every replica.
    void restore(const Checkpoint& ckpt);

  private:
    double worker_loss(int w, const WorkerInput& input);

    TrainConfig cfg_;
    LossFn loss_;
    std::vector<TransformerModel> replicas_;
    std::vector<OptimizerState> optimizer_;
  };

  // Endless stream of training batches with resumable position.
  class BatchSource {
  public:
    virtual ~BatchSource() = default;
    virtual Batch next(Rng& rng) = 0;
    virtual nlohmann::json state() const = 0;
    virtual void restore(const nlohmann::json& state) = 0;
  };

  // Fixed examples packed under the token budget; batch order is reshuffled
  // every epoch from (seed, epoch).
  class ExampleBatches : public BatchSource {
  public:
    ExampleBatches(std::vector<Example> examples, int64_t token_budget, uint64_t seed);
    Batch next(Rng& rng) override;
    nlohmann::json state() const override;
    void restore(const nlohmann::json& state) override;
    int64_t skipped() const { return skipped_; }
    size_t batches_per_epoch() const { return batches_.size(); }

  private:
    void shuffle();

    std::vector<Batch> batches_;
    std::vector<size_t> order_;
    uint64_t seed_;
    int64_t epoch_ = 0;
    size_t cursor_ = 0;
    int64_t skipped_ = 0;
  };

  // Monolingual denoising examples built on the fly. Each batch picks one
  // language by temperature sampling, then consumes that language's units
  // (a sentence, or a document when unit size > 1) in order, cycling.
  class DenoisingBatches : public BatchSource {
  public:
    struct Language {
      int32_t tag = 0;
      std::vector<std::vector<std::vector<int32_t>>> units;
    };

    DenoisingBatches(std::vector<Language> languages,
                     NoiseConfig noise,
                     double temperature,
                     int64_t token_budget,
                     std::vector<int32_t> special_ids);
    Batch next(Rng& rng) override;
    nlohmann::json state() const override;
    void restore(const nlohmann::json& state) override;
    const std::vector<double>& probabilities() const { return probs_; }

  private:
    Example build(const std::vector<std::vector<int32_t>>& unit, int32_t tag, Rng& rng) const;

    std::vector<Language> languages_;
    NoiseConfig noise_;
    std::vector<double> probs_;
    int64_t budget_;
    std::vector<int32_t> special_ids_;
    std::vector<size_t> cursors_;
  };

  // Tracks best dev scores; ties keep the earlier checkpoint.
  class CheckpointSelector {
  public:
    // Names of the files to (re)write for these per-direction scores:
    // "best.<direction>.ckpt" on a strict per-direction improvement and
    // "best.avg.ckpt" on a strict improvement of the mean.
    std::vector<std::string> update(const std::map<std::string, double>& scores);
    nlohmann::json state() const;
    void restore(const nlohmann::json& state);
    const std::map<std::string, double>& best() const { return best_; }
    std::optional<double> best_average() const { return best_avg_; }

  private:
    std::map<std::string, double> best_;
    std::optional<double> best_avg_;
  };

  // Direction name -> dev score for the current model.
  using Evaluator = std::function<std::map<std::string, double>(const TransformerModel&)>;

  struct DevSet {
    std::string direction;  // e.g. "en-fr"
    std::vector<std::vector<int32_t>> sources;  // encoder inputs
    int32_t start_token = 0;
    std::vector<std::string> references;
  };

  // Greedy-decodes every dev set and scores corpus BLEU against references.
  Evaluator bleu_evaluator(const SubwordModel& tokenizer, std::vector<DevSet> dev, int max_len);

  enum class TrainMode { Pretrain, Finetune, Joint };
  std::string to_string(TrainMode mode);

  struct StepLog {
    int64_t step = 0;
    double loss = 0;
    double lr = 0;
    double tokens_per_sec = 0;
  };

  struct TrainRun {
    TrainConfig cfg;
    TrainMode mode = TrainMode::Finetune;
    // Denoising batches in Pretrain mode, translation batches otherwise.
    BatchSource* primary = nullptr;
    // Denoising batches for Joint mode.
    BatchSource* auxiliary = nullptr;
    std::optional<Evaluator> evaluator;
    // Replaces the translation loss on primary batches (distillation).
    LossFn loss;
    const SubwordModel* tokenizer = nullptr;
    // Checkpoints go here; empty disables writing.
    std::string out_dir;
    // Checkpoint to continue from (model, optimizer, rng, data position).
    std::string resume_from;
    std::function<void(const StepLog&)> on_step;
    std::function<void(int64_t step, const std::map<std::string, double>&)> on_eval;
    // Ends the run early (after the evaluation's checkpoints are written)
    // when it returns true.
    std::function<bool(int64_t step, const std::map<std::string, double>&)> stop_after_eval;
  };

  struct TrainResult {
    TransformerModel model;
    int64_t steps = 0;
    double last_loss = 0;
    // (step, file name) in write order.
    std::vector<std::pair<int64_t, std::string>> writes;
    std::map<std::string, double> best;
    std::optional<double> best_average;
  };

  TrainResult run_training(const TransformerModel& init, TrainRun& run);

}  // namespace seqforge
