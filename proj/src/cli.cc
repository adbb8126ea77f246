#include "seqforge/cli.h"

#include <openssl/evp.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "seqforge/checkpoint.h"
#include "seqforge/decode.h"
#include "seqforge/distill.h"
#include "seqforge/metrics.h"
#include "seqforge/train.h"
#include "seqforge/transfer.h"

namespace seqforge::cli {

  namespace fs = std::filesystem;

  namespace {

    constexpr const char* kVersion = "0.1.0";

    class UsageError : public std::runtime_error {
    public:
      using std::runtime_error::runtime_error;
    };

    std::string read_file(const std::string& path) {
      std::ifstream in(path, std::ios::binary);
      if (!in)
        throw std::runtime_error("cannot read " + path);
      std::ostringstream buf;
      buf << in.rdbuf();
      return buf.str();
    }

    std::vector<std::string> lines_of(const std::string& path) {
      if (!fs::exists(path))
        throw std::runtime_error("cannot read " + path);
      return read_lines(path);
    }

    // ---- flag groups ---------------------------------------------------------------------

    // Architecture flags. Only flags given on the command line override the
    // base configuration (defaults, --model-config, or a loaded checkpoint).
    struct ModelFlags {
      ModelConfig values;
      std::string config_file;
      std::string wait_k_mode = "off";
      std::string context_mode = "none";
      std::string positional = "sinusoidal";
      bool tie = true;
      CLI::Option* enc_layers = nullptr;
      CLI::Option* dec_layers = nullptr;
      CLI::Option* unique_enc = nullptr;
      CLI::Option* unique_dec = nullptr;
      std::vector<std::pair<CLI::Option*, std::function<void(ModelConfig&)>>> setters;

      ModelFlags() { values.unique_enc_layers = values.unique_dec_layers = 0; }

      template <typename T>
      CLI::Option* field(CLI::App* app, const std::string& name, T ModelConfig::*member, const std::string& help) {
        auto* opt = app->add_option(name, values.*member, help);
        setters.emplace_back(opt, [this, member](ModelConfig& c) { c.*member = values.*member; });
        return opt;
      }

      void attach(CLI::App* app) {
        const std::string group = "Model";
        app->add_option("--model-config", config_file, "JSON model configuration used as the base")->group(group);
        enc_layers = field(app, "--enc-layers", &ModelConfig::enc_layers, "Encoder layers")->group(group);
        dec_layers = field(app, "--dec-layers", &ModelConfig::dec_layers, "Decoder layers")->group(group);
        unique_enc = field(app, "--unique-enc-layers", &ModelConfig::unique_enc_layers,
                           "Distinct encoder parameter sets (0 = one per layer)")
                         ->group(group);
        unique_dec = field(app, "--unique-dec-layers", &ModelConfig::unique_dec_layers,
                           "Distinct decoder parameter sets (0 = one per layer)")
                         ->group(group);
        field(app, "--hidden", &ModelConfig::hidden, "Hidden size")->group(group);
        field(app, "--ffn", &ModelConfig::ffn, "Feed-forward size")->group(group);
        field(app, "--heads", &ModelConfig::heads, "Attention heads")->group(group);
        field(app, "--dropout", &ModelConfig::dropout, "Dropout probability")->group(group);
        field(app, "--max-positions", &ModelConfig::max_positions, "Learned position table size")->group(group);
        field(app, "--wait-k", &ModelConfig::wait_k, "Training k for fixed wait-k")->group(group);
        field(app, "--wait-k-set", &ModelConfig::wait_k_set, "Candidate k values for sampled wait-k")->group(group);
        auto flag = [&](const std::string& name, bool ModelConfig::*member, const std::string& help) {
          auto* opt = app->add_flag(name, values.*member, help)->group(group);
          setters.emplace_back(opt, [this, member](ModelConfig& c) { c.*member = values.*member; });
        };
        flag("--multi-layer-softmax", &ModelConfig::multi_layer_softmax, "Softmax after every decoder layer");
        flag("--unidirectional-encoder", &ModelConfig::unidirectional_encoder, "Causal encoder self-attention");
        auto* mode = app->add_option("--wait-k-mode", wait_k_mode, "off, fixed or sampled")
                         ->check(CLI::IsMember({"off", "fixed", "sampled"}))
                         ->group(group);
        setters.emplace_back(mode, [this](ModelConfig& c) { c.wait_k_mode = parse_wait_k_mode(wait_k_mode); });
        auto* ctx = app->add_option("--context-mode", context_mode, "none, decoder_combination or encoder_gate")
                        ->check(CLI::IsMember({"none", "decoder_combination", "encoder_gate"}))
                        ->group(group);
        setters.emplace_back(ctx, [this](ModelConfig& c) { c.context_mode = parse_context_mode(context_mode); });
        auto* pos = app->add_option("--positional", positional, "sinusoidal or learned")
                        ->check(CLI::IsMember({"sinusoidal", "learned"}))
                        ->group(group);
        setters.emplace_back(pos, [this](ModelConfig& c) { c.positional = parse_positional(positional); });
        auto* tie_opt = app->add_flag("--tie-embeddings,!--no-tie-embeddings", tie,
                                      "Share the output projection with the token embeddings")
                            ->group(group)
                            ->default_str("true");
        setters.emplace_back(tie_opt, [this](ModelConfig& c) { c.tie_embeddings = tie; });
      }

      ModelConfig base() const {
        return config_file.empty() ? ModelConfig{} : ModelConfig::from_json(read_file(config_file));
      }

      ModelConfig resolve(ModelConfig cfg) const {
        for (const auto& [opt, apply] : setters)
          if (opt->count() > 0)
            apply(cfg);
        if (unique_enc->count() == 0 ? enc_layers->count() > 0 : cfg.unique_enc_layers == 0)
          cfg.unique_enc_layers = cfg.enc_layers;
        if (unique_dec->count() == 0 ? dec_layers->count() > 0 : cfg.unique_dec_layers == 0)
          cfg.unique_dec_layers = cfg.dec_layers;
        return cfg;
      }
    };

    struct TrainFlags {
      TrainConfig cfg;
      std::string out_dir;
      std::string resume;
      int64_t log_every = 100;
      int eval_max_len = 128;

      void attach(CLI::App* app, int64_t budget) {
        cfg.token_budget = budget;
        const std::string group = "Training";
        app->add_option("--lr", cfg.peak_lr, "Peak learning rate")->group(group);
        app->add_option("--warmup", cfg.warmup_steps, "Linear warmup steps")->group(group);
        app->add_option("--token-budget", cfg.token_budget, "Padded tokens per batch and worker")->group(group);
        app->add_option("--label-smoothing", cfg.label_smoothing, "Label smoothing")->group(group);
        app->add_option("--eval-every", cfg.eval_every, "Steps between evaluations and checkpoints")->group(group);
        app->add_option("--max-steps", cfg.max_steps, "Total optimizer steps")->group(group);
        app->add_option("--seed", cfg.seed, "Random seed (SEQFORGE_SEED overrides)")->group(group);
        app->add_option("--workers", cfg.num_workers, "Data-parallel workers")->group(group);
        app->add_option("--adam-beta1", cfg.beta1, "Adam beta1")->group(group);
        app->add_option("--adam-beta2", cfg.beta2, "Adam beta2")->group(group);
        app->add_option("--adam-eps", cfg.adam_eps, "Adam epsilon")->group(group);
        app->add_option("--log-every", log_every, "Steps between log lines")->group(group);
        app->add_option("--eval-max-len", eval_max_len, "Greedy length limit for dev decoding")->group(group);
        app->add_option("--out-dir", out_dir, "Checkpoint and log directory")->required()->group(group);
        app->add_option("--resume", resume, "Checkpoint to continue from")->group(group);
      }
    };

    struct ParallelFlags {
      std::vector<std::string> train_src, train_tgt, train_ctx, src_lang, tgt_lang, dev_src, dev_tgt;

      void attach(CLI::App* app, bool required) {
        const std::string group = "Parallel data";
        auto* s = app->add_option("--train-src", train_src, "Source side files, one per direction")->group(group);
        auto* t = app->add_option("--train-tgt", train_tgt, "Target side files, aligned with --train-src")->group(group);
        app->add_option("--train-ctx", train_ctx, "Context files (previous sentence / second source)")->group(group);
        app->add_option("--src-lang", src_lang, "Source language per direction")->group(group);
        app->add_option("--tgt-lang", tgt_lang, "Target language per direction")->group(group);
        app->add_option("--dev-src", dev_src, "Dev source files per direction")->group(group);
        app->add_option("--dev-tgt", dev_tgt, "Dev reference files per direction")->group(group);
        if (required) {
          s->required();
          t->required();
        }
      }

      void check() const {
        const size_t n = train_src.size();
        if (train_tgt.size() != n || src_lang.size() != n || tgt_lang.size() != n)
          throw UsageError("--train-src, --train-tgt, --src-lang and --tgt-lang need one value per direction");
        if (!train_ctx.empty() && train_ctx.size() != n)
          throw UsageError("--train-ctx needs one file per direction");
        if (dev_src.size() != dev_tgt.size() || (!dev_src.empty() && dev_src.size() != n))
          throw UsageError("--dev-src and --dev-tgt need one file per direction");
      }

      std::vector<std::string> files() const {
        std::vector<std::string> out;
        for (const auto* list : {&train_src, &train_tgt, &train_ctx, &dev_src, &dev_tgt})
          out.insert(out.end(), list->begin(), list->end());
        return out;
      }
    };

    struct MonoFlags {
      std::vector<std::string> files, langs;
      bool documents = false;
      NoiseConfig noise;
      double temperature = 5.0;

      void attach(CLI::App* app, bool required) {
        const std::string group = "Monolingual data";
        auto* f = app->add_option("--mono", files, "Monolingual files, one per language")->group(group);
        app->add_option("--mono-lang", langs, "Language of each --mono file")->group(group);
        app->add_flag("--documents", documents, "Files hold blank-line separated documents")->group(group);
        app->add_option("--mask-fraction", noise.mask_fraction, "Fraction of subwords masked by infilling")
            ->group(group);
        app->add_option("--span-lambda", noise.span_lambda, "Poisson mean of masked span lengths")->group(group);
        app->add_flag("--permute-sentences", noise.permute_sentences, "Shuffle sentences within documents")
            ->group(group);
        app->add_option("--temperature", temperature, "Language sampling temperature")->group(group);
        if (required)
          f->required();
      }

      void check() const {
        if (files.size() != langs.size())
          throw UsageError("--mono and --mono-lang need the same number of values");
      }
    };

    // ---- shared helpers ------------------------------------------------------------------

    uint64_t seed_override(bool honour_env, uint64_t fallback) {
      if (!honour_env)
        return fallback;
      const char* env = std::getenv("SEQFORGE_SEED");
      if (!env || !*env)
        return fallback;
      try {
        size_t used = 0;
        const unsigned long long v = std::stoull(env, &used);
        if (used != std::strlen(env))
          throw std::invalid_argument(env);
        return v;
      } catch (const std::logic_error&) {
        throw UsageError(std::string("SEQFORGE_SEED is not an unsigned integer: ") + env);
      }
    }

    SubwordModel tokenizer_from(const std::string& path, const std::optional<SubwordModel>& embedded) {
      if (!path.empty())
        return SubwordModel::load(path);
      if (embedded)
        return *embedded;
      throw UsageError("no tokenizer: pass --tokenizer or a checkpoint that embeds one");
    }

    std::vector<DenoisingBatches::Language> mono_languages(const MonoFlags& mono, const SubwordModel& tok) {
      std::vector<DenoisingBatches::Language> out;
      for (size_t i = 0; i < mono.files.size(); ++i) {
        DenoisingBatches::Language lang;
        lang.tag = tok.tag_id(mono.langs[i]);
        if (mono.documents) {
          if (!fs::exists(mono.files[i]))
            throw std::runtime_error("cannot read " + mono.files[i]);
          for (const auto& doc : read_documents(mono.files[i])) {
            std::vector<std::vector<int32_t>> unit;
            for (const auto& s : doc)
              if (auto ids = tok.encode(s); !ids.empty())
                unit.push_back(std::move(ids));
            if (!unit.empty())
              lang.units.push_back(std::move(unit));
          }
        } else {
          for (const auto& s : lines_of(mono.files[i]))
            if (auto ids = tok.encode(s); !ids.empty())
              lang.units.push_back({std::move(ids)});
        }
        if (lang.units.empty())
          throw std::runtime_error(mono.files[i] + " has no usable text");
        out.push_back(std::move(lang));
      }
      return out;
    }

    std::vector<Example> parallel_examples(const ParallelFlags& data, const SubwordModel& tok) {
      std::vector<Example> out;
      for (size_t d = 0; d < data.train_src.size(); ++d) {
        const auto src = lines_of(data.train_src[d]);
        const auto tgt = lines_of(data.train_tgt[d]);
        if (src.size() != tgt.size())
          throw std::runtime_error(data.train_src[d] + " and " + data.train_tgt[d] + " differ in line count");
        std::vector<std::string> ctx;
        if (!data.train_ctx.empty()) {
          ctx = lines_of(data.train_ctx[d]);
          if (ctx.size() != src.size())
            throw std::runtime_error(data.train_ctx[d] + " is not aligned with " + data.train_src[d]);
        }
        const int32_t stag = tok.tag_id(data.src_lang[d]), ttag = tok.tag_id(data.tgt_lang[d]);
        for (size_t i = 0; i < src.size(); ++i) {
          const auto s = tok.encode(src[i]);
          const auto t = tok.encode(tgt[i]);
          if (s.empty() || t.empty())
            continue;
          const auto c = ctx.empty() ? std::vector<int32_t>{} : tok.encode(ctx[i]);
          out.push_back(make_translation_example(s, t, stag, ttag, c));
        }
      }
      if (out.empty())
        throw std::runtime_error("no usable training pairs");
      return out;
    }

    std::vector<DevSet> dev_sets(const ParallelFlags& data, const SubwordModel& tok) {
      std::vector<DevSet> out;
      for (size_t d = 0; d < data.dev_src.size(); ++d) {
        DevSet set;
        set.direction = data.src_lang[d] + "-" + data.tgt_lang[d];
        set.start_token = tok.tag_id(data.tgt_lang[d]);
        const int32_t stag = tok.tag_id(data.src_lang[d]);
        for (const auto& line : lines_of(data.dev_src[d]))
          set.sources.push_back(encoder_input(tok.encode(line), stag));
        set.references = lines_of(data.dev_tgt[d]);
        if (set.references.size() != set.sources.size())
          throw std::runtime_error(data.dev_src[d] + " and " + data.dev_tgt[d] + " differ in line count");
        out.push_back(std::move(set));
      }
      return out;
    }

    std::string replace_seed(std::vector<std::string>& argv, uint64_t seed) {
      for (size_t i = 0; i < argv.size(); ++i) {
        if (argv[i] == "--seed" && i + 1 < argv.size()) {
          argv[i + 1] = std::to_string(seed);
          return argv[i + 1];
        }
        if (argv[i].rfind("--seed=", 0) == 0) {
          argv[i] = "--seed=" + std::to_string(seed);
          return argv[i];
        }
      }
      argv.push_back("--seed");
      argv.push_back(std::to_string(seed));
      return argv.back();
    }

    nlohmann::json resolved_flags(const CLI::App* app) {
      nlohmann::json flags = nlohmann::json::object();
      for (const auto* opt : app->get_options()) {
        if (opt->get_lnames().empty() || opt->get_lnames().front() == "help")
          continue;
        const std::string name = "--" + opt->get_lnames().front();
        if (opt->count() > 0) {
          const auto& res = opt->results();
          flags[name] = res.size() == 1 ? nlohmann::json(res.front()) : nlohmann::json(res);
        } else {
          flags[name] = opt->get_default_str();
        }
      }
      return flags;
    }

    // Written before the first training step.
    void write_manifest(const std::string& out_dir,
                        const std::string& command,
                        std::vector<std::string> argv,
                        const CLI::App* sub,
                        uint64_t seed,
                        const std::vector<std::string>& inputs,
                        const std::vector<std::string>& layout) {
      fs::create_directories(out_dir);
      replace_seed(argv, seed);
      nlohmann::json m;
      m["version"] = kVersion;
      m["command"] = command;
      m["argv"] = argv;
      m["seed"] = seed;
      m["flags"] = resolved_flags(sub);
      m["flags"]["--seed"] = std::to_string(seed);
      auto in = nlohmann::json::array();
      for (const auto& path : inputs)
        if (!path.empty())
          in.push_back({{"path", path}, {"git_blob_sha1", git_blob_hash(path)}});
      m["inputs"] = in;
      m["layout"] = {{"out_dir", out_dir}, {"files", layout}};
      std::ofstream(fs::path(out_dir) / "run_manifest.json") << m.dump(2) << '\n';
    }

    class Logger {
    public:
      Logger(std::ostream& err, const std::string& out_dir) : err_(err) {
        if (!out_dir.empty()) {
          fs::create_directories(out_dir);
          file_.open(fs::path(out_dir) / "train.log", std::ios::app);
        }
      }
      void line(const std::string& text) {
        err_ << text << '\n';
        if (file_)
          file_ << text << '\n' << std::flush;
      }

    private:
      std::ostream& err_;
      std::ofstream file_;
    };

    std::string fmt(double v, int precision) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(precision) << v;
      return s.str();
    }

    std::string step_line(const StepLog& log) {
      std::ostringstream s;
      s << "step=" << log.step << " loss=" << fmt(log.loss, 4) << " lr=" << std::scientific << std::setprecision(4)
        << log.lr << " tokens_per_sec=" << fmt(log.tokens_per_sec, 1);
      return s.str();
    }

    std::string eval_line(int64_t step, const std::map<std::string, double>& scores) {
      std::ostringstream s;
      s << "eval step=" << step;
      double total = 0;
      for (const auto& [d, v] : scores) {
        s << ' ' << d << "=" << fmt(v, 2);
        total += v;
      }
      if (!scores.empty())
        s << " avg=" << fmt(total / static_cast<double>(scores.size()), 2);
      return s.str();
    }

    std::vector<std::string> layout_files(const ParallelFlags* data) {
      std::vector<std::string> files = {"run_manifest.json", "train.log", "last.ckpt"};
      if (data && !data->dev_src.empty()) {
        for (size_t d = 0; d < data->dev_src.size(); ++d)
          files.push_back("best." + data->src_lang[d] + "-" + data->tgt_lang[d] + ".ckpt");
        files.push_back("best.avg.ckpt");
      }
      return files;
    }

    // Runs the loop with logging; evaluation only when dev sets exist.
    int run_loop(TrainRun& run,
                 const TransformerModel& init,
                 const SubwordModel& tok,
                 const std::vector<DevSet>& dev,
                 const TrainFlags& tf,
                 std::ostream& out,
                 std::ostream& err) {
      Logger log(err, tf.out_dir);
      run.tokenizer = &tok;
      run.out_dir = tf.out_dir;
      run.resume_from = tf.resume;
      if (!dev.empty())
        run.evaluator = bleu_evaluator(tok, dev, tf.eval_max_len);
      run.on_step = [&](const StepLog& s) {
        if (s.step == 1 || s.step % tf.log_every == 0)
          log.line(step_line(s));
      };
      run.on_eval = [&](int64_t step, const std::map<std::string, double>& scores) {
        log.line(eval_line(step, scores));
      };
      log.line("mode=" + to_string(run.mode) + " parameters=" + std::to_string(init.parameter_count()) +
               " workers=" + std::to_string(run.cfg.num_workers) + " seed=" + std::to_string(run.cfg.seed));
      const TrainResult result = run_training(init, run);
      log.line("done steps=" + std::to_string(result.steps) + " loss=" + fmt(result.last_loss, 4));
      out << (fs::path(tf.out_dir) / "last.ckpt").string() << '\n';
      return 0;
    }

    // ---- subcommands ---------------------------------------------------------------------

    struct CreateTokenizer {
      std::vector<std::string> inputs, languages, specials;
      int32_t vocab_size = 8000;
      std::string output;

      void attach(CLI::App* app) {
        app->add_option("--input", inputs, "Training text files")->required();
        app->add_option("--vocab-size", vocab_size, "Target vocabulary size");
        app->add_option("--languages", languages, "Language codes; adds a <2xx> tag for each");
        app->add_option("--specials", specials, "Extra special tokens");
        app->add_option("--output", output, "Tokenizer model file")->required();
      }

      int run(std::ostream& out) const {
        std::vector<std::string> lines;
        for (const auto& f : inputs) {
          auto l = lines_of(f);
          lines.insert(lines.end(), l.begin(), l.end());
        }
        std::vector<std::string> all;
        for (const auto& l : languages)
          all.push_back(lang_tag(l));
        all.insert(all.end(), specials.begin(), specials.end());
        const auto model = SubwordModel::train(lines, vocab_size, all);
        model.save(output);
        out << "vocab_size=" << model.vocab().size() << " merges=" << model.merges().size() << '\n';
        return 0;
      }
    };

    struct Pretrain {
      std::string tokenizer, init_from;
      MonoFlags mono;
      ModelFlags model;
      TrainFlags train;

      void attach(CLI::App* app) {
        app->add_option("--tokenizer", tokenizer, "Tokenizer model file")->required();
        app->add_option("--init-from", init_from, "Start from this checkpoint's parameters");
        mono.attach(app, true);
        model.attach(app);
        train.attach(app, 4096);
      }

      int run(const std::vector<std::string>& argv, const CLI::App* app, bool env, std::ostream& out,
              std::ostream& err) {
        mono.check();
        train.cfg.seed = seed_override(env, train.cfg.seed);
        const auto tok = SubwordModel::load(tokenizer);
        TransformerModel init;
        if (!train.resume.empty()) {
          init = load_model(train.resume).model;
        } else if (!init_from.empty()) {
          init = load_model(init_from).model;
        } else {
          ModelConfig cfg = model.resolve(model.base());
          cfg.vocab_size = tok.vocab().size();
          Rng rng(train.cfg.seed);
          init = TransformerModel(cfg, rng);
        }
        DenoisingBatches batches(mono_languages(mono, tok), mono.noise, mono.temperature, train.cfg.token_budget,
                                 tok.vocab().special_ids());
        std::vector<std::string> inputs = mono.files;
        inputs.push_back(tokenizer);
        inputs.push_back(init_from);
        write_manifest(train.out_dir, "pretrain", argv, app, train.cfg.seed, inputs, layout_files(nullptr));
        TrainRun run;
        run.cfg = train.cfg;
        run.mode = TrainMode::Pretrain;
        run.primary = &batches;
        return run_loop(run, init, tok, {}, train, out, err);
      }
    };

    // Builds the starting model for train/distill students.
    TransformerModel starting_model(const ModelFlags& model,
                                    const std::string& init_from,
                                    const std::string& transfer_map,
                                    const SubwordModel& tok,
                                    uint64_t seed,
                                    std::optional<ModelConfig> fallback_base = std::nullopt) {
      if (init_from.empty()) {
        if (!transfer_map.empty())
          throw UsageError("--transfer-map needs --init-from");
        ModelConfig cfg = model.resolve(model.config_file.empty() && fallback_base ? *fallback_base : model.base());
        cfg.vocab_size = tok.vocab().size();
        Rng rng(seed);
        return TransformerModel(cfg, rng);
      }
      LoadedModel source = load_model(init_from);
      ModelConfig target = model.resolve(model.config_file.empty() ? source.model.config() : model.base());
      target.vocab_size = tok.vocab().size();
      TransferOptions opts;
      opts.seed = seed;
      if (source.tokenizer && source.tokenizer->vocab().tokens() != tok.vocab().tokens()) {
        opts.source_tokens = source.tokenizer->vocab().tokens();
        opts.target_tokens = tok.vocab().tokens();
      }
      const bool same = target == source.model.config() && opts.source_tokens.empty();
      if (transfer_map.empty() && same)
        return std::move(source.model);
      const TransferMap map = transfer_map.empty() ? TransferMap::identity() : TransferMap::load(transfer_map);
      return apply_transfer(source.model, target, map, opts);
    }

    struct Train {
      std::string tokenizer, init_from, transfer_map;
      ParallelFlags data;
      MonoFlags mono;
      double loss_mix = 1.0;
      ModelFlags model;
      TrainFlags train;

      void attach(CLI::App* app) {
        app->add_option("--tokenizer", tokenizer, "Tokenizer model file (default: the one in --init-from)");
        app->add_option("--init-from", init_from, "Initialize from this checkpoint");
        app->add_option("--transfer-map", transfer_map, "Parameter transfer rules (target=source per line)");
        app->add_option("--loss-mix", loss_mix, "Weight of the denoising loss when --mono is given");
        data.attach(app, true);
        mono.attach(app, false);
        model.attach(app);
        train.attach(app, 2048);
      }

      int run(const std::vector<std::string>& argv, const CLI::App* app, bool env, std::ostream& out,
              std::ostream& err) {
        data.check();
        mono.check();
        train.cfg.seed = seed_override(env, train.cfg.seed);
        train.cfg.loss_mix = loss_mix;
        std::optional<SubwordModel> embedded;
        if (tokenizer.empty() && (!init_from.empty() || !train.resume.empty()))
          embedded = load_model(train.resume.empty() ? init_from : train.resume).tokenizer;
        const SubwordModel tok = tokenizer_from(tokenizer, embedded);
        const TransformerModel init = train.resume.empty()
                                          ? starting_model(model, init_from, transfer_map, tok, train.cfg.seed)
                                          : load_model(train.resume).model;

        ExampleBatches batches(parallel_examples(data, tok), train.cfg.token_budget, train.cfg.seed);
        std::optional<DenoisingBatches> denoise;
        if (!mono.files.empty())
          denoise.emplace(mono_languages(mono, tok), mono.noise, mono.temperature, train.cfg.token_budget,
                          tok.vocab().special_ids());
        const auto dev = dev_sets(data, tok);

        std::vector<std::string> inputs = data.files();
        inputs.insert(inputs.end(), mono.files.begin(), mono.files.end());
        for (const auto* p : {&tokenizer, &init_from, &transfer_map})
          inputs.push_back(*p);
        write_manifest(train.out_dir, "train", argv, app, train.cfg.seed, inputs, layout_files(&data));
        if (batches.skipped() > 0)
          err << "warning: " << batches.skipped() << " pairs exceed --token-budget and are skipped\n";

        TrainRun run;
        run.cfg = train.cfg;
        run.mode = denoise ? TrainMode::Joint : TrainMode::Finetune;
        run.primary = &batches;
        run.auxiliary = denoise ? &*denoise : nullptr;
        return run_loop(run, init, tok, dev, train, out, err);
      }
    };

    struct Distill {
      std::string teacher, student_config, init_from, transfer_map;
      DistillConfig dc;
      std::string layer_map, encoder_layer_map, decoder_layer_map;
      std::vector<std::string> attention_kinds = {"enc_self", "dec_self", "dec_cross"};
      ParallelFlags data;
      ModelFlags model;
      TrainFlags train;

      void attach(CLI::App* app) {
        const std::string group = "Distillation";
        app->add_option("--teacher", teacher, "Teacher checkpoint")->required()->group(group);
        app->add_option("--student-config", student_config, "Student model JSON (default: the teacher's)")
            ->group(group);
        app->add_option("--init-from", init_from, "Initialize the student from this checkpoint")->group(group);
        app->add_option("--transfer-map", transfer_map, "Transfer rules applied with --init-from")->group(group);
        app->add_option("--w-ce", dc.w_ce, "Weight of label cross entropy")->group(group);
        app->add_option("--w-logit", dc.w_logit, "Weight of the teacher-distribution KL")->group(group);
        app->add_option("--w-hidden", dc.w_hidden, "Weight of the hidden-state MSE")->group(group);
        app->add_option("--w-attn", dc.w_attn, "Weight of the attention KL")->group(group);
        app->add_option("--temperature", dc.temperature, "Softmax temperature of the logit term")->group(group);
        app->add_option("--layer-map", layer_map, "teacher:student pairs for both stacks, e.g. 2:1,4:2")
            ->group(group);
        app->add_option("--encoder-layer-map", encoder_layer_map, "Encoder pairs (overrides --layer-map)")
            ->group(group);
        app->add_option("--decoder-layer-map", decoder_layer_map, "Decoder pairs (overrides --layer-map)")
            ->group(group);
        app->add_option("--attention-kinds", attention_kinds, "Subset of enc_self, dec_self, dec_cross")
            ->group(group);
        data.attach(app, true);
        model.attach(app);
        train.attach(app, 2048);
      }

      int run(const std::vector<std::string>& argv, const CLI::App* app, bool env, std::ostream& out,
              std::ostream& err) {
        data.check();
        train.cfg.seed = seed_override(env, train.cfg.seed);
        if (!student_config.empty())
          model.config_file = student_config;
        LoadedModel t = load_model(teacher);
        if (!t.tokenizer)
          throw std::runtime_error(teacher + " does not embed a tokenizer");
        const SubwordModel& tok = *t.tokenizer;
        if (!layer_map.empty())
          dc.encoder_map = dc.decoder_map = parse_layer_map(layer_map);
        if (!encoder_layer_map.empty())
          dc.encoder_map = parse_layer_map(encoder_layer_map);
        if (!decoder_layer_map.empty())
          dc.decoder_map = parse_layer_map(decoder_layer_map);
        dc.attention_kinds.clear();
        for (const auto& k : attention_kinds)
          dc.attention_kinds.push_back(attention_kind_from_string(k));

        const TransformerModel init =
            train.resume.empty()
                ? starting_model(model, init_from, transfer_map, tok, train.cfg.seed, t.model.config())
                : load_model(train.resume).model;
        dc.validate(t.model.config(), init.config());

        ExampleBatches batches(parallel_examples(data, tok), train.cfg.token_budget, train.cfg.seed);
        const auto dev = dev_sets(data, tok);
        std::vector<std::string> inputs = data.files();
        for (const auto* p : {&teacher, &student_config, &init_from, &transfer_map})
          inputs.push_back(*p);
        write_manifest(train.out_dir, "distill", argv, app, train.cfg.seed, inputs, layout_files(&data));

        TrainRun run;
        run.cfg = train.cfg;
        run.mode = TrainMode::Finetune;
        run.primary = &batches;
        run.loss = distill_objective(t.model, dc, train.cfg.label_smoothing);
        return run_loop(run, init, tok, dev, train, out, err);
      }
    };

    struct BeamFlags {
      BeamConfig cfg;
      void attach(CLI::App* app) {
        app->add_option("--beam", cfg.beam, "Beam size");
        app->add_option("--length-penalty", cfg.length_penalty, "Length penalty exponent alpha");
        app->add_option("--max-len", cfg.max_len, "Maximum output length");
      }
    };

    void write_lines(const std::string& path, const std::vector<std::string>& lines, std::ostream& fallback) {
      std::ofstream file;
      if (!path.empty()) {
        file.open(path);
        if (!file)
          throw std::runtime_error("cannot write " + path);
      }
      std::ostream& o = path.empty() ? fallback : file;
      for (const auto& l : lines)
        o << l << '\n';
    }

    struct SeqDistill {
      std::string teacher, input, output, source_output, src_lang, tgt_lang;
      BeamFlags beam;

      void attach(CLI::App* app) {
        app->add_option("--teacher", teacher, "Teacher checkpoint")->required();
        app->add_option("--input", input, "Source text")->required();
        app->add_option("--output", output, "Synthetic target text")->required();
        app->add_option("--source-output", source_output, "Optional copy of the sources aligned with --output");
        app->add_option("--src-lang", src_lang, "Source language")->required();
        app->add_option("--tgt-lang", tgt_lang, "Target language")->required();
        beam.attach(app);
      }

      int run(std::ostream& out, std::ostream& err) const {
        const LoadedModel t = load_model(teacher);
        if (!t.tokenizer)
          throw std::runtime_error(teacher + " does not embed a tokenizer");
        const auto sources = lines_of(input);
        const auto result = sequence_distill(t.model, *t.tokenizer, sources, t.tokenizer->tag_id(src_lang),
                                             t.tokenizer->tag_id(tgt_lang), beam.cfg);
        write_lines(output, result.targets, out);
        if (!source_output.empty())
          write_lines(source_output, sources, out);
        if (result.failures > 0)
          err << "warning: " << result.failures << " lines could not be decoded and were left empty\n";
        out << "lines=" << sources.size() << " failures=" << result.failures << '\n';
        return 0;
      }
    };

    struct Decode {
      std::string model, tokenizer, input, output, context, src_lang, tgt_lang, mask_spans;
      int wait_k = 0;
      BeamFlags beam;

      void attach(CLI::App* app) {
        app->add_option("--model", model, "Checkpoint")->required();
        app->add_option("--tokenizer", tokenizer, "Tokenizer (default: the one in the checkpoint)");
        app->add_option("--input", input, "Source text, one sentence per line")->required();
        app->add_option("--output", output, "Output file (default: stdout)");
        app->add_option("--context", context, "Context lines aligned with --input");
        app->add_option("--src-lang", src_lang, "Source language")->required();
        app->add_option("--tgt-lang", tgt_lang, "Target language (default: --src-lang)");
        app->add_option("--wait-k", wait_k, "Simultaneous decoding with this k (greedy; 0 = off)");
        app->add_option("--mask-spans", mask_spans, "Subword spans i:j,... replaced by one mask each");
        beam.attach(app);
      }

      int run(std::ostream& out) const {
        const LoadedModel m = load_model(model);
        const SubwordModel tok = tokenizer_from(tokenizer, m.tokenizer);
        const int32_t stag = tok.tag_id(src_lang);
        const int32_t ttag = tok.tag_id(tgt_lang.empty() ? src_lang : tgt_lang);
        const auto lines = lines_of(input);
        std::vector<std::string> ctx;
        if (!context.empty()) {
          ctx = lines_of(context);
          if (ctx.size() != lines.size())
            throw std::runtime_error(context + " is not aligned with " + input);
        }
        if (wait_k < 0)
          throw UsageError("--wait-k must be non-negative");
        const auto spans = mask_spans.empty() ? std::vector<Span>{} : parse_spans(mask_spans);
        std::vector<std::string> results;
        for (size_t i = 0; i < lines.size(); ++i) {
          const auto sub = tok.encode(lines[i]);
          std::vector<int32_t> best;
          if (!spans.empty()) {
            best = masked_input_decode(m.model, sub, spans, stag, beam.cfg).front().tokens;
          } else {
            const auto src = encoder_input(sub, stag);
            if (wait_k > 0) {
              best = wait_k_decode(m.model, src, ttag, wait_k, beam.cfg.max_len).tokens;
            } else {
              const auto c = ctx.empty() ? std::vector<int32_t>{} : encoder_input(tok.encode(ctx[i]), stag);
              best = beam_search(m.model, src, ttag, beam.cfg, c).front().tokens;
            }
          }
          results.push_back(tok.decode(best, true));
        }
        write_lines(output, results, out);
        return 0;
      }
    };

    struct Score {
      std::string model, tokenizer, src, tgt, src_lang, tgt_lang, output;
      bool per_token = false;

      void attach(CLI::App* app) {
        app->add_option("--model", model, "Checkpoint")->required();
        app->add_option("--tokenizer", tokenizer, "Tokenizer (default: the one in the checkpoint)");
        app->add_option("--src", src, "Source text")->required();
        app->add_option("--tgt", tgt, "Target text aligned with --src")->required();
        app->add_option("--src-lang", src_lang, "Source language")->required();
        app->add_option("--tgt-lang", tgt_lang, "Target language")->required();
        app->add_flag("--per-token", per_token, "Divide each score by the target length");
        app->add_option("--output", output, "Output file (default: stdout)");
      }

      int run(std::ostream& out) const {
        const LoadedModel m = load_model(model);
        const SubwordModel tok = tokenizer_from(tokenizer, m.tokenizer);
        const auto s = lines_of(src), t = lines_of(tgt);
        if (s.size() != t.size())
          throw std::runtime_error(src + " and " + tgt + " differ in line count");
        std::vector<std::vector<int32_t>> srcs, tgts;
        for (size_t i = 0; i < s.size(); ++i) {
          srcs.push_back(encoder_input(tok.encode(s[i]), tok.tag_id(src_lang)));
          tgts.push_back(decoder_target(tok.encode(t[i])));
        }
        const auto scores = score_pairs(m.model, srcs, tok.tag_id(tgt_lang), tgts, per_token);
        std::vector<std::string> lines;
        for (double v : scores)
          lines.push_back(fmt(v, 6));
        write_lines(output, lines, out);
        return 0;
      }
    };

    struct Extract {
      std::string model, tokenizer, src, tgt, src_lang, tgt_lang, output;
      std::vector<std::string> what = {"attn"};
      std::vector<int> layers;
      int max_len = 128;

      void attach(CLI::App* app) {
        app->add_option("--model", model, "Checkpoint")->required();
        app->add_option("--tokenizer", tokenizer, "Tokenizer (default: the one in the checkpoint)");
        app->add_option("--src", src, "Source text")->required();
        app->add_option("--tgt", tgt, "Target text (default: greedy output)");
        app->add_option("--src-lang", src_lang, "Source language")->required();
        app->add_option("--tgt-lang", tgt_lang, "Target language (default: --src-lang)");
        app->add_option("--what", what,
                        "attn, enc, dec, or enc_self_attn, dec_self_attn, dec_cross_attn")
            ->check(CLI::IsMember({"attn", "enc", "dec", "enc_self_attn", "dec_self_attn", "dec_cross_attn"}));
        app->add_option("--layers", layers, "1-based layers to dump (default: all)");
        app->add_option("--max-len", max_len, "Greedy length limit when --tgt is absent");
        app->add_option("--output", output, "Output file (default: stdout)");
      }

      int run(std::ostream& out) const {
        const LoadedModel m = load_model(model);
        const SubwordModel tok = tokenizer_from(tokenizer, m.tokenizer);
        std::vector<std::string> kinds;
        for (const auto& w : what) {
          if (w == "attn")
            kinds.insert(kinds.end(), {"enc_self_attn", "dec_self_attn", "dec_cross_attn"});
          else
            kinds.push_back(w);
        }
        const auto s = lines_of(src);
        std::vector<std::string> t;
        if (!tgt.empty()) {
          t = lines_of(tgt);
          if (t.size() != s.size())
            throw std::runtime_error(src + " and " + tgt + " differ in line count");
        }
        const int32_t stag = tok.tag_id(src_lang);
        const int32_t ttag = tok.tag_id(tgt_lang.empty() ? src_lang : tgt_lang);
        std::vector<std::string> records;
        for (size_t i = 0; i < s.size(); ++i) {
          const auto enc = encoder_input(tok.encode(s[i]), stag);
          std::vector<int32_t> y;
          if (!t.empty()) {
            y = tok.encode(t[i]);
          } else {
            y = greedy_decode(m.model, enc, ttag, max_len).tokens;
            if (!y.empty() && y.back() == Vocabulary::kEos)
              y.pop_back();
          }
          for (const auto& r : extract(m.model, enc, decoder_input(y, ttag), kinds, layers, static_cast<int64_t>(i)))
            records.push_back(r.to_json_line());
        }
        write_lines(output, records, out);
        return 0;
      }
    };

    struct Bleu {
      std::string hyp, ref;
      void attach(CLI::App* app) {
        app->add_option("--hyp", hyp, "Hypothesis file")->required();
        app->add_option("--ref", ref, "Reference file")->required();
      }
      int run(std::ostream& out) const {
        const auto h = lines_of(hyp), r = lines_of(ref);
        if (h.size() != r.size())
          throw std::runtime_error(hyp + " and " + ref + " differ in line count");
        out << fmt(corpus_bleu(h, r), 2) << '\n';
        return 0;
      }
    };

    int dispatch_impl(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, bool env);

    // Gives every option a visible default in --help: flags show their
    // initial state, empty values show "none".
    void fill_default_labels(CLI::App* app) {
      for (auto* opt : app->get_options()) {
        if (opt->get_lnames().empty() || opt->get_lnames().front() == "help")
          continue;
        const std::string current = opt->get_default_str();
        if (opt->get_expected_min() == 0) {
          if (current.empty())
            opt->default_str("false");
        } else if (current.empty() || current == "{}") {
          opt->default_str("none");
        }
      }
      for (auto* sub : app->get_subcommands({}))
        fill_default_labels(sub);
    }

    int replay(const std::string& manifest_path, const std::string& out_dir, std::ostream& out, std::ostream& err) {
      const auto m = nlohmann::json::parse(read_file(manifest_path));
      for (const auto& in : m.at("inputs")) {
        const std::string path = in.at("path");
        if (!fs::exists(path) || git_blob_hash(path) != in.at("git_blob_sha1").get<std::string>())
          throw std::runtime_error("input " + path + " changed since the manifest was written");
      }
      std::vector<std::string> argv = m.at("argv");
      if (!out_dir.empty()) {
        bool replaced = false;
        for (size_t i = 0; i + 1 < argv.size(); ++i)
          if (argv[i] == "--out-dir") {
            argv[i + 1] = out_dir;
            replaced = true;
          }
        for (auto& a : argv)
          if (a.rfind("--out-dir=", 0) == 0) {
            a = "--out-dir=" + out_dir;
            replaced = true;
          }
        if (!replaced)
          throw UsageError("manifest command has no --out-dir to replace");
      }
      return dispatch_impl(argv, out, err, false);
    }

    int dispatch_impl(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, bool env) {
      CLI::App app{"Multilingual sequence-to-sequence toolkit: pre-training, fine-tuning, distillation, decoding",
                   "seqforge"};
      app.option_defaults()->always_capture_default();
      app.set_version_flag("--version", kVersion);
      std::string replay_path, replay_out;
      app.add_option("--replay", replay_path, "Re-run the command recorded in a run_manifest.json");
      app.add_option("--replay-out", replay_out, "Output directory for --replay (default: the recorded one)");
      app.require_subcommand(0, 1);

      CreateTokenizer create_tokenizer;
      Pretrain pretrain;
      Train train;
      Distill distill;
      SeqDistill seqdistill;
      Decode decode;
      Score score;
      Extract extract_cmd;
      Bleu bleu;
      auto* s_tok = app.add_subcommand("create-tokenizer", "Train a BPE subword model with language tags");
      auto* s_pre = app.add_subcommand("pretrain", "Denoising pre-training on monolingual text");
      auto* s_train = app.add_subcommand("train", "Train or fine-tune a translation model");
      auto* s_dist = app.add_subcommand("distill", "Train a student against a teacher checkpoint");
      auto* s_seq = app.add_subcommand("seqdistill", "Beam-decode a corpus with a teacher");
      auto* s_dec = app.add_subcommand("decode", "Translate, fill masks, or decode with wait-k");
      auto* s_score = app.add_subcommand("score", "Forced log-probabilities of target sentences");
      auto* s_ext = app.add_subcommand("extract", "Dump hidden states and attentions as JSON lines");
      auto* s_bleu = app.add_subcommand("bleu", "Corpus BLEU of a hypothesis file against references");
      create_tokenizer.attach(s_tok);
      pretrain.attach(s_pre);
      train.attach(s_train);
      distill.attach(s_dist);
      seqdistill.attach(s_seq);
      decode.attach(s_dec);
      score.attach(s_score);
      extract_cmd.attach(s_ext);
      bleu.attach(s_bleu);

      fill_default_labels(&app);

      try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
      } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
      }

      try {
        if (!replay_path.empty()) {
          if (!app.get_subcommands().empty())
            throw UsageError("--replay takes no subcommand");
          return replay(replay_path, replay_out, out, err);
        }
        if (app.get_subcommands().empty()) {
          err << app.help();
          return 2;
        }
        const auto* sub = app.get_subcommands().front();
        std::vector<std::string> argv = args;
        if (sub == s_tok)
          return create_tokenizer.run(out);
        if (sub == s_pre)
          return pretrain.run(argv, s_pre, env, out, err);
        if (sub == s_train)
          return train.run(argv, s_train, env, out, err);
        if (sub == s_dist)
          return distill.run(argv, s_dist, env, out, err);
        if (sub == s_seq)
          return seqdistill.run(out, err);
        if (sub == s_dec)
          return decode.run(out);
        if (sub == s_score)
          return score.run(out);
        if (sub == s_ext)
          return extract_cmd.run(out);
        if (sub == s_bleu)
          return bleu.run(out);
        return 2;
      } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 2;
      } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
      }
    }

  }  // namespace

  std::string git_blob_hash(const std::string& path) {
    const std::string content = read_file(path);
    const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx.get(), content.data(), content.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
      throw std::runtime_error("SHA-1 failed for " + path);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i)
      hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return hex.str();
  }

  int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    return dispatch_impl(args, out, err, true);
  }

  int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dispatch(args, std::cout, std::cerr);
  }

}  // namespace seqforge::cli
