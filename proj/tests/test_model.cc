#include <cmath>
#include <limits>
#include <set>

#include "doctest.h"
#include "gradcheck.h"
#include "model_fixtures.h"
#include "reference_model.h"
#include "seqforge/model.h"

using namespace seqforge;
using namespace seqforge::testing;

namespace {

  std::vector<Tensor> all_parameters(TransformerModel& model) {
    std::vector<Tensor> out;
    for (auto& [name, t] : model.params())
      out.push_back(t);
    return out;
  }

  int allowed_in_row(const Tensor& mask, int64_t row) {
    const int64_t cols = mask.dim(1);
    int n = 0;
    for (int64_t j = 0; j < cols; ++j)
      n += mask.at(row * cols + j) == 0;
    return n;
  }

  void copy_shared(const TransformerModel& from, TransformerModel& to) {
    for (auto& [name, t] : to.params())
      if (from.params().contains(name)) {
        auto src = from.params().get(name).data();
        std::copy(src.begin(), src.end(), t.data_mut().begin());
      }
  }

}  // namespace

TEST_CASE("initialization is seed-deterministic") {
  Rng a(3), b(3), c(4);
  TransformerModel m1(tiny_config(), a), m2(tiny_config(), b), m3(tiny_config(), c);
  bool all_equal = true, any_diff = false;
  for (const auto& name : m1.params().names()) {
    const auto x = m1.params().get(name).data();
    const auto y = m2.params().get(name).data();
    const auto z = m3.params().get(name).data();
    all_equal = all_equal && std::equal(x.begin(), x.end(), y.begin());
    any_diff = any_diff || !std::equal(x.begin(), x.end(), z.begin());
  }
  CHECK(all_equal);
  CHECK(any_diff);
  CHECK(m1.params().get("encoder.layer.1.ffn_norm.gain").at(0) == 1);
  CHECK(m1.params().get("decoder.layer.2.ffn.fc1.bias").at(3) == 0);
}

TEST_CASE("parameter count for the base configuration") {
  ModelConfig cfg;  // 6+6 layers, 512/2048, 8 heads, 8000 vocab
  // Hand count: embeddings 8000*512; encoder layer 3,151,872 (attention
  // 4*512*512 + 3*512 without a key bias, ffn 2,099,712, two norms 2,048);
  // decoder layer 4,203,008; two final norms of 1024 and the 8000 output bias.
  const int64_t by_hand = 8000 * 512 + 6 * 3151872 + 6 * 4203008 + 2 * 1024 + 8000;
  CHECK(by_hand == 48235328);
  CHECK(expected_parameter_count(cfg) == by_hand);
  Rng rng(1);
  TransformerModel model(cfg, rng);
  CHECK(model.parameter_count() == by_hand);
}

TEST_CASE("tied layers share one parameter set") {
  ModelConfig tied = tiny_config();
  tied.dec_layers = 6;
  tied.unique_dec_layers = 1;
  ModelConfig single = tiny_config();
  single.dec_layers = 1;
  single.unique_dec_layers = 1;
  Rng r1(1), r2(1);
  TransformerModel a(tied, r1), b(single, r2);
  CHECK(a.parameter_count() == b.parameter_count());
  CHECK(a.layer_parameter_names("decoder", 1).size() == b.layer_parameter_names("decoder", 1).size());
  CHECK(a.layer_parameter_names("decoder", 2).empty());

  ModelConfig untied6 = tiny_config();
  untied6.enc_layers = untied6.unique_enc_layers = 6;
  untied6.dec_layers = untied6.unique_dec_layers = 6;
  ModelConfig tied6 = untied6;
  tied6.unique_enc_layers = tied6.unique_dec_layers = 1;
  CHECK(expected_layer_parameter_count(tied6) * 6 == expected_layer_parameter_count(untied6));

  CHECK_THROWS_AS(
    [] {
      ModelConfig bad = tiny_config();
      bad.dec_layers = 3;
      bad.unique_dec_layers = 2;
      bad.validate();
    }(),
    ConfigError);
  CHECK_THROWS_AS(
    [] {
      ModelConfig bad = tiny_config();
      bad.heads = 3;
      bad.validate();
    }(),
    ConfigError);
}

TEST_CASE("config json round trip") {
  ModelConfig cfg = tiny_config();
  cfg.wait_k_mode = WaitKMode::Sampled;
  cfg.wait_k_set = {1, 3};
  cfg.context_mode = ContextMode::EncoderGate;
  cfg.positional = Positional::Learned;
  CHECK(ModelConfig::from_json(cfg.to_json()) == cfg);
}

TEST_CASE("wait-k cross mask") {
  Tensor m = build_wait_k_cross_mask(2, 4, 3);
  CHECK(allowed_in_row(m, 0) == 2);
  CHECK(allowed_in_row(m, 1) == 3);
  CHECK(allowed_in_row(m, 2) == 4);
  CHECK(m.at(2) == -std::numeric_limits<Real>::infinity());

  Tensor full = build_wait_k_cross_mask(9, 4, 3);
  for (int64_t i = 0; i < full.numel(); ++i)
    CHECK(full.at(i) == 0);

  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 1 + static_cast<int>(rng.uniform_int(8));
    const int64_t s = 1 + rng.uniform_int(10), t = 1 + rng.uniform_int(10);
    Tensor mask = build_wait_k_cross_mask(k, s, t);
    for (int64_t row = 0; row < t; ++row) {
      REQUIRE(allowed_in_row(mask, row) == std::min<int64_t>(k + row, s));
      for (int64_t j = 0; j < s; ++j)
        REQUIRE((mask.at(row * s + j) == 0) == (j < k + row));
    }
  }
  CHECK_THROWS(build_wait_k_cross_mask(0, 3, 3));
}

TEST_CASE("unidirectional encoder mask is lower triangular") {
  CHECK(allowed_in_row(build_unidirectional_encoder_mask(1), 0) == 1);
  Tensor m = build_unidirectional_encoder_mask(3);
  for (int r = 0; r < 3; ++r)
    CHECK(allowed_in_row(m, r) == r + 1);
  Tensor c = build_causal_mask(3);
  for (int i = 0; i < 9; ++i)
    CHECK(m.at(i) == c.at(i));
}

TEST_CASE("forward matches the straight-line reference") {
  for (bool tied : {false, true}) {
    for (bool untied_output : {false, true}) {
      ModelConfig cfg = tiny_config();
      if (tied)
        cfg.unique_enc_layers = cfg.unique_dec_layers = 1;
      cfg.tie_embeddings = !untied_output;
      Rng rng(5);
      TransformerModel model(cfg, rng);
      jitter(model, 17);
      const Batch batch = two_sentence_batch();
      const ForwardOutput out = model.forward(batch);
      CHECK(out.logits.shape() == Shape{2, 4, 11});

      ReferenceModel reference(cfg, model.params());
      double worst = 0;
      for (int64_t b = 0; b < 2; ++b) {
        const int64_t sl = batch.src_lengths[b], tl = batch.tgt_lengths[b];
        std::vector<int32_t> src(batch.src.begin() + b * 4, batch.src.begin() + b * 4 + sl);
        std::vector<int32_t> tgt(batch.tgt_in.begin() + b * 4, batch.tgt_in.begin() + b * 4 + tl);
        const Mat expected = reference.logits(src, tgt);
        for (int64_t t = 0; t < tl; ++t)
          for (int v = 0; v < 11; ++v)
            worst = std::max(worst, std::abs(expected[t][v] - out.logits.at((b * 4 + t) * 11 + v)));
      }
      INFO("tied=" << tied << " untied_output=" << untied_output);
      CHECK(worst < 1e-5);
    }
  }
}

TEST_CASE("learned positions and unidirectional encoder match the reference") {
  ModelConfig cfg = tiny_config();
  cfg.positional = Positional::Learned;
  cfg.unidirectional_encoder = true;
  Rng rng(6);
  TransformerModel model(cfg, rng);
  jitter(model, 2);
  std::vector<Example> ex{pair_example({5, 6, 7, 8, 3}, {9, 5, 6}, {5, 6, 3})};
  const Batch batch = collate(ex);
  const auto out = model.forward(batch);
  ReferenceOptions ro;
  ro.unidirectional_encoder = true;
  const Mat expected = ReferenceModel(cfg, model.params()).logits(ex[0].src, ex[0].tgt_in, ro);
  double worst = 0;
  for (int t = 0; t < 3; ++t)
    for (int v = 0; v < 11; ++v)
      worst = std::max(worst, std::abs(expected[t][v] - out.logits.at(t * 11 + v)));
  CHECK(worst < 1e-5);
}

TEST_CASE("attention tensors are row-stochastic over unmasked positions") {
  Rng rng(7);
  TransformerModel model(tiny_config(), rng);
  jitter(model, 3);
  const auto out = model.forward(two_sentence_batch());
  auto check_rows = [](const Tensor& attn) {
    const int64_t cols = attn.dim(3);
    const int64_t rows = attn.numel() / cols;
    for (int64_t r = 0; r < rows; ++r) {
      double total = 0;
      for (int64_t c = 0; c < cols; ++c)
        total += attn.at(r * cols + c);
      REQUIRE(std::abs(total - 1) < 1e-5);
    }
  };
  REQUIRE(out.encoder_self_attn.size() == 2);
  for (const auto& a : out.encoder_self_attn)
    check_rows(a);
  for (const auto& a : out.decoder_self_attn)
    check_rows(a);
  for (const auto& a : out.decoder_cross_attn)
    check_rows(a);
  // Padding of the shorter source gets exactly zero mass.
  const Tensor& cross = out.decoder_cross_attn[0];
  for (int64_t h = 0; h < 2; ++h)
    for (int64_t t = 0; t < 4; ++t)
      CHECK(cross.at((((1 * 2) + h) * 4 + t) * 4 + 3) == 0.0);
}

TEST_CASE("wait-k forward") {
  ModelConfig cfg = tiny_config();
  Rng rng(9);
  TransformerModel model(cfg, rng);
  jitter(model, 4);
  const Batch batch = two_sentence_batch();
  const auto full = model.forward(batch);

  ForwardOptions wide;
  wide.wait_k = 4;
  const auto same = model.forward(batch, wide);
  CHECK(std::equal(full.logits.data().begin(), full.logits.data().end(), same.logits.data().begin()));

  ForwardOptions narrow;
  narrow.wait_k = 1;
  const auto out = model.forward(batch, narrow);
  CHECK(out.applied_wait_k == 1);
  for (const auto& cross : out.decoder_cross_attn)
    for (int64_t bh = 0; bh < 4; ++bh)
      for (int64_t t = 0; t < 4; ++t)
        for (int64_t s = 1 + t; s < 4; ++s)
          REQUIRE(cross.at((bh * 4 + t) * 4 + s) == 0.0);

  std::vector<int32_t> src(batch.src.begin(), batch.src.begin() + 4);
  std::vector<int32_t> tgt(batch.tgt_in.begin(), batch.tgt_in.begin() + 4);
  ReferenceOptions ro;
  ro.wait_k = 1;
  const Mat expected = ReferenceModel(cfg, model.params()).logits(src, tgt, ro);
  double worst = 0;
  for (int t = 0; t < 4; ++t)
    for (int v = 0; v < 11; ++v)
      worst = std::max(worst, std::abs(expected[t][v] - out.logits.at(t * 11 + v)));
  CHECK(worst < 1e-5);
}

TEST_CASE("sampled wait-k draws only while training") {
  ModelConfig cfg = tiny_config();
  cfg.wait_k_mode = WaitKMode::Sampled;
  cfg.wait_k_set = {1, 2, 3};
  Rng rng(10);
  TransformerModel model(cfg, rng);
  ForwardOptions eval;
  CHECK(model.resolve_wait_k(eval) == 0);
  Rng draw(4);
  ForwardOptions train;
  train.training = true;
  train.rng = &draw;
  std::set<int> seen;
  for (int i = 0; i < 60; ++i)
    seen.insert(model.resolve_wait_k(train));
  CHECK(seen == std::set<int>{1, 2, 3});
  ForwardOptions forced;
  forced.wait_k = 2;
  CHECK(model.resolve_wait_k(forced) == 2);
}

TEST_CASE("multi-layer softmax") {
  ModelConfig cfg = tiny_config();
  cfg.multi_layer_softmax = true;
  Rng rng(11);
  TransformerModel model(cfg, rng);
  jitter(model, 5);
  const auto out = model.forward(two_sentence_batch());
  REQUIRE(out.layer_logits.size() == 2);
  CHECK(out.layer_logits.back().same_storage(out.logits));

  cfg.dec_layers = cfg.unique_dec_layers = 1;
  Rng rng1(11), rng2(11);
  TransformerModel single(cfg, rng1);
  cfg.multi_layer_softmax = false;
  TransformerModel plain(cfg, rng2);
  const auto a = single.forward(two_sentence_batch());
  const auto b = plain.forward(two_sentence_batch());
  REQUIRE(a.layer_logits.size() == 1);
  CHECK(std::equal(a.layer_logits[0].data().begin(), a.layer_logits[0].data().end(), b.logits.data().begin()));
}

TEST_CASE("gated blend") {
  Rng rng(12);
  Tensor a = random_tensor({2, 3, 4}, rng, 1.0, false);
  Tensor c = random_tensor({2, 3, 4}, rng, 1.0, false);
  Tensor w = random_tensor({8, 1}, rng, 1.0, false);

  Tensor pinned = gated_blend(a, c, w, Tensor({1}, {1e4}));
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(pinned.at(i) == a.at(i));

  Tensor same = gated_blend(a, a, w, Tensor({1}, {0.3f}));
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(same.at(i) == doctest::Approx(a.at(i)).epsilon(1e-6));

  Tensor gate;
  Tensor mixed = gated_blend(a, c, w, Tensor({1}, {0.3f}), &gate);
  for (int64_t pos = 0; pos < 6; ++pos) {
    double z = 0.3;
    for (int k = 0; k < 4; ++k)
      z += a.at(pos * 4 + k) * w.at(k) + c.at(pos * 4 + k) * w.at(4 + k);
    const double g = 1 / (1 + std::exp(-z));
    CHECK(gate.at(pos) == doctest::Approx(g).epsilon(1e-6));
    for (int k = 0; k < 4; ++k)
      CHECK(mixed.at(pos * 4 + k) ==
            doctest::Approx(g * a.at(pos * 4 + k) + (1 - g) * c.at(pos * 4 + k)).epsilon(1e-5));
  }
}

TEST_CASE("context gate pinned open recovers the context-free model") {
  for (ContextMode mode : {ContextMode::DecoderCombination, ContextMode::EncoderGate}) {
    ModelConfig cfg = tiny_config();
    cfg.context_mode = mode;
    Rng r1(13), r2(14);
    TransformerModel with_ctx(cfg, r1);
    jitter(with_ctx, 6);
    ModelConfig plain_cfg = tiny_config();
    TransformerModel plain(plain_cfg, r2);
    copy_shared(with_ctx, plain);
    for (auto& [name, t] : with_ctx.params())
      if (name.find(".ctx_gate.bias") != std::string::npos)
        t.data_mut()[0] = 1e4;

    Batch batch = two_sentence_batch();
    std::vector<Example> ex{pair_example({5, 6, 7, 3}, {9, 8, 5, 6}, {8, 5, 6, 3}),
                            pair_example({10, 7, 3}, {9, 6, 7}, {6, 7, 3})};
    ex[0].ctx = {7, 7, 8, 3};
    ex[1].ctx = {6, 3};
    Batch ctx_batch = collate(ex);
    const auto a = with_ctx.forward(ctx_batch);
    const auto b = plain.forward(batch);
    double worst = 0;
    for (int64_t i = 0; i < a.logits.numel(); ++i)
      worst = std::max(worst, double(std::abs(a.logits.at(i) - b.logits.at(i))));
    INFO("mode " << to_string(mode));
    CHECK(worst < 1e-5);
    CHECK_FALSE(a.context_gates.empty());
    CHECK_THROWS(with_ctx.forward(batch));
    CHECK_THROWS(plain.forward(ctx_batch));
  }
}

TEST_CASE("full model gradients match finite differences") {
  for (bool tied : {false, true}) {
    ModelConfig cfg = tiny_config();
    if (tied) {
      cfg.unique_enc_layers = cfg.unique_dec_layers = 1;
    }
    Rng rng(15);
    TransformerModel model(cfg, rng);
    jitter(model, 8, kShadow64 ? 0.3 : 0.5);
    const Batch batch = two_sentence_batch();
    auto loss_fn = [&] {
      return cross_entropy_label_smoothed(reshape(model.forward(batch).logits, {-1, 11}), batch.tgt_out, 0.1f, 0);
    };
    const auto leaves = all_parameters(model);
    const auto names = model.params().names();
    const double eps = kShadow64 ? 1e-5 : 1e-2;
    // 32-bit forward rounding puts ~1e-4 absolute noise on each difference, so
    // leaves with tiny gradients are measured against a tenth of the model-wide
    // gradient scale there. The 64-bit build uses plain per-leaf errors.
    const auto result = gradcheck(leaves, loss_fn, eps, -1, 7, kShadow64 ? 0 : 0.1);
    INFO("tied=" << tied << " worst leaf " << (result.worst_leaf >= 0 ? names[result.worst_leaf] : "-")
                 << " rel err " << result.max_rel_error);
    CHECK(result.max_rel_error < gradcheck_tolerance());
  }
}
