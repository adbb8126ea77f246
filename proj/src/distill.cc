#include "seqforge/distill.h"

#include <cmath>
#include <sstream>

namespace seqforge {

  namespace {

    void check_map(const std::vector<LayerPair>& map, int teacher_layers, int student_layers, const char* stack) {
      if (map.empty())
        throw DistillError(std::string(stack) + " layer map is empty");
      for (const auto& [t, s] : map) {
        if (t < 1 || t > teacher_layers || s < 1 || s > student_layers)
          throw DistillError(std::string(stack) + " layer pair " + std::to_string(t) + ":" + std::to_string(s) +
                             " is out of range (teacher " + std::to_string(teacher_layers) + ", student " +
                             std::to_string(student_layers) + " layers)");
      }
    }

    bool wants(const DistillConfig& cfg, AttentionKind kind) {
      for (auto k : cfg.attention_kinds)
        if (k == kind)
          return true;
      return false;
    }

    nlohmann::json map_json(const std::vector<LayerPair>& map) {
      auto out = nlohmann::json::array();
      for (const auto& [t, s] : map)
        out.push_back({t, s});
      return out;
    }

    std::vector<LayerPair> map_from_json(const nlohmann::json& j) {
      std::vector<LayerPair> out;
      for (const auto& p : j)
        out.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
      return out;
    }

  }  // namespace

  std::string to_string(AttentionKind kind) {
    switch (kind) {
      case AttentionKind::EncoderSelf:
        return "enc_self";
      case AttentionKind::DecoderSelf:
        return "dec_self";
      case AttentionKind::DecoderCross:
        return "dec_cross";
    }
    return "?";
  }

  AttentionKind attention_kind_from_string(const std::string& name) {
    for (auto k : {AttentionKind::EncoderSelf, AttentionKind::DecoderSelf, AttentionKind::DecoderCross})
      if (to_string(k) == name)
        return k;
    throw DistillError("unknown attention kind '" + name + "' (expected enc_self, dec_self or dec_cross)");
  }

  std::vector<LayerPair> default_layer_map(int teacher_layers, int student_layers) {
    if (teacher_layers < 1 || student_layers < 1)
      throw DistillError("layer counts must be positive");
    std::vector<LayerPair> map;
    for (int j = 1; j <= student_layers; ++j)
      map.emplace_back((j * teacher_layers + student_layers - 1) / student_layers, j);
    return map;
  }

  std::vector<LayerPair> parse_layer_map(const std::string& text) {
    std::vector<LayerPair> map;
    if (!text.empty() && text.back() == ',')
      throw DistillError("layer map '" + text + "' ends with a comma");
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos)
        throw DistillError("layer map entry '" + item + "' is not teacher:student");
      try {
        size_t used_t = 0, used_s = 0;
        const std::string ts = item.substr(0, colon), ss = item.substr(colon + 1);
        const int t = std::stoi(ts, &used_t), s = std::stoi(ss, &used_s);
        if (used_t != ts.size() || used_s != ss.size())
          throw std::invalid_argument(item);
        map.emplace_back(t, s);
      } catch (const std::logic_error&) {
        throw DistillError("layer map entry '" + item + "' is not teacher:student");
      }
    }
    if (map.empty())
      throw DistillError("layer map is empty");
    return map;
  }

  std::vector<LayerPair> DistillConfig::resolved_encoder_map(const ModelConfig& teacher,
                                                             const ModelConfig& student) const {
    return encoder_map.empty() ? default_layer_map(teacher.enc_layers, student.enc_layers) : encoder_map;
  }

  std::vector<LayerPair> DistillConfig::resolved_decoder_map(const ModelConfig& teacher,
                                                             const ModelConfig& student) const {
    return decoder_map.empty() ? default_layer_map(teacher.dec_layers, student.dec_layers) : decoder_map;
  }

  void DistillConfig::validate(const ModelConfig& teacher, const ModelConfig& student) const {
    for (double w : {w_ce, w_logit, w_hidden, w_attn})
      if (!(w >= 0) || !std::isfinite(w))
        throw DistillError("distillation weights must be finite and non-negative");
    if (w_ce + w_logit + w_hidden + w_attn <= 0)
      throw DistillError("at least one distillation weight must be positive");
    if (!(temperature > 0) || !std::isfinite(temperature))
      throw DistillError("temperature must be positive");
    if (teacher.vocab_size != student.vocab_size)
      throw DistillError("teacher and student vocabularies differ (" + std::to_string(teacher.vocab_size) + " vs " +
                         std::to_string(student.vocab_size) + ")");
    if (w_hidden > 0 || w_attn > 0) {
      check_map(resolved_encoder_map(teacher, student), teacher.enc_layers, student.enc_layers, "encoder");
      check_map(resolved_decoder_map(teacher, student), teacher.dec_layers, student.dec_layers, "decoder");
    }
    if (w_hidden > 0 && teacher.hidden != student.hidden)
      throw DistillError("hidden-state distillation needs equal hidden sizes (teacher " +
                         std::to_string(teacher.hidden) + ", student " + std::to_string(student.hidden) + ")");
    if (w_attn > 0) {
      if (teacher.heads != student.heads)
        throw DistillError("attention distillation needs equal head counts (teacher " +
                           std::to_string(teacher.heads) + ", student " + std::to_string(student.heads) + ")");
      if (attention_kinds.empty())
        throw DistillError("attention distillation needs at least one attention kind");
    }
  }

  nlohmann::json DistillConfig::to_json() const {
    auto kinds = nlohmann::json::array();
    for (auto k : attention_kinds)
      kinds.push_back(to_string(k));
    return {{"w_ce", w_ce},
            {"w_logit", w_logit},
            {"w_hidden", w_hidden},
            {"w_attn", w_attn},
            {"temperature", temperature},
            {"encoder_map", map_json(encoder_map)},
            {"decoder_map", map_json(decoder_map)},
            {"attention_kinds", kinds}};
  }

  DistillConfig DistillConfig::from_json(const nlohmann::json& j) {
    DistillConfig cfg;
    cfg.w_ce = j.value("w_ce", cfg.w_ce);
    cfg.w_logit = j.value("w_logit", cfg.w_logit);
    cfg.w_hidden = j.value("w_hidden", cfg.w_hidden);
    cfg.w_attn = j.value("w_attn", cfg.w_attn);
    cfg.temperature = j.value("temperature", cfg.temperature);
    if (j.contains("encoder_map"))
      cfg.encoder_map = map_from_json(j.at("encoder_map"));
    if (j.contains("decoder_map"))
      cfg.decoder_map = map_from_json(j.at("decoder_map"));
    if (j.contains("attention_kinds")) {
      cfg.attention_kinds.clear();
      for (const auto& k : j.at("attention_kinds"))
        cfg.attention_kinds.push_back(attention_kind_from_string(k.get<std::string>()));
    }
    return cfg;
  }

  DistillTerms combined_loss(const Batch& batch,
                             const TransformerModel& teacher,
                             const TransformerModel& student,
                             const DistillConfig& cfg,
                             double smoothing,
                             const ForwardOptions& student_opts) {
    cfg.validate(teacher.config(), student.config());
    DistillTerms terms;
    auto accumulate = [&](const Tensor& term, double w) {
      const Tensor weighted = scale(term, static_cast<Real>(w));
      terms.total = terms.total.defined() ? add(terms.total, weighted) : weighted;
    };

    if (cfg.w_logit == 0 && cfg.w_hidden == 0 && cfg.w_attn == 0) {
      terms.ce = batch_loss(student, batch, smoothing, student_opts);
      accumulate(terms.ce, cfg.w_ce);
      return terms;
    }

    ForwardOutput t_out;
    {
      NoGradGuard guard;
      t_out = teacher.forward(batch);
    }
    const ForwardOutput s_out = student.forward(batch, student_opts);

    if (cfg.w_ce > 0) {
      const int64_t v = student.config().vocab_size;
      const int64_t rows = batch.batch_size * batch.tgt_len;
      auto ce = [&](const Tensor& logits) {
        return cross_entropy_label_smoothed(reshape(logits, {rows, v}), batch.tgt_out, static_cast<Real>(smoothing),
                                            Vocabulary::kPad);
      };
      if (s_out.layer_logits.empty()) {
        terms.ce = ce(s_out.logits);
      } else {
        Tensor sum_ce = ce(s_out.layer_logits.front());
        for (size_t i = 1; i < s_out.layer_logits.size(); ++i)
          sum_ce = add(sum_ce, ce(s_out.layer_logits[i]));
        terms.ce = scale(sum_ce, Real(1) / static_cast<Real>(s_out.layer_logits.size()));
      }
      accumulate(terms.ce, cfg.w_ce);
    }

    if (cfg.w_logit > 0) {
      terms.logit = logit_distill_loss(t_out.logits, s_out.logits, cfg.temperature, batch.tgt_out, Vocabulary::kPad);
      accumulate(terms.logit, cfg.w_logit);
    }

    const auto enc_map = cfg.resolved_encoder_map(teacher.config(), student.config());
    const auto dec_map = cfg.resolved_decoder_map(teacher.config(), student.config());

    if (cfg.w_hidden > 0) {
      std::vector<DistillPair> pairs;
      for (const auto& [t, s] : enc_map)
        pairs.push_back({t_out.encoder_states.at(t - 1), s_out.encoder_states.at(s - 1), batch.src_lengths});
      for (const auto& [t, s] : dec_map)
        pairs.push_back({t_out.decoder_states.at(t - 1), s_out.decoder_states.at(s - 1), batch.tgt_lengths});
      terms.hidden = hidden_mse_loss(pairs);
      accumulate(terms.hidden, cfg.w_hidden);
    }

    if (cfg.w_attn > 0) {
      std::vector<DistillPair> pairs;
      if (wants(cfg, AttentionKind::EncoderSelf))
        for (const auto& [t, s] : enc_map)
          pairs.push_back(
              {t_out.encoder_self_attn.at(t - 1), s_out.encoder_self_attn.at(s - 1), batch.src_lengths});
      if (wants(cfg, AttentionKind::DecoderSelf))
        for (const auto& [t, s] : dec_map)
          pairs.push_back(
              {t_out.decoder_self_attn.at(t - 1), s_out.decoder_self_attn.at(s - 1), batch.tgt_lengths});
      if (wants(cfg, AttentionKind::DecoderCross))
        for (const auto& [t, s] : dec_map)
          pairs.push_back(
              {t_out.decoder_cross_attn.at(t - 1), s_out.decoder_cross_attn.at(s - 1), batch.tgt_lengths});
      terms.attn = attention_kl_loss(pairs);
      accumulate(terms.attn, cfg.w_attn);
    }

    if (!terms.total.defined())
      throw DistillError("no distillation term was computed");
    return terms;
  }

  LossFn distill_objective(const TransformerModel& teacher, DistillConfig cfg, double smoothing) {
    return [&teacher, cfg = std::move(cfg), smoothing](const TransformerModel& student, const Batch& batch,
                                                        const ForwardOptions& opts) {
      return combined_loss(batch, teacher, student, cfg, smoothing, opts).total;
    };
  }

  SequenceDistillResult sequence_distill(const TransformerModel& teacher,
                                         const SubwordModel& tokenizer,
                                         const std::vector<std::string>& sources,
                                         int32_t src_tag,
                                         int32_t tgt_tag,
                                         const BeamConfig& beam) {
    beam.validate();
    SequenceDistillResult result;
    result.targets.reserve(sources.size());
    result.target_ids.reserve(sources.size());
    for (const auto& line : sources) {
      std::vector<int32_t> ids;
      try {
        const auto subwords = tokenizer.encode(line);
        if (subwords.empty())
          throw DistillError("empty source line");
        const auto src = encoder_input(subwords, src_tag);
        const auto hyps = beam_search(teacher, src, tgt_tag, beam);
        if (hyps.empty())
          throw DistillError("no hypothesis");
        ids = hyps.front().tokens;
        if (!ids.empty() && ids.back() == Vocabulary::kEos)
          ids.pop_back();
      } catch (const std::exception&) {
        ++result.failures;
        result.targets.emplace_back();
        result.target_ids.emplace_back();
        continue;
      }
      result.targets.push_back(tokenizer.decode(ids, true));
      result.target_ids.push_back(std::move(ids));
    }
    return result;
  }

}  // namespace seqforge
