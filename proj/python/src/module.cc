#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "seqforge/checkpoint.h"
#include "seqforge/cli.h"
#include "seqforge/decode.h"
#include "seqforge/metrics.h"
#include "seqforge/tokenizer.h"

namespace py = pybind11;
using namespace seqforge;

namespace {

  // A checkpoint together with the tokenizer needed to feed it text.
  struct Translator {
    LoadedModel loaded;
    SubwordModel tok;

    explicit Translator(const std::string& path) : loaded(load_model(path)) {
      if (!loaded.tokenizer)
        throw std::runtime_error(path + " carries no tokenizer");
      tok = *loaded.tokenizer;
    }

    std::vector<std::string> translate(const std::vector<std::string>& lines,
                                       const std::string& src_lang,
                                       const std::string& tgt_lang,
                                       const BeamConfig& cfg) const {
      cfg.validate();
      const int32_t stag = tok.tag_id(src_lang);
      const int32_t ttag = tok.tag_id(tgt_lang.empty() ? src_lang : tgt_lang);
      std::vector<std::string> out;
      out.reserve(lines.size());
      for (const auto& line : lines) {
        const auto src = encoder_input(tok.encode(line), stag);
        const auto hyps = beam_search(loaded.model, src, ttag, cfg);
        out.push_back(hyps.empty() ? "" : tok.decode(hyps.front().tokens, true));
      }
      return out;
    }

    double score(const std::string& src, const std::string& tgt, const std::string& src_lang,
                 const std::string& tgt_lang, bool per_token) const {
      const auto s = encoder_input(tok.encode(src), tok.tag_id(src_lang));
      return score_pair(loaded.model, s, tok.tag_id(tgt_lang), decoder_target(tok.encode(tgt)), per_token);
    }
  };

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Transformer sequence-to-sequence training and decoding";

  py::class_<SubwordModel>(m, "SubwordModel")
      .def_static("train", &SubwordModel::train, py::arg("lines"), py::arg("vocab_size"),
                  py::arg("specials") = std::vector<std::string>{})
      .def_static("load", &SubwordModel::load, py::arg("path"))
      .def_static("parse", &SubwordModel::parse, py::arg("text"))
      .def("save", &SubwordModel::save, py::arg("path"))
      .def("serialize", &SubwordModel::serialize)
      .def("encode", [](const SubwordModel& s, const std::string& text) { return s.encode(text); }, py::arg("text"))
      .def(
          "decode",
          [](const SubwordModel& s, const std::vector<int32_t>& ids, bool strip) { return s.decode(ids, strip); },
          py::arg("ids"), py::arg("strip_specials") = false)
      .def("segment", &SubwordModel::segment, py::arg("word"))
      .def("tag_id", &SubwordModel::tag_id, py::arg("lang"))
      .def("token", [](const SubwordModel& s, int32_t id) { return s.vocab().token(id); }, py::arg("id"))
      .def_property_readonly("tokens", [](const SubwordModel& s) { return s.vocab().tokens(); })
      .def_property_readonly("merges", &SubwordModel::merges)
      .def("__len__", [](const SubwordModel& s) { return s.vocab().size(); });

  py::class_<Translator>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("path"))
      .def(
          "translate",
          [](const Translator& t, const std::vector<std::string>& lines, const std::string& src_lang,
             const std::string& tgt_lang, int beam, double length_penalty, int max_len) {
            const BeamConfig cfg{beam, length_penalty, max_len};
            py::gil_scoped_release release;
            return t.translate(lines, src_lang, tgt_lang, cfg);
          },
          py::arg("lines"), py::arg("src_lang"), py::arg("tgt_lang") = "", py::arg("beam") = 4,
          py::arg("length_penalty") = 1.0, py::arg("max_len") = 128)
      .def("score", &Translator::score, py::arg("src"), py::arg("tgt"), py::arg("src_lang"), py::arg("tgt_lang"),
           py::arg("per_token") = false)
      .def_property_readonly("tokenizer", [](const Translator& t) { return t.tok; })
      .def_property_readonly("config", [](const Translator& t) { return t.loaded.model.config().to_json(); })
      .def_property_readonly("parameter_count", [](const Translator& t) { return t.loaded.model.parameter_count(); });

  m.def("corpus_bleu", &corpus_bleu, py::arg("hypotheses"), py::arg("references"));
  m.def("sentence_bleu", &sentence_bleu, py::arg("hypothesis"), py::arg("reference"));

  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::dispatch(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one command line; returns (exit_code, stdout, stderr).");
}
