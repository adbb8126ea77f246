from ._core import Model, SubwordModel, corpus_bleu, run, sentence_bleu

__all__ = ["Model", "SubwordModel", "corpus_bleu", "run", "sentence_bleu"]
