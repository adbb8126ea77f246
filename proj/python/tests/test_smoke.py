from pathlib import Path

import pytest

import seqforge

TOY = Path(__file__).resolve().parents[2] / "data" / "toy"


def head(path, n):
    return path.read_text(encoding="utf-8").splitlines()[:n]


def test_bleu_identity_and_disjoint():
    lines = ["the cat sat on the mat today", "another line of text here too"]
    assert seqforge.corpus_bleu(lines, lines) == pytest.approx(100.0)
    assert seqforge.corpus_bleu(["a b c d e"], ["v w x y z"]) == 0.0
    assert 0.0 < seqforge.sentence_bleu("the cat sat on a mat", "the cat sat on the mat") < 100.0


def test_tokenizer_round_trip(tmp_path):
    lines = head(TOY / "mono.aa", 300)
    tok = seqforge.SubwordModel.train(lines, 150, ["<2aa>"])
    assert len(tok) <= 150
    assert tok.tokens[:5] == ["<pad>", "<unk>", "<s>", "</s>", "<mask>"]
    for line in lines[:20]:
        assert tok.decode(tok.encode(line)) == line
    path = tmp_path / "tok.bpe"
    tok.save(str(path))
    again = seqforge.SubwordModel.load(str(path))
    assert again.serialize() == tok.serialize()
    assert again.tag_id("aa") == tok.tag_id("aa")


def test_cli_exit_codes():
    code, _, _ = seqforge.run(["no-such-command"])
    assert code == 2
    code, out, _ = seqforge.run(["--help"])
    assert code == 0 and "decode" in out


def test_train_and_translate(tmp_path):
    for side in ("aa", "bb"):
        (tmp_path / f"train.{side}").write_text("\n".join(head(TOY / f"train.{side}", 60)) + "\n")
    p = lambda name: str(tmp_path / name)
    code, _, err = seqforge.run(["create-tokenizer", "--input", p("train.aa"), p("train.bb"),
                                 "--vocab-size", "150", "--languages", "aa", "bb", "--output", p("tok.bpe")])
    assert code == 0, err
    code, out, err = seqforge.run(["train", "--tokenizer", p("tok.bpe"), "--train-src", p("train.aa"),
                                   "--train-tgt", p("train.bb"), "--src-lang", "aa", "--tgt-lang", "bb",
                                   "--enc-layers", "1", "--dec-layers", "1", "--hidden", "16", "--ffn", "32",
                                   "--heads", "2", "--max-steps", "3", "--token-budget", "256",
                                   "--out-dir", p("run")])
    assert code == 0, err
    model = seqforge.Model(p("run/last.ckpt"))
    assert model.parameter_count > 0
    assert '"hidden":16' in model.config.replace(" ", "")
    sources = head(TOY / "test.aa", 3)
    greedy = model.translate(sources, "aa", "bb", beam=1, max_len=10)
    assert len(greedy) == 3 and all(isinstance(s, str) for s in greedy)
    assert model.translate(sources, "aa", "bb", beam=1, max_len=10) == greedy
    assert model.score(sources[0], "ko", "aa", "bb") < 0.0
    with pytest.raises(ValueError):
        model.translate(sources, "aa", "bb", beam=0)
