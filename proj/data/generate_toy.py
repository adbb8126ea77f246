#!/usr/bin/env python3
"""Regenerates the bundled toy corpora under data/toy/.

copy.* and reverse.* are 200 random symbol strings paired with themselves and
with their reversal.

Two synthetic languages share content words. "aa" is SVO with determiner-
adjective-noun phrases and prepositions. "bb" is verb-final with noun-
adjective-determiner phrases, postpositions and its own function words. Every
"aa" sentence has exactly one "bb" translation, so the pair files are a
deterministic transduction. The content lexicon is large enough that many
test words never occur in the 500 training pairs but do occur in the
monolingual text, as rare words do in a real low-resource pair.
"""

import argparse
import random
from pathlib import Path

SEED = 20240611


def make_words(rng, count, taken):
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    out = []
    while len(out) < count:
        syllables = rng.choice([2, 2, 3])
        word = "".join(rng.choice(consonants) + rng.choice(vowels) for _ in range(syllables))
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def lexicon():
    rng = random.Random(SEED)
    taken = set()
    lex = {
        "noun": make_words(rng, 600, taken),
        "adj": make_words(rng, 150, taken),
        "verb": make_words(rng, 200, taken),
        "adv": make_words(rng, 40, taken),
    }
    lex["det"] = {"the": "ko", "a": "ne", "this": "sa", "every": "wu", "some": "li"}
    lex["prep"] = {"with": "ga", "near": "to", "under": "hi", "for": "pe"}
    lex["verb_marker"] = "ka"
    return lex


def noun_phrase(rng, lex):
    return {
        "det": rng.choice(sorted(lex["det"])),
        "adj": rng.choice(lex["adj"]) if rng.random() < 0.5 else None,
        "noun": rng.choice(lex["noun"]),
    }


def sentence(rng, lex):
    s = {
        "subj": noun_phrase(rng, lex),
        "verb": rng.choice(lex["verb"]),
        "obj": noun_phrase(rng, lex),
        "pp": None,
        "adv": rng.choice(lex["adv"]) if rng.random() < 0.3 else None,
    }
    if rng.random() < 0.35:
        s["pp"] = (rng.choice(sorted(lex["prep"])), noun_phrase(rng, lex))
    return s


def np_aa(np):
    return [np["det"]] + ([np["adj"]] if np["adj"] else []) + [np["noun"]]


def np_bb(np, lex):
    return [np["noun"]] + ([np["adj"]] if np["adj"] else []) + [lex["det"][np["det"]]]


def render_aa(s):
    words = np_aa(s["subj"]) + [s["verb"]] + np_aa(s["obj"])
    if s["pp"]:
        words += [s["pp"][0]] + np_aa(s["pp"][1])
    if s["adv"]:
        words.append(s["adv"])
    return " ".join(words)


def render_bb(s, lex):
    words = np_bb(s["subj"], lex) + np_bb(s["obj"], lex)
    if s["pp"]:
        words += np_bb(s["pp"][1], lex) + [lex["prep"][s["pp"][0]]]
    if s["adv"]:
        words.append(s["adv"])
    words += [s["verb"], lex["verb_marker"]]
    return " ".join(words)


def unique_sentences(rng, lex, count, seen):
    out = []
    while len(out) < count:
        s = sentence(rng, lex)
        key = render_aa(s)
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def symbol_task(count):
    rng = random.Random(SEED + 2)
    symbols = "abcdefghijklmnopqrst"
    seqs = [[rng.choice(symbols) for _ in range(rng.randint(4, 12))] for _ in range(count)]
    return [" ".join(s) for s in seqs], [" ".join(reversed(s)) for s in seqs]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(Path(__file__).resolve().parent / "toy"))
    parser.add_argument("--mono", type=int, default=10000, help="monolingual sentences per language")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lex = lexicon()
    rng = random.Random(SEED + 1)
    seen = set()
    splits = {"train": 500, "dev": 100, "test": 200}
    for name, count in splits.items():
        sents = unique_sentences(rng, lex, count, seen)
        write(out / f"{name}.aa", [render_aa(s) for s in sents])
        write(out / f"{name}.bb", [render_bb(s, lex) for s in sents])
    # Monolingual halves come from disjoint sentence draws, so no mono line
    # of one language is the translation of a mono line of the other.
    write(out / "mono.aa", [render_aa(s) for s in unique_sentences(rng, lex, args.mono, seen)])
    write(out / "mono.bb", [render_bb(s, lex) for s in unique_sentences(rng, lex, args.mono, seen)])
    forward, backward = symbol_task(200)
    write(out / "copy.src", forward)
    write(out / "copy.tgt", forward)
    write(out / "reverse.src", forward)
    write(out / "reverse.tgt", backward)


if __name__ == "__main__":
    main()
