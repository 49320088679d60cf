"""Second smoothed sentence BLEU-4 scorer, written independently of the
Rust one, used to freeze golden scores for randomly generated pairs.

Tokenization: lowercase, split on whitespace, every non-alphanumeric
character is its own token. Unigram precision is raw; precisions for
n = 2..4 are (matches + 1) / (candidate n-grams + 1). The brevity penalty
is exp(1 - r/c) when c < r.

    python3 bleu_oracle.py CORPUS.jsonl OUT.jsonl
"""
import json
import math
import random
import sys
from collections import Counter
from fractions import Fraction

WORDS = (
    "return the a an of to list value values file path name new add remove "
    "get set create filter string number key dict object given if not none "
    "true false user data"
).split()
PUNCT = list(".,()'_:-")


def tokens(text):
    out = []
    for word in text.lower().split():
        buf = ""
        for ch in word:
            if ch.isalnum():
                buf += ch
            else:
                if buf:
                    out.append(buf)
                    buf = ""
                out.append(ch)
        if buf:
            out.append(buf)
    return out


def grams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(candidate, reference):
    c, r = tokens(candidate), tokens(reference)
    if not c:
        return 0.0
    precisions = []
    for n in range(1, 5):
        cg, rg = grams(c, n), grams(r, n)
        hit = sum(min(k, rg[g]) for g, k in cg.items())
        tot = max(len(c) - n + 1, 0)
        if n == 1:
            if hit == 0:
                return 0.0
            precisions.append(Fraction(hit, tot))
        else:
            precisions.append(Fraction(hit + 1, tot + 1))
    geo = math.exp(sum(math.log(p) for p in precisions) / 4)
    bp = 1.0 if len(c) >= len(r) else math.exp(1 - len(r) / len(c))
    return 100 * bp * geo


def perturb(rng, text):
    toks = text.split()
    out = []
    for t in toks:
        roll = rng.random()
        if roll < 0.15:
            continue
        if roll < 0.3:
            out.append(rng.choice(WORDS))
        else:
            out.append(t)
        if rng.random() < 0.1:
            out.append(rng.choice(WORDS))
    if rng.random() < 0.3:
        rng.shuffle(out)
    return " ".join(out)


def synthetic(rng):
    n = rng.randint(0, 14)
    parts = []
    for _ in range(n):
        w = rng.choice(WORDS)
        if rng.random() < 0.2:
            w = w.capitalize()
        if rng.random() < 0.15:
            w += rng.choice(PUNCT)
        parts.append(w)
    return " ".join(parts)


def main():
    corpus_path, out_path = sys.argv[1], sys.argv[2]
    rng = random.Random(20240611)
    docs = [json.loads(l)["docstring"] for l in open(corpus_path) if l.strip()]
    pairs = [("fixed-0", "add a new filter", "add a new filter to the filter list")]
    for i in range(25):
        ref = rng.choice(docs)
        pairs.append((f"corpus-{i}", perturb(rng, ref), ref))
    for i in range(25):
        ref = synthetic(rng)
        cand = perturb(rng, ref) if rng.random() < 0.7 else synthetic(rng)
        pairs.append((f"synthetic-{i}", cand, ref))
    with open(out_path, "w") as f:
        for pid, cand, ref in pairs:
            f.write(json.dumps({"id": pid, "candidate": cand, "reference": ref, "bleu": bleu(cand, ref)}) + "\n")


if __name__ == "__main__":
    main()
