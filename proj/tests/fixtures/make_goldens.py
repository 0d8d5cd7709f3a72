#!/usr/bin/env python3
"""Regenerates metric_goldens.json from metric_corpora.json.

Faithful port of the reference captioning evaluation scorers (corpus BLEU
with closest-reference brevity penalty and tiny/small smoothing, ROUGE-L
with beta=1.2 and separate max precision/recall over references, CIDEr-D
with sigma=6, x10 scaling and the distinct-bigram length convention).
Run once; the JSON output is frozen as the golden file.
"""

import json
import math
import os
from collections import defaultdict

HERE = os.path.dirname(os.path.abspath(__file__))


def ngrams(words, n):
    counts = defaultdict(int)
    for k in range(1, n + 1):
        for i in range(len(words) - k + 1):
            counts[tuple(words[i:i + k])] += 1
    return counts


def bleu(cands, refs, n=4):
    small, tiny = 1e-9, 1e-15
    testlen = reflen = 0.0
    guess = [0.0] * n
    correct = [0.0] * n
    for cand, rlist in zip(cands, refs):
        testlen += len(cand)
        reflen += min((abs(len(r) - len(cand)), len(r)) for r in rlist)[1]
        maxcounts = {}
        for r in rlist:
            for ng, cnt in ngrams(r, n).items():
                maxcounts[ng] = max(maxcounts.get(ng, 0), cnt)
        for ng, cnt in ngrams(cand, n).items():
            correct[len(ng) - 1] += min(cnt, maxcounts.get(ng, 0))
        for k in range(n):
            guess[k] += max(0, len(cand) - k)
    bleus = []
    running = 1.0
    for k in range(n):
        running *= (correct[k] + tiny) / (guess[k] + small)
        bleus.append(running ** (1.0 / (k + 1)))
    ratio = (testlen + tiny) / (reflen + small)
    if ratio < 1:
        bleus = [b * math.exp(1 - 1 / ratio) for b in bleus]
    return bleus


def my_lcs(a, b):
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            cur[j] = prev[j - 1] + 1 if a[i - 1] == b[j - 1] else max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(cands, refs, beta=1.2):
    total = 0.0
    for cand, rlist in zip(cands, refs):
        prec = [my_lcs(cand, r) / float(len(cand)) for r in rlist]
        rec = [my_lcs(cand, r) / float(len(r)) for r in rlist]
        pm, rm = max(prec), max(rec)
        if pm != 0 and rm != 0:
            total += ((1 + beta ** 2) * pm * rm) / float(rm + beta ** 2 * pm)
    return total / len(cands)


def cider_d(cands, refs, n=4, sigma=6.0):
    doc_freq = defaultdict(float)
    for rlist in refs:
        seen = set()
        for r in rlist:
            seen.update(ngrams(r, n).keys())
        for ng in seen:
            doc_freq[ng] += 1
    ref_len = math.log(float(len(cands)))

    def counts2vec(cnts):
        vec = [defaultdict(float) for _ in range(n)]
        norm = [0.0] * n
        length = 0
        for ng, tf in cnts.items():
            df = math.log(max(1.0, doc_freq[ng]))
            k = len(ng) - 1
            vec[k][ng] = float(tf) * (ref_len - df)
            norm[k] += vec[k][ng] ** 2
            if k == 1:
                length += 1
        return vec, [math.sqrt(x) for x in norm], length

    def sim(vh, vr, nh, nr, lh, lr):
        delta = float(lh - lr)
        val = [0.0] * n
        for k in range(n):
            for ng in vh[k]:
                val[k] += min(vh[k][ng], vr[k][ng]) * vr[k][ng]
            if nh[k] != 0 and nr[k] != 0:
                val[k] /= nh[k] * nr[k]
            val[k] *= math.e ** (-(delta ** 2) / (2 * sigma ** 2))
        return val

    total = 0.0
    for cand, rlist in zip(cands, refs):
        vh, nh, lh = counts2vec(ngrams(cand, n))
        score = [0.0] * n
        for r in rlist:
            vr, nr, lr = counts2vec(ngrams(r, n))
            s = sim(vh, vr, nh, nr, lh, lr)
            score = [a + b for a, b in zip(score, s)]
        total += sum(score) / n / len(rlist) * 10.0
    return total / len(cands)


def main():
    with open(os.path.join(HERE, "metric_corpora.json")) as f:
        corpora = json.load(f)
    goldens = {}
    for name, images in corpora.items():
        cands = [img["candidate"].split() for img in images]
        refs = [[r.split() for r in img["refs"]] for img in images]
        goldens[name] = {
            "bleu": bleu(cands, refs),
            "rouge_l": rouge_l(cands, refs),
            "cider": cider_d(cands, refs),
        }
    out = os.path.join(HERE, "metric_goldens.json")
    with open(out, "w") as f:
        json.dump(goldens, f, indent=2, sort_keys=True)
        f.write("\n")
    print("wrote", out)


if __name__ == "__main__":
    main()
