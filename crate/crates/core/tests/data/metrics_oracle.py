"""Independent reference values for the toy caption corpus.

Plain Python, no third-party packages. Stemming uses a fixed table covering
the corpus vocabulary; every other word stems to itself.

    python3 metrics_oracle.py toy_corpus.jsonl > toy_expected.json
"""
import itertools
import json
import math
import re
import sys
from collections import Counter

STEMS = {
    "dogs": "dog",
    "running": "run", "runs": "run",
    "turned": "turn", "turns": "turn",
    "walked": "walk", "walking": "walk", "walks": "walk",
}


def tok(s):
    return re.sub(r"[^0-9a-z]", " ", s.lower()).split()


def ngrams(ws, n):
    return Counter(tuple(ws[i:i + n]) for i in range(len(ws) - n + 1))


def bleu(recs):
    match = [0] * 4
    total = [0] * 4
    c = r = 0
    for hyp, refs in recs:
        c += len(hyp)
        r += sorted((abs(len(x) - len(hyp)), len(x)) for x in refs)[0][1]
        for n in range(1, 5):
            h = ngrams(hyp, n)
            best = Counter()
            for x in refs:
                for g, k in ngrams(x, n).items():
                    best[g] = max(best[g], k)
            match[n - 1] += sum(min(k, best[g]) for g, k in h.items())
            total[n - 1] += max(0, len(hyp) - n + 1)
    if min(match) == 0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100 * bp * math.prod(m / t for m, t in zip(match, total)) ** 0.25


def lcs(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            t[i + 1][j + 1] = t[i][j] + 1 if a[i] == b[j] else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


def rouge(recs, beta=1.2):
    out = []
    for hyp, refs in recs:
        best = 0.0
        for x in refs:
            l = lcs(hyp, x)
            if l:
                p, rc = l / len(hyp), l / len(x)
                best = max(best, (1 + beta ** 2) * p * rc / (rc + beta ** 2 * p))
        out.append(best)
    return 100 * sum(out) / len(out)


def cider(recs, d_variant=False, sigma=6.0):
    n_docs = len(recs)
    df = [Counter() for _ in range(4)]
    for _, refs in recs:
        for n in range(1, 5):
            seen = set()
            for x in refs:
                seen |= set(ngrams(x, n))
            for g in seen:
                df[n - 1][g] += 1

    def vec(ws):
        vs, norms = [], []
        for n in range(1, 5):
            v = {g: k * (math.log(n_docs) - math.log(max(1, df[n - 1][g]))) for g, k in ngrams(ws, n).items()}
            vs.append(v)
            norms.append(math.sqrt(sum(w * w for w in v.values())))
        return vs, norms, max(0, len(ws) - 1)

    scores = []
    for hyp, refs in recs:
        hv, hn, hl = vec(hyp)
        per_ref = []
        for x in refs:
            rv, rn, rl = vec(x)
            s = 0.0
            for n in range(4):
                dot = 0.0
                for g, w in hv[n].items():
                    if g in rv[n]:
                        dot += (min(w, rv[n][g]) if d_variant else w) * rv[n][g]
                val = dot / (hn[n] * rn[n]) if hn[n] and rn[n] else 0.0
                if d_variant:
                    val *= math.exp(-((hl - rl) ** 2) / (2 * sigma ** 2))
                s += val
            per_ref.append(s / 4)
        scores.append(10 * sum(per_ref) / len(per_ref))
    return sum(scores) / len(scores)


def chunks(pairs):
    pairs = sorted(pairs)
    return sum(1 for k, (i, j) in enumerate(pairs) if k == 0 or pairs[k - 1] != (i - 1, j - 1))


def meteor_pair(hyp, ref):
    stem = lambda w: STEMS.get(w, w)
    options = []
    for i, w in enumerate(hyp):
        opts = [None]
        for j, x in enumerate(ref):
            if w == x:
                opts.append((j, True))
            elif stem(w) == stem(x):
                opts.append((j, False))
        options.append(opts)
    best = (0, 0, 0)
    for choice in itertools.product(*options):
        used = [c[0] for c in choice if c]
        if len(used) != len(set(used)):
            continue
        pairs = [(i, c[0]) for i, c in enumerate(choice) if c]
        exact = sum(1 for c in choice if c and c[1])
        key = (exact, len(pairs), -chunks(pairs) if pairs else 0)
        best = max(best, key)
    m, ch = best[1], -best[2]
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    return fmean * (1 - 0.5 * (ch / m) ** 3)


def meteor(recs):
    return 100 * sum(max(meteor_pair(h, x) for x in refs) for h, refs in recs) / len(recs)


def main(path):
    recs = []
    for line in open(path):
        r = json.loads(line)
        recs.append((tok(r["hypothesis"]), [tok(x) for x in r["references"]]))
    out = {
        "bleu4": bleu(recs),
        "rouge_l": rouge(recs),
        "cider": cider(recs),
        "cider_d": cider(recs, d_variant=True),
        "meteor": meteor(recs),
    }
    json.dump(out, sys.stdout, indent=2)
    print()


if __name__ == "__main__":
    main(sys.argv[1])
