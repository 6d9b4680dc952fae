"""Reference BLEU / METEOR / ROUGE-L used to produce metrics_golden.json.

Run: python3 metrics_oracle.py metrics_pairs.json > metrics_golden.json
"""
import json
import math
import sys
from collections import Counter


def grams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(cands, refs, n):
    c = sum(len(x) for x in cands)
    r = sum(len(x) for x in refs)
    if c == 0:
        return 0.0
    log_sum = 0.0
    for order in range(1, n + 1):
        matched = 0
        total = 0
        for cand, ref in zip(cands, refs):
            cg = grams(cand, order)
            rg = grams(ref, order)
            matched += sum(min(v, rg[g]) for g, v in cg.items())
            total += sum(cg.values())
        if matched == 0 or total == 0:
            return 0.0
        log_sum += math.log(matched / total)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            if a[i] == b[j]:
                table[i + 1][j + 1] = table[i][j] + 1
            else:
                table[i + 1][j + 1] = max(table[i][j + 1], table[i + 1][j])
    return table[len(a)][len(b)]


def rouge_l(cand, ref):
    if not cand:
        return 0.0
    l = lcs(cand, ref)
    if l == 0:
        return 0.0
    p = l / len(cand)
    r = l / len(ref)
    return 2.0 * p * r / (p + r)


def alignment(cand, ref):
    free_c = set(range(len(cand)))
    free_r = set(range(len(ref)))
    pairs = []
    while True:
        runs = []
        for i in sorted(free_c):
            for j in sorted(free_r):
                k = 0
                while i + k in free_c and j + k in free_r and cand[i + k] == ref[j + k]:
                    k += 1
                if k:
                    runs.append((-k, i, j))
        if not runs:
            return sorted(pairs)
        k, i, j = min(runs)
        for t in range(-k):
            free_c.discard(i + t)
            free_r.discard(j + t)
            pairs.append((i + t, j + t))


def meteor(cand, ref):
    if not cand:
        return 0.0
    pairs = alignment(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1 + sum(
        1 for a, b in zip(pairs, pairs[1:]) if not (b[0] == a[0] + 1 and b[1] == a[1] + 1)
    )
    p = m / len(cand)
    r = m / len(ref)
    f_mean = 10.0 * p * r / (r + 9.0 * p)
    frag = chunks / m
    return f_mean * (1.0 - 0.5 * frag * frag * frag)


def main():
    pairs = json.load(open(sys.argv[1]))
    cands = [p["candidate"].split() for p in pairs]
    refs = [p["reference"].split() for p in pairs]
    cases = []
    for i, (c, r) in enumerate(zip(cands, refs)):
        case = {"case": str(i)}
        for n in range(1, 5):
            case["bleu%d" % n] = bleu([c], [r], n)
        case["meteor"] = meteor(c, r)
        case["rouge_l"] = rouge_l(c, r)
        cases.append(case)
    report = {"bleu%d" % n: bleu(cands, refs, n) for n in range(1, 5)}
    meteor_sum = 0.0
    rouge_sum = 0.0
    for case in cases:
        meteor_sum += case["meteor"]
        rouge_sum += case["rouge_l"]
    report["meteor"] = meteor_sum / len(cases)
    report["rouge_l"] = rouge_sum / len(cases)
    report["cases"] = cases
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
