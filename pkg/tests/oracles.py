"""Slow, loop-based reference implementations used as independent oracles.

Nothing here imports blockvit; each function follows the textbook
definition directly so disagreements point at the vectorized code.
"""

import math
import random


def confusion(preds, labels, n):
    cm = [[0] * n for _ in range(n)]
    for p, y in zip(preds, labels):
        cm[int(y)][int(p)] += 1
    return cm


def accuracy(preds, labels):
    return sum(int(p) == int(y) for p, y in zip(preds, labels)) / len(labels)


def macro_f1(preds, labels, n):
    total = 0.0
    for c in range(n):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        if tp + fp == 0 or tp + fn == 0:
            continue
        prec, rec = tp / (tp + fp), tp / (tp + fn)
        if prec + rec > 0:
            total += 2 * prec * rec / (prec + rec)
    return total / n


def qkappa(cm):
    n = len(cm)
    t = sum(sum(r) for r in cm)
    a = [sum(cm[i]) for i in range(n)]
    b = [sum(cm[i][j] for i in range(n)) for j in range(n)]
    ow = ew = 0.0
    for i in range(n):
        for j in range(n):
            w = (i - j) ** 2 / (n - 1) ** 2
            ow += w * cm[i][j]
            ew += w * a[i] * b[j] / t
    return 1.0 - ow / ew


def auc_binary(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def auc_macro_ovr(probs, labels):
    per = []
    for c in range(len(probs[0])):
        lab = [y == c for y in labels]
        if all(lab) or not any(lab):
            continue
        per.append(auc_binary([row[c] for row in probs], lab))
    return sum(per) / len(per)


def _cos(u, v):
    nu = math.sqrt(sum(x * x for x in u)) or 1.0
    nv = math.sqrt(sum(x * x for x in v)) or 1.0
    return sum(x * y for x, y in zip(u, v)) / (nu * nv)


def knn_rank(ref, ref_labels, query, k):
    sims = [(-_cos(query, r), i) for i, r in enumerate(ref)]
    sims.sort()
    votes = {}
    for neg_s, i in sims[:k]:
        c = int(ref_labels[i])
        cnt, s = votes.get(c, (0, 0.0))
        votes[c] = (cnt + 1, s - neg_s)
    return sorted(votes, key=lambda c: (-votes[c][0], -votes[c][1], c))


def knn_eval(ref, ref_labels, queries, query_labels, k, top_n=5):
    top1 = top5 = 0
    for q, y in zip(queries, query_labels):
        r = knn_rank(ref, ref_labels, q, k)
        top1 += r[0] == y
        top5 += y in r[:top_n]
    n = len(queries)
    return {"top1": 100.0 * top1 / n, "top5": 100.0 * top5 / n}


def random_instance(rng: random.Random, max_n=40, max_c=6):
    n_cls = rng.randint(2, max_c)
    n = rng.randint(2, max_n)
    labels = [rng.randrange(n_cls) for _ in range(n)]
    preds = [rng.randrange(n_cls) for _ in range(n)]
    return n_cls, labels, preds
