"""Exhaustive reference implementations of the ranking metrics."""
import numpy as np


def brute_auroc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def brute_auprc(s, y):
    """Sweep every distinct threshold from high to low; area = sum of recall steps times precision."""
    total, prev_recall = 0.0, 0.0
    for thr in sorted(set(s.tolist()), reverse=True):
        pred = s >= thr
        tp = int(np.sum(pred & (y == 1)))
        recall = tp / int(np.sum(y == 1))
        total += (recall - prev_recall) * (tp / int(np.sum(pred)))
        prev_recall = recall
    return total
