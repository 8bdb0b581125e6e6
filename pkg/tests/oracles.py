"""Brute-force reference implementations used to check the package.

Written independently of the package code: plain loops over explicit index
sets, no shared helpers.
"""

from __future__ import annotations

import itertools
import math
import re

import numpy as np


# -- text -------------------------------------------------------------------

def tokens(text: str) -> list[str]:
    out, word = [], ""
    for ch in text.lower():
        if ch.isalnum() or ch == "'":
            word += ch
            continue
        if word:
            out.append(word)
            word = ""
        if not ch.isspace():
            out.append(ch)
    if word:
        out.append(word)
    return out


def lcs_brute(a: list[str], b: list[str]) -> int:
    """Longest common subsequence by enumerating subsequences of the shorter list."""
    if len(a) > len(b):
        a, b = b, a
    for k in range(len(a), 0, -1):
        for combo in itertools.combinations(range(len(a)), k):
            sub = [a[i] for i in combo]
            j = 0
            for w in b:
                if j < k and w == sub[j]:
                    j += 1
            if j == k:
                return k
    return 0


def rouge_l_oracle(pairs):
    fs, ps, rs = [], [], []
    for hyp, ref in pairs:
        h, r = tokens(hyp), tokens(ref)
        lcs = lcs_brute(h, r) if h else 0
        p = lcs / len(h) if h else 0.0
        rec = lcs / len(r)
        fs.append(0.0 if lcs == 0 else 2 * p * rec / (p + rec))
        ps.append(p)
        rs.append(rec)
    n = len(pairs)
    return 100 * sum(fs) / n, 100 * sum(ps) / n, 100 * sum(rs) / n


def bleu_oracle(pairs, n: int) -> float:
    """Corpus BLEU; orders with zero clipped matches use add-one precision."""
    match = [0] * n
    total = [0] * n
    hl = rl = 0
    for hyp, ref in pairs:
        h, r = tokens(hyp), tokens(ref)
        hl += len(h)
        rl += len(r)
        for k in range(1, n + 1):
            hg = [tuple(h[i:i + k]) for i in range(len(h) - k + 1)]
            rg = [tuple(r[i:i + k]) for i in range(len(r) - k + 1)]
            total[k - 1] += len(hg)
            used = [False] * len(rg)
            for g in hg:
                for j, x in enumerate(rg):
                    if not used[j] and x == g:
                        used[j] = True
                        match[k - 1] += 1
                        break
    if hl == 0:
        return 0.0
    logs = 0.0
    for m, t in zip(match, total):
        logs += math.log((m + 1) / (t + 1) if m == 0 else m / t)
    bp = 1.0 if hl >= rl else math.exp(1 - rl / hl)
    return 100 * bp * math.exp(logs / n)


# -- losses -----------------------------------------------------------------

def _cos(u, v):
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def _logsumexp(xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def clip_oracle(zf: np.ndarray, zv: np.ndarray, tau: float) -> float:
    B = len(zf)
    s = [[_cos(zf[i], zv[j]) / tau for j in range(B)] for i in range(B)]
    total = 0.0
    for i in range(B):
        total += -(s[i][i] - _logsumexp([s[i][j] for j in range(B)]))
        total += -(s[i][i] - _logsumexp([s[j][i] for j in range(B)]))
    return total / B


def recon_oracle(x: np.ndarray, z: np.ndarray, alpha: float) -> float:
    """x, z of shape (N, L, d): mean over samples and tokens of the mixed norm."""
    N, L = x.shape[:2]
    acc = 0.0
    for i in range(N):
        for l in range(L):
            diff = z[i, l] - x[i, l]
            acc += (1 - alpha) * sum(d * d for d in diff) + alpha * sum(abs(d) for d in diff)
    return acc / (N * L)


def ce_oracle(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Sum of masked token NLL divided by batch size."""
    B, T, _ = logits.shape
    acc = 0.0
    for b in range(B):
        for t in range(T):
            if mask[b, t]:
                row = list(logits[b, t])
                acc += _logsumexp(row) - row[targets[b, t]]
    return acc / B


def _entropy(p):
    return -sum(x * math.log(x) for x in p if x > 0)


def nc_oracle(feats: np.ndarray, own_rows, pool: np.ndarray, protos: np.ndarray, tau: float) -> float:
    """feats: (B, d) normalized; pool (N, d) normalized; protos (C, d) normalized."""
    acc = 0.0
    for f, own in zip(feats, own_rows):
        cands = [pool[j] for j in range(len(pool)) if j != own] + list(protos)
        logits = [float(np.dot(f, c)) / tau for c in cands]
        lse = _logsumexp(logits)
        acc += _entropy([math.exp(l - lse) for l in logits])
    return acc / len(feats)


def es_oracle(probs: np.ndarray, rho: float, margin: float) -> float:
    acc = 0.0
    for p in probs:
        gap = abs(_entropy(p) - rho)
        acc += -gap if gap > margin else 0.0
    return acc / len(probs)
