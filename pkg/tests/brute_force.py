"""Slow, deliberately naive reimplementations used as test oracles.

Nothing here imports the package's metric code. Tokenisation is redone with a
plain regex so a tokenizer bug cannot hide on both sides.
"""

from __future__ import annotations

import itertools
import math
import re
from fractions import Fraction

import numpy as np


def words(text: str) -> list:
    return re.sub(r"[^\w\s]", " ", text.lower()).split()


def windows(tokens: list, n: int) -> list:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu4(candidates, references) -> float:
    """Corpus BLEU@4, add-one smoothing for n >= 2, counted with list.count."""
    num = [0] * 4
    den = [0] * 4
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct, rt = words(cand), words(ref)
        c_len += len(ct)
        r_len += len(rt)
        for n in range(1, 5):
            cw, rw = windows(ct, n), windows(rt, n)
            for g in set(cw):
                num[n - 1] += min(cw.count(g), rw.count(g))
            den[n - 1] += len(cw)
    if c_len == 0 or num[0] == 0:
        return 0.0
    precisions = [Fraction(num[0], den[0])] + [Fraction(num[n] + 1, den[n] + 1) for n in range(1, 4)]
    geo = math.exp(sum(math.log(p) for p in precisions) / 4)
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return bp * geo


def is_subsequence(sub: tuple, seq: list) -> bool:
    it = iter(seq)
    return all(tok in it for tok in sub)


def lcs_exhaustive(a: list, b: list) -> int:
    """Longest subsequence of ``a`` found in ``b``, by trying every subset of ``a``."""
    for size in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), size):
            if is_subsequence(tuple(a[i] for i in idx), b):
                return size
    return 0


def rouge_l(candidates, references) -> float:
    scores = []
    for cand, ref in zip(candidates, references):
        ct, rt = words(cand), words(ref)
        lcs = lcs_exhaustive(ct, rt) if ct and rt else 0
        if lcs == 0:
            scores.append(0.0)
            continue
        p, r = lcs / len(ct), lcs / len(rt)
        scores.append(2 * p * r / (p + r))
    return sum(scores) / len(scores)


def cider(candidates, references, corpus=None) -> float:
    """Dense-vector TF-IDF cosine, one axis per n-gram seen anywhere."""
    corpus = references if corpus is None else corpus
    docs = [[set(windows(words(d), n)) for n in range(1, 5)] for d in corpus]
    scores = []
    for cand, ref in zip(candidates, references):
        ct, rt = words(cand), words(ref)
        sims = []
        for n in range(1, 5):
            axis = sorted(set(windows(ct, n)) | set(windows(rt, n)))
            if not axis:
                sims.append(0.0)
                continue
            idf = np.array([math.log(len(docs) / (1 + sum(g in d[n - 1] for d in docs))) for g in axis])

            def vec(toks):
                w = windows(toks, n)
                if not w:
                    return np.zeros(len(axis))
                return np.array([w.count(g) / len(w) for g in axis]) * idf

            u, v = vec(ct), vec(rt)
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            sims.append(0.0 if nu == 0 or nv == 0 else float(u @ v / (nu * nv)))
        scores.append(min(1.0, max(0.0, sum(sims) / 4)))
    return sum(scores) / len(scores)


def pe_similarity(lag: int, d: int, base: float) -> float:
    """Mean over frequency pairs of cos(lag * base^(-2i/d)), summed in Python floats."""
    return math.fsum(math.cos(lag * base ** (-2 * i / d)) for i in range(d // 2)) / (d // 2)
