"""Caption quality metrics and the question-answering consistency score (RMC).

All scores lie in [0, 1]. Sentences are compared after the same
normalisation the tokenizer uses (lowercase, punctuation removed).

* BLEU@4: corpus level, clipped n-gram precision, add-one smoothing for n >= 2.
* ROUGE-L: per-pair LCS F1, averaged.
* METEOR-lite: exact then Porter-stem unigram matching; no synonymy.
* CIDEr: TF-IDF cosine over 1..4-grams, averaged over n, no x10 scaling.
"""

from __future__ import annotations

import csv
import math
import re
import shlex
import subprocess
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Protocol, Sequence

from nltk.stem.porter import PorterStemmer

from .captions import parse_caption
from .text import normalize

METRIC_COLUMNS = ("bleu4", "meteor", "rouge_l", "cider", "s_avg", "rmc")
COLUMN_TITLES = {"bleu4": "B@4", "meteor": "M", "rouge_l": "R", "cider": "C", "s_avg": "S-Avg", "rmc": "RMC"}


def _check_aligned(candidates, references):
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ---------------------------------------------------------------------

def bleu_stats(candidates, references, max_n: int = 4):
    """Clipped numerators, denominators and total lengths over the corpus."""
    _check_aligned(candidates, references)
    num = [0] * max_n
    den = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct, rt = normalize(cand), normalize(ref)
        c_len += len(ct)
        r_len += len(rt)
        for n in range(1, max_n + 1):
            cc, rc = ngram_counts(ct, n), ngram_counts(rt, n)
            num[n - 1] += sum(min(v, rc[g]) for g, v in cc.items())
            den[n - 1] += max(len(ct) - n + 1, 0)
    return num, den, c_len, r_len


def bleu4(candidates: Sequence[str], references: Sequence[str]) -> float:
    num, den, c, r = bleu_stats(candidates, references)
    if c == 0 or num[0] == 0:
        return 0.0
    log_p = math.log(num[0] / den[0])
    for n in range(1, 4):
        log_p += math.log((num[n] + 1) / (den[n] + 1))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / 4.0)


# -- ROUGE-L -----------------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: str, reference: str) -> float:
    ct, rt = normalize(candidate), normalize(reference)
    if not ct or not rt:
        return 0.0
    lcs = lcs_length(ct, rt)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(ct), lcs / len(rt)
    return 2 * p * r / (p + r)


def rouge_l(candidates: Sequence[str], references: Sequence[str]) -> float:
    _check_aligned(candidates, references)
    if not candidates:
        return 0.0
    return sum(rouge_l_pair(c, r) for c, r in zip(candidates, references)) / len(candidates)


# -- METEOR-lite -------------------------------------------------------------

_stemmer = PorterStemmer()

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5


def stem(word: str) -> str:
    return _stemmer.stem(word)


def meteor_alignment(ct: Sequence[str], rt: Sequence[str]) -> list:
    """(cand_idx, ref_idx) pairs: exact matches first, then stem matches.

    Within a stage the k-th unmatched occurrence of a key in the candidate is
    paired with the k-th unmatched occurrence in the reference, which keeps
    the alignment monotone whenever possible.
    """
    pairs = []
    used_c, used_r = set(), set()
    for key in (lambda w: w, stem):
        pending: dict = {}
        for j, w in enumerate(rt):
            if j not in used_r:
                pending.setdefault(key(w), []).append(j)
        for i, w in enumerate(ct):
            if i in used_c:
                continue
            slots = pending.get(key(w))
            if slots:
                j = slots.pop(0)
                pairs.append((i, j))
                used_c.add(i)
                used_r.add(j)
    return sorted(pairs)


def count_chunks(pairs: Sequence[tuple]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_pair(candidate: str, reference: str) -> float:
    ct, rt = normalize(candidate), normalize(reference)
    if not ct or not rt:
        return 0.0
    pairs = meteor_alignment(ct, rt)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(ct), m / len(rt)
    f_mean = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (count_chunks(pairs) / m) ** METEOR_BETA
    return f_mean * (1 - penalty)


def meteor_lite(candidates: Sequence[str], references: Sequence[str]) -> float:
    _check_aligned(candidates, references)
    if not candidates:
        return 0.0
    return sum(meteor_pair(c, r) for c, r in zip(candidates, references)) / len(candidates)


# -- CIDEr ---------------------------------------------------------------------

class DocumentFrequency:
    """n-gram document frequencies over a reference corpus (built once)."""

    def __init__(self, corpus: Sequence[str], max_n: int = 4):
        corpus = list(corpus)
        if not corpus:
            raise ValueError("CIDEr needs a nonempty reference corpus")
        self.size = len(corpus)
        self.max_n = max_n
        self.df: Counter = Counter()
        for doc in corpus:
            toks = normalize(doc)
            for n in range(1, max_n + 1):
                self.df.update(set(ngram_counts(toks, n)))

    def idf(self, gram: tuple) -> float:
        return math.log(self.size / (1.0 + self.df[gram]))


def _tfidf(tokens, n, dfs: DocumentFrequency) -> dict:
    counts = ngram_counts(tokens, n)
    total = sum(counts.values())
    return {g: (c / total) * dfs.idf(g) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_pair(candidate: str, reference: str, dfs: DocumentFrequency) -> float:
    ct, rt = normalize(candidate), normalize(reference)
    sims = [_cosine(_tfidf(ct, n, dfs), _tfidf(rt, n, dfs)) for n in range(1, dfs.max_n + 1)]
    return min(1.0, max(0.0, sum(sims) / len(sims)))


def cider(candidates: Sequence[str], references: Sequence[str], reference_corpus: Optional[Sequence[str]] = None) -> float:
    _check_aligned(candidates, references)
    dfs = DocumentFrequency(references if reference_corpus is None else reference_corpus)
    if not candidates:
        return 0.0
    return sum(cider_pair(c, r, dfs) for c, r in zip(candidates, references)) / len(candidates)


# -- RMC -----------------------------------------------------------------------

@dataclass(frozen=True)
class QAItem:
    question: str
    answer: str

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("QA items need a nonempty question and answer")


class Answerer(Protocol):
    def __call__(self, caption: str, question: str) -> str: ...


_ARTICLES = {"a", "an", "the"}


def normalize_answer(text: str) -> str:
    return " ".join(w for w in normalize(text) if w not in _ARTICLES)


def answers_consistent(given: str, truth: str) -> bool:
    return normalize_answer(given) == normalize_answer(truth)


_ORDINALS = {"first": 0, "last": -1}
_NUMBERED = re.compile(r"action number (\d+)")


class BuiltinAnswerer:
    """Rule-based oracle that reads the action list back out of a caption."""

    def __call__(self, caption: str, question: str) -> str:
        actions = parse_caption(caption)
        q = question.lower()
        if q.startswith("how many"):
            return str(len(actions))
        if "in order" in q:
            return " ".join(actions)
        m = _NUMBERED.search(q)
        if m:
            k = int(m.group(1))
            return actions[k - 1] if 1 <= k <= len(actions) else ""
        for word, pos in _ORDINALS.items():
            if f"the {word} action" in q:
                return actions[pos] if actions else ""
        return ""


class ProcessAnswerer:
    """Delegates to an external command speaking one request per line.

    Request: ``CAPTION<TAB>QUESTION``; response: one line holding the answer.
    """

    def __init__(self, command: str):
        self.command = command
        self._proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def __call__(self, caption: str, question: str) -> str:
        if self._proc.poll() is not None:
            raise RuntimeError(f"answerer process {self.command!r} exited with code {self._proc.returncode}")
        clean = lambda s: " ".join(s.split())  # noqa: E731 - tabs/newlines would break framing
        self._proc.stdin.write(f"{clean(caption)}\t{clean(question)}\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError(f"answerer process {self.command!r} closed its output")
        return line.rstrip("\n")

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_answerer(spec: str) -> Callable[[str, str], str]:
    """``builtin`` or ``proto:COMMAND``."""
    if spec == "builtin":
        return BuiltinAnswerer()
    if spec.startswith("proto:") and spec[6:].strip():
        return ProcessAnswerer(spec[6:])
    raise ValueError(f"unknown answerer {spec!r}; use 'builtin' or 'proto:COMMAND'")


def rmc_single(caption: str, qa: Sequence[QAItem], answerer) -> float:
    if not qa:
        raise ValueError("RMC needs at least one question per caption")
    hits = sum(answers_consistent(answerer(caption, item.question), item.answer) for item in qa)
    return hits / len(qa)


def rmc(captions: Sequence[str], qa_sets: Sequence[Sequence[QAItem]], answerer=None) -> float:
    if len(captions) != len(qa_sets):
        raise ValueError(f"{len(captions)} captions but {len(qa_sets)} QA sets")
    answerer = answerer or BuiltinAnswerer()
    if not captions:
        return 0.0
    return sum(rmc_single(c, qa, answerer) for c, qa in zip(captions, qa_sets)) / len(captions)


# -- report --------------------------------------------------------------------

def s_avg(bleu4: float, rouge_l: float, meteor: float, cider: float) -> float:
    scores = (bleu4, rouge_l, meteor, cider)
    for s in scores:
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"S-Avg inputs must lie in [0, 1], got {s}")
    return (bleu4 + rouge_l + meteor + cider) / 4.0


@dataclass
class MetricReport:
    bleu4: float
    meteor: float
    rouge_l: float
    cider: float
    s_avg: float
    rmc: float
    n_samples: int

    def as_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for key in METRIC_COLUMNS:
                w.writerow([key, repr(float(getattr(self, key)))])
            w.writerow(["n_samples", self.n_samples])


def evaluate(candidates, references, qa_sets, answerer=None, reference_corpus=None) -> MetricReport:
    b = bleu4(candidates, references)
    m = meteor_lite(candidates, references)
    r = rouge_l(candidates, references)
    c = cider(candidates, references, reference_corpus)
    return MetricReport(
        bleu4=b, meteor=m, rouge_l=r, cider=c,
        s_avg=s_avg(b, r, m, c),
        rmc=rmc(candidates, qa_sets, answerer),
        n_samples=len(candidates),
    )


def format_table(rows: dict) -> str:
    """``{row name: MetricReport}`` -> aligned text table (B@4 M R C S-Avg RMC)."""
    name_w = max([len("model")] + [len(k) for k in rows])
    head = "model".ljust(name_w) + "".join(f"{COLUMN_TITLES[c]:>8}" for c in METRIC_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        lines.append(name.ljust(name_w) + "".join(f"{getattr(rep, c):8.3f}" for c in METRIC_COLUMNS))
    return "\n".join(lines)
