"""Corpus-level caption metrics: BLEU@1-4, ROUGE-L, CIDEr-D.

All operate on tokenized captions (lowercased, punctuation stripped,
whitespace split). BLEU is plain corpus BLEU without smoothing; CIDEr-D
uses min-clipped TF-IDF cosines with a Gaussian length penalty. The
simple tokenizer means absolute scores are not comparable to toolkit
numbers; they are meant for relative comparisons.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import InputError

_PUNCT = str.maketrans("", "", ".,;:!?\"'()[]")

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _validate(candidates, references) -> None:
    if not candidates:
        raise InputError("empty candidate corpus")
    if len(candidates) != len(references):
        raise InputError(
            f"{len(candidates)} candidates but {len(references)} reference sets")
    for i, refs in enumerate(references):
        if not refs:
            raise InputError(f"candidate {i} has no references")


def bleu(candidates: list[list[str]], references: list[list[list[str]]],
         n: int = 4) -> float:
    """Corpus BLEU at order ``n`` with clipped counts and no smoothing.

    The brevity penalty uses, per segment, the reference length closest to
    the candidate length (ties resolved toward the shorter reference).
    """
    _validate(candidates, references)
    clipped = [0] * n
    totals = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = ngram_counts(cand, k)
            max_ref = Counter()
            for ref in refs:
                for gram, count in ngram_counts(ref, k).items():
                    max_ref[gram] = max(max_ref[gram], count)
            totals[k - 1] += sum(counts.values())
            clipped[k - 1] += sum(min(count, max_ref[gram])
                                  for gram, count in counts.items())
    if cand_len == 0 or any(t == 0 or c == 0 for c, t in zip(clipped, totals)):
        return 0.0
    log_precision = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_precision)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(candidates: list[list[str]], references: list[list[list[str]]]
            ) -> float:
    """Mean over segments of the best LCS F-measure against any reference."""
    _validate(candidates, references)
    scores = []
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            if not cand or not ref:
                continue
            lcs = _lcs_length(cand, ref)
            recall = lcs / len(ref)
            precision = lcs / len(cand)
            if recall + precision > 0:
                f = ((1 + ROUGE_BETA ** 2) * recall * precision
                     / (recall + ROUGE_BETA ** 2 * precision))
                best = max(best, f)
        scores.append(best)
    return sum(scores) / len(scores)


def cider_d(candidates: list[list[str]], references: list[list[list[str]]]
            ) -> float:
    """Consensus score from clipped TF-IDF n-gram cosines, scaled by 10.

    idf(g) = ln(M / df(g)) with df over reference sets, clipped to df >= 1
    so candidate-only n-grams stay finite; a Gaussian penalty on the token
    length gap (sigma = 6) discounts each candidate/reference pair.
    """
    _validate(candidates, references)
    m_segments = len(candidates)
    if m_segments < 2:
        raise InputError("cider_d needs at least 2 segments for the idf corpus")
    df: Counter = Counter()
    for refs in references:
        grams = set()
        for ref in refs:
            for n in range(1, CIDER_MAX_N + 1):
                grams.update(ngram_counts(ref, n))
        for gram in grams:
            df[gram] += 1

    def idf(gram) -> float:
        return math.log(m_segments / max(df[gram], 1))

    def tfidf(tokens):
        vecs = []
        norms = []
        for n in range(1, CIDER_MAX_N + 1):
            vec = {gram: count * idf(gram)
                   for gram, count in ngram_counts(tokens, n).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(w * w for w in vec.values())))
        return vecs, norms

    total = 0.0
    for cand, refs in zip(candidates, references):
        cand_vecs, cand_norms = tfidf(cand)
        per_n = [0.0] * CIDER_MAX_N
        for ref in refs:
            ref_vecs, ref_norms = tfidf(ref)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2)
                               / (2.0 * CIDER_SIGMA ** 2))
            for n in range(CIDER_MAX_N):
                if cand_norms[n] == 0 or ref_norms[n] == 0:
                    continue
                inner = sum(min(w, ref_vecs[n].get(gram, 0.0))
                            * ref_vecs[n].get(gram, 0.0)
                            for gram, w in cand_vecs[n].items())
                per_n[n] += penalty * inner / (cand_norms[n] * ref_norms[n])
        segment = sum(10.0 * s / len(refs) for s in per_n) / CIDER_MAX_N
        total += segment
    return total / m_segments


@dataclass
class MetricReport:
    b1: float
    b2: float
    b3: float
    b4: float
    rouge_l: float
    cider_d: float

    CSV_HEADER = "B1,B2,B3,B4,ROUGE_L,CIDEr_D"

    def as_dict(self) -> dict:
        return {"B1": self.b1, "B2": self.b2, "B3": self.b3, "B4": self.b4,
                "ROUGE_L": self.rouge_l, "CIDEr_D": self.cider_d}

    def csv_row(self) -> str:
        return ",".join(f"{v:.6f}" for v in
                        (self.b1, self.b2, self.b3, self.b4,
                         self.rouge_l, self.cider_d))


def score_corpus(candidates: list[list[str]],
                 references: list[list[list[str]]]) -> MetricReport:
    """All metrics over tokenized candidates and per-candidate references."""
    return MetricReport(
        b1=bleu(candidates, references, 1),
        b2=bleu(candidates, references, 2),
        b3=bleu(candidates, references, 3),
        b4=bleu(candidates, references, 4),
        rouge_l=rouge_l(candidates, references),
        cider_d=cider_d(candidates, references),
    )


def score_texts(candidates: list[str],
                references: list[list[str]]) -> MetricReport:
    """Tokenize raw caption strings and score them."""
    return score_corpus([tokenize(c) for c in candidates],
                        [[tokenize(r) for r in refs] for refs in references])
