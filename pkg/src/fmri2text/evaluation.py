"""Caption metrics (corpus BLEU, ROUGE-L, an embedding-matching score) and
per-subject report tables.

Tokenization for every metric: lowercase, punctuation split into its own
tokens, whitespace collapsed. BLEU smoothing: an order with zero clipped
matches uses (0 + 1) / (count + 1) as its precision and the result is flagged
as smoothed. The embedding score is a proxy for BERTScore built on a token
embedding table, not a pretrained language model; outputs label it
``bertscore_proxy``.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from fmri2text.decoder import normalize_tokens
from fmri2text.numerics import ValidationError

log = logging.getLogger(__name__)

COLUMNS = ("subject_id", "bertscore_proxy", "bleu1", "bleu2", "rouge_l_f", "rouge_l_p", "rouge_l_r")


@dataclass
class DecodeRecord:
    subject_id: str
    instruction: str
    reference: str
    hypothesis: str
    truncated: bool = False
    sample_id: int | None = None

    @property
    def ref_tokens(self) -> list[str]:
        return normalize_tokens(self.reference)

    @property
    def hyp_tokens(self) -> list[str]:
        return normalize_tokens(self.hypothesis)

    def to_dict(self) -> dict:
        return {"subject_id": self.subject_id, "sample_id": self.sample_id, "instruction": self.instruction,
                "reference": self.reference, "hypothesis": self.hypothesis, "truncated": self.truncated}


# ---------------------------------------------------------------------------
# BLEU

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuResult:
    score: float
    precisions: list[float]
    brevity_penalty: float
    smoothed: bool


def bleu_details(records: Sequence[DecodeRecord], n: int) -> BleuResult:
    if not records:
        raise ValidationError("BLEU needs at least one hypothesis")
    if n < 1:
        raise ValidationError("n-gram order must be >= 1")
    matches, totals = [0] * n, [0] * n
    hyp_len = ref_len = 0
    for r in records:
        hyp, ref = r.hyp_tokens, r.ref_tokens
        hyp_len += len(hyp)
        ref_len += len(ref)
        for k in range(1, n + 1):
            h, g = _ngrams(hyp, k), _ngrams(ref, k)
            matches[k - 1] += sum(min(c, g[t]) for t, c in h.items())
            totals[k - 1] += sum(h.values())
    if hyp_len == 0:
        return BleuResult(0.0, [0.0] * n, 0.0, False)
    smoothed = any(m == 0 for m in matches)
    precisions = [(m + 1) / (t + 1) if m == 0 else m / t for m, t in zip(matches, totals)]
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / n)
    return BleuResult(100 * score, precisions, bp, smoothed)


def bleu_n(records: Sequence[DecodeRecord], n: int) -> float:
    """Corpus BLEU with uniform weights over orders 1..n, in percent."""
    return bleu_details(records, n).score


# ---------------------------------------------------------------------------
# ROUGE-L

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_record(hyp: Sequence[str], ref: Sequence[str]) -> tuple[float, float, float]:
    if not hyp or not ref:
        return 0.0, 0.0, 0.0
    lcs = lcs_length(hyp, ref)
    p, r = lcs / len(hyp), lcs / len(ref)
    f = 0.0 if lcs == 0 else 2 * p * r / (p + r)
    return f, p, r


def rouge_l(records: Sequence[DecodeRecord]) -> tuple[float, float, float]:
    """Macro-averaged ROUGE-L (F, P, R) in percent; empty references are skipped."""
    rows = []
    for r in records:
        ref = r.ref_tokens
        if not ref:
            log.warning("skipping record with empty reference (subject %s)", r.subject_id)
            continue
        rows.append(rouge_l_record(r.hyp_tokens, ref))
    if not rows:
        return 0.0, 0.0, 0.0
    f, p, rr = np.mean(np.array(rows), axis=0) * 100
    return float(f), float(p), float(rr)


# ---------------------------------------------------------------------------
# embedding-matching score

class TableEmbedder:
    """Token -> vector lookup backed by an embedding table; unknown tokens
    share the ``unk_id`` row."""

    def __init__(self, stoi: Mapping[str, int], table: np.ndarray, unk_id: int):
        self.stoi = stoi
        self.table = np.asarray(table, dtype=np.float64)
        self.unk_id = unk_id

    def __call__(self, tokens: Sequence[str]) -> tuple[np.ndarray, int]:
        ids = [self.stoi.get(t, self.unk_id) for t in tokens]
        unknown = sum(t not in self.stoi for t in tokens)
        return self.table[ids], unknown


Embedder = Callable[[Sequence[str]], tuple[np.ndarray, int]]


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(n == 0, 1.0, n)


@dataclass
class EmbeddingScoreResult:
    score: float
    unknown_tokens: int
    fully_unknown_records: int = 0


def embedding_score_details(records: Sequence[DecodeRecord], embedder: Embedder) -> EmbeddingScoreResult:
    if not records:
        raise ValidationError("embedding score needs at least one record")
    scores, unknown, fully = [], 0, 0
    for r in records:
        hyp, ref = r.hyp_tokens, r.ref_tokens
        if not hyp or not ref:
            scores.append(0.0)
            continue
        eh, uh = embedder(hyp)
        er, ur = embedder(ref)
        unknown += uh + ur
        fully += uh == len(hyp)
        sim = np.clip(_normalize_rows(eh) @ _normalize_rows(er).T, -1.0, 1.0)
        p, rec = sim.max(axis=1).mean(), sim.max(axis=0).mean()
        f = 0.0 if p + rec <= 0 else 2 * p * rec / (p + rec)
        scores.append(float(np.clip(f, 0.0, 1.0)))
    if unknown:
        log.info("embedding score: %d tokens fell back to the unknown vector", unknown)
    return EmbeddingScoreResult(100 * float(np.mean(scores)), unknown, fully)


def embedding_score(records: Sequence[DecodeRecord], embedder: Embedder) -> float:
    """Greedy cosine token matching (BERTScore-style F), averaged over records, in percent."""
    return embedding_score_details(records, embedder).score


# ---------------------------------------------------------------------------
# report

@dataclass
class ReportRow:
    subject_id: str
    bertscore_proxy: float
    bleu1: float
    bleu2: float
    rouge_l_f: float
    rouge_l_p: float
    rouge_l_r: float
    n_records: int = 0

    def values(self) -> list[float]:
        return [getattr(self, c) for c in COLUMNS[1:]]


@dataclass
class MetricReport:
    rows: list[ReportRow]
    total: ReportRow
    notes: list[str] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["\t".join(COLUMNS)]
        for row in self.rows + [self.total]:
            lines.append("\t".join([row.subject_id] + [f"{v:.4f}" for v in row.values()]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = f"{'Subject':<12}{'BERTScore*':>12}{'BLEU-1':>9}{'BLEU-2':>9}{'RL-F':>9}{'RL-P':>9}{'RL-R':>9}{'n':>6}"
        out = ["Caption metrics (%)", "=" * len(head), head, "-" * len(head)]
        for row in self.rows + [self.total]:
            if row is self.total:
                out.append("-" * len(head))
            out.append(f"{row.subject_id:<12}" + "".join(f"{v:>9.2f}" if i else f"{v:>12.2f}"
                                                         for i, v in enumerate(row.values())) + f"{row.n_records:>6d}")
        out.append("")
        out.append("* bertscore_proxy: greedy token-embedding matching on the decoder embedding table,")
        out.append("  not a pretrained-LM BERTScore.")
        out.extend(self.notes)
        return "\n".join(out) + "\n"

    def write(self, directory) -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tsv, txt = d / "report.tsv", d / "report.txt"
        tsv.write_text(self.to_tsv())
        txt.write_text(self.to_text())
        return tsv, txt


def score_records(subject_id: str, records: Sequence[DecodeRecord], embedder: Embedder) -> ReportRow:
    f, p, r = rouge_l(records)
    return ReportRow(subject_id, embedding_score(records, embedder), bleu_n(records, 1), bleu_n(records, 2),
                     f, p, r, len(records))


def build_report(records: Mapping[str, Sequence[DecodeRecord]] | Sequence[DecodeRecord],
                 embedder: Embedder) -> MetricReport:
    """One row per subject plus a total row scored on the pooled records."""
    if not isinstance(records, Mapping):
        grouped: dict[str, list[DecodeRecord]] = {}
        for r in records:
            grouped.setdefault(r.subject_id, []).append(r)
        records = grouped
    if not records:
        raise ValidationError("report needs at least one subject")
    rows, pooled = [], []
    for sid in sorted(records):
        recs = list(records[sid])
        if not recs:
            raise ValidationError(f"subject {sid} has no records")
        rows.append(score_records(sid, recs, embedder))
        pooled.extend(recs)
    notes = []
    truncated = sum(r.truncated for r in pooled)
    if truncated:
        notes.append(f"{truncated} generations hit the length limit.")
    return MetricReport(rows, score_records("Total", pooled, embedder), notes)
