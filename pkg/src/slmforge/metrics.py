"""WER / CER / chrF metrics and report tables.

WER and CER are corpus-level: total edit distance over total reference
length, not an average of per-utterance rates. chrF is the character
n-gram F-beta score (n = 1..6, beta = 2 by default) on whitespace-stripped
text, aggregated over the corpus by summing n-gram counts.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

METRIC_COLUMNS = (
    ("wer", "WER", "down"),
    ("cer", "CER", "down"),
    ("chrf", "ChRF", "up"),
    ("bs_f1", "BS-F1", "up"),
)

_ARROWS = {"down": "↓", "up": "↑"}


def edit_distance(ref, hyp) -> int:
    """Unit-cost Levenshtein distance between two token sequences."""
    n, m = len(ref), len(hyp)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m]


def _check_paired(refs, hyps):
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")


def wer(refs, hyps) -> float:
    """Corpus word error rate: sum of word edit distances / total ref words."""
    _check_paired(refs, hyps)
    total_dist = 0
    total_words = 0
    for ref, hyp in zip(refs, hyps):
        r, h = ref.split(), hyp.split()
        total_dist += edit_distance(r, h)
        total_words += len(r)
    if total_words == 0:
        raise ValueError("references contain no words")
    return total_dist / total_words


def _char_tokens(text: str):
    # collapse whitespace runs to single spaces; space itself counts as a char
    return list(" ".join(text.split()))


def cer(refs, hyps) -> float:
    """Corpus character error rate over whitespace-collapsed character tokens."""
    _check_paired(refs, hyps)
    total_dist = 0
    total_chars = 0
    for ref, hyp in zip(refs, hyps):
        r, h = _char_tokens(ref), _char_tokens(hyp)
        total_dist += edit_distance(r, h)
        total_chars += len(r)
    if total_chars == 0:
        raise ValueError("references contain no characters")
    return total_dist / total_chars


def _ngram_counts(chars: str, n: int) -> Counter:
    return Counter(chars[i : i + n] for i in range(len(chars) - n + 1))


def chrf(refs, hyps, max_n: int = 6, beta: float = 2.0) -> float:
    """Character n-gram F-beta score in [0, 100].

    Whitespace is stripped before counting. Corpus aggregation sums match /
    hypothesis / reference counts per order; orders where neither side has
    any n-grams are skipped, so identical pairs score exactly 100.
    """
    _check_paired(refs, hyps)
    matches = [0] * (max_n + 1)
    hyp_total = [0] * (max_n + 1)
    ref_total = [0] * (max_n + 1)
    for ref, hyp in zip(refs, hyps):
        r = "".join(ref.split())
        h = "".join(hyp.split())
        for n in range(1, max_n + 1):
            rc = _ngram_counts(r, n)
            hc = _ngram_counts(h, n)
            matches[n] += sum(min(c, rc[g]) for g, c in hc.items())
            hyp_total[n] += sum(hc.values())
            ref_total[n] += sum(rc.values())

    precisions = []
    recalls = []
    for n in range(1, max_n + 1):
        if hyp_total[n] == 0 and ref_total[n] == 0:
            continue
        precisions.append(matches[n] / hyp_total[n] if hyp_total[n] else 0.0)
        recalls.append(matches[n] / ref_total[n] if ref_total[n] else 0.0)
    if not precisions:
        return 0.0
    p = sum(precisions) / len(precisions)
    r = sum(recalls) / len(recalls)
    denom = beta * beta * p + r
    if denom == 0.0:
        return 0.0
    return 100.0 * (1.0 + beta * beta) * p * r / denom


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricRow:
    name: str
    wer: float | None = None
    cer: float | None = None
    chrf: float | None = None
    bs_f1: float | None = None
    n_utterances: int | None = None
    n_ref_words: int | None = None
    extra: dict = field(default_factory=dict)


def compute_report(name: str, refs, hyps, metrics=("wer", "cer", "chrf")) -> MetricRow:
    row = MetricRow(name=name)
    row.n_utterances = len(refs)
    row.n_ref_words = sum(len(r.split()) for r in refs)
    if "wer" in metrics:
        row.wer = wer(refs, hyps)
    if "cer" in metrics:
        row.cer = cer(refs, hyps)
    if "chrf" in metrics:
        row.chrf = chrf(refs, hyps)
    return row


def render_report(rows, fmt: str = "text") -> str:
    """Render metric rows as an aligned text table or canonical JSON.

    Metric columns appear only when at least one row populates them, each
    headed with its improvement direction arrow. Values print with two
    decimals; absent cells print "-".
    """
    rows = list(rows)
    if fmt == "json":
        payload = []
        for row in rows:
            entry = {"name": row.name}
            entry.update(row.extra)
            for key, label, _ in METRIC_COLUMNS:
                value = getattr(row, key)
                if value is not None:
                    entry[key] = round(float(value), 4)
            if row.n_utterances is not None:
                entry["n_utterances"] = row.n_utterances
            if row.n_ref_words is not None:
                entry["n_ref_words"] = row.n_ref_words
            payload.append(entry)
        return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")

    extra_keys = []
    for row in rows:
        for key in row.extra:
            if key not in extra_keys:
                extra_keys.append(key)
    active = [
        (key, f"{label} ({_ARROWS[direction]})")
        for key, label, direction in METRIC_COLUMNS
        if any(getattr(row, key) is not None for row in rows)
    ]

    header = ["name"] + extra_keys + [label for _, label in active]
    body = []
    for row in rows:
        cells = [row.name] + [str(row.extra.get(k, "-")) for k in extra_keys]
        for key, _ in active:
            value = getattr(row, key)
            cells.append("-" if value is None else f"{value:.2f}")
        body.append(cells)

    widths = [len(h) for h in header]
    for cells in body:
        widths = [max(w, len(c)) for w, c in zip(widths, cells)]
    n_left = 1 + len(extra_keys)

    def render_line(cells):
        out = []
        for i, (cell, width) in enumerate(zip(cells, widths)):
            out.append(cell.ljust(width) if i < n_left else cell.rjust(width))
        return "  ".join(out).rstrip()

    lines = [render_line(header), render_line(["-" * w for w in widths])]
    lines.extend(render_line(cells) for cells in body)
    return "\n".join(lines) + "\n"
