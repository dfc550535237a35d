"""WER computation, relative-reduction arithmetic, and report tables.

WER uses a unit-cost Levenshtein alignment; when costs tie the backtrace
prefers substitution over deletion over insertion. Report rounding is
half-up at two decimals, done in Decimal so published-table arithmetic
reproduces exactly. Group averages are unweighted means of set WERs and
the overall average is the unweighted mean of the (unrounded) group
averages.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_UP

from .errors import ConfigError, DataError

_ANGLE_TOKEN = re.compile(r"<[^<>\s]*>")
_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)
_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase, drop <...> tokens (prompts and other specials), strip
    punctuation, collapse whitespace."""
    text = _ANGLE_TOKEN.sub(" ", text)
    text = text.lower()
    text = _PUNCT.sub(" ", text)
    return _WS.sub(" ", text).strip()


@dataclass
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.ref_words


def wer(ref, hyp) -> WerBreakdown:
    """Minimal-alignment WER between word sequences (reference first)."""
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    if n == 0:
        raise DataError("WER is undefined for an empty reference")
    prev = list(range(m + 1))
    rows = [prev]
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ri = ref[i - 1]
        for j in range(1, m + 1):
            if ri == hyp[j - 1]:
                cur[j] = prev[j - 1]
            else:
                best = prev[j - 1]
                if prev[j] < best:
                    best = prev[j]
                if cur[j - 1] < best:
                    best = cur[j - 1]
                cur[j] = best + 1
        rows.append(cur)
        prev = cur
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        cost = rows[i][j]
        if i > 0 and j > 0 and cost == rows[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif i > 0 and cost == rows[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(subs, dels, ins, n)


def wer_strings(ref_text: str, hyp_text: str) -> WerBreakdown:
    ref = normalize_text(ref_text).split()
    hyp = normalize_text(hyp_text).split()
    if not ref:
        raise DataError("reference is empty after normalization")
    return wer(ref, hyp)


def corpus_wer(pairs) -> float:
    """Aggregate WER (percent) over (ref_text, hyp_text) pairs: total
    errors over total reference words."""
    errors = 0
    ref_words = 0
    for ref_text, hyp_text in pairs:
        b = wer_strings(ref_text, hyp_text)
        errors += b.errors
        ref_words += b.ref_words
    if ref_words == 0:
        raise DataError("no reference words")
    return 100.0 * errors / ref_words


# ---------------------------------------------------------------------------
# report arithmetic (Decimal, half-up at 2 decimals)


def _dec(x) -> Decimal:
    if isinstance(x, Decimal):
        return x
    if isinstance(x, str):
        return Decimal(x)
    return Decimal(repr(float(x)))


def round2(x) -> Decimal:
    return _dec(x).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def mean_exact(values) -> Decimal:
    values = [_dec(v) for v in values]
    if not values:
        raise DataError("mean of empty sequence")
    return sum(values) / Decimal(len(values))


def rel_reduction(baseline, new) -> float:
    """Relative WER reduction in percent, rounded half-up to 2 decimals."""
    b = _dec(baseline)
    if b <= 0:
        raise ConfigError(f"baseline WER must be positive, got {baseline}")
    return float(round2((b - _dec(new)) / b * 100))


def row_averages(group_cells: dict) -> tuple[dict, Decimal]:
    """Given {group: [set WER cells...]}, return per-group displayed
    averages and the displayed overall average (mean of the unrounded
    group averages)."""
    full = {g: mean_exact(cells) for g, cells in group_cells.items()}
    display = {g: round2(v) for g, v in full.items()}
    overall = round2(mean_exact(list(full.values())))
    return display, overall


# ---------------------------------------------------------------------------
# report rendering


@dataclass
class ReportRow:
    model: str
    set_wers: dict        # set name -> float WER
    group_avgs: dict      # group name -> Decimal (displayed)
    overall: Decimal


def build_report_rows(results: dict, groups: dict) -> list[ReportRow]:
    """`results`: {model: {set_name: wer}}, `groups`: {group: [set names]}
    (insertion order is presentation order)."""
    rows = []
    for model, set_wers in results.items():
        cells = {g: [set_wers[s] for s in names] for g, names in groups.items()}
        display, overall = row_averages(cells)
        rows.append(ReportRow(model, dict(set_wers), display, overall))
    return rows


def render_report(rows: list[ReportRow], groups: dict) -> tuple[str, str]:
    """Aligned text table plus CSV, one row per model."""
    set_names = [s for names in groups.values() for s in names]
    header = ["Model"] + set_names + [f"Avg {g}" for g in groups] + ["Avg."]
    body = []
    for r in rows:
        cells = [r.model]
        cells += [f"{r.set_wers[s]:.2f}" for s in set_names]
        cells += [str(r.group_avgs[g]) for g in groups]
        cells.append(str(r.overall))
        body.append(cells)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for row in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    text = "\n".join(lines) + "\n"
    csv_lines = [",".join(header)]
    for row in body:
        csv_lines.append(",".join(row))
    return text, "\n".join(csv_lines) + "\n"
