"""Score-drop robustness reports and human-correlation statistics.

The drop report compares mean scores of perturbed captions against the
mean scores of their originals, per (language, kind), as percentage
change; the per-language "perturbed average" averages the per-kind means.
Percentages are displayed at two decimals, stored at full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, MissingOriginal, ZeroOriginalMean
from .metric import ORIGINAL, ScoreRow

PERTURBED_AVERAGE = "perturbed_average"


@dataclass(frozen=True)
class DropCell:
    mean_original: float
    mean_perturbed: float
    pct_change: float  # 100 * (perturbed - original) / original


@dataclass
class DropReport:
    cells: dict[tuple[str, str], DropCell]  # (lang, kind) -> cell
    averages: dict[str, DropCell]           # lang -> average over kinds

    def to_json_dict(self) -> dict:
        per_kind: dict = {}
        for (lang, kind), cell in sorted(self.cells.items()):
            per_kind.setdefault(lang, {})[kind] = {
                "mean_original": cell.mean_original,
                "mean_perturbed": cell.mean_perturbed,
                "pct_change": cell.pct_change,
            }
        return {
            "per_kind": per_kind,
            PERTURBED_AVERAGE: {
                lang: {
                    "mean_original": cell.mean_original,
                    "mean_perturbed": cell.mean_perturbed,
                    "pct_change": cell.pct_change,
                }
                for lang, cell in sorted(self.averages.items())
            },
        }


def _pct(mean_orig: float, mean_pert: float) -> float:
    if mean_orig == 0.0:
        raise ZeroOriginalMean("original mean score is zero; percentage change undefined")
    return 100.0 * (mean_pert - mean_orig) / mean_orig


def drop_report(original: list[ScoreRow], perturbed: list[ScoreRow]) -> DropReport:
    """Per-(lang, kind) mean scores and percentage changes.

    Original means are taken over the original rows whose ids appear in
    the perturbed group (with multiplicity), so partial perturbation
    coverage still compares like with like.
    """
    orig_by_id = {r.id: r for r in original if r.kind == ORIGINAL}
    groups: dict[tuple[str, str], list[ScoreRow]] = {}
    for row in perturbed:
        if row.id not in orig_by_id:
            raise MissingOriginal(f"perturbed row {row.id!r} has no original score row")
        groups.setdefault((row.lang, row.kind), []).append(row)

    cells = {}
    for key in sorted(groups):
        rows = groups[key]
        mean_pert = sum(r.score for r in rows) / len(rows)
        mean_orig = sum(orig_by_id[r.id].score for r in rows) / len(rows)
        cells[key] = DropCell(mean_orig, mean_pert, _pct(mean_orig, mean_pert))

    averages = {}
    langs = sorted({lang for lang, _ in cells})
    for lang in langs:
        lang_cells = [cells[k] for k in sorted(cells) if k[0] == lang]
        avg_orig = sum(c.mean_original for c in lang_cells) / len(lang_cells)
        avg_pert = sum(c.mean_perturbed for c in lang_cells) / len(lang_cells)
        averages[lang] = DropCell(avg_orig, avg_pert, _pct(avg_orig, avg_pert))
    return DropReport(cells=cells, averages=averages)


def format_drop_table(report: DropReport) -> str:
    """Aligned plain-text table: one block per language, means with
    percentage changes underneath."""
    out = []
    langs = sorted(report.averages)
    for lang in langs:
        kinds = [k for (lg, k) in sorted(report.cells) if lg == lang]
        cells = [report.cells[(lang, k)] for k in kinds]
        avg = report.averages[lang]
        headers = ["original"] + kinds + ["perturbed average"]
        means = [f"{cells[0].mean_original:.4f}" if cells else "-"]
        means += [f"{c.mean_perturbed:.4f}" for c in cells]
        means += [f"{avg.mean_perturbed:.4f}"]
        pcts = [""] + [f"({c.pct_change:.2f}%)" for c in cells] + [f"({avg.pct_change:.2f}%)"]
        widths = [max(len(h), len(m), len(p)) for h, m, p in zip(headers, means, pcts)]
        out.append(f"lang: {lang}")
        out.append("  ".join(h.rjust(w) for h, w in zip(headers, widths)))
        out.append("  ".join(m.rjust(w) for m, w in zip(means, widths)))
        out.append("  ".join(p.rjust(w) for p, w in zip(pcts, widths)))
        out.append("")
    return "\n".join(out)


@dataclass
class RatingPairs:
    """Aligned metric scores x and human ratings y."""

    x: list[float]
    y: list[float]

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DegenerateInput(f"length mismatch: {len(self.x)} vs {len(self.y)}")
        if len(self.x) < 2:
            raise DegenerateInput("need at least 2 pairs")
        if not all(math.isfinite(v) for v in self.x + self.y):
            raise DegenerateInput("ratings must be finite")


def kendall_tau_c(pairs: RatingPairs) -> float:
    """Stuart's tau-c: 2m(C - D) / (n^2 (m - 1)).

    C and D count strictly concordant/discordant pairs over i < j; ties
    in either coordinate count as neither. m is the smaller number of
    distinct values; constant lists are degenerate.
    """
    x = np.asarray(pairs.x, dtype=np.float64)
    y = np.asarray(pairs.y, dtype=np.float64)
    n = len(x)
    m = min(len(set(pairs.x)), len(set(pairs.y)))
    if m < 2:
        raise DegenerateInput("tau-c undefined for a constant list")
    concordant = 0
    discordant = 0
    for i in range(n - 1):
        prod = np.sign(x[i + 1 :] - x[i]) * np.sign(y[i + 1 :] - y[i])
        concordant += int(np.count_nonzero(prod > 0))
        discordant += int(np.count_nonzero(prod < 0))
    return 2.0 * m * (concordant - discordant) / (n * n * (m - 1))


def pearson(pairs: RatingPairs) -> float:
    """Sample linear correlation coefficient."""
    x = np.asarray(pairs.x, dtype=np.float64)
    y = np.asarray(pairs.y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("pearson undefined for a constant list")
    return float(dx @ dy) / math.sqrt(sxx * syy)
