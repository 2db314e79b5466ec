"""Budget-curve aggregation, matched-budget label savings, ablation driver.

Curves carry metrics in percentage points on the [0, 100] scale. Matched
budgets compare on the discrete budget grid only (no interpolation): for a
reference budget b' on the comparison curve, b_J and b_T are the smallest
budgets at which each curve reaches within the tolerance of the reference
performance, and the saving rate is 1 - b_J / b_T.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import Corpus, CsiWindow
from .probe import FrozenEncoder, ProbeRecord, run_probe
from .trainer import PretrainConfig, pretrain

__all__ = [
    "BudgetCurve",
    "MatchReport",
    "GainSummary",
    "AblationRow",
    "curves_from_records",
    "matched_budget",
    "best_saving",
    "gain_summary",
    "ablation_matrix",
    "write_curves_csv",
    "write_matches_csv",
    "write_ablation_csv",
    "write_gnuplot_curves",
]

DEFAULT_MATCH_TOLERANCE_PP = 5.0


@dataclass(frozen=True)
class BudgetCurve:
    """Ordered (budget, accuracy, f1) triples for one method on one task."""

    method: str
    task: str
    points: tuple[tuple[int, float, float], ...]

    def __post_init__(self) -> None:
        budgets = [p[0] for p in self.points]
        if len(budgets) == 0:
            raise ValueError("curve needs at least one point")
        if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
            raise ValueError(f"budgets must be strictly increasing, got {budgets}")

    @property
    def budgets(self) -> tuple[int, ...]:
        return tuple(p[0] for p in self.points)

    def metric_at(self, budget: int, metric: str = "accuracy") -> float:
        col = {"accuracy": 1, "f1": 2}[metric]
        for p in self.points:
            if p[0] == budget:
                return p[col]
        raise KeyError(f"budget {budget} not on curve {self.method}/{self.task}")


def curves_from_records(
    records: Sequence[ProbeRecord], method_label: Optional[str] = None
) -> list[BudgetCurve]:
    """Group records by (task, head); medians over seeds at each budget."""
    grouped: dict[tuple[str, str], dict[int, list[ProbeRecord]]] = {}
    for r in records:
        grouped.setdefault((r.task, r.head), {}).setdefault(r.budget, []).append(r)
    curves = []
    for (task, head), by_budget in sorted(grouped.items()):
        points = []
        for budget in sorted(by_budget):
            accs = [r.accuracy for r in by_budget[budget]]
            f1s = [r.f1 for r in by_budget[budget]]
            points.append((budget, 100.0 * float(np.median(accs)), 100.0 * float(np.median(f1s))))
        method = f"{method_label}-{head}" if method_label else head
        curves.append(BudgetCurve(method=method, task=task, points=tuple(points)))
    return curves


# ---------------------------------------------------------------------------
# Matched budgets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchReport:
    """Smallest budget pair reaching the reference performance within tolerance."""

    reference_budget: Optional[int]
    budget_j: Optional[int]
    budget_t: Optional[int]
    saving: Optional[float]  # 1 - b_J/b_T, fraction
    tolerance_pp: float = DEFAULT_MATCH_TOLERANCE_PP

    @property
    def matched(self) -> bool:
        return self.saving is not None

    @property
    def saving_pct(self) -> Optional[float]:
        return None if self.saving is None else 100.0 * self.saving


def matched_budget(
    curve_j: BudgetCurve,
    curve_t: BudgetCurve,
    reference_budget: int,
    tolerance_pp: float = DEFAULT_MATCH_TOLERANCE_PP,
    metric: str = "accuracy",
) -> MatchReport:
    """Sliding-reference match at one comparison-curve budget."""
    threshold = curve_t.metric_at(reference_budget, metric) - tolerance_pp
    b_j = next(
        (b for b in curve_j.budgets if curve_j.metric_at(b, metric) >= threshold), None
    )
    b_t = next(
        (b for b in curve_t.budgets if curve_t.metric_at(b, metric) >= threshold), None
    )
    if b_j is None or b_t is None:
        return MatchReport(reference_budget, b_j, b_t, None, tolerance_pp)
    return MatchReport(reference_budget, b_j, b_t, 1.0 - b_j / b_t, tolerance_pp)


def best_saving(
    curve_j: BudgetCurve,
    curve_t: BudgetCurve,
    tolerance_pp: float = DEFAULT_MATCH_TOLERANCE_PP,
    metric: str = "accuracy",
) -> MatchReport:
    """Matched pair with the largest strictly positive saving, if any."""
    best: Optional[MatchReport] = None
    for b_ref in curve_t.budgets:
        report = matched_budget(curve_j, curve_t, b_ref, tolerance_pp, metric)
        if report.saving is not None and report.saving > 0:
            if best is None or report.saving > best.saving:
                best = report
    if best is None:
        return MatchReport(None, None, None, None, tolerance_pp)
    return best


@dataclass(frozen=True)
class GainSummary:
    mean_acc_pp: float
    max_acc_pp: float
    mean_f1_pp: float
    max_f1_pp: float
    budgets: tuple[int, ...]


def gain_summary(curve_j: BudgetCurve, curve_t: BudgetCurve) -> GainSummary:
    """Pointwise gains of curve_j over curve_t on their shared budgets."""
    shared = sorted(set(curve_j.budgets) & set(curve_t.budgets))
    if not shared:
        raise ValueError("curves share no budgets")
    d_acc = [curve_j.metric_at(b) - curve_t.metric_at(b) for b in shared]
    d_f1 = [curve_j.metric_at(b, "f1") - curve_t.metric_at(b, "f1") for b in shared]
    return GainSummary(
        mean_acc_pp=float(np.mean(d_acc)),
        max_acc_pp=float(np.max(d_acc)),
        mean_f1_pp=float(np.mean(d_f1)),
        max_f1_pp=float(np.max(d_f1)),
        budgets=tuple(shared),
    )


# ---------------------------------------------------------------------------
# Masking-strategy ablation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    strategy: str
    task: str
    accuracy: float
    f1: float


def ablation_matrix(
    strategies: Sequence[str],
    unlabeled: Sequence[CsiWindow],
    tasks: Mapping[str, tuple[Corpus, Corpus, Corpus]],
    config: PretrainConfig,
    budget: int,
    probe_seed: int = 0,
    head: str = "mlp",
    threads: int = 1,
) -> list[AblationRow]:
    """Pretrain once per strategy on one shared corpus, probe every task.

    The pretraining seed and corpus are identical across strategies so rows
    differ only through the masking policy.
    """
    rows: list[AblationRow] = []
    for strategy in strategies:
        state, _ = pretrain(unlabeled, replace(config, strategy=strategy), threads=threads)
        first = unlabeled[0]
        patch_cfg = config.patch_config(first.subcarriers, first.time_steps)
        frozen = FrozenEncoder.from_state(state, patch_cfg)
        for task_name, (train, val, test) in tasks.items():
            record = run_probe(
                frozen, train, val, test, head, budget, probe_seed, task=task_name
            )
            rows.append(AblationRow(strategy, task_name, record.accuracy, record.f1))
    return rows


# ---------------------------------------------------------------------------
# CSV / gnuplot emitters
# ---------------------------------------------------------------------------


def write_curves_csv(curves: Sequence[BudgetCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "task", "budget", "accuracy_pct", "f1_pct"])
        for curve in curves:
            for budget, acc, f1 in curve.points:
                writer.writerow([curve.method, curve.task, budget, f"{acc:.4f}", f"{f1:.4f}"])


def write_matches_csv(matches: Sequence[tuple[str, str, str, MatchReport]], path) -> None:
    """Rows of (task, method_j, method_t, report)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["task", "method_j", "method_t", "reference_budget", "budget_j", "budget_t", "saving_pct"]
        )
        for task, mj, mt, rep in matches:
            writer.writerow(
                [
                    task,
                    mj,
                    mt,
                    rep.reference_budget if rep.matched else "",
                    rep.budget_j if rep.matched else "",
                    rep.budget_t if rep.matched else "",
                    f"{rep.saving_pct:.1f}" if rep.matched else "none",
                ]
            )


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "task", "accuracy", "f1"])
        for r in rows:
            writer.writerow([r.strategy, r.task, f"{r.accuracy:.6f}", f"{r.f1:.6f}"])


def write_gnuplot_curves(curves: Sequence[BudgetCurve], out_dir) -> list[Path]:
    """One whitespace-separated .dat file per curve: budget accuracy f1."""
    out = []
    for curve in curves:
        safe = f"{curve.method}_{curve.task}".replace("/", "-").replace(" ", "_")
        path = Path(out_dir) / f"curve_{safe}.dat"
        lines = ["# budget accuracy_pct f1_pct"]
        for budget, acc, f1 in curve.points:
            lines.append(f"{budget} {acc:.4f} {f1:.4f}")
        path.write_text("\n".join(lines) + "\n")
        out.append(path)
    return out
