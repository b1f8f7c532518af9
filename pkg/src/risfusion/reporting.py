"""Run summaries, comparison tables and the 2x2 ablation grid."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .errors import ValidationError
from .metrics import THRESHOLDS, MetricsReport

FULL_COLUMNS = tuple(f"P@{t:g}" for t in THRESHOLDS) + ("mIoU",)
ABLATION_COLUMNS = ("mIoU", "P@0.5")
FORMATS = ("text", "csv")
BEST_MARK = "*"


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace), first 16 hex digits."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunSummary:
    run_id: str
    config_hash: str
    final_losses: dict[str, float]
    metrics: MetricsReport
    seconds: float

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "final_losses": dict(self.final_losses),
            "metrics": self.metrics.to_dict(),
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        return cls(d["run_id"], d["config_hash"], dict(d["final_losses"]),
                   MetricsReport.from_dict(d["metrics"]), float(d["seconds"]))


def _metric(report: MetricsReport, column: str) -> float:
    if column == "mIoU":
        return report.mIoU
    return report.precision_at[float(column[2:])]


def report_table(reports: Sequence[tuple[str, MetricsReport]], columns: Sequence[str] = FULL_COLUMNS,
                 fmt: str = "text", label_header: str = "Method") -> str:
    """Percentages with two decimals; the best value of each column carries a trailing ``*``."""
    if not reports:
        raise ValidationError("report_table needs at least one report")
    if fmt not in FORMATS:
        raise ValidationError(f"unknown table format {fmt!r}; choose from {FORMATS}")
    values = [[round(100.0 * _metric(r, c), 2) for c in columns] for _, r in reports]
    best = [max(row[j] for row in values) for j in range(len(columns))]
    cells = [[f"{v:.2f}{BEST_MARK if v == best[j] else ''}" for j, v in enumerate(row)] for row in values]
    header = [label_header, *columns]
    rows = [[label, *row] for (label, _), row in zip(reports, cells)]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    widths = [max(len(r[j]) for r in [header, *rows]) for j in range(len(header))]
    lines = []
    for i, r in enumerate([header, *rows]):
        lines.append("  ".join(c.ljust(widths[0]) if j == 0 else c.rjust(widths[j]) for j, c in enumerate(r)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# -- ablation ----------------------------------------------------------------

ARMS = ((False, False), (False, True), (True, False), (True, True))  # (LangGatedFusion, joint opt)


def arm_label(lang_gated: bool, joint: bool) -> str:
    def mark(flag):
        return "on" if flag else "off"
    return f"LGF {mark(lang_gated)} / joint {mark(joint)}"


@dataclass
class AblationRow:
    lang_gated: bool
    joint: bool
    reports: list[MetricsReport] = field(default_factory=list)
    summaries: list[RunSummary] = field(default_factory=list)

    @property
    def label(self) -> str:
        return arm_label(self.lang_gated, self.joint)

    @property
    def median_miou(self) -> float:
        return float(np.median([r.mIoU for r in self.reports]))

    def median_report(self) -> MetricsReport:
        """The run whose mIoU is the (lower) median across seeds."""
        order = sorted(range(len(self.reports)), key=lambda i: self.reports[i].mIoU)
        return self.reports[order[(len(order) - 1) // 2]]


@dataclass
class AblationResult:
    rows: list[AblationRow]

    def table(self, fmt: str = "text", columns: Sequence[str] = ABLATION_COLUMNS) -> str:
        return report_table([(r.label, r.median_report()) for r in self.rows], columns, fmt, label_header="Arm")

    def row(self, lang_gated: bool, joint: bool) -> AblationRow:
        return next(r for r in self.rows if r.lang_gated == lang_gated and r.joint == joint)

    def ordering_holds(self) -> bool:
        full = self.row(True, True).median_miou
        neither = self.row(False, False).median_miou
        singles = [self.row(True, False).median_miou, self.row(False, True).median_miou]
        return all(full >= s >= neither for s in singles)


def ablation_run(config, train_set: Dataset, test_set: Dataset, seeds: Sequence[int] = (0,),
                 progress: Callable[[str], None] | None = None) -> AblationResult:
    """Train and evaluate the 2x2 grid {LangGatedFusion on/off} x {joint optimisation on/off}.

    ``config`` is a :class:`~risfusion.train.TrainConfig`; arms differ only in
    ``use_text`` and ``detach_fusion`` (plus the seed).
    """
    from .train import evaluate, train

    rows = []
    for lang_gated, joint in ARMS:
        row = AblationRow(lang_gated, joint)
        for seed in seeds:
            cfg = replace(config, use_text=lang_gated, detach_fusion=not joint, seed=seed)
            result = train(cfg, train_set)
            report = evaluate(result.model, test_set)
            run_id = f"{'lgf' if lang_gated else 'add'}-{'joint' if joint else 'detached'}-s{seed}"
            row.reports.append(report)
            row.summaries.append(RunSummary(run_id, config_hash(cfg.to_dict()), result.final_losses(),
                                            report, result.seconds))
            if progress is not None:
                progress(f"{run_id}: mIoU={report.mIoU:.4f} ({result.seconds:.1f}s)")
        rows.append(row)
    return AblationResult(rows)
