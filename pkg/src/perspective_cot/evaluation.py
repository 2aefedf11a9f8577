"""Scoring, seed aggregation, relative improvements and ablation tables.

All reported percentages are rounded half-up to four decimals. Arithmetic is
done in :class:`decimal.Decimal` so that printed values like ``87.0046``
round-trip exactly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .corpus import Label
from .cot_dataset import ParseError, parse_bare_label, parse_tagged_output

FOUR_PLACES = Decimal("0.0001")
MEAN_LABEL = "평균"


def _dec(x: float | int | str | Decimal) -> Decimal:
    return x if isinstance(x, Decimal) else Decimal(str(x))


def round4(x: float | int | str | Decimal) -> float:
    return float(_dec(x).quantize(FOUR_PLACES, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class PredictionRecord:
    instance_id: str
    predicted: Optional[Label]
    gold: Optional[Label]
    raw_output: str
    parsed_think: Optional[str] = None
    unparseable_reason: Optional[str] = None

    @property
    def unparseable(self) -> bool:
        return self.predicted is None

    @property
    def correct(self) -> bool:
        return self.predicted is not None and self.predicted == self.gold


def make_prediction(instance_id: str, raw_output: str, gold: Optional[Label], tagged: bool) -> PredictionRecord:
    """Parse a raw model output; parse failures become an unparseable prediction."""
    try:
        if tagged:
            out = parse_tagged_output(raw_output)
            return PredictionRecord(instance_id, out.answer_label, gold, raw_output, out.think_text)
        return PredictionRecord(instance_id, parse_bare_label(raw_output), gold, raw_output)
    except ParseError as e:
        return PredictionRecord(instance_id, None, gold, raw_output, unparseable_reason=f"{type(e).__name__}: {e}")


def accuracy(predictions: Sequence[PredictionRecord]) -> float:
    """Percent correct over all predictions; unparseable ones count as wrong."""
    if not predictions:
        raise ValueError("no predictions to score")
    missing = [p.instance_id for p in predictions if p.gold is None]
    if missing:
        raise ValueError(f"{len(missing)} predictions lack a gold label (first: {missing[0]})")
    correct = sum(p.correct for p in predictions)
    return round4(Decimal(100 * correct) / Decimal(len(predictions)))


@dataclass(frozen=True)
class SeedResult:
    seed: int
    accuracy_pct: float

    def __post_init__(self):
        if not 0 <= self.accuracy_pct <= 100:
            raise ValueError(f"accuracy {self.accuracy_pct} outside [0, 100]")


def aggregate_seeds(results: Sequence[SeedResult | float]) -> float:
    """Rounded arithmetic mean of per-seed accuracies."""
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    values = [_dec(r.accuracy_pct if isinstance(r, SeedResult) else r) for r in results]
    return round4(sum(values, Decimal(0)) / len(values))


def rel_improvement(a: float, b: float) -> float:
    """Percent change of ``a`` over baseline ``b``."""
    b_dec = _dec(b)
    if b_dec <= 0:
        raise ValueError("baseline accuracy must be positive")
    return round4(Decimal(100) * (_dec(a) - b_dec) / b_dec)


def accuracy_grid(n: int) -> dict[float, int]:
    """Every accuracy attainable on ``n`` instances, mapped to its correct count."""
    return {round4(Decimal(100 * k) / Decimal(n)): k for k in range(n + 1)}


@dataclass
class EvalReport:
    method: str
    seed_results: list[SeedResult]
    mean_pct: float
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seeds": [{"seed": r.seed, "accuracy_pct": r.accuracy_pct} for r in self.seed_results],
            "mean_pct": self.mean_pct,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["method"], [SeedResult(s["seed"], s["accuracy_pct"]) for s in d["seeds"]], d["mean_pct"], d.get("counts", {}))


def evaluate_seeds(method: str, per_seed: Mapping[int, Sequence[PredictionRecord]]) -> EvalReport:
    """Score each seed's labeled predictions and aggregate.

    Predictions without a gold label are skipped (they are inference-only).
    """
    results = []
    counts = {"total": 0, "correct": 0, "unparseable": 0}
    for seed, preds in per_seed.items():
        labeled = [p for p in preds if p.gold is not None]
        results.append(SeedResult(seed, accuracy(labeled)))
        counts["total"] += len(labeled)
        counts["correct"] += sum(p.correct for p in labeled)
        counts["unparseable"] += sum(p.unparseable for p in labeled)
    return EvalReport(method, results, aggregate_seeds(results), counts)


@dataclass
class AblationMatrix:
    seeds: list[int]
    stages: list[int]
    cells: dict[int, list[float]]  # stage -> accuracy per seed (seed order)
    means: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "stages": self.stages,
            "cells": {str(k): v for k, v in self.cells.items()},
            "means": {str(k): v for k, v in self.means.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationMatrix":
        return cls(
            d["seeds"],
            d["stages"],
            {int(k): v for k, v in d["cells"].items()},
            {int(k): v for k, v in d["means"].items()},
        )


def ablation_report(runs: Mapping[int, Sequence[SeedResult]]) -> AblationMatrix:
    if not runs:
        raise ValueError("no stages to report")
    stages = sorted(runs)
    seeds = [r.seed for r in runs[stages[0]]]
    cells, means = {}, {}
    for k in stages:
        by_seed = {r.seed: r.accuracy_pct for r in runs[k]}
        if sorted(by_seed) != sorted(seeds) or len(runs[k]) != len(seeds):
            raise ValueError(f"stage {k} seeds {sorted(by_seed)} differ from {sorted(seeds)}")
        cells[k] = [by_seed[s] for s in seeds]
        means[k] = aggregate_seeds(cells[k])
    return AblationMatrix(seeds, stages, cells, means)


# ---------------------------------------------------------------------------
# report rendering


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _tables(obj) -> tuple[list[str], list[list[str]]]:
    if isinstance(obj, AblationMatrix):
        header = ["seed"] + [f"stage{k}" for k in obj.stages]
        rows = [[str(s)] + [_fmt(obj.cells[k][i]) for k in obj.stages] for i, s in enumerate(obj.seeds)]
        rows.append([MEAN_LABEL] + [_fmt(obj.means[k]) for k in obj.stages])
        return header, rows
    reports = [obj] if isinstance(obj, EvalReport) else list(obj)
    if not reports:
        raise ValueError("nothing to report")
    seeds = [r.seed for r in reports[0].seed_results]
    for rep in reports[1:]:
        if [r.seed for r in rep.seed_results] != seeds:
            raise ValueError("reports must share the same seed list")
    header = ["seed"] + [r.method for r in reports]
    rows = [
        [str(s)] + [_fmt(rep.seed_results[i].accuracy_pct) for rep in reports] for i, s in enumerate(seeds)
    ]
    rows.append([MEAN_LABEL] + [_fmt(rep.mean_pct) for rep in reports])
    return header, rows


def emit_report(obj: EvalReport | Sequence[EvalReport] | AblationMatrix, fmt: str = "markdown") -> str:
    """Render per-seed rows plus a mean row, as markdown or csv."""
    header, rows = _tables(obj)
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    raise ValueError(f"unsupported report format {fmt!r}")


def write_report(obj, path: str | Path, fmt: str = "markdown") -> None:
    Path(path).write_text(emit_report(obj, fmt), encoding="utf-8")


# ---------------------------------------------------------------------------
# predictions files


def write_predictions(preds: Iterable[PredictionRecord], path: str | Path, **extra) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for p in preds:
            rec = {"instance_id": p.instance_id, "raw_output": p.raw_output, "gold": p.gold.value if p.gold else None}
            rec.update(extra)
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


class PredictionFileError(ValueError):
    pass


def read_prediction_rows(path: str | Path) -> list[dict]:
    """Rows ``{instance_id, raw_output, gold?, seed?, stage?}``; raises on structural errors."""
    rows = []
    with Path(path).open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise PredictionFileError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(row, dict) or not isinstance(row.get("instance_id"), str) or not isinstance(
                row.get("raw_output"), str
            ):
                raise PredictionFileError(f"{path}:{lineno}: need string fields instance_id and raw_output")
            gold = row.get("gold")
            if gold is not None and gold not in (l.value for l in Label):
                raise PredictionFileError(f"{path}:{lineno}: unknown gold label {gold!r}")
            rows.append(row)
    return rows
