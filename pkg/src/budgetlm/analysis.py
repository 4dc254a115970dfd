"""Noise and sensitivity methodology: seed-rerun statistics, the
validation/test gap, hyperparameter neighbourhoods around the best trial,
grid-search cost arithmetic and plot-ready result tables.

Floating-point scheduling noise is zero here by construction (training is
single-threaded and deterministic), so seed reruns and the valid/test gap
are the live noise sources this artifact reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .evaluator import nll_to_bpc, nll_to_ppl
from .tuner import HyperparameterSpace, Trial


@dataclass
class RerunRecord:
    seed: int
    valid_nll: float
    test_nll: float
    diverged: bool = False


@dataclass
class SeedRerunStats:
    n_used: int
    n_excluded: int
    mean_valid: float
    std_valid: float
    mean_test: float
    std_test: float
    gaps: tuple[float, ...]
    mean_gap: float
    std_gap: float
    tuner_best_valid: float | None = None
    z_score: float | None = None


def rerun_statistics(records: Sequence[RerunRecord],
                     tuner_best_valid: float | None = None) -> SeedRerunStats:
    """Mean/sample-stddev of rerun scores, per-seed valid-test gaps, and
    the z-score of a tuner best against the rerun distribution."""
    usable = [r for r in records if not r.diverged
              and math.isfinite(r.valid_nll) and math.isfinite(r.test_nll)]
    excluded = len(records) - len(usable)
    if len(usable) < 2:
        raise ContractError("need at least 2 non-diverged reruns for statistics")
    valid = np.array([r.valid_nll for r in usable])
    test = np.array([r.test_nll for r in usable])
    gaps = valid - test
    std_valid = float(np.std(valid, ddof=1))
    z = None
    if tuner_best_valid is not None:
        if std_valid == 0:
            raise ContractError("z-score undefined: rerun stddev is zero")
        z = (tuner_best_valid - float(np.mean(valid))) / std_valid
    return SeedRerunStats(
        n_used=len(usable),
        n_excluded=excluded,
        mean_valid=float(np.mean(valid)),
        std_valid=std_valid,
        mean_test=float(np.mean(test)),
        std_test=float(np.std(test, ddof=1)),
        gaps=tuple(float(g) for g in gaps),
        mean_gap=float(np.mean(gaps)),
        std_gap=float(np.std(gaps, ddof=1)),
        tuner_best_valid=tuner_best_valid,
        z_score=z,
    )


def seed_rerun_stats(train_fn: Callable[[int], RerunRecord], seeds: Sequence[int],
                     tuner_best_valid: float | None = None
                     ) -> tuple[list[RerunRecord], SeedRerunStats]:
    """Retrain once per seed and aggregate; diverged reruns are excluded
    from the statistics but kept (flagged) in the record list."""
    if len(seeds) < 2:
        raise ContractError("seed reruns need at least 2 seeds")
    records = []
    for seed in seeds:
        try:
            records.append(train_fn(seed))
        except Exception:
            records.append(RerunRecord(seed=seed, valid_nll=math.nan,
                                       test_nll=math.nan, diverged=True))
    return records, rerun_statistics(records, tuner_best_valid)


def stats_to_kv(stats: SeedRerunStats, level: str = "word") -> str:
    render = nll_to_bpc if level == "char" else nll_to_ppl
    lines = [
        f"n_used = {stats.n_used}",
        f"n_excluded = {stats.n_excluded}",
        f"mean_valid_nll = {stats.mean_valid!r}",
        f"std_valid_nll = {stats.std_valid!r}",
        f"mean_test_nll = {stats.mean_test!r}",
        f"std_test_nll = {stats.std_test!r}",
        f"mean_valid_rendered = {render(stats.mean_valid)!r}",
        f"mean_test_rendered = {render(stats.mean_test)!r}",
        f"mean_gap = {stats.mean_gap!r}",
        f"std_gap = {stats.std_gap!r}",
    ]
    if stats.z_score is not None:
        lines.append(f"tuner_best_valid = {stats.tuner_best_valid!r}")
        lines.append(f"z_score = {stats.z_score!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sensitivity neighbourhoods
# ---------------------------------------------------------------------------

@dataclass
class SensitivityResult:
    best: Trial
    kept: list[Trial]
    series: dict[str, list[tuple[float, float]]]  # name -> (value, objective)
    fraction_within_margin: float | None = None
    margin: float | None = None


def sensitivity_neighborhood(space: HyperparameterSpace, trials: Sequence[Trial],
                             window: float, margin: float | None = None,
                             best: Trial | None = None) -> SensitivityResult:
    """Trials whose every unit-cube coordinate lies within a width-`window`
    interval centred on the best trial's coordinate, plus per-dimension
    scatter series. Near the cube boundary the interval shifts inward so
    its width stays `window`; window=1 therefore keeps the whole ledger."""
    if not 0.0 < window <= 1.0:
        raise ContractError("window must lie in (0, 1]")
    completed = [t for t in trials if t.status == "complete" and t.objective is not None]
    if not completed:
        raise ContractError("ledger has no completed trials")
    if best is None:
        best = min(completed, key=lambda t: t.objective)
    center = np.asarray(best.unit, dtype=np.float64)
    lo = np.clip(center - window / 2.0, 0.0, 1.0 - window)
    hi = lo + window
    kept = [t for t in completed
            if np.all((np.asarray(t.unit) >= lo - 1e-12) & (np.asarray(t.unit) <= hi + 1e-12))]
    series = {
        name: [(t.values[name], t.objective) for t in kept]
        for name in space.names
    }
    fraction = None
    if margin is not None and kept:
        within = sum(1 for t in kept if t.objective <= best.objective + margin)
        fraction = within / len(kept)
    return SensitivityResult(best=best, kept=kept, series=series,
                             fraction_within_margin=fraction, margin=margin)


def write_series_tsv(result: SensitivityResult, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rows in result.series.items():
        path = out_dir / f"sensitivity_{name}.tsv"
        lines = ["value\tvalid_nll"] + [f"{v!r}\t{o!r}" for v, o in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    return written


def grid_cost(values_per_dim: int, dims: int) -> int:
    """Trials a full grid would need: values_per_dim ** dims (exact int)."""
    if values_per_dim < 1 or dims < 1:
        raise ContractError("values_per_dim and dims must be >= 1")
    return values_per_dim ** dims


# ---------------------------------------------------------------------------
# result tables
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    model: str
    size: int
    depth: int
    level: str
    valid_nll: float
    test_nll: float | None
    source: str
    best_in_group: bool = False


def read_kv(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def collect_rows(root: str | Path) -> list[ReportRow]:
    root = Path(root)
    rows = []
    for path in sorted(root.rglob("result.kv")):
        kv = read_kv(path)
        try:
            rows.append(ReportRow(
                model=kv["model"],
                size=int(kv["budget"]),
                depth=int(kv["depth"]),
                level=kv["level"],
                valid_nll=float(kv["valid_nll"]),
                test_nll=float(kv["test_nll"]) if "test_nll" in kv else None,
                source=str(path.parent.relative_to(root)),
            ))
        except (KeyError, ValueError):
            continue  # row skipped; reported by render()
    return rows


def render_report(rows: Sequence[ReportRow]) -> tuple[str, str]:
    """Human-readable table plus a TSV twin; best valid per budget group
    is starred. Pure function of the rows."""
    rows = list(rows)
    by_size: dict[int, list[ReportRow]] = {}
    for row in rows:
        by_size.setdefault(row.size, []).append(row)
    for group in by_size.values():
        best = min(group, key=lambda r: r.valid_nll)
        best.best_in_group = True

    def rendered(nll: float | None, level: str) -> str:
        if nll is None or not math.isfinite(nll):
            return "-"
        return f"{nll_to_bpc(nll):.3f}" if level == "char" else f"{nll_to_ppl(nll):.1f}"

    header = f"{'Model':<10} {'Size':>9} {'Depth':>5} {'Valid':>8} {'Test':>8}  Source"
    text_lines = [header, "-" * len(header)]
    tsv_lines = ["model\tsize\tdepth\tlevel\tvalid\ttest\tbest\tsource"]
    for row in sorted(rows, key=lambda r: (r.size, r.valid_nll, r.source)):
        star = "*" if row.best_in_group else " "
        valid_r = rendered(row.valid_nll, row.level)
        test_r = rendered(row.test_nll, row.level)
        text_lines.append(f"{row.model:<10} {row.size:>9} {row.depth:>5} "
                          f"{valid_r:>8} {test_r:>8} {star} {row.source}")
        tsv_lines.append("\t".join([
            row.model, str(row.size), str(row.depth), row.level,
            valid_r, test_r, "1" if row.best_in_group else "0", row.source]))
    if not rows:
        text_lines.append("(no result records found)")
    return "\n".join(text_lines) + "\n", "\n".join(tsv_lines) + "\n"
