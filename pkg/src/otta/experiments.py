"""Grid evaluation over variants, epsilons, template counts, and severities.

Each grid cell fixes (variant, epsilon, template_count, severity) and runs the
full stream once per seed with a freshly reset encoder state. Seeds are
aggregated into mean and sample standard deviation. A cell whose run raises a
structured engine error is recorded with an error marker instead of numbers;
the rest of the grid still completes. Wall times are recorded for reporting
convenience but never steer anything, and they stay out of the default
reports so identical runs produce identical bytes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import adapt, data, prototypes
from .errors import InvalidConfig, OttaError

_CSV_COLUMNS = (
    "variant",
    "epsilon",
    "template_count",
    "severity",
    "n_seeds",
    "accuracy_mean",
    "accuracy_std",
    "collapse",
    "error",
)


@dataclass(frozen=True)
class ExperimentGrid:
    """Cartesian product of settings over one synthetic scenario family."""

    variants: tuple[str, ...]
    epsilons: tuple[float, ...]
    template_counts: tuple[int, ...]
    severities: tuple[float, ...]
    seeds: tuple[int, ...]
    scenario: data.SyntheticShiftSpec

    def __post_init__(self):
        for name in ("variants", "epsilons", "template_counts", "severities", "seeds"):
            if len(getattr(self, name)) == 0:
                raise InvalidConfig(f"grid field {name} must be non-empty")
        for v in self.variants:
            if v not in adapt.VARIANTS:
                raise InvalidConfig(f"unknown variant {v!r}")

    @property
    def size(self) -> int:
        """Number of cells (seeds aggregate within a cell)."""
        return (
            len(self.variants)
            * len(self.epsilons)
            * len(self.template_counts)
            * len(self.severities)
        )


@dataclass(frozen=True)
class ResultRow:
    """One grid cell, seeds aggregated."""

    variant: str
    epsilon: float
    template_count: int
    severity: float
    n_seeds: int
    accuracy_mean: float
    accuracy_std: float
    collapse: float
    wall_time_mean: float
    per_seed_accuracies: tuple[float, ...]
    error: str | None = None


def _run_cell(
    variant: str,
    epsilon: float,
    template_count: int,
    severity: float,
    seeds: tuple[int, ...],
    scenario: data.SyntheticShiftSpec,
    cfg: adapt.AdaptConfig,
    epochs: int,
) -> ResultRow:
    accuracies = []
    collapses = []
    wall_times = []
    try:
        for seed in seeds:
            spec = replace(scenario, severity=severity, seed=seed)
            scen = data.generate_synthetic(spec, batch_size=cfg.batch_size)
            bank = prototypes.subset_bank(scen.bank, template_count)
            run_cfg = replace(cfg, variant=variant, epsilon=epsilon, seed=seed)
            state = adapt.fresh_state(scen.encoder)
            # Adaptation is cumulative across epochs; the reported numbers
            # are the final epoch's, so stateless variants are unaffected.
            wall = 0.0
            for _ in range(epochs):
                stream = adapt.run_stream(state, bank, scen.batches, run_cfg)
                state = stream.final_state
                wall += stream.wall_time
            accuracies.append(stream.accuracy)
            collapses.append(stream.collapse_metric)
            wall_times.append(wall)
    except OttaError as err:
        return ResultRow(
            variant=variant,
            epsilon=epsilon,
            template_count=template_count,
            severity=severity,
            n_seeds=len(seeds),
            accuracy_mean=float("nan"),
            accuracy_std=float("nan"),
            collapse=float("nan"),
            wall_time_mean=float("nan"),
            per_seed_accuracies=(),
            error=type(err).__name__,
        )
    acc = np.asarray(accuracies)
    std = float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0
    return ResultRow(
        variant=variant,
        epsilon=epsilon,
        template_count=template_count,
        severity=severity,
        n_seeds=len(seeds),
        accuracy_mean=float(acc.mean()),
        accuracy_std=std,
        collapse=float(np.mean(collapses)),
        wall_time_mean=float(np.mean(wall_times)),
        per_seed_accuracies=tuple(float(a) for a in acc),
        error=None,
    )


def _cells(grid: ExperimentGrid, cfg: adapt.AdaptConfig, epochs: int):
    for variant in grid.variants:
        for epsilon in grid.epsilons:
            for template_count in grid.template_counts:
                for severity in grid.severities:
                    yield (
                        variant,
                        epsilon,
                        template_count,
                        severity,
                        grid.seeds,
                        grid.scenario,
                        cfg,
                        epochs,
                    )


def run_grid(
    grid: ExperimentGrid,
    cfg: adapt.AdaptConfig | None = None,
    jobs: int = 1,
    epochs: int = 1,
) -> list[ResultRow]:
    """Evaluate every cell; rows come back in grid (Cartesian) order.

    epochs > 1 repeats the stream with cumulative adaptation and reports
    final-epoch numbers; the default is a single online pass.
    """
    if cfg is None:
        cfg = adapt.AdaptConfig()
    if epochs < 1:
        raise InvalidConfig(f"epochs must be >= 1, got {epochs}")
    cells = list(_cells(grid, cfg, epochs))
    if jobs <= 1:
        return [_run_cell(*cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, *zip(*cells)))


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    if isinstance(x, float):
        return format(x, ".6f")
    return str(x)


def _row_values(row: ResultRow, include_timing: bool) -> list[str]:
    values = [
        row.variant,
        _fmt(row.epsilon),
        str(row.template_count),
        _fmt(row.severity),
        str(row.n_seeds),
        _fmt(row.accuracy_mean),
        _fmt(row.accuracy_std),
        _fmt(row.collapse),
        row.error or "",
    ]
    if include_timing:
        values.append(_fmt(row.wall_time_mean))
    return values


def render_report(rows, include_timing: bool = False) -> tuple[str, str]:
    """Render rows to (markdown table, CSV text).

    Timing columns are opt-in: wall clock differs between identical runs, and
    the default CSV is meant to be byte-reproducible.
    """
    columns = list(_CSV_COLUMNS) + (["wall_time_mean"] if include_timing else [])
    csv_lines = [",".join(columns)]
    md_lines = [
        "| " + " | ".join(columns) + " |",
        "|" + "|".join([" --- "] * len(columns)) + "|",
    ]
    for row in rows:
        values = _row_values(row, include_timing)
        csv_lines.append(",".join(values))
        md_lines.append("| " + " | ".join(v if v else "-" for v in values) + " |")
    return "\n".join(md_lines) + "\n", "\n".join(csv_lines) + "\n"


def write_report(rows, csv_path, md_path, include_timing: bool = False) -> None:
    md_text, csv_text = render_report(rows, include_timing=include_timing)
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(csv_text)
    with open(md_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(md_text)
