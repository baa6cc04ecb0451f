"""CSV data behind the figures (no plotting).

Figure keys and their columns:

``w2_vs_dim``        dim, filter, mean, stderr        (bimodal tables, metric W2)
``metric_vs_time``   filter, step, metric, mean, stderr  (all metrics, seeds pooled)
``quantile_bands``   filter, seed, step, state, q05, q50, q95  (stored ensembles)
``kde``              filter, dim, seed, x, density  (stored bimodal posteriors, 1-d marginals)
``rate``             n, mean, stderr, log_slope, r2  (rate study, metric map_l2)
"""

import csv
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde

from ..exceptions import ContractViolation
from .experiments import ResultTable, loglog_slope, parse_dim

FIGURES = ("w2_vs_dim", "metric_vs_time", "quantile_bands", "kde", "rate")


def _stats(values):
    v = np.asarray(values, dtype=float)
    se = v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else 0.0
    return float(v.mean()), float(se)


def _write(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _ensembles(run_dir):
    path = Path(run_dir) / "ensembles.csv"
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {int(t): data[data[:, 0] == t, 2:] for t in np.unique(data[:, 0])}


def emit_plotdata(table_path, figure, out=None, filters=None):
    """Write the CSV for ``figure`` next to the table (or into ``out``); returns its path."""
    if figure not in FIGURES:
        raise ContractViolation(f"unknown figure key {figure!r}; known: {FIGURES}")
    table_path = Path(table_path)
    root = table_path if table_path.is_dir() else table_path.parent
    table = ResultTable.read(table_path)
    if not table.rows:
        raise ContractViolation("result table is empty")
    names = sorted({r[1] for r in table.rows})
    if filters is not None:
        filters = list(filters)
        if not filters:
            raise ContractViolation("filter selection is empty")
        missing = set(filters) - set(names)
        if missing:
            raise ContractViolation(f"filters not in table: {sorted(missing)}")
        names = [n for n in names if n in filters]
    dest = Path(out) if out else root / "plotdata"
    target = dest / f"{figure}.csv"

    if figure == "w2_vs_dim":
        groups = {}
        for e, f, s, t, m, v in table.rows:
            if m == "W2" and f in names and parse_dim(e) is not None:
                groups.setdefault((parse_dim(e), f), []).append(v)
        if not groups:
            raise ContractViolation("table has no W2 rows tagged with a dimension")
        rows = [(d, f) + _stats(v) for (d, f), v in sorted(groups.items())]
        return _write(target, ("dim", "filter", "mean", "stderr"), rows)

    if figure == "metric_vs_time":
        groups = {}
        for e, f, s, t, m, v in table.rows:
            if f in names:
                groups.setdefault((f, t, m), []).append(v)
        rows = [(f, t, m) + _stats(v) for (f, t, m), v in sorted(groups.items())]
        return _write(target, ("filter", "step", "metric", "mean", "stderr"), rows)

    if figure == "quantile_bands":
        rows = []
        for f in names:
            for s in sorted({r[2] for r in table.rows if r[1] == f}):
                run_dir = root / "runs" / f"{f}_seed{s}"
                if not (run_dir / "ensembles.csv").is_file():
                    continue
                for t, ens in sorted(_ensembles(run_dir).items()):
                    q = np.quantile(ens, [0.05, 0.5, 0.95], axis=0)
                    rows.extend((f, s, t, k + 1, q[0, k], q[1, k], q[2, k]) for k in range(ens.shape[1]))
        if not rows:
            raise ContractViolation("no stored ensembles found for quantile bands")
        return _write(target, ("filter", "seed", "step", "state", "q05", "q50", "q95"), rows)

    if figure == "kde":
        rows = []
        for d in sorted({parse_dim(r[0]) for r in table.rows if parse_dim(r[0]) is not None}):
            for f in names:
                for s in sorted({r[2] for r in table.rows if r[1] == f}):
                    path = root / "runs" / f"{f}_n{d}_seed{s}" / "posterior.csv"
                    if not path.is_file():
                        continue
                    x = np.loadtxt(path, delimiter=",", ndmin=2)[:, 0]
                    grid = np.linspace(-3, 3, 201)
                    dens = gaussian_kde(x)(grid) if np.ptp(x) > 0 else np.zeros_like(grid)
                    rows.extend((f, d, s, g, p) for g, p in zip(grid, dens))
        if not rows:
            raise ContractViolation("no stored bimodal posteriors found")
        return _write(target, ("filter", "dim", "seed", "x", "density"), rows)

    groups = {}
    for e, f, s, t, m, v in table.rows:
        if m == "map_l2" and f in names:
            groups.setdefault(t, []).append(v)
    if len(groups) < 2:
        raise ContractViolation("rate figure needs at least two sample sizes")
    sizes = sorted(groups)
    means = [np.mean(groups[n]) for n in sizes]
    slope, r2 = loglog_slope(sizes, means)
    rows = [(n,) + _stats(groups[n]) + (slope, r2) for n in sizes]
    return _write(target, ("n", "mean", "stderr", "log_slope", "r2"), rows)
