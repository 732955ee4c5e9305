"""Error metrics in discrete l2, L2, and H1 norms, and their aggregation.

For an error vector e, the three absolute metrics are ||e||_2,
sqrt(e' M e), and sqrt(e' A e) with M and A the P1 mass and stiffness
matrices; relative versions divide by the target's matching norm and are
suppressed (flagged, stored as NaN) when that norm falls below 1e-8, since
near-zero targets make relative errors meaningless.

Aggregation mirrors the reporting protocol: per-(seed, T) means over the test
set, then cross-seed statistics (min, max, quartiles with linear
interpolation, median, mean) per training size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import SparseMatrix

METRIC_NAMES = ("e_l2", "e_L2", "e_H1", "re_l2", "re_L2", "re_H1")
SUPPRESS_THRESHOLD = 1e-8


class MetricsError(ValueError):
    pass


def _norm(quad_form, vec, label):
    q = quad_form(vec)
    if q < -1e-12 * max(1.0, float(vec @ vec)):
        raise MetricsError(f"{label} quadratic form is negative ({q}); "
                           "matrix is not positive semidefinite")
    return np.sqrt(max(q, 0.0))


def compute_errors(target, prediction, mass: SparseMatrix,
                   stiffness: SparseMatrix) -> np.ndarray:
    """Six-metric row(s) for one sample: absolute and relative l2/L2/H1.

    Inputs of shape (N,) give one row; (N, m) gives one row per field.
    Suppressed relative entries are NaN.
    """
    target = np.asarray(target, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if target.shape != prediction.shape:
        raise MetricsError(f"shape mismatch: {target.shape} vs {prediction.shape}")
    if target.ndim == 1:
        target, prediction = target[:, None], prediction[:, None]
    if target.shape[0] != mass.shape[0]:
        raise MetricsError("vectors do not match the matrices' node count")

    rows = np.empty((target.shape[1], 6))
    for f in range(target.shape[1]):
        e = target[:, f] - prediction[:, f]
        u = target[:, f]
        abs_vals = (float(np.linalg.norm(e)),
                    _norm(mass.quadratic_form, e, "mass"),
                    _norm(stiffness.quadratic_form, e, "stiffness"))
        ref_vals = (float(np.linalg.norm(u)),
                    _norm(mass.quadratic_form, u, "mass"),
                    _norm(stiffness.quadratic_form, u, "stiffness"))
        rel_vals = tuple(a / r if r >= SUPPRESS_THRESHOLD else np.nan
                         for a, r in zip(abs_vals, ref_vals))
        rows[f] = abs_vals + rel_vals
    return rows if rows.shape[0] > 1 else rows[0]


@dataclass
class ErrorReport:
    """Per-sample metrics plus the derived means and cross-seed statistics."""

    per_sample: dict                      # (seed, T) -> (n_samples, 6) array
    cell_means: dict = field(default_factory=dict)      # (seed, T) -> (6,)
    suppressed: dict = field(default_factory=dict)      # (seed, T) -> (6,) int
    size_stats: dict = field(default_factory=dict)      # T -> metric -> stats


def aggregate(per_sample: dict) -> ErrorReport:
    """Reduce a {(seed, T): (n, 6) array} run matrix to means and statistics.

    Suppressed (NaN) entries are excluded from the relative means, with
    counts reported so the exclusion is auditable.
    """
    if not per_sample:
        raise MetricsError("empty run matrix")
    report = ErrorReport(per_sample={k: np.asarray(v, dtype=np.float64)
                                     for k, v in per_sample.items()})
    for key, arr in report.per_sample.items():
        if arr.ndim != 2 or arr.shape[1] != 6 or arr.shape[0] == 0:
            raise MetricsError(f"cell {key}: expected a non-empty (n, 6) array")
        with np.errstate(invalid="ignore"):
            means = np.nanmean(arr, axis=0)
        report.cell_means[key] = means
        report.suppressed[key] = np.isnan(arr).sum(axis=0)

    sizes = sorted({t for _, t in report.cell_means})
    for t in sizes:
        across = np.array([m for (s, tt), m in sorted(report.cell_means.items())
                           if tt == t])
        stats = {}
        for j, name in enumerate(METRIC_NAMES):
            col = across[:, j]
            col = col[~np.isnan(col)]
            if col.size == 0:
                stats[name] = None
                continue
            q1, med, q3 = np.percentile(col, [25, 50, 75])
            stats[name] = {"min": float(col.min()), "q1": float(q1),
                           "median": float(med), "q3": float(q3),
                           "max": float(col.max()), "mean": float(col.mean())}
        report.size_stats[t] = stats
    return report


def rank_cases(values) -> tuple:
    """Indices of the best, sorted-midpoint, and worst samples.

    NaN (suppressed) entries are excluded; raises when nothing remains.
    """
    values = np.asarray(values, dtype=np.float64)
    valid = np.flatnonzero(~np.isnan(values))
    if valid.size == 0:
        raise MetricsError("all entries suppressed, nothing to rank")
    order = valid[np.argsort(values[valid], kind="stable")]
    return int(order[0]), int(order[(order.size - 1) // 2]), int(order[-1])


# ---------------------------------------------------------------------------
# report emission


def write_report_csv(rows, path):
    """Rows: (model, seed, T, metric, value, suppressed_count)."""
    with open(path, "w") as f:
        f.write("model,seed,T,metric,value,suppressed_count\n")
        for model, seed, t, metric, value, supp in rows:
            f.write(f"{model},{seed},{t},{metric},{value!r},{supp}\n")


def report_rows(model_name: str, report: ErrorReport):
    rows = []
    for (seed, t), means in sorted(report.cell_means.items()):
        supp = report.suppressed[(seed, t)]
        for j, metric in enumerate(METRIC_NAMES):
            rows.append((model_name, seed, t, metric, float(means[j]), int(supp[j])))
    return rows


def plot_error_bands(reports: dict, metric: str, path):
    """One SVG per metric: mean (solid) and median (dotted) lines per model,
    with min-max and interquartile bands across seeds, versus training size."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    j = METRIC_NAMES.index(metric)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    colors = {"ginn": "tab:blue", "fcnn": "tab:orange"}
    for name, report in sorted(reports.items()):
        sizes = sorted(report.size_stats)
        stats = [report.size_stats[t][METRIC_NAMES[j]] for t in sizes]
        if any(s is None for s in stats):
            continue
        color = colors.get(name, None)
        lo = [s["min"] for s in stats]
        hi = [s["max"] for s in stats]
        q1 = [s["q1"] for s in stats]
        q3 = [s["q3"] for s in stats]
        ax.fill_between(sizes, lo, hi, alpha=0.15, color=color)
        ax.fill_between(sizes, q1, q3, alpha=0.35, color=color)
        ax.plot(sizes, [s["mean"] for s in stats], "-", label=f"{name} mean",
                color=color)
        ax.plot(sizes, [s["median"] for s in stats], ":", label=f"{name} median",
                color=color)
    ax.set_xlabel("training set size")
    ax.set_ylabel(metric)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_case_csv(path, nodes, target, prediction):
    """Per-node dump of one test case: target, prediction, absolute error."""
    target = np.asarray(target).reshape(len(nodes), -1)
    prediction = np.asarray(prediction).reshape(len(nodes), -1)
    m = target.shape[1]
    with open(path, "w") as f:
        cols = ",".join(f"target_{j},prediction_{j},abs_diff_{j}" for j in range(m))
        f.write(f"node,x,y,{cols}\n")
        for i, (x, y) in enumerate(nodes):
            vals = ",".join(f"{target[i, j]!r},{prediction[i, j]!r},"
                            f"{abs(target[i, j] - prediction[i, j])!r}"
                            for j in range(m))
            f.write(f"{i},{x!r},{y!r},{vals}\n")
